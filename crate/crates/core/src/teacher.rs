//! Teacher-side targets: the weighted text-teacher ensemble, soft target
//! distributions, and pseudo-ranking labels. Nothing here produces gradients;
//! every output is a constant from the student's point of view.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim_matrix, softmax_rows, EmbeddingBatch, RowDistribution};

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Frozen text teachers with their aggregation weights.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    teachers: Vec<EmbeddingBatch>,
    weights: Vec<f64>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<EmbeddingBatch>, weights: Vec<f64>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or(Error::Empty("teacher ensemble has no teachers"))?;
        let shape = (first.n(), first.d());
        for t in &teachers[1..] {
            if (t.n(), t.d()) != shape {
                return Err(Error::shape(
                    "TeacherEnsemble",
                    format!("{shape:?}"),
                    format!("{:?}", (t.n(), t.d())),
                ));
            }
        }
        if weights.len() != teachers.len() {
            return Err(Error::shape(
                "TeacherEnsemble weights",
                teachers.len(),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("weights", "must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::param("weights", format!("sum to {sum}, expected 1")));
        }
        Ok(Self { teachers, weights })
    }

    /// Equal weight for every teacher.
    pub fn uniform(teachers: Vec<EmbeddingBatch>) -> Result<Self> {
        let k = teachers.len().max(1);
        let weights = vec![1.0 / k as f64; teachers.len()];
        Self::new(teachers, weights)
    }

    pub fn teachers(&self) -> &[EmbeddingBatch] {
        &self.teachers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Row `i` of the output is `normalize(sum_k w_k * t_k[i])`.
pub fn combine_teachers(ensemble: &TeacherEnsemble) -> Result<EmbeddingBatch> {
    let first = &ensemble.teachers[0];
    let mut acc = Array2::<f64>::zeros((first.n(), first.d()));
    for (t, &w) in ensemble.teachers.iter().zip(&ensemble.weights) {
        acc.scaled_add(w, &t.view());
    }
    EmbeddingBatch::new(acc)?.normalized()
}

/// Softmax over each row of the teacher's self-similarity matrix. Serves as
/// both the text-text and the image-image target.
pub fn target_distribution(teacher: &EmbeddingBatch, tau_dist: f64) -> Result<RowDistribution> {
    let sim = cosine_sim_matrix(teacher, teacher)?;
    softmax_rows(sim.view(), tau_dist)
}

/// Per-anchor candidate orderings used as listwise ranking targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingLabels {
    perms: Vec<Vec<usize>>,
    list_len: usize,
}

impl RankingLabels {
    /// Checks that every list has the same length and holds distinct indices
    /// below `n_candidates`, none equal to its own anchor.
    pub fn new(perms: Vec<Vec<usize>>, n_candidates: usize) -> Result<Self> {
        let list_len = perms.first().map_or(0, Vec::len);
        if list_len == 0 {
            return Err(Error::Empty("ranking list"));
        }
        for (anchor, perm) in perms.iter().enumerate() {
            if perm.len() != list_len {
                return Err(Error::InvalidPermutation {
                    anchor,
                    reason: format!("length {} differs from {list_len}", perm.len()),
                });
            }
            if perm.contains(&anchor) {
                return Err(Error::InvalidPermutation {
                    anchor,
                    reason: "list contains the anchor itself".into(),
                });
            }
        }
        validate_lists(&perms, n_candidates)?;
        Ok(Self { perms, list_len })
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }
}

/// Each list must be a bijection onto a set of distinct in-range columns.
pub(crate) fn validate_lists(perms: &[Vec<usize>], n_candidates: usize) -> Result<()> {
    let mut seen = vec![usize::MAX; n_candidates];
    for (anchor, perm) in perms.iter().enumerate() {
        if perm.is_empty() {
            return Err(Error::Empty("ranking list"));
        }
        for &c in perm {
            if c >= n_candidates {
                return Err(Error::InvalidPermutation {
                    anchor,
                    reason: format!("index {c} out of range for {n_candidates} candidates"),
                });
            }
            if seen[c] == anchor {
                return Err(Error::InvalidPermutation {
                    anchor,
                    reason: format!("index {c} repeated"),
                });
            }
            seen[c] = anchor;
        }
    }
    Ok(())
}

/// Sorts every other in-batch item by descending teacher cosine similarity.
pub fn pseudo_rank_labels(teacher: &EmbeddingBatch) -> Result<RankingLabels> {
    if teacher.n() < 2 {
        return Err(Error::param(
            "teacher",
            format!("ranking needs at least 2 rows, got {}", teacher.n()),
        ));
    }
    let sim = cosine_sim_matrix(teacher, teacher)?;
    Ok(rank_by_similarity(sim.view()))
}

/// Orders candidates `j != i` of each row by descending score, breaking ties
/// by ascending index.
pub fn rank_by_similarity(sim: ArrayView2<'_, f64>) -> RankingLabels {
    let n = sim.nrows();
    let perms = (0..n)
        .map(|i| {
            let row = sim.row(i);
            let mut cands: Vec<usize> = (0..sim.ncols()).filter(|&j| j != i).collect();
            cands.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            cands
        })
        .collect::<Vec<_>>();
    let list_len = perms.first().map_or(0, Vec::len);
    RankingLabels { perms, list_len }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn combine_degenerate_weight_copies_first_teacher() {
        let t1 = batch(&[vec![3.0, 4.0], vec![1.0, 0.0]]);
        let t2 = batch(&[vec![-1.0, 2.0], vec![0.0, 5.0]]);
        let out = combine_teachers(&TeacherEnsemble::new(vec![t1.clone(), t2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let expected = t1.normalized().unwrap();
        for (a, b) in out.view().iter().zip(expected.view().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn combine_identical_teachers_is_idempotent() {
        let t = batch(&[vec![3.0, 4.0], vec![2.0, -1.0]]);
        let out = combine_teachers(&TeacherEnsemble::uniform(vec![t.clone(), t.clone()]).unwrap())
            .unwrap();
        let expected = t.normalized().unwrap();
        for (a, b) in out.view().iter().zip(expected.view().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn combine_orthogonal_teachers() {
        let out = combine_teachers(
            &TeacherEnsemble::new(
                vec![batch(&[vec![1.0, 0.0]]), batch(&[vec![0.0, 1.0]])],
                vec![0.5, 0.5],
            )
            .unwrap(),
        )
        .unwrap();
        let oracle = 0.5 / (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
        assert_abs_diff_eq!(out.view()[[0, 0]], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(out.view()[[0, 1]], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
    }

    #[test]
    fn ensemble_validation() {
        let t = batch(&[vec![1.0, 0.0]]);
        assert!(TeacherEnsemble::new(vec![t.clone(), t.clone()], vec![0.5, 0.6]).is_err());
        assert!(TeacherEnsemble::new(vec![], vec![]).is_err());
        let wide = batch(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            TeacherEnsemble::new(vec![t, wide], vec![0.5, 0.5]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn target_distribution_examples() {
        let q = target_distribution(&batch(&[vec![0.3, -2.0]]), 1.0).unwrap();
        assert_eq!(q.view(), array![[1.0]]);
        let q = target_distribution(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 1.0).unwrap();
        let e = std::f64::consts::E;
        for i in 0..2 {
            assert_abs_diff_eq!(q.view()[[i, i]], e / (e + 1.0), epsilon = 1e-15);
            assert_abs_diff_eq!(q.view()[[i, 1 - i]], 1.0 / (e + 1.0), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(q.view()[[0, 0]], 0.731059, epsilon = 1e-6);
    }

    #[test]
    fn ranking_sort_oracle() {
        let sim = array![
            [1.0, 0.9, 0.1, 0.5],
            [0.9, 1.0, 0.2, 0.3],
            [0.1, 0.2, 1.0, 0.4],
            [0.5, 0.3, 0.4, 1.0],
        ];
        let labels = rank_by_similarity(sim.view());
        assert_eq!(labels.perms()[0], vec![1, 3, 2]);
        assert_eq!(labels.list_len(), 3);
    }

    #[test]
    fn ranking_ties_follow_index_order() {
        let sim = Array2::from_elem((4, 4), 0.3);
        let labels = rank_by_similarity(sim.view());
        assert_eq!(labels.perms()[0], vec![1, 2, 3]);
        assert_eq!(labels.perms()[2], vec![0, 1, 3]);
    }

    #[test]
    fn reversing_similarities_reverses_ranking() {
        let sim = array![[1.0, 0.9, 0.1, 0.5]];
        let rev = array![[1.0, -0.9, -0.1, -0.5]];
        let mut fwd = rank_by_similarity(sim.view()).perms()[0].clone();
        fwd.reverse();
        assert_eq!(rank_by_similarity(rev.view()).perms()[0], fwd);
    }

    #[test]
    fn ranking_needs_two_rows() {
        assert!(pseudo_rank_labels(&batch(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn ranking_label_validation() {
        assert!(RankingLabels::new(vec![vec![1, 1]], 3).is_err());
        assert!(RankingLabels::new(vec![vec![0, 1]], 3).is_err());
        assert!(RankingLabels::new(vec![vec![1, 5]], 3).is_err());
        assert!(RankingLabels::new(vec![vec![1, 2], vec![0, 2]], 3).is_ok());
    }
}
