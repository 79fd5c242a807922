//! Direct-summation reference implementations over plain nested vectors.
//! Each follows the textbook definition term by term: no log-sum-exp, no
//! shared caches, no gradient code.

#![allow(dead_code)]

use dual_align::tensor::EmbeddingBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(b: &EmbeddingBatch) -> Mat {
    b.view().rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn batch(m: &Mat) -> EmbeddingBatch {
    EmbeddingBatch::from_rows(m).unwrap()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi).ln())
        .sum()
}

/// `sum_i -ln( e^{cos(a_i,b_i)/tau} / sum_j e^{cos(a_i,b_j)/tau} )`, each
/// row written as `ln(1 + sum_{j != i} e^{l_j} / e^{l_i})` so the reference
/// stays accurate when the positive dominates.
pub fn infonce(a: &Mat, b: &Mat, tau: f64) -> f64 {
    let n = a.len();
    (0..n)
        .map(|i| {
            let pos = (cos(&a[i], &b[i]) / tau).exp();
            let others: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cos(&a[i], &b[j]) / tau).exp())
                .sum();
            (others / pos).ln_1p()
        })
        .sum()
}

pub fn consistency(img: &Mat, txt: &Mat, labels: &[u8], m: f64) -> f64 {
    img.iter()
        .zip(txt)
        .zip(labels)
        .map(|((v, t), &y)| {
            let c = cos(v, t);
            if y == 1 {
                1.0 - c
            } else {
                (c - m).max(0.0)
            }
        })
        .sum()
}

/// Row `i`: softmax over `j` of `cos(x_i, x_j) / tau`.
pub fn self_distribution(x: &Mat, tau: f64) -> Mat {
    x.iter()
        .map(|xi| softmax(&x.iter().map(|xj| cos(xi, xj) / tau).collect::<Vec<_>>()))
        .collect()
}

/// `0.5 * sum_i [KL(Qt_i || Pt2v_i) + KL(Qv_i || Pv2t_i)]` with
/// `Pt2v_ij ∝ exp(cos(s_j, v_i)/tau)` and `Pv2t_ij ∝ exp(cos(s_i, v_j)/tau)`.
pub fn cross_modal_kl(s: &Mat, v: &Mat, q_t: &Mat, q_v: &Mat, tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let t2v = softmax(&(0..n).map(|j| cos(&s[j], &v[i]) / tau).collect::<Vec<_>>());
        let v2t = softmax(&(0..n).map(|j| cos(&s[i], &v[j]) / tau).collect::<Vec<_>>());
        total += kl(&q_t[i], &t2v) + kl(&q_v[i], &v2t);
    }
    0.5 * total
}

/// `sum_i KL(Q_i || softmax_j(cos(z_i, z'_j)/tau))`
pub fn intra_modal_kl(z: &Mat, zp: &Mat, q: &Mat, tau: f64) -> f64 {
    z.iter()
        .zip(q)
        .map(|(zi, qi)| kl(qi, &softmax(&zp.iter().map(|zj| cos(zi, zj) / tau).collect::<Vec<_>>())))
        .sum()
}

/// `-sum_i ln prod_j e^{x_{pi(j)}} / sum_{k >= j} e^{x_{pi(k)}}`,
/// `x = scores / tau`.
pub fn listmle(scores: &Mat, perms: &[Vec<usize>], tau: f64) -> f64 {
    scores
        .iter()
        .zip(perms)
        .map(|(row, perm)| {
            let mut prob = 1.0;
            for j in 0..perm.len() {
                let num = (row[perm[j]] / tau).exp();
                let den: f64 = perm[j..].iter().map(|&c| (row[c] / tau).exp()).sum();
                prob *= num / den;
            }
            -prob.ln()
        })
        .sum()
}

pub fn cos_matrix(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|x| b.iter().map(|y| cos(x, y)).collect()).collect()
}

/// Candidates `j != i` sorted by descending teacher cosine, ties by index.
pub fn teacher_perms(t: &Mat) -> Vec<Vec<usize>> {
    let n = t.len();
    (0..n)
        .map(|i| {
            let mut c: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            c.sort_by(|&a, &b| cos(&t[i], &t[b]).partial_cmp(&cos(&t[i], &t[a])).unwrap().then(a.cmp(&b)));
            c
        })
        .collect()
}

pub fn normalize(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1).
pub fn random_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}
