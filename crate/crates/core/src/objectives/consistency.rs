use ndarray::Array2;

use super::{LossResult, SHARED_TXT};
use crate::error::{Error, Result};
use crate::tensor::{cosine_forward, EmbeddingBatch};

/// Binary match label for an image-text pair: 1 aligned, 0 mismatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairLabel(u8);

impl PairLabel {
    pub const ALIGNED: PairLabel = PairLabel(1);
    pub const MISMATCHED: PairLabel = PairLabel(0);

    pub fn new(y: u8) -> Result<Self> {
        match y {
            0 | 1 => Ok(PairLabel(y)),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn is_aligned(self) -> bool {
        self.0 == 1
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Cosine embedding loss over image-text pairs: `1 - cos` for aligned pairs,
/// `max(0, cos - margin)` for mismatched ones. Only the text side is trained.
pub fn loss_consistency(
    shared_img: &EmbeddingBatch,
    shared_txt: &EmbeddingBatch,
    labels: &[PairLabel],
    margin_m: f64,
) -> Result<LossResult> {
    let n = shared_txt.n();
    if shared_img.n() != n || shared_img.d() != shared_txt.d() {
        return Err(Error::shape(
            "loss_consistency",
            format!("{}x{}", n, shared_txt.d()),
            format!("{}x{}", shared_img.n(), shared_img.d()),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape("loss_consistency labels", n, labels.len()));
    }
    if !(0.0..1.0).contains(&margin_m) {
        return Err(Error::param("margin_m", format!("must lie in [0, 1), got {margin_m}")));
    }

    // Row-paired cosines: the diagonal of a full similarity matrix would
    // cost n^2, so pair rows directly through a one-row cache each.
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, shared_txt.d()));
    for (i, label) in labels.iter().enumerate() {
        let txt = shared_txt.view().slice_move(ndarray::s![i..i + 1, ..]);
        let img = shared_img.view().slice_move(ndarray::s![i..i + 1, ..]);
        let cache = cosine_forward(txt, img)?;
        let cos = cache.sim[[0, 0]];
        let dcos = if label.is_aligned() {
            value += 1.0 - cos;
            -1.0
        } else if cos > margin_m {
            value += cos - margin_m;
            1.0
        } else {
            // hinge inactive; subgradient at the kink is 0
            0.0
        };
        if dcos != 0.0 {
            let g = cache.backward_left(ndarray::arr2(&[[dcos]]).view());
            grad.row_mut(i).assign(&g.row(0));
        }
    }
    Ok(LossResult::new(value).with_grad(SHARED_TXT, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows).unwrap()
    }

    // unit vectors with a prescribed cosine
    fn pair_with_cos(c: f64) -> (EmbeddingBatch, EmbeddingBatch) {
        (
            batch(&[vec![1.0, 0.0]]),
            batch(&[vec![c, (1.0 - c * c).sqrt()]]),
        )
    }

    #[test]
    fn aligned_identical_is_zero() {
        let a = batch(&[vec![0.2, 0.9, -0.4]]);
        let r = loss_consistency(&a, &a, &[PairLabel::ALIGNED], 0.2).unwrap();
        assert_abs_diff_eq!(r.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_below_margin_is_zero() {
        let (img, txt) = pair_with_cos(0.1);
        let r = loss_consistency(&img, &txt, &[PairLabel::MISMATCHED], 0.2).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad(SHARED_TXT).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mismatched_above_margin() {
        let (img, txt) = pair_with_cos(0.9);
        let r = loss_consistency(&img, &txt, &[PairLabel::MISMATCHED], 0.2).unwrap();
        assert_abs_diff_eq!(r.value, 0.9 - 0.2, epsilon = 1e-12);
    }

    #[test]
    fn label_outside_binary_is_rejected() {
        assert!(matches!(PairLabel::new(2), Err(Error::InvalidLabel(2))));
        assert!(PairLabel::new(1).unwrap().is_aligned());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (img, txt) = pair_with_cos(0.5);
        assert!(loss_consistency(&img, &txt, &[], 0.2).is_err());
    }
}
