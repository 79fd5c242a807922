use ndarray::{Array2, ArrayView1};

use super::{LossResult, STUDENT, VIEW_Z, VIEW_ZPRIME};
use crate::error::{Error, Result};
use crate::tensor::{check_temperature, cosine_forward, log_sum_exp, EmbeddingBatch};

/// Unsupervised InfoNCE between two dropout views of the same sentences.
/// Row `i` of `view_zprime` is the positive for row `i` of `view_z`; every
/// other row is an in-batch negative.
pub fn loss_text_infonce(
    view_z: &EmbeddingBatch,
    view_zprime: &EmbeddingBatch,
    tau: f64,
) -> Result<LossResult> {
    let (value, grad_z, grad_zp) = infonce(view_z, view_zprime, tau, "loss_text_infonce")?;
    Ok(LossResult::new(value)
        .with_grad(VIEW_Z, grad_z)
        .with_grad(VIEW_ZPRIME, grad_zp))
}

/// InfoNCE between student sentence embeddings and frozen image embeddings
/// in the shared space. Only the student receives a gradient.
pub fn loss_multimodal_infonce(
    student: &EmbeddingBatch,
    image_teacher: &EmbeddingBatch,
    tau: f64,
) -> Result<LossResult> {
    let (value, grad, _) = infonce(student, image_teacher, tau, "loss_multimodal_infonce")?;
    Ok(LossResult::new(value).with_grad(STUDENT, grad))
}

fn infonce(
    anchors: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    tau: f64,
    context: &'static str,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_temperature("tau", tau)?;
    if anchors.n() != positives.n() || anchors.d() != positives.d() {
        return Err(Error::shape(
            context,
            format!("{}x{}", anchors.n(), anchors.d()),
            format!("{}x{}", positives.n(), positives.d()),
        ));
    }
    let cache = cosine_forward(anchors.view(), positives.view())?;
    let logits = cache.sim.mapv(|s| s / tau);

    let mut value = 0.0;
    // dL/dlogits = softmax(row) - onehot(i)
    let mut grad_logits = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row);
        value += neg_log_softmax(row, i);
        let mut g = grad_logits.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(row.iter()) {
            *gj = (l - lse).exp();
        }
        g[i] -= 1.0;
    }
    let grad_sim = grad_logits / tau;
    let grad_a = cache.backward_left(grad_sim.view());
    let grad_b = cache.backward_right(grad_sim.view());
    Ok((value, grad_a, grad_b))
}

/// `lse(row) - row[i]` without cancellation when `row[i]` dominates:
/// `(max - row[i]) + ln_1p(sum over non-argmax j of exp(row[j] - max))`.
fn neg_log_softmax(row: ArrayView1<'_, f64>, i: usize) -> f64 {
    let (argmax, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != argmax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - row[i]) + rest.ln_1p()
}
