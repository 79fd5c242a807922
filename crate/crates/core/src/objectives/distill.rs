//! KL distillation of teacher similarity distributions into the student.

use ndarray::{Array2, ArrayView2, Zip};

use super::{LossResult, STUDENT, VIEW_Z, VIEW_ZPRIME};
use crate::error::{Error, Result};
use crate::tensor::{
    check_temperature, cosine_forward, kl_rows_raw, softmax_rows_raw, EmbeddingBatch,
    RowDistribution, KL_EPSILON,
};

/// Student-side cross-modal distributions for a batch of aligned pairs.
///
/// Returns `(p_t2v, p_v2t)`: row `i` of `p_t2v` spreads image `i` over the
/// batch texts, row `i` of `p_v2t` spreads text `i` over the batch images.
pub fn student_cross_modal_distributions(
    student: &EmbeddingBatch,
    image_teacher: &EmbeddingBatch,
    tau_dist: f64,
) -> Result<(RowDistribution, RowDistribution)> {
    check_temperature("tau_dist", tau_dist)?;
    let cache = cosine_forward(student.view(), image_teacher.view())?;
    let p_v2t = softmax_rows_raw(cache.sim.view(), tau_dist);
    let p_t2v = softmax_rows_raw(cache.sim.t(), tau_dist);
    Ok((RowDistribution::new(p_t2v)?, RowDistribution::new(p_v2t)?))
}

/// Cross-modal alignment: half the summed KL from the text-text target to the
/// image-to-text distribution and from the image-image target to the
/// separately normalized text-to-image distribution.
pub fn loss_cross_modal_kl(
    student: &EmbeddingBatch,
    image_teacher: &EmbeddingBatch,
    q_t2t: &RowDistribution,
    q_v2v: &RowDistribution,
    tau_dist: f64,
) -> Result<LossResult> {
    check_temperature("tau_dist", tau_dist)?;
    let n = student.n();
    if image_teacher.n() != n {
        return Err(Error::shape("loss_cross_modal_kl", n, image_teacher.n()));
    }
    check_square("q_t2t", q_t2t, n)?;
    check_square("q_v2v", q_v2v, n)?;

    let cache = cosine_forward(student.view(), image_teacher.view())?;
    // rows = texts, softmax over images
    let p_v2t = softmax_rows_raw(cache.sim.view(), tau_dist);
    // rows = images, softmax over texts
    let p_t2v = softmax_rows_raw(cache.sim.t(), tau_dist);

    let kl_t = kl_rows_raw(q_t2t.view(), p_t2v.view())?;
    let kl_v = kl_rows_raw(q_v2v.view(), p_v2t.view())?;
    let value = 0.5 * (kl_t.sum() + kl_v.sum());

    let g_v2t = kl_softmax_grad(q_v2v.view(), p_v2t.view());
    let g_t2v = kl_softmax_grad(q_t2t.view(), p_t2v.view());
    let grad_sim = (g_v2t + g_t2v.t()) * (0.5 / tau_dist);
    let grad = cache.backward_left(grad_sim.view());
    Ok(LossResult::new(value).with_grad(STUDENT, grad))
}

/// Intra-modal alignment: summed KL from the teacher text distribution to the
/// student's dropout-view distribution.
pub fn loss_intra_modal_kl(
    view_z: &EmbeddingBatch,
    view_zprime: &EmbeddingBatch,
    q_t2t: &RowDistribution,
    tau_dist: f64,
) -> Result<LossResult> {
    check_temperature("tau_dist", tau_dist)?;
    if view_z.n() != view_zprime.n() || view_z.d() != view_zprime.d() {
        return Err(Error::shape(
            "loss_intra_modal_kl",
            format!("{}x{}", view_z.n(), view_z.d()),
            format!("{}x{}", view_zprime.n(), view_zprime.d()),
        ));
    }
    check_square("q_t2t", q_t2t, view_z.n())?;

    let cache = cosine_forward(view_z.view(), view_zprime.view())?;
    let p = softmax_rows_raw(cache.sim.view(), tau_dist);
    let value = kl_rows_raw(q_t2t.view(), p.view())?.sum();
    let grad_sim = kl_softmax_grad(q_t2t.view(), p.view()) / tau_dist;
    Ok(LossResult::new(value)
        .with_grad(VIEW_Z, cache.backward_left(grad_sim.view()))
        .with_grad(VIEW_ZPRIME, cache.backward_right(grad_sim.view())))
}

fn check_square(name: &'static str, q: &RowDistribution, n: usize) -> Result<()> {
    if q.dim() != (n, n) {
        return Err(Error::shape(name, format!("({n}, {n})"), format!("{:?}", q.dim())));
    }
    Ok(())
}

// d/dz_k of sum_j q_j (ln q_j - ln max(p_j, eps)) with p = softmax(z).
// Entries where the floor is active contribute a constant and drop out.
fn kl_softmax_grad(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut grad = Array2::zeros(p.dim());
    Zip::from(grad.rows_mut())
        .and(q.rows())
        .and(p.rows())
        .for_each(|mut g, q_row, p_row| {
            let mut live_mass = 0.0;
            for (&qv, &pv) in q_row.iter().zip(p_row.iter()) {
                if pv >= KL_EPSILON {
                    live_mass += qv;
                }
            }
            for ((gk, &qv), &pv) in g.iter_mut().zip(q_row.iter()).zip(p_row.iter()) {
                let direct = if pv >= KL_EPSILON { qv } else { 0.0 };
                *gk = pv * live_mass - direct;
            }
        });
    grad
}
