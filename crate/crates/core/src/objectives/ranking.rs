//! Listwise ranking distillation (Plackett-Luce negative log-likelihood).

use ndarray::{Array2, ArrayView2};

use super::{LossResult, SCORES, VIEW_Z, VIEW_ZPRIME};
use crate::error::{Error, Result};
use crate::tensor::{check_temperature, cosine_forward, EmbeddingBatch};
use crate::teacher::validate_lists;

/// ListMLE over each row of `student_scores`, where `teacher_perms[i]` lists
/// the column indices of row `i` from best to worst according to the teacher.
///
/// Evaluated in log space with a running log-sum-exp from the tail of each
/// list. The gradient is with respect to the raw scores.
pub fn loss_listmle(
    student_scores: ArrayView2<'_, f64>,
    teacher_perms: &[Vec<usize>],
    tau: f64,
) -> Result<LossResult> {
    check_temperature("tau", tau)?;
    if teacher_perms.len() != student_scores.nrows() {
        return Err(Error::shape(
            "loss_listmle",
            format!("{} permutations", student_scores.nrows()),
            teacher_perms.len(),
        ));
    }
    validate_lists(teacher_perms, student_scores.ncols())?;

    let mut value = 0.0;
    let mut grad = Array2::zeros(student_scores.dim());
    let mut x = Vec::new();
    let mut suffix_lse = Vec::new();
    for (i, perm) in teacher_perms.iter().enumerate() {
        let m = perm.len();
        x.clear();
        x.extend(perm.iter().map(|&c| student_scores[[i, c]] / tau));

        suffix_lse.clear();
        suffix_lse.resize(m, 0.0);
        let mut acc = f64::NEG_INFINITY;
        for j in (0..m).rev() {
            acc = log_add_exp(acc, x[j]);
            suffix_lse[j] = acc;
        }
        value += (0..m).map(|j| suffix_lse[j] - x[j]).sum::<f64>();

        // dL/dx_k = -1 + sum_{j <= k} exp(x_k - lse_j)
        let mut prefix = f64::NEG_INFINITY;
        for k in 0..m {
            prefix = log_add_exp(prefix, -suffix_lse[k]);
            grad[[i, perm[k]]] = ((x[k] + prefix).exp() - 1.0) / tau;
        }
    }
    Ok(LossResult::new(value).with_grad(SCORES, grad))
}

/// ListMLE on the cosine similarities between two dropout views, chained back
/// to both views.
pub fn loss_rank(
    view_z: &EmbeddingBatch,
    view_zprime: &EmbeddingBatch,
    teacher_perms: &[Vec<usize>],
    tau: f64,
) -> Result<LossResult> {
    let cache = cosine_forward(view_z.view(), view_zprime.view())?;
    let inner = loss_listmle(cache.sim.view(), teacher_perms, tau)?;
    let g = &inner.grads[SCORES];
    Ok(LossResult::new(inner.value)
        .with_grad(VIEW_Z, cache.backward_left(g.view()))
        .with_grad(VIEW_ZPRIME, cache.backward_right(g.view())))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}
