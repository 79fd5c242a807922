//! Composite objectives and the full multimodal training objective.

use ndarray::{concatenate, s, Axis};

use super::{
    loss_consistency, loss_cross_modal_kl, loss_intra_modal_kl, loss_multimodal_infonce,
    loss_rank, loss_text_infonce, Hyperparams, LossResult, PairLabel, Reduction, SHARED_TXT,
    STUDENT, VIEW_Z, VIEW_ZPRIME,
};
use crate::error::{Error, Result};
use crate::tensor::{EmbeddingBatch, RowDistribution};
use crate::teacher::RankingLabels;

/// Gradient key: first dropout view through the text head.
pub const TEXT_Z: &str = "text_z";
/// Gradient key: second dropout view through the text head.
pub const TEXT_ZPRIME: &str = "text_zprime";
/// Gradient key: first dropout view through the shared-space head.
pub const SHARED_Z: &str = "shared_z";

/// Cross-modal learning term: consistency plus cross-modal KL.
pub fn loss_cml(consistency: &LossResult, cma: &LossResult) -> LossResult {
    consistency.clone().add_weighted(cma, 1.0)
}

/// Intra-modal learning term: ranking plus intra-modal KL.
pub fn loss_iml(rank: &LossResult, ima: &LossResult) -> LossResult {
    rank.clone().add_weighted(ima, 1.0)
}

/// `info + lambda * cml + mu * iml`, with gradients combined the same way.
pub fn loss_total(
    info: &LossResult,
    cml: &LossResult,
    iml: &LossResult,
    lambda_w: f64,
    mu_w: f64,
) -> LossResult {
    info.clone()
        .add_weighted(cml, lambda_w)
        .add_weighted(iml, mu_w)
}

/// Student embeddings for one batch of sentences.
#[derive(Debug, Clone)]
pub struct StudentViews {
    pub text_z: EmbeddingBatch,
    pub text_zprime: EmbeddingBatch,
    /// Shared-space projection of the first view; absent on pure-text steps.
    pub shared_z: Option<EmbeddingBatch>,
}

/// Frozen teacher-side inputs for one multimodal batch.
#[derive(Debug, Clone)]
pub struct MultimodalTargets {
    pub image_teacher: EmbeddingBatch,
    /// Image paired with text `i` in the mismatched consistency example.
    pub negative_images: EmbeddingBatch,
    pub q_t2t: RowDistribution,
    pub q_v2v: RowDistribution,
    pub ranking: RankingLabels,
}

/// Per-component loss values of one step. Components that do not apply to
/// the step kind are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Decomposition {
    pub text: Option<f64>,
    pub info: Option<f64>,
    pub cons: Option<f64>,
    pub cma: Option<f64>,
    pub cml: Option<f64>,
    pub rank: Option<f64>,
    pub ima: Option<f64>,
    pub iml: Option<f64>,
    pub total: f64,
}

impl Decomposition {
    pub const COLUMNS: [&'static str; 9] = [
        "l_text", "l_info", "l_cons", "l_cma", "l_cml", "l_rank", "l_ima", "l_iml", "l_total",
    ];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.text,
            self.info,
            self.cons,
            self.cma,
            self.cml,
            self.rank,
            self.ima,
            self.iml,
            Some(self.total),
        ]
    }

    fn scaled(mut self, w: f64) -> Self {
        for v in [
            &mut self.text,
            &mut self.info,
            &mut self.cons,
            &mut self.cma,
            &mut self.cml,
            &mut self.rank,
            &mut self.ima,
            &mut self.iml,
        ] {
            if let Some(x) = v.as_mut() {
                *x *= w;
            }
        }
        self.total *= w;
        self
    }
}

fn finite(r: LossResult, component: &str) -> Result<LossResult> {
    r.check_finite(component)?;
    Ok(r)
}

fn reduce(
    total: LossResult,
    parts: Decomposition,
    n: usize,
    reduction: Reduction,
) -> (LossResult, Decomposition) {
    match reduction {
        Reduction::Sum => (total, parts),
        Reduction::Mean => {
            let w = 1.0 / n as f64;
            (total.scaled(w), parts.scaled(w))
        }
    }
}

/// Pure-text objective: dropout-view InfoNCE only.
pub fn text_objective(
    text_z: &EmbeddingBatch,
    text_zprime: &EmbeddingBatch,
    hp: &Hyperparams,
) -> Result<(LossResult, Decomposition)> {
    let text = finite(loss_text_infonce(text_z, text_zprime, hp.tau)?, "l_text")?
        .rename(VIEW_Z, TEXT_Z)
        .rename(VIEW_ZPRIME, TEXT_ZPRIME);
    let parts = Decomposition {
        text: Some(text.value),
        total: text.value,
        ..Default::default()
    };
    Ok(reduce(text, parts, text_z.n(), hp.reduction))
}

/// Full multimodal objective over one batch of aligned pairs. Gradients are
/// keyed by [`TEXT_Z`], [`TEXT_ZPRIME`] and [`SHARED_Z`].
pub fn multimodal_objective(
    views: &StudentViews,
    targets: &MultimodalTargets,
    hp: &Hyperparams,
) -> Result<(LossResult, Decomposition)> {
    let shared_z = views
        .shared_z
        .as_ref()
        .ok_or_else(|| Error::param("views", "multimodal objective needs shared_z"))?;
    let n = shared_z.n();
    if targets.negative_images.n() != n || targets.image_teacher.n() != n {
        return Err(Error::shape(
            "multimodal_objective",
            n,
            format!(
                "{} images / {} negatives",
                targets.image_teacher.n(),
                targets.negative_images.n()
            ),
        ));
    }

    let info = finite(
        loss_multimodal_infonce(shared_z, &targets.image_teacher, hp.tau)?,
        "l_info",
    )?
    .rename(STUDENT, SHARED_Z);

    // Consistency pairs: (image i, text i) aligned, (negative i, text i) mismatched.
    let img = EmbeddingBatch::new(concatenate(
        Axis(0),
        &[targets.image_teacher.view(), targets.negative_images.view()],
    )
    .map_err(|e| Error::shape("consistency pairs", "matching widths", e))?)?;
    let txt = EmbeddingBatch::new(
        concatenate(Axis(0), &[shared_z.view(), shared_z.view()])
            .expect("same array stacked twice"),
    )?;
    let labels: Vec<PairLabel> = std::iter::repeat_n(PairLabel::ALIGNED, n)
        .chain(std::iter::repeat_n(PairLabel::MISMATCHED, n))
        .collect();
    let mut cons = finite(loss_consistency(&img, &txt, &labels, hp.margin_m)?, "l_cons")?;
    let stacked = cons.grads.remove(SHARED_TXT).expect("consistency grad");
    let folded = &stacked.slice(s![..n, ..]) + &stacked.slice(s![n.., ..]);
    let cons = cons.with_grad(SHARED_Z, folded);

    let cma = finite(
        loss_cross_modal_kl(
            shared_z,
            &targets.image_teacher,
            &targets.q_t2t,
            &targets.q_v2v,
            hp.tau_dist,
        )?,
        "l_cma",
    )?
    .rename(STUDENT, SHARED_Z);
    let cml = loss_cml(&cons, &cma);

    let rank = finite(
        loss_rank(
            &views.text_z,
            &views.text_zprime,
            targets.ranking.perms(),
            hp.tau,
        )?,
        "l_rank",
    )?
    .rename(VIEW_Z, TEXT_Z)
    .rename(VIEW_ZPRIME, TEXT_ZPRIME);
    let ima = finite(
        loss_intra_modal_kl(&views.text_z, &views.text_zprime, &targets.q_t2t, hp.tau_dist)?,
        "l_ima",
    )?
    .rename(VIEW_Z, TEXT_Z)
    .rename(VIEW_ZPRIME, TEXT_ZPRIME);
    let iml = loss_iml(&rank, &ima);

    let total = finite(loss_total(&info, &cml, &iml, hp.lambda_w, hp.mu_w), "l_total")?;
    let parts = Decomposition {
        text: None,
        info: Some(info.value),
        cons: Some(cons.value),
        cma: Some(cma.value),
        cml: Some(cml.value),
        rank: Some(rank.value),
        ima: Some(ima.value),
        iml: Some(iml.value),
        total: total.value,
    };
    Ok(reduce(total, parts, n, hp.reduction))
}
