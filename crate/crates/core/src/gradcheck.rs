//! Central finite-difference verification of every analytic loss gradient.
//!
//! The reported error for one loss and seed is normwise:
//! `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)`,
//! taken over every entry of every differentiated input. Entrywise ratios
//! are not used because entries whose true gradient is near zero make them
//! meaningless.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objectives::{
    loss_consistency, loss_cross_modal_kl, loss_intra_modal_kl, loss_multimodal_infonce, loss_rank,
    loss_text_infonce, multimodal_objective, Hyperparams, LossResult, MultimodalTargets, PairLabel,
    StudentViews, SHARED_TXT, SHARED_Z, STUDENT, TEXT_Z, TEXT_ZPRIME, VIEW_Z, VIEW_ZPRIME,
};
use crate::seed::rng_for;
use crate::teacher::{pseudo_rank_labels, target_distribution};
use crate::tensor::EmbeddingBatch;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    Text,
    Info,
    Cons,
    Cma,
    ListMle,
    Ima,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Text,
        LossKind::Info,
        LossKind::Cons,
        LossKind::Cma,
        LossKind::ListMle,
        LossKind::Ima,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Text => "text",
            LossKind::Info => "info",
            LossKind::Cons => "cons",
            LossKind::Cma => "cma",
            LossKind::ListMle => "listmle",
            LossKind::Ima => "ima",
            LossKind::Total => "total",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param("loss", format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub n: usize,
    pub d: usize,
    pub step: f64,
    pub hp: Hyperparams,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n: 8,
            d: 16,
            step: DEFAULT_STEP,
            hp: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub loss: LossKind,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

type Inputs = BTreeMap<&'static str, Array2<f64>>;

/// Fixed (non-differentiated) data for one check.
struct Fixture {
    image: EmbeddingBatch,
    negatives: EmbeddingBatch,
    text_teacher: EmbeddingBatch,
    labels: Vec<PairLabel>,
}

fn gaussian(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn batch(a: &Array2<f64>) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(a.clone())
}

fn evaluate(kind: LossKind, x: &Inputs, fx: &Fixture, hp: &Hyperparams) -> Result<LossResult> {
    let get = |k: &str| batch(&x[k]);
    let q_t2t = || target_distribution(&fx.text_teacher, hp.tau_dist);
    match kind {
        LossKind::Text => loss_text_infonce(&get(VIEW_Z)?, &get(VIEW_ZPRIME)?, hp.tau),
        LossKind::Info => loss_multimodal_infonce(&get(STUDENT)?, &fx.image, hp.tau),
        LossKind::Cons => loss_consistency(&fx.image, &get(SHARED_TXT)?, &fx.labels, hp.margin_m),
        LossKind::Cma => loss_cross_modal_kl(
            &get(STUDENT)?,
            &fx.image,
            &q_t2t()?,
            &target_distribution(&fx.image, hp.tau_dist)?,
            hp.tau_dist,
        ),
        LossKind::ListMle => {
            let ranking = pseudo_rank_labels(&fx.text_teacher)?;
            loss_rank(&get(VIEW_Z)?, &get(VIEW_ZPRIME)?, ranking.perms(), hp.tau)
        }
        LossKind::Ima => loss_intra_modal_kl(&get(VIEW_Z)?, &get(VIEW_ZPRIME)?, &q_t2t()?, hp.tau_dist),
        LossKind::Total => {
            let views = StudentViews {
                text_z: get(TEXT_Z)?,
                text_zprime: get(TEXT_ZPRIME)?,
                shared_z: Some(get(SHARED_Z)?),
            };
            let targets = MultimodalTargets {
                image_teacher: fx.image.clone(),
                negative_images: fx.negatives.clone(),
                q_t2t: q_t2t()?,
                q_v2v: target_distribution(&fx.image, hp.tau_dist)?,
                ranking: pseudo_rank_labels(&fx.text_teacher)?,
            };
            multimodal_objective(&views, &targets, hp).map(|(l, _)| l)
        }
    }
}

fn input_names(kind: LossKind) -> &'static [&'static str] {
    match kind {
        LossKind::Text | LossKind::ListMle | LossKind::Ima => &[VIEW_Z, VIEW_ZPRIME],
        LossKind::Info | LossKind::Cma => &[STUDENT],
        LossKind::Cons => &[SHARED_TXT],
        LossKind::Total => &[TEXT_Z, TEXT_ZPRIME, SHARED_Z],
    }
}

/// Compares analytic gradients of `kind` against central differences on
/// random inputs drawn from `seed`.
pub fn gradcheck(kind: LossKind, seed: u64, config: &GradcheckConfig) -> Result<GradcheckResult> {
    let GradcheckConfig { n, d, step, hp } = *config;
    if n < 2 || d == 0 {
        return Err(Error::param("n/d", "need n >= 2 and d >= 1"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param("step", "must be positive and finite"));
    }
    hp.validate()?;
    let mut rng = rng_for(seed, &format!("gradcheck/{kind}"));
    let fx = Fixture {
        image: EmbeddingBatch::new(gaussian(&mut rng, n, d))?.normalized()?,
        negatives: EmbeddingBatch::new(gaussian(&mut rng, n, d))?.normalized()?,
        text_teacher: EmbeddingBatch::new(gaussian(&mut rng, n, d))?.normalized()?,
        labels: (0..n)
            .map(|i| PairLabel::new((i % 2) as u8).expect("0 or 1"))
            .collect(),
    };
    let mut inputs: Inputs = input_names(kind)
        .iter()
        .map(|&name| (name, gaussian(&mut rng, n, d)))
        .collect();

    let analytic = evaluate(kind, &inputs, &fx, &hp)?;
    let (mut max_diff, mut scale, mut entries) = (0.0f64, 0.0f64, 0);
    for &name in input_names(kind) {
        let grad = analytic
            .grad(name)
            .ok_or_else(|| Error::param("gradcheck", format!("{kind} has no gradient for `{name}`")))?
            .clone();
        for idx in ndarray::indices((n, d)) {
            let orig = inputs[name][idx];
            inputs.get_mut(name).expect("present")[idx] = orig + step;
            let plus = evaluate(kind, &inputs, &fx, &hp)?.value;
            inputs.get_mut(name).expect("present")[idx] = orig - step;
            let minus = evaluate(kind, &inputs, &fx, &hp)?.value;
            inputs.get_mut(name).expect("present")[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_diff = max_diff.max((grad[idx] - numeric).abs());
            scale = scale.max(grad[idx].abs()).max(numeric.abs());
            entries += 1;
        }
    }
    Ok(GradcheckResult {
        loss: kind,
        seed,
        max_rel_error: max_diff / scale.max(1e-12),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_for_one_seed() {
        for kind in LossKind::ALL {
            let r = gradcheck(kind, 0, &GradcheckConfig::default()).unwrap();
            assert!(r.max_rel_error < DEFAULT_TOLERANCE, "{kind}: {}", r.max_rel_error);
            assert!(r.entries >= 128);
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("nope".parse::<LossKind>().is_err());
    }
}
