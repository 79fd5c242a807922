//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`LossResult`]: the scalar value (a sum over the
//! batch) plus gradients keyed by the name of each student-side input.
//! Teacher-side inputs never appear in the gradient map.

mod combine;
mod consistency;
mod contrastive;
mod distill;
mod ranking;

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::check_temperature;

pub use combine::{
    loss_cml, loss_iml, loss_total, multimodal_objective, text_objective, Decomposition,
    MultimodalTargets, StudentViews, SHARED_Z, TEXT_Z, TEXT_ZPRIME,
};
pub use consistency::{loss_consistency, PairLabel};
pub use contrastive::{loss_multimodal_infonce, loss_text_infonce};
pub use distill::{loss_cross_modal_kl, loss_intra_modal_kl, student_cross_modal_distributions};
pub use ranking::{loss_listmle, loss_rank};

/// Gradient key for the first dropout view.
pub const VIEW_Z: &str = "view_z";
/// Gradient key for the second dropout view.
pub const VIEW_ZPRIME: &str = "view_zprime";
/// Gradient key for the student embedding in cross-modal losses.
pub const STUDENT: &str = "student";
/// Gradient key for the student side of consistency pairs.
pub const SHARED_TXT: &str = "shared_txt";
/// Gradient key for raw ranking scores.
pub const SCORES: &str = "scores";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::param("reduction", format!("unknown value `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// Contrastive and ranking temperature.
    pub tau: f64,
    /// Temperature of the similarity distributions used by the KL terms.
    pub tau_dist: f64,
    pub lambda_w: f64,
    pub mu_w: f64,
    /// Margin for mismatched pairs in the consistency loss.
    pub margin_m: f64,
    pub reduction: Reduction,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tau_dist: 1.0,
            lambda_w: 0.1,
            mu_w: 0.2,
            margin_m: 0.2,
            reduction: Reduction::Sum,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        check_temperature("tau", self.tau)?;
        check_temperature("tau_dist", self.tau_dist)?;
        if !(0.0..1.0).contains(&self.margin_m) {
            return Err(Error::param(
                "margin_m",
                format!("must lie in [0, 1), got {}", self.margin_m),
            ));
        }
        if !self.lambda_w.is_finite() || !self.mu_w.is_finite() {
            return Err(Error::param("lambda_w/mu_w", "must be finite"));
        }
        Ok(())
    }
}

/// A scalar objective and its gradients with respect to named student inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<String, Array2<f64>>,
}

impl LossResult {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, name: &str, grad: Array2<f64>) -> Self {
        self.grads.insert(name.to_owned(), grad);
        self
    }

    pub fn grad(&self, name: &str) -> Option<&Array2<f64>> {
        self.grads.get(name)
    }

    /// Moves the gradient stored under `from` to `to`, accumulating if `to`
    /// already exists.
    pub fn rename(mut self, from: &str, to: &str) -> Self {
        if let Some(g) = self.grads.remove(from) {
            self.accumulate(to, 1.0, &g);
        }
        self
    }

    pub fn scaled(mut self, w: f64) -> Self {
        self.value *= w;
        for g in self.grads.values_mut() {
            *g *= w;
        }
        self
    }

    /// `self + w * other`, summing gradients per input name.
    pub fn add_weighted(mut self, other: &LossResult, w: f64) -> Self {
        self.value += w * other.value;
        for (name, g) in &other.grads {
            self.accumulate(name, w, g);
        }
        self
    }

    fn accumulate(&mut self, name: &str, w: f64, g: &Array2<f64>) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.scaled_add(w, g),
            None => {
                self.grads.insert(name.to_owned(), g * w);
            }
        }
    }

    /// Fails if the value or any gradient entry is not finite.
    pub fn check_finite(&self, component: &str) -> Result<()> {
        let finite = self.value.is_finite()
            && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                component: component.to_owned(),
            })
        }
    }
}
