//! Trainable student: a two-layer encoder with inverted dropout, a text
//! projection head and a shared-space projection head.
//!
//! ```text
//! x -> [W1, b1] -> tanh -> dropout -> [W2, b2] -> dropout -> encoder output
//!                                                     |-> [Wt, bt] -> text embedding
//!                                                     `-> [Ws, bs] -> shared embedding
//! ```
//!
//! Parameters are kept at float32 precision (stored in `f64` arrays) so that
//! checkpoints, which are float32 on disk, reload bit-exactly.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::EmbeddingBatch;

pub const LAYER_NAMES: [&str; 4] = ["encoder.0", "encoder.1", "text_head", "shared_head"];
const ENC0: usize = 0;
const ENC1: usize = 1;
const TEXT: usize = 2;
const SHARED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub shared_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            hidden: 768,
            text_dim: 768,
            shared_dim: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.text_dim == 0 || self.shared_dim == 0 {
            return Err(Error::param("model dims", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(
                "dropout",
                format!("must lie in [0, 1), got {}", self.dropout),
            ));
        }
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 4] {
        [
            (self.d_in, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.text_dim),
            (self.hidden, self.shared_dim),
        ]
    }
}

/// Affine map `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// One parameter-shaped set of tensors per layer, used for gradients and
/// optimizer state alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSet(pub Vec<Linear>);

impl LayerSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self(cfg.shapes().iter().map(|&(i, o)| Linear::zeros(i, o)).collect())
    }

    pub fn add_assign(&mut self, other: &LayerSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.0
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    config: ModelConfig,
    layers: LayerSet,
}

/// Which representation is used as the sentence embedding at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingLayer {
    Encoder,
    TextHead,
    SharedHead,
}

impl std::str::FromStr for EmbeddingLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "text_head" => Ok(Self::TextHead),
            "shared_head" => Ok(Self::SharedHead),
            other => Err(Error::param("eval_layer", format!("unknown layer `{other}`"))),
        }
    }
}

impl std::fmt::Display for EmbeddingLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Encoder => "encoder",
            Self::TextHead => "text_head",
            Self::SharedHead => "shared_head",
        })
    }
}

/// Outputs of one stochastic forward pass plus what backward needs.
pub struct ViewPass {
    pub encoder: Array2<f64>,
    pub text: Array2<f64>,
    pub shared: Option<Array2<f64>>,
    input: Array2<f64>,
    hidden_act: Array2<f64>,
    hidden_mask: Option<Array2<f64>>,
    hidden_dropped: Array2<f64>,
    encoder_mask: Option<Array2<f64>>,
}

impl StudentModel {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model/init");
        let layers = config
            .shapes()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let scale = (1.0 / fan_in as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        round_f32(scale * rng.sample::<f64, _>(StandardNormal))
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers: LayerSet(layers),
        })
    }

    pub fn from_layers(config: ModelConfig, layers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        if layers.len() != 4 {
            return Err(Error::shape("StudentModel layers", 4, layers.len()));
        }
        for ((l, &(i, o)), name) in layers.iter().zip(config.shapes().iter()).zip(LAYER_NAMES) {
            if l.weight.dim() != (i, o) || l.bias.len() != o {
                return Err(Error::shape(
                    "StudentModel layer",
                    format!("{name}: ({i}, {o})"),
                    format!("{:?} / {}", l.weight.dim(), l.bias.len()),
                ));
            }
        }
        Ok(Self {
            config,
            layers: LayerSet(layers),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers.0
    }

    pub fn num_params(&self) -> usize {
        self.layers.0.iter().map(Linear::num_params).sum()
    }

    fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.config.d_in {
            return Err(Error::shape(
                "StudentModel input",
                format!("{} features", self.config.d_in),
                format!("{} features", inputs.ncols()),
            ));
        }
        Ok(())
    }

    /// One forward pass. `mask_rng = None` disables dropout.
    pub fn forward(
        &self,
        inputs: ArrayView2<'_, f64>,
        with_shared: bool,
        mask_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ViewPass> {
        self.check_input(inputs)?;
        let p = self.config.dropout;
        let mut rng = mask_rng.filter(|_| p > 0.0);
        let l = &self.layers.0;

        let hidden_act = l[ENC0].forward(inputs).mapv(f64::tanh);
        let hidden_mask = rng.as_deref_mut().map(|r| dropout_mask(r, hidden_act.dim(), p));
        let hidden_dropped = match &hidden_mask {
            Some(m) => &hidden_act * m,
            None => hidden_act.clone(),
        };
        let pre = l[ENC1].forward(hidden_dropped.view());
        let encoder_mask = rng.map(|r| dropout_mask(r, pre.dim(), p));
        let encoder = match &encoder_mask {
            Some(m) => pre * m,
            None => pre,
        };
        let text = l[TEXT].forward(encoder.view());
        let shared = with_shared.then(|| l[SHARED].forward(encoder.view()));
        Ok(ViewPass {
            encoder,
            text,
            shared,
            input: inputs.to_owned(),
            hidden_act,
            hidden_mask,
            hidden_dropped,
            encoder_mask,
        })
    }

    /// Deterministic embeddings with dropout disabled.
    pub fn embed(&self, inputs: &EmbeddingBatch, layer: EmbeddingLayer) -> Result<EmbeddingBatch> {
        let pass = self.forward(inputs.view(), layer == EmbeddingLayer::SharedHead, None)?;
        let out = match layer {
            EmbeddingLayer::Encoder => pass.encoder,
            EmbeddingLayer::TextHead => pass.text,
            EmbeddingLayer::SharedHead => pass.shared.expect("requested above"),
        };
        EmbeddingBatch::new(out)
    }

    /// Backpropagates gradients on the text and (optionally) shared outputs.
    pub fn backward(
        &self,
        pass: &ViewPass,
        grad_text: ArrayView2<'_, f64>,
        grad_shared: Option<ArrayView2<'_, f64>>,
    ) -> LayerSet {
        let l = &self.layers.0;
        let mut grads = LayerSet::zeros(&self.config);
        let g = &mut grads.0;

        g[TEXT].weight = pass.encoder.t().dot(&grad_text);
        g[TEXT].bias = grad_text.sum_axis(Axis(0));
        let mut grad_enc = grad_text.dot(&l[TEXT].weight.t());
        if let Some(gs) = grad_shared {
            g[SHARED].weight = pass.encoder.t().dot(&gs);
            g[SHARED].bias = gs.sum_axis(Axis(0));
            grad_enc += &gs.dot(&l[SHARED].weight.t());
        }

        if let Some(m) = &pass.encoder_mask {
            grad_enc *= m;
        }
        g[ENC1].weight = pass.hidden_dropped.t().dot(&grad_enc);
        g[ENC1].bias = grad_enc.sum_axis(Axis(0));

        let mut grad_hidden = grad_enc.dot(&l[ENC1].weight.t());
        if let Some(m) = &pass.hidden_mask {
            grad_hidden *= m;
        }
        Zip::from(&mut grad_hidden)
            .and(&pass.hidden_act)
            .for_each(|gh, &h| *gh *= 1.0 - h * h);
        g[ENC0].weight = pass.input.t().dot(&grad_hidden);
        g[ENC0].bias = grad_hidden.sum_axis(Axis(0));
        grads
    }

    pub(crate) fn layers_mut(&mut self) -> &mut LayerSet {
        &mut self.layers
    }
}

/// Two stochastic passes over the same inputs with independent masks derived
/// from `seed`.
pub fn forward_two_views(
    model: &StudentModel,
    inputs: &EmbeddingBatch,
    seed: u64,
    with_shared: bool,
) -> Result<(ViewPass, ViewPass)> {
    let mut rng_z = rng_for(derive_seed(seed, "dropout"), "view_z");
    let mut rng_zp = rng_for(derive_seed(seed, "dropout"), "view_zprime");
    let z = model.forward(inputs.view(), with_shared, Some(&mut rng_z))?;
    let zp = model.forward(inputs.view(), false, Some(&mut rng_zp))?;
    Ok((z, zp))
}

// Inverted dropout: kept units are scaled by 1 / (1 - p).
fn dropout_mask(rng: &mut ChaCha8Rng, dim: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: LayerSet,
    second: LayerSet,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &ModelConfig) -> Self {
        Self {
            config,
            first: LayerSet::zeros(model),
            second: LayerSet::zeros(model),
            steps: 0,
        }
    }

    /// Applies one bias-corrected update, then rounds parameters to float32.
    pub fn step(&mut self, model: &mut StudentModel, grads: &LayerSet, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let params = model.layers_mut();
        for (((p, g), m), v) in params
            .0
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.first.0)
            .zip(&mut self.second.0)
        {
            let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = round_f32(*p - step);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_in: 5,
            hidden: 7,
            text_dim: 6,
            shared_dim: 3,
            dropout: 0.1,
        }
    }

    fn inputs(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingBatch::new(Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal)))
            .unwrap()
    }

    #[test]
    fn zero_dropout_views_are_identical() {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..small()
        };
        let m = StudentModel::init(cfg, 1).unwrap();
        let x = inputs(4, 5, 2);
        let (z, zp) = forward_two_views(&m, &x, 9, true).unwrap();
        assert_eq!(z.text, zp.text);
        assert_eq!(z.encoder, zp.encoder);
    }

    #[test]
    fn same_seed_same_views() {
        let m = StudentModel::init(small(), 1).unwrap();
        let x = inputs(4, 5, 2);
        let (a, _) = forward_two_views(&m, &x, 9, false).unwrap();
        let (b, _) = forward_two_views(&m, &x, 9, false).unwrap();
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn distinct_mask_seeds_differ() {
        let m = StudentModel::init(ModelConfig::new(5), 1).unwrap();
        let x = inputs(8, 5, 2);
        for trial in 0..10 {
            let (z, zp) = forward_two_views(&m, &x, trial, false).unwrap();
            assert_ne!(z.text, zp.text, "trial {trial}");
        }
    }

    #[test]
    fn input_width_checked() {
        let m = StudentModel::init(small(), 1).unwrap();
        assert!(m.embed(&inputs(2, 4, 0), EmbeddingLayer::Encoder).is_err());
    }

    #[test]
    fn parameters_are_float32_exact() {
        let m = StudentModel::init(small(), 3).unwrap();
        assert!(m.layers.iter_values().all(|&v| v == round_f32(v)));
    }

    // Scalar objective sum(text * a) + sum(shared * b) checked against
    // central differences on every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small();
        let model = StudentModel::init(cfg, 5).unwrap();
        let x = inputs(3, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_simple_fn((3, 6), || rng.sample::<f64, _>(StandardNormal));
        let b = Array2::from_shape_simple_fn((3, 3), || rng.sample::<f64, _>(StandardNormal));

        let objective = |m: &StudentModel| {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let pass = m.forward(x.view(), true, Some(&mut r)).unwrap();
            (&pass.text * &a).sum() + (pass.shared.as_ref().unwrap() * &b).sum()
        };
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let pass = model.forward(x.view(), true, Some(&mut r)).unwrap();
        let grads = model.backward(&pass, a.view(), Some(b.view()));

        let h = 1e-6;
        for (li, layer) in model.layers.0.iter().enumerate() {
            for idx in 0..layer.weight.len() {
                let (i, j) = (idx / layer.weight.ncols(), idx % layer.weight.ncols());
                let mut plus = model.clone();
                plus.layers.0[li].weight[[i, j]] += h;
                let mut minus = model.clone();
                minus.layers.0[li].weight[[i, j]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.0[li].weight[[i, j]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{li} ({i},{j}): {fd} vs {an}");
            }
            for j in 0..layer.bias.len() {
                let mut plus = model.clone();
                plus.layers.0[li].bias[j] += h;
                let mut minus = model.clone();
                minus.layers.0[li].bias[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.0[li].bias[j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{li} bias {j}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut m = StudentModel::init(small(), 1).unwrap();
        let before = m.clone();
        let mut grads = LayerSet::zeros(&small());
        grads.0[0].weight.fill(0.3);
        let mut opt = Adam::new(AdamConfig::default(), &small());
        opt.step(&mut m, &grads, 0.0);
        assert_eq!(m, before);
        opt.step(&mut m, &grads, 1e-2);
        assert_ne!(m, before);
    }
}
