//! Synthetic multimodal corpora with known ground-truth semantics.
//!
//! Each pair is driven by a latent vector `u`. Teachers see `u` through fixed
//! random isometries (the image teacher additionally carries image-only
//! redundancy scaled by `noise_cmb`); extra captions of the same image drift
//! from `u` by `noise_isd`. The student's raw features mix `u` with a
//! stronger nuisance factor, so an untrained encoder barely tracks the
//! ground-truth similarity `cos(u_i, u_j)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::EmbeddingBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_pairs: usize,
    pub latent_dim: usize,
    /// Image-side redundancy magnitude (cross-modal misalignment).
    pub noise_cmb: f64,
    /// Latent offset of additional captions (intra-modal divergence).
    pub noise_isd: f64,
    pub captions_per_image: usize,
    pub seed: u64,
    pub n_dev: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub image_dim: usize,
    pub text_teacher_dim: usize,
    pub n_text_teachers: usize,
    pub teacher_noise: f64,
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub feature_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2048,
            latent_dim: 16,
            noise_cmb: 0.3,
            noise_isd: 0.3,
            captions_per_image: 1,
            seed: 42,
            n_dev: 256,
            n_test: 256,
            feature_dim: 64,
            image_dim: 256,
            text_teacher_dim: 128,
            n_text_teachers: 2,
            teacher_noise: 0.1,
            nuisance_dim: 16,
            nuisance_scale: 3.0,
            feature_noise: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name, reason: String| Err(Error::param(name, reason));
        if self.n_pairs < 2 {
            return fail("n_pairs", format!("need at least 2 pairs, got {}", self.n_pairs));
        }
        if self.n_dev < 2 || self.n_test < 2 {
            return fail("n_dev/n_test", "held-out splits need at least 2 pairs".into());
        }
        if self.latent_dim == 0 || self.captions_per_image == 0 || self.n_text_teachers == 0 {
            return fail(
                "latent_dim/captions_per_image/n_text_teachers",
                "must be positive".into(),
            );
        }
        if self.feature_dim < self.latent_dim + self.nuisance_dim {
            return fail(
                "feature_dim",
                format!(
                    "{} cannot hold latent ({}) plus nuisance ({}) subspaces",
                    self.feature_dim, self.latent_dim, self.nuisance_dim
                ),
            );
        }
        if self.image_dim < self.latent_dim || self.text_teacher_dim < self.latent_dim {
            return fail(
                "image_dim/text_teacher_dim",
                format!("must be at least latent_dim = {}", self.latent_dim),
            );
        }
        for (name, v) in [
            ("noise_cmb", self.noise_cmb),
            ("noise_isd", self.noise_isd),
            ("teacher_noise", self.teacher_noise),
            ("nuisance_scale", self.nuisance_scale),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Train, dev, and test splits drawn through the same fixed maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: MultimodalDataset,
    pub dev: MultimodalDataset,
    pub test: MultimodalDataset,
}

struct Maps {
    image: Array2<f64>,
    redundancy: Array2<f64>,
    text_teachers: Vec<Array2<f64>>,
    feature_signal: Array2<f64>,
    feature_nuisance: Array2<f64>,
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let maps = draw_maps(cfg);
    Ok(SyntheticData {
        train: draw_split(cfg, &maps, cfg.n_pairs, "synth/train")?,
        dev: draw_split(cfg, &maps, cfg.n_dev, "synth/dev")?,
        test: draw_split(cfg, &maps, cfg.n_test, "synth/test")?,
    })
}

fn draw_maps(cfg: &GeneratorConfig) -> Maps {
    let mut rng = rng_for(cfg.seed, "synth/maps");
    let l = cfg.latent_dim;
    let feature_basis = random_isometry(&mut rng, cfg.feature_dim, l + cfg.nuisance_dim);
    Maps {
        image: random_isometry(&mut rng, cfg.image_dim, l),
        redundancy: random_isometry(&mut rng, cfg.image_dim, l),
        text_teachers: (0..cfg.n_text_teachers)
            .map(|_| random_isometry(&mut rng, cfg.text_teacher_dim, l))
            .collect(),
        feature_signal: feature_basis.slice(ndarray::s![.., ..l]).to_owned(),
        feature_nuisance: feature_basis.slice(ndarray::s![.., l..]).to_owned(),
    }
}

fn draw_split(
    cfg: &GeneratorConfig,
    maps: &Maps,
    n_images: usize,
    label: &str,
) -> Result<MultimodalDataset> {
    let mut rng = rng_for(cfg.seed, label);
    let l = cfg.latent_dim;
    let n = n_images * cfg.captions_per_image;

    let image_latent = gaussian(&mut rng, n_images, l);
    let image_extra = gaussian(&mut rng, n_images, l);
    let mut caption_latent = Array2::zeros((n, l));
    let mut image_rows = Array2::zeros((n, cfg.image_dim));
    let image_all = image_latent.dot(&maps.image.t())
        + image_extra.dot(&maps.redundancy.t()) * cfg.noise_cmb;
    for img in 0..n_images {
        for c in 0..cfg.captions_per_image {
            let row = img * cfg.captions_per_image + c;
            let mut u = image_latent.row(img).to_owned();
            if c > 0 {
                let offset: Array1<f64> = (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                u.scaled_add(cfg.noise_isd, &offset);
            }
            caption_latent.row_mut(row).assign(&u);
            image_rows.row_mut(row).assign(&image_all.row(img));
        }
    }

    let text_teachers = maps
        .text_teachers
        .iter()
        .map(|b| {
            let noise = relative_noise(&mut rng, n, b.nrows(), l) * cfg.teacher_noise;
            EmbeddingBatch::new(caption_latent.dot(&b.t()) + noise)?.normalized()
        })
        .collect::<Result<Vec<_>>>()?;

    let nuisance = gaussian(&mut rng, n, cfg.nuisance_dim);
    let feature_noise = relative_noise(&mut rng, n, cfg.feature_dim, l) * cfg.feature_noise;
    let features = caption_latent.dot(&maps.feature_signal.t())
        + nuisance.dot(&maps.feature_nuisance.t()) * cfg.nuisance_scale
        + feature_noise;

    Ok(MultimodalDataset {
        text_features: EmbeddingBatch::new(features)?,
        image_teacher: EmbeddingBatch::new(image_rows)?.normalized()?,
        text_teachers,
        ground_truth: Some(EmbeddingBatch::new(caption_latent)?),
    })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

// Isotropic noise whose expected norm matches a unit-variance latent of
// dimension `latent_dim`, regardless of the ambient dimension.
fn relative_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, latent_dim: usize) -> Array2<f64> {
    gaussian(rng, rows, cols) * (latent_dim as f64 / cols as f64).sqrt()
}

/// A `rows x cols` matrix with orthonormal columns (modified Gram-Schmidt on
/// a Gaussian draw).
fn random_isometry(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    assert!(cols <= rows);
    let mut m = gaussian(rng, rows, cols);
    for j in 0..cols {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

/// Gram matrix of the ground-truth latents, i.e. the gold similarities.
pub fn ground_truth_similarity(latents: &EmbeddingBatch) -> Result<Array2<f64>> {
    Ok(crate::tensor::cosine_sim_matrix(latents, latents)?.into_inner())
}
