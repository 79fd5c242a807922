//! Optimization: per-step objectives, the alternating training loop,
//! metric history and best-checkpoint selection.

mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{epoch_batches, mixed_schedule, seeded_derangement, BatchKind, MultimodalDataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::similarity_spearman;
use crate::model::{forward_two_views, Adam, LayerSet, ModelConfig, StudentModel};
use crate::objectives::{
    multimodal_objective, text_objective, Decomposition, MultimodalTargets, StudentViews, SHARED_Z, TEXT_Z,
    TEXT_ZPRIME,
};
use crate::seed::{derive_seed, rng_for};
use crate::teacher::{combine_teachers, pseudo_rank_labels, target_distribution, TeacherEnsemble};
use crate::tensor::EmbeddingBatch;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{TrainConfig, REFERENCE_LR};

/// What one optimizer update did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based index of the update.
    pub step: usize,
    pub kind: BatchKind,
    pub parts: Decomposition,
    /// L2 norm of the full parameter gradient.
    pub grad_norm: f64,
}

/// One history row: a training step, an evaluation, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub report: Option<StepReport>,
    pub dev_spearman: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    /// Tab-separated table: step, batch kind, every loss component,
    /// gradient norm, dev Spearman. Missing values are written as `-`.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| x.to_string());
        let mut out = String::from("# step\tkind");
        for c in Decomposition::COLUMNS {
            out.push('\t');
            out.push_str(c);
        }
        out.push_str("\tgrad_norm\tdev_spearman\n");
        for row in &self.rows {
            let _ = write!(out, "{}", row.step);
            match &row.report {
                Some(r) => {
                    let _ = write!(out, "\t{}", r.kind.code());
                    for v in r.parts.values() {
                        let _ = write!(out, "\t{}", fmt(v));
                    }
                    let _ = write!(out, "\t{}", r.grad_norm);
                }
                None => {
                    out.push_str("\t-");
                    for _ in 0..Decomposition::COLUMNS.len() + 1 {
                        out.push_str("\t-");
                    }
                }
            }
            let _ = writeln!(out, "\t{}", fmt(row.dev_spearman));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn evaluations(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.dev_spearman.map(|s| (r.step, s)))
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepReport> {
        self.rows.iter().filter_map(|r| r.report.as_ref())
    }
}

/// Frozen per-dataset teacher signals shared by every multimodal step.
struct TeacherTargets {
    text: EmbeddingBatch,
    image: EmbeddingBatch,
}

/// Optimizer state bound to one training corpus.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a MultimodalDataset,
    teachers: TeacherTargets,
    negatives: Vec<usize>,
    model: StudentModel,
    optimizer: Adam,
    step: usize,
    touched: Vec<bool>,
}

impl<'a> Trainer<'a> {
    /// Fresh student sized for `data`; the shared head matches the image
    /// teacher width.
    pub fn new(data: &'a MultimodalDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.len() < 2 {
            return Err(Error::param("train split", "need at least 2 pairs"));
        }
        let model_cfg = ModelConfig {
            d_in: data.text_features.d(),
            hidden: config.hidden,
            text_dim: config.text_dim,
            shared_dim: data.image_teacher.d(),
            dropout: config.dropout,
        };
        let model = StudentModel::init(model_cfg, derive_seed(config.seed, "model"))?;
        Self::with_model(data, config, model)
    }

    pub fn with_model(data: &'a MultimodalDataset, config: TrainConfig, model: StudentModel) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if model.config().shared_dim != data.image_teacher.d() {
            return Err(Error::shape(
                "shared head vs image teacher",
                model.config().shared_dim,
                data.image_teacher.d(),
            ));
        }
        let ensemble = TeacherEnsemble::uniform(data.text_teachers.clone())?;
        let teachers = TeacherTargets {
            text: combine_teachers(&ensemble)?,
            image: data.image_teacher.normalized()?,
        };
        let negatives = seeded_derangement(data.len(), derive_seed(config.seed, "negatives"))?;
        let optimizer = Adam::new(config.adam, model.config());
        let touched = vec![false; model.num_params()];
        Ok(Self {
            config,
            data,
            teachers,
            negatives,
            model,
            optimizer,
            step: 0,
            touched,
        })
    }

    pub fn model(&self) -> &StudentModel {
        &self.model
    }

    pub fn into_model(self) -> StudentModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Parameters whose gradient has been exactly zero on every step so far.
    pub fn dead_parameters(&self) -> usize {
        self.touched.iter().filter(|&&t| !t).count()
    }

    /// Redraws the mismatched-pair assignment for a new epoch.
    pub fn reshuffle_negatives(&mut self, epoch: usize) -> Result<()> {
        let label = format!("negatives/epoch/{epoch}");
        self.negatives = seeded_derangement(self.data.len(), derive_seed(self.config.seed, &label))?;
        Ok(())
    }

    /// One update on the rows `batch` of the training corpus. Text steps
    /// optimize the dropout-view contrastive loss alone; multimodal steps
    /// optimize the full objective.
    pub fn train_step(&mut self, kind: BatchKind, batch: &[usize]) -> Result<StepReport> {
        if batch.len() < 2 {
            return Err(Error::param("batch", format!("need at least 2 rows, got {}", batch.len())));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::param("batch", format!("row {bad} out of range")));
        }
        let step = self.step + 1;
        let inputs = self.data.text_features.select(batch);
        let multimodal = kind == BatchKind::Multimodal;
        let dropout_seed = derive_seed(self.config.seed, &format!("step/{step}"));
        let (z, zp) = forward_two_views(&self.model, &inputs, dropout_seed, multimodal)?;
        let views = StudentViews {
            text_z: student_output(&z.text, TEXT_Z)?,
            text_zprime: student_output(&zp.text, TEXT_ZPRIME)?,
            shared_z: z.shared.as_ref().map(|s| student_output(s, SHARED_Z)).transpose()?,
        };
        let (loss, parts) = if multimodal {
            let text_teacher = self.teachers.text.select(batch);
            let image_teacher = self.teachers.image.select(batch);
            let negative_rows: Vec<usize> = batch.iter().map(|&i| self.negatives[i]).collect();
            let hp = &self.config.hp;
            let targets = MultimodalTargets {
                negative_images: self.teachers.image.select(&negative_rows),
                q_t2t: target_distribution(&text_teacher, hp.tau_dist)?,
                q_v2v: target_distribution(&image_teacher, hp.tau_dist)?,
                ranking: pseudo_rank_labels(&text_teacher)?,
                image_teacher,
            };
            multimodal_objective(&views, &targets, hp)?
        } else {
            text_objective(&views.text_z, &views.text_zprime, &self.config.hp)?
        };

        let grad = |name| loss.grad(name).map(|g| g.view());
        let mut grads = self.model.backward(
            &z,
            grad(TEXT_Z).expect("text loss reaches view z"),
            grad(SHARED_Z),
        );
        grads.add_assign(&self.model.backward(
            &zp,
            grad(TEXT_ZPRIME).expect("text loss reaches view z'"),
            None,
        ));
        let grad_norm = grads.sq_norm().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "gradient".into(),
            });
        }
        self.mark_touched(&grads);
        self.optimizer.step(&mut self.model, &grads, self.config.lr);
        self.step = step;
        Ok(StepReport {
            step,
            kind,
            parts,
            grad_norm,
        })
    }

    fn mark_touched(&mut self, grads: &LayerSet) {
        for (t, &g) in self.touched.iter_mut().zip(grads.iter_values()) {
            *t |= g != 0.0;
        }
    }

    /// Dev Spearman of the current student against ground-truth similarity.
    pub fn evaluate(&self, dev: &MultimodalDataset) -> Result<f64> {
        dev_spearman(&self.model, dev, &self.config)
    }
}

fn student_output(values: &ndarray::Array2<f64>, name: &str) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(values.clone()).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            component: format!("student output {name}"),
        },
        other => other,
    })
}

fn dev_spearman(model: &StudentModel, dev: &MultimodalDataset, config: &TrainConfig) -> Result<f64> {
    let gold = dev
        .ground_truth
        .as_ref()
        .ok_or(Error::Empty("dev split has no ground truth"))?;
    let emb = model.embed(&dev.text_features, config.eval_layer)?;
    similarity_spearman(&emb, gold)
}

/// Everything a training run produces.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: History,
    pub final_model: StudentModel,
    pub dead_parameters: usize,
}

/// The `(kind, rows)` sequence of one epoch.
fn epoch_plan(n: usize, config: &TrainConfig, epoch: usize) -> Result<Vec<(BatchKind, Vec<usize>)>> {
    let label = |k: &str| format!("epoch/{epoch}/{k}");
    let text = epoch_batches(n, config.batch_size, &mut rng_for(config.seed, &label("text")));
    let mm = epoch_batches(n, config.batch_size, &mut rng_for(config.seed, &label("multimodal")));
    let sampler = match config.ratio_a {
        Some(a) => SamplerConfig::new(a, config.batch_size, config.seed)?,
        None => SamplerConfig::from_counts(n, n, config.batch_size, config.seed)?,
    };
    Ok(mixed_schedule(text.len(), mm.len(), &sampler)?
        .into_iter()
        .map(|b| {
            let rows = match b.kind {
                BatchKind::Text => text[b.index].clone(),
                BatchKind::Multimodal => mm[b.index].clone(),
            };
            (b.kind, rows)
        })
        .collect())
}

/// Runs `config.steps` updates, evaluating on `dev` every `eval_every` steps
/// and after the last one, and keeps the checkpoint with the best dev
/// Spearman (earliest on ties).
pub fn train_loop(train: &MultimodalDataset, dev: &MultimodalDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_from(Trainer::new(train, config.clone())?, dev)
}

pub fn train_loop_from(mut trainer: Trainer<'_>, dev: &MultimodalDataset) -> Result<TrainOutcome> {
    let config = trainer.config().clone();
    let n = trainer.data.len();
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut consider = |trainer: &Trainer<'_>, history: &mut History| -> Result<()> {
        let metric = trainer.evaluate(dev)?;
        match history.rows.last_mut() {
            Some(row) if row.step == trainer.step => row.dev_spearman = Some(metric),
            _ => history.rows.push(HistoryRow {
                step: trainer.step,
                report: None,
                dev_spearman: Some(metric),
            }),
        }
        if best.as_ref().is_none_or(|b| metric > b.dev_metric) {
            best = Some(Checkpoint {
                model: trainer.model.clone(),
                step: trainer.step,
                dev_metric: metric,
                eval_layer: config.eval_layer,
                config_text: config.to_config_text(),
            });
        }
        Ok(())
    };

    let mut epoch = 0;
    'outer: while trainer.step < config.steps {
        if config.reshuffle_per_epoch && epoch > 0 {
            trainer.reshuffle_negatives(epoch)?;
        }
        for (kind, rows) in epoch_plan(n, &config, epoch)? {
            let report = trainer.train_step(kind, &rows)?;
            history.rows.push(HistoryRow {
                step: report.step,
                report: Some(report),
                dev_spearman: None,
            });
            if trainer.step.is_multiple_of(config.eval_every) {
                consider(&trainer, &mut history)?;
            }
            if trainer.step == config.steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    if history.rows.last().is_none_or(|r| r.dev_spearman.is_none()) {
        consider(&trainer, &mut history)?;
    }
    let dead_parameters = trainer.dead_parameters();
    Ok(TrainOutcome {
        best: best.expect("at least one evaluation"),
        history,
        final_model: trainer.into_model(),
        dead_parameters,
    })
}
