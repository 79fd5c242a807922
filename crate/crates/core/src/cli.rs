//! Command-line front end: `gen-synth`, `train`, `eval`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 I/O or file-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    generate_synthetic, load_embeddings, load_split, seeded_derangement, write_synthetic, GeneratorConfig,
    MultimodalDataset, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    alignment_metric, export_anisotropy_scatter, gold_nearest_neighbors, pairwise_scores, recall_at_k,
    uniformity_metric, MetricReport,
};
use crate::gradcheck::{gradcheck, GradcheckConfig, LossKind, DEFAULT_TOLERANCE};
use crate::model::EmbeddingLayer;
use crate::objectives::Decomposition;
use crate::tensor::{cosine_sim_matrix, EmbeddingBatch};
use crate::train::{train_loop, Checkpoint, TrainConfig, REFERENCE_LR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.dalc";
pub const HISTORY_FILE: &str = "history.tsv";
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.tsv";
pub const SCATTER_FILE: &str = "scatter.tsv";

#[derive(Debug, Parser)]
#[command(name = "dual-align", version, about = "Teacher-guided dual-level alignment for sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground-truth similarity.
    GenSynth(GenSynthArgs),
    /// Train the student and keep the best checkpoint by dev Spearman.
    Train(TrainArgs),
    /// Score a checkpoint (or raw embeddings) on a held-out split.
    Eval(EvalArgs),
    /// Compare analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 2048)]
    pairs: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    dev: usize,
    #[arg(long, default_value_t = 256)]
    test: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_cmb: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_isd: f64,
    #[arg(long, default_value_t = 1)]
    captions_per_image: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, or the directory containing it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, history and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use the small learning rate suited to pretrained transformer encoders.
    #[arg(long, conflicts_with = "lr")]
    reference_lr: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_layer: Option<String>,
    #[arg(long)]
    reshuffle_per_epoch: bool,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score a stored embedding file instead of a checkpoint's outputs.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Overrides the layer recorded in the checkpoint.
    #[arg(long)]
    layer: Option<String>,
    /// Directory for the report and scatter files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single loss.
    #[arg(long)]
    loss: Option<String>,
    /// First seed of the sweep.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

/// Exit code for an error, per the module contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::NonFiniteLoss { .. }
        | Error::NonFinite { .. }
        | Error::ZeroNormRow { .. }
        | Error::NotStochastic { .. }
        | Error::UndefinedCorrelation(_) => EXIT_NUMERICAL,
        Error::ShapeMismatch { .. }
        | Error::Empty(_)
        | Error::InvalidParameter { .. }
        | Error::InvalidPermutation { .. }
        | Error::InvalidLabel(_)
        | Error::Config(_) => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<i32> {
    let cfg = GeneratorConfig {
        n_pairs: a.pairs,
        latent_dim: a.latent_dim,
        seed: a.seed,
        n_dev: a.dev,
        n_test: a.test,
        noise_cmb: a.noise_cmb,
        noise_isd: a.noise_isd,
        captions_per_image: a.captions_per_image,
        ..Default::default()
    };
    // Surface the negative-pair precondition before generating anything.
    seeded_derangement(cfg.n_pairs, cfg.seed)?;
    let data = generate_synthetic(&cfg)?;
    let manifest = write_synthetic(&a.out, &data, cfg.seed)?;
    println!("wrote {}", manifest.display());
    Ok(EXIT_OK)
}

/// Training configuration plus the paths a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_config_text();
        for (key, path) in [("data", &self.data), ("out", &self.out)] {
            if let Some(p) = path {
                out.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        out
    }
}

fn resolve_train(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig {
        train: TrainConfig::default(),
        data: None,
        out: None,
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rc.apply_text(&text)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if a.reference_lr {
        flags.push(("lr", REFERENCE_LR.to_string()));
    }
    let opt = [
        ("steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("lambda", a.lambda.map(|v| v.to_string())),
        ("mu", a.mu.map(|v| v.to_string())),
        ("margin", a.margin.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("eval_every", a.eval_every.map(|v| v.to_string())),
        ("eval_layer", a.eval_layer.clone()),
    ];
    flags.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
    if a.reshuffle_per_epoch {
        flags.push(("reshuffle_per_epoch", "true".into()));
    }
    for (k, v) in flags {
        rc.set(k, &v)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        rc.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &a.data {
        rc.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        rc.out = Some(o.clone());
    }
    rc.train.validate()?;
    Ok(rc)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn print_decomposition(label: &str, parts: &Decomposition) {
    println!("{label}");
    for (name, v) in Decomposition::COLUMNS.iter().zip(parts.values()) {
        if let Some(v) = v {
            println!("  {name:<8} {v:>14.6}");
        }
    }
}

fn train(a: TrainArgs) -> Result<i32> {
    let rc = resolve_train(&a)?;
    let data = rc
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data`".into()))?;
    let out = rc
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    let manifest = manifest_path(data);
    eprint!("resolved config:\n{}", rc.to_text());
    let train_split = load_split(&manifest, "train")?;
    let dev_split = load_split(&manifest, "dev")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, rc.to_text()).map_err(|e| Error::io(&resolved, e))?;

    let outcome = train_loop(&train_split, &dev_split, &rc.train)?;
    outcome.best.save(&out.join(CHECKPOINT_FILE))?;
    outcome.history.save(&out.join(HISTORY_FILE))?;

    let last = |kind| outcome.history.steps().filter(|r| r.kind == kind).last();
    if let Some(r) = last(crate::data::BatchKind::Text) {
        print_decomposition(&format!("final text step {}", r.step), &r.parts);
    }
    if let Some(r) = last(crate::data::BatchKind::Multimodal) {
        print_decomposition(&format!("final multimodal step {}", r.step), &r.parts);
    }
    println!(
        "best checkpoint: step {} dev spearman {:.2}",
        outcome.best.step,
        outcome.best.dev_metric * 100.0
    );
    Ok(EXIT_OK)
}

/// Metrics of `emb` on `split`; retrieval needs `shared` to match the image
/// teacher width.
pub fn evaluate_split(
    emb: &EmbeddingBatch,
    shared: Option<&EmbeddingBatch>,
    split: &MultimodalDataset,
) -> Result<(MetricReport, Vec<(f64, f64)>)> {
    let gold = split
        .ground_truth
        .as_ref()
        .ok_or(Error::Empty("split has no ground truth"))?;
    if emb.n() != gold.n() {
        return Err(Error::shape("eval embeddings", gold.n(), emb.n()));
    }
    let pairs = pairwise_scores(emb, gold)?;
    let (pred, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let spearman = crate::eval::spearman(&pred, &g)?;
    let nn = gold_nearest_neighbors(gold)?;
    let mut recall_at = std::collections::BTreeMap::new();
    if let Some(s) = shared.filter(|s| s.d() == split.image_teacher.d()) {
        let sim = cosine_sim_matrix(s, &split.image_teacher)?;
        for k in [1, 5].into_iter().filter(|&k| k <= s.n()) {
            recall_at.insert(k, recall_at_k(sim.view(), k)?);
        }
    }
    let report = MetricReport {
        spearman,
        alignment: alignment_metric(emb, &emb.select(&nn))?,
        uniformity: uniformity_metric(emb)?,
        recall_at,
    };
    Ok((report, pairs))
}

fn eval(a: EvalArgs) -> Result<i32> {
    let split = load_split(&manifest_path(&a.data), &a.split)?;
    let (emb, shared) = match (&a.checkpoint, &a.predictions) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let layer: EmbeddingLayer = match &a.layer {
                Some(l) => l.parse()?,
                None => ck.eval_layer,
            };
            let shared = ck.model.embed(&split.text_features, EmbeddingLayer::SharedHead)?;
            (ck.model.embed(&split.text_features, layer)?, Some(shared))
        }
        (None, Some(path)) => {
            let p = load_embeddings(path)?;
            (p.clone(), Some(p))
        }
        (None, None) => return Err(Error::Config("pass --checkpoint or --predictions".into())),
    };
    let (report, pairs) = evaluate_split(&emb, shared.as_ref(), &split)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(REPORT_FILE);
        fs::write(&path, &tsv).map_err(|e| Error::io(&path, e))?;
        export_anisotropy_scatter(&pairs, &out.join(SCATTER_FILE))?;
    }
    Ok(EXIT_OK)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let kinds: Vec<LossKind> = match &a.loss {
        Some(name) => vec![name.parse()?],
        None => LossKind::ALL.to_vec(),
    };
    let config = GradcheckConfig {
        n: a.n,
        d: a.d,
        ..Default::default()
    };
    let mut failed = Vec::new();
    println!("{:<8} {:>14}  status", "loss", "max rel err");
    for kind in kinds {
        let mut worst = 0.0f64;
        for seed in a.seed..a.seed + a.seeds {
            worst = worst.max(gradcheck(kind, seed, &config)?.max_rel_error);
        }
        let ok = worst < a.tolerance;
        println!("{:<8} {:>14.3e}  {}", kind.name(), worst, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(kind.name());
        }
    }
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_NUMERICAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_precedence_and_unknown_keys() {
        let mut rc = RunConfig {
            train: TrainConfig::default(),
            data: None,
            out: None,
        };
        rc.apply_text("# comment\nsteps = 10  # trailing\n\nlambda=0\ndata = d/\n").unwrap();
        assert_eq!(rc.train.steps, 10);
        assert_eq!(rc.train.hp.lambda_w, 0.0);
        assert_eq!(rc.data, Some(PathBuf::from("d/")));
        let err = rc.apply_text("stpes = 3").unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);

        let mut again = RunConfig {
            train: TrainConfig::default(),
            data: None,
            out: None,
        };
        again.apply_text(&rc.to_text()).unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dual-align", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["dual-align", "gradcheck", "--loss", "nope"]), EXIT_USAGE);
        assert_eq!(run(["dual-align", "--help"]), EXIT_OK);
    }
}
