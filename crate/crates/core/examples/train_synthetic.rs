//! Trains the student on a synthetic corpus and prints the dev curve.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [steps] [key=value ...]
//! ```

use std::time::Instant;

use dual_align::data::{generate_synthetic, GeneratorConfig};
use dual_align::eval::{alignment_metric, gold_nearest_neighbors, recall_at_k, similarity_spearman};
use dual_align::model::EmbeddingLayer;
use dual_align::tensor::cosine_sim_matrix;
use dual_align::model::{ModelConfig, StudentModel};
use dual_align::seed::derive_seed;
use dual_align::train::{train_loop, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::default();
    if let Some(steps) = args.next() {
        config.steps = steps.parse()?;
    }
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or("expected key=value")?;
        if !config.set(k, v)? {
            return Err(format!("unknown key `{k}`").into());
        }
    }
    let data = generate_synthetic(&GeneratorConfig::default())?;
    let gold = data.dev.ground_truth.as_ref().expect("synthetic");

    let init = StudentModel::init(
        ModelConfig {
            d_in: data.train.text_features.d(),
            hidden: config.hidden,
            text_dim: config.text_dim,
            shared_dim: data.train.image_teacher.d(),
            dropout: config.dropout,
        },
        derive_seed(config.seed, "model"),
    )?;
    let rho0 = similarity_spearman(&init.embed(&data.dev.text_features, config.eval_layer)?, gold)?;
    println!("init dev spearman: {rho0:.4}");

    let start = Instant::now();
    let out = train_loop(&data.train, &data.dev, &config)?;
    for (step, rho) in out.history.evaluations() {
        println!("step {step:>5}  dev spearman {rho:.4}");
    }
    println!(
        "best step {} ({:.4}); {} dead parameters; {:.1}s",
        out.best.step,
        out.best.dev_metric,
        out.dead_parameters,
        start.elapsed().as_secs_f64()
    );

    let test = &data.test;
    let best = &out.best.model;
    let nn = gold_nearest_neighbors(test.ground_truth.as_ref().expect("synthetic"))?;
    for (name, model) in [("init", &init), ("best", best)] {
        let emb = model.embed(&test.text_features, config.eval_layer)?;
        let align = alignment_metric(&emb, &emb.select(&nn))?;
        let shared = model.embed(&test.text_features, EmbeddingLayer::SharedHead)?;
        let (i2t, t2i) = recall_at_k(cosine_sim_matrix(&shared, &test.image_teacher)?.view(), 1)?;
        println!("{name}: test alignment {align:.4}, R@1 image->text {i2t:.3}, text->image {t2i:.3}");
    }
    Ok(())
}
