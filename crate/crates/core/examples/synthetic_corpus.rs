//! Generates a synthetic corpus, writes it to disk, reads it back, and
//! shows the negative pairs and the batch schedule the trainer would use.

use dual_align::data::{
    build_shuffled_pairs, epoch_batches, generate_synthetic, load_split, mixed_schedule, write_synthetic,
    BatchKind, GeneratorConfig, SamplerConfig,
};
use dual_align::eval::similarity_spearman;
use dual_align::seed::{derive_seed, rng_for};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GeneratorConfig {
        n_pairs: 512,
        n_dev: 64,
        n_test: 64,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg)?;
    let dir = tempfile_dir()?;
    let manifest = write_synthetic(&dir, &data, cfg.seed)?;
    let train = load_split(&manifest, "train")?;
    let max_err = train
        .text_features
        .view()
        .iter()
        .zip(data.train.text_features.view())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("wrote and reloaded {} train pairs under {}", train.len(), dir.display());
    println!("max |reloaded - generated| = {max_err:.2e} (stored as f32)");
    println!(
        "student features {}d, image teacher {}d, {} text teachers",
        train.text_features.d(),
        train.image_teacher.d(),
        train.text_teachers.len()
    );

    let gold = data.dev.ground_truth.as_ref().expect("synthetic split");
    println!("\ndev Spearman against gold similarity");
    println!("  raw student features  {:>7.3}", similarity_spearman(&data.dev.text_features, gold)?);
    println!("  image teacher         {:>7.3}", similarity_spearman(&data.dev.image_teacher, gold)?);
    for (k, t) in data.dev.text_teachers.iter().enumerate() {
        println!("  text teacher {k}        {:>7.3}", similarity_spearman(t, gold)?);
    }

    let pairs = build_shuffled_pairs(&train, derive_seed(cfg.seed, "negatives"))?;
    println!("\nfirst mismatched pairs (image, text):");
    for p in pairs.iter().filter(|p| p.image != p.text).take(4) {
        println!("  ({}, {})", p.image, p.text);
    }

    let mut rng = rng_for(cfg.seed, "epoch/0");
    let text = epoch_batches(train.len(), 128, &mut rng);
    let mm = epoch_batches(train.len(), 128, &mut rng);
    let schedule = mixed_schedule(text.len(), mm.len(), &SamplerConfig::new(1, 128, cfg.seed)?)?;
    let kinds: String = schedule
        .iter()
        .map(|b| if b.kind == BatchKind::Text { 'T' } else { 'M' })
        .collect();
    println!("\nepoch 0 schedule: {kinds}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("dual-align-synth-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
