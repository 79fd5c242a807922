//! Scores embeddings with the evaluation suite: Spearman against gold
//! similarity, alignment, uniformity, and recall against a perturbed copy.

use dual_align::data::{generate_synthetic, GeneratorConfig};
use dual_align::eval::{
    alignment_metric, gold_nearest_neighbors, recall_at_k, similarity_spearman, uniformity_metric,
};
use dual_align::tensor::{cosine_sim_matrix, EmbeddingBatch};
use rand::Rng;
use rand_distr::StandardNormal;

fn report(name: &str, emb: &EmbeddingBatch, gold: &EmbeddingBatch) -> dual_align::Result<()> {
    let nn = gold_nearest_neighbors(gold)?;
    let positives = emb.select(&nn);
    println!(
        "{name:<16}{:>10.2}{:>12.4}{:>12.4}",
        100.0 * similarity_spearman(emb, gold)?,
        alignment_metric(emb, &positives)?,
        uniformity_metric(emb)?
    );
    Ok(())
}

fn main() -> dual_align::Result<()> {
    let data = generate_synthetic(&GeneratorConfig::default())?;
    let test = &data.test;
    let gold = test.ground_truth.as_ref().expect("synthetic split");

    println!("{:<16}{:>10}{:>12}{:>12}", "embedding", "rho x100", "alignment", "uniformity");
    report("gold latents", gold, gold)?;
    report("image teacher", &test.image_teacher, gold)?;
    report("text teacher 0", &test.text_teachers[0], gold)?;
    report("raw features", &test.text_features, gold)?;

    let teacher = &test.text_teachers[0];
    let mut rng = dual_align::seed::rng_for(0, "eval-example");
    println!("\ntext teacher 0 against a noisy copy of itself, {} pairs", test.len());
    for sigma in [0.1, 0.2, 0.3] {
        let noisy = teacher.view().mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        let noisy = EmbeddingBatch::new(noisy)?;
        let sim = cosine_sim_matrix(teacher, &noisy)?;
        let (r1, _) = recall_at_k(sim.view(), 1)?;
        let (r5, _) = recall_at_k(sim.view(), 5)?;
        println!("  sigma {sigma:<5} R@1 {r1:.3}  R@5 {r5:.3}");
    }
    Ok(())
}
