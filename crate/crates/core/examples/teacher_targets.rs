//! Builds the frozen distillation targets for one batch: the combined text
//! teacher, its similarity distribution, and the ranking lists.

use dual_align::data::{generate_synthetic, GeneratorConfig};
use dual_align::teacher::{combine_teachers, pseudo_rank_labels, target_distribution, TeacherEnsemble};
use dual_align::tensor::cosine_sim_matrix;
use ndarray::Axis;

fn main() -> dual_align::Result<()> {
    let data = generate_synthetic(&GeneratorConfig {
        n_pairs: 64,
        n_dev: 8,
        n_test: 8,
        ..Default::default()
    })?;
    let batch: Vec<usize> = (0..5).collect();
    let teachers: Vec<_> = data
        .train
        .text_teachers
        .iter()
        .map(|t| t.select(&batch))
        .collect();
    let k = teachers.len();
    let ensemble = TeacherEnsemble::new(teachers, vec![1.0 / k as f64; k])?;
    let combined = combine_teachers(&ensemble)?;
    println!("{k} text teachers combined into {:?}", combined.view().dim());

    let sim = cosine_sim_matrix(&combined, &combined)?;
    println!("\nteacher cosine similarity");
    for row in sim.view().axis_iter(Axis(0)) {
        println!("  {}", row.iter().map(|v| format!("{v:>7.3}")).collect::<String>());
    }
    for tau in [0.1, 1.0] {
        let q = target_distribution(&combined, tau)?;
        println!("\ntarget distribution at tau_dist = {tau}");
        for row in q.view().axis_iter(Axis(0)) {
            println!("  {}", row.iter().map(|v| format!("{v:>7.3}")).collect::<String>());
        }
    }
    let labels = pseudo_rank_labels(&combined)?;
    println!("\nranking lists (most similar first)");
    for (i, perm) in labels.perms().iter().enumerate() {
        println!("  anchor {i}: {perm:?}");
    }
    Ok(())
}
