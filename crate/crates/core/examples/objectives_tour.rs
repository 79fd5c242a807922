//! Evaluates every objective on one small batch and prints the loss
//! decomposition next to the gradient norms each term sends to the student.

use dual_align::objectives::{
    loss_consistency, loss_cross_modal_kl, loss_intra_modal_kl, loss_multimodal_infonce, loss_rank,
    loss_text_infonce, multimodal_objective, Hyperparams, MultimodalTargets, PairLabel, StudentViews,
    Decomposition,
};
use dual_align::seed::rng_for;
use dual_align::teacher::{pseudo_rank_labels, target_distribution};
use dual_align::tensor::EmbeddingBatch;
use ndarray::Array2;
use rand::Rng;

fn random_batch(label: &str, n: usize, d: usize) -> EmbeddingBatch {
    let mut rng = rng_for(7, label);
    EmbeddingBatch::new(Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))).unwrap()
}

fn grad_norm(r: &dual_align::objectives::LossResult) -> f64 {
    r.grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

fn main() -> dual_align::Result<()> {
    let (n, d) = (6, 8);
    let hp = Hyperparams::default();
    let z = random_batch("z", n, d);
    let zp = random_batch("zprime", n, d);
    let shared = random_batch("shared", n, d);
    let images = random_batch("images", n, d).normalized()?;
    let text_teacher = random_batch("text_teacher", n, d).normalized()?;
    let negatives = EmbeddingBatch::new(images.view().select(ndarray::Axis(0), &[1, 2, 3, 4, 5, 0]))?;

    let q_t2t = target_distribution(&text_teacher, hp.tau_dist)?;
    let q_v2v = target_distribution(&images, hp.tau_dist)?;
    let ranking = pseudo_rank_labels(&text_teacher)?;

    let labels = vec![PairLabel::ALIGNED; n];
    let terms = [
        ("l_text", loss_text_infonce(&z, &zp, hp.tau)?),
        ("l_info", loss_multimodal_infonce(&shared, &images, hp.tau)?),
        ("l_cons (aligned only)", loss_consistency(&images, &shared, &labels, hp.margin_m)?),
        ("l_cma", loss_cross_modal_kl(&shared, &images, &q_t2t, &q_v2v, hp.tau_dist)?),
        ("l_rank", loss_rank(&z, &zp, ranking.perms(), hp.tau)?),
        ("l_ima", loss_intra_modal_kl(&z, &zp, &q_t2t, hp.tau_dist)?),
    ];
    println!("{:<24}{:>14}{:>14}", "term", "value", "|grad|");
    for (name, r) in &terms {
        println!("{name:<24}{:>14.6}{:>14.6}", r.value, grad_norm(r));
    }

    let views = StudentViews {
        text_z: z,
        text_zprime: zp,
        shared_z: Some(shared),
    };
    let targets = MultimodalTargets {
        image_teacher: images,
        negative_images: negatives,
        q_t2t,
        q_v2v,
        ranking,
    };
    let (total, parts) = multimodal_objective(&views, &targets, &hp)?;
    println!("\nmultimodal step, lambda = {}, mu = {}", hp.lambda_w, hp.mu_w);
    for (name, v) in Decomposition::COLUMNS.iter().zip(parts.values()) {
        match v {
            Some(v) => println!("  {name:<8}{v:>14.6}"),
            None => println!("  {name:<8}{:>14}", "-"),
        }
    }
    for (key, g) in &total.grads {
        println!("  d/d{key}: {:?}, norm {:.6}", g.dim(), g.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(())
}
