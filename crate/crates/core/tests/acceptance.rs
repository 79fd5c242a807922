//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use dual_align::data::{generate_synthetic, GeneratorConfig, SyntheticData};
use dual_align::eval::{alignment_metric, gold_nearest_neighbors, recall_at_k, similarity_spearman};
use dual_align::gradcheck::{gradcheck, GradcheckConfig, LossKind};
use dual_align::model::{EmbeddingLayer, ModelConfig, StudentModel};
use dual_align::objectives::{
    loss_consistency, loss_cross_modal_kl, loss_intra_modal_kl, loss_listmle, loss_multimodal_infonce,
    loss_rank, loss_text_infonce, multimodal_objective, Hyperparams, MultimodalTargets, PairLabel,
    StudentViews,
};
use dual_align::seed::derive_seed;
use dual_align::teacher::{pseudo_rank_labels, target_distribution};
use dual_align::tensor::{cosine_sim_matrix, kl_rows, softmax_rows, EmbeddingBatch};
use dual_align::train::{train_loop, TrainConfig, TrainOutcome};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- A1

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let mut worst: Vec<(LossKind, f64)> = Vec::new();
    for kind in LossKind::ALL {
        let mut w = 0.0f64;
        for seed in 0..5 {
            w = w.max(gradcheck(kind, seed, &cfg).expect("gradcheck runs").max_rel_error);
        }
        worst.push((kind, w));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, w)| format!("{k}={w:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        max < 1e-5 && elapsed < Duration::from_secs(30),
        format!("max rel err {max:.2e} [{detail}] in {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- A2 / A4 fixtures

#[derive(Clone)]
struct Fixture {
    z: Mat,
    zp: Mat,
    shared: Mat,
    image: Mat,
    negatives: Mat,
    teacher: Mat,
    labels: Vec<u8>,
}

impl Fixture {
    fn random(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Self {
        Self {
            z: random_mat(rng, n, d),
            zp: random_mat(rng, n, d),
            shared: random_mat(rng, n, d),
            image: random_mat(rng, n, d),
            negatives: random_mat(rng, n, d),
            teacher: random_mat(rng, n, d),
            labels: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    fn map_rows(&self, mut f: impl FnMut(&Mat) -> Mat) -> Self {
        Self {
            z: f(&self.z),
            zp: f(&self.zp),
            shared: f(&self.shared),
            image: f(&self.image),
            negatives: f(&self.negatives),
            teacher: f(&self.teacher),
            labels: self.labels.clone(),
        }
    }
}

const LOSS_NAMES: [&str; 9] = ["text", "info", "cons", "cma", "rank", "ima", "cml", "iml", "total"];

fn library_losses(fx: &Fixture, hp: &Hyperparams) -> [f64; 9] {
    let (z, zp, s, v, neg, t) = (
        batch(&fx.z),
        batch(&fx.zp),
        batch(&fx.shared),
        batch(&fx.image),
        batch(&fx.negatives),
        batch(&fx.teacher),
    );
    let labels: Vec<PairLabel> = fx.labels.iter().map(|&y| PairLabel::new(y).unwrap()).collect();
    let q_t = target_distribution(&t, hp.tau_dist).unwrap();
    let q_v = target_distribution(&v, hp.tau_dist).unwrap();
    let ranking = pseudo_rank_labels(&t).unwrap();
    let views = StudentViews {
        text_z: z.clone(),
        text_zprime: zp.clone(),
        shared_z: Some(s.clone()),
    };
    let targets = MultimodalTargets {
        image_teacher: v.clone(),
        negative_images: neg,
        q_t2t: q_t.clone(),
        q_v2v: q_v.clone(),
        ranking: ranking.clone(),
    };
    let (total, parts) = multimodal_objective(&views, &targets, hp).unwrap();
    [
        loss_text_infonce(&z, &zp, hp.tau).unwrap().value,
        loss_multimodal_infonce(&s, &v, hp.tau).unwrap().value,
        loss_consistency(&v, &s, &labels, hp.margin_m).unwrap().value,
        loss_cross_modal_kl(&s, &v, &q_t, &q_v, hp.tau_dist).unwrap().value,
        loss_rank(&z, &zp, ranking.perms(), hp.tau).unwrap().value,
        loss_intra_modal_kl(&z, &zp, &q_t, hp.tau_dist).unwrap().value,
        parts.cml.unwrap(),
        parts.iml.unwrap(),
        total.value,
    ]
}

fn oracle_losses(fx: &Fixture, hp: &Hyperparams) -> [f64; 9] {
    let n = fx.z.len();
    let q_t = self_distribution(&fx.teacher, hp.tau_dist);
    let q_v = self_distribution(&fx.image, hp.tau_dist);
    let perms = teacher_perms(&fx.teacher);
    let info = infonce(&fx.shared, &fx.image, hp.tau);
    let cma = cross_modal_kl(&fx.shared, &fx.image, &q_t, &q_v, hp.tau_dist);
    let rank = listmle(&cos_matrix(&fx.z, &fx.zp), &perms, hp.tau);
    let ima = intra_modal_kl(&fx.z, &fx.zp, &q_t, hp.tau_dist);
    let stacked_img: Mat = fx.image.iter().chain(&fx.negatives).cloned().collect();
    let stacked_txt: Mat = fx.shared.iter().chain(&fx.shared).cloned().collect();
    let stacked_labels: Vec<u8> = (0..2 * n).map(|i| u8::from(i < n)).collect();
    let cons_pairs = consistency(&stacked_img, &stacked_txt, &stacked_labels, hp.margin_m);
    let cml = cons_pairs + cma;
    let iml = rank + ima;
    [
        infonce(&fx.z, &fx.zp, hp.tau),
        info,
        consistency(&fx.image, &fx.shared, &fx.labels, hp.margin_m),
        cma,
        rank,
        ima,
        cml,
        iml,
        info + hp.lambda_w * cml + hp.mu_w * iml,
    ]
}

fn hyperparam_sets() -> [Hyperparams; 2] {
    [
        Hyperparams::default(),
        Hyperparams {
            tau: 0.1,
            tau_dist: 0.5,
            lambda_w: 0.3,
            mu_w: 0.7,
            margin_m: 0.1,
            ..Default::default()
        },
    ]
}

// ---------------------------------------------------------------- A2

fn a2_oracles() -> Outcome {
    let mut rng = rng(2);
    let mut worst = [0.0f64; 9];
    let mut cases = 0;
    for hp in hyperparam_sets() {
        for n in 2..=4 {
            for _ in 0..25 {
                let d = rng.random_range(2..=6);
                let fx = Fixture::random(&mut rng, n, d);
                let lib = library_losses(&fx, &hp);
                let ora = oracle_losses(&fx, &hp);
                for k in 0..9 {
                    worst[k] = worst[k].max(rel_err(lib[k], ora[k]));
                }
                cases += 1;
            }
        }
    }
    // ListMLE on raw scores, independent of the cosine chain.
    let mut listmle_worst = 0.0f64;
    for m in 1..=4 {
        let scores = random_mat(&mut rng, 3, m);
        let perms: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let mut p: Vec<usize> = (0..m).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let arr = Array2::from_shape_vec((3, m), scores.concat()).unwrap();
        let lib = loss_listmle(arr.view(), &perms, 0.05).unwrap().value;
        listmle_worst = listmle_worst.max(rel_err(lib, listmle(&scores, &perms, 0.05)));
    }
    let max = worst.iter().copied().fold(listmle_worst, f64::max);
    let detail = LOSS_NAMES
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n}={w:.0e}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        max < 1e-10,
        format!("{cases} batches n<=4, max rel err {max:.2e} [{detail} listmle_raw={listmle_worst:.0e}]"),
    )
}

// ---------------------------------------------------------------- A3

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

fn a3_listmle_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(3);
    let mut checked = 0;
    let mut ok = true;
    for m in 2..=5 {
        for _ in 0..20 {
            let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let arr = Array2::from_shape_vec((1, m), scores.clone()).unwrap();
            let mut descending: Vec<usize> = (0..m).collect();
            descending.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            let best_value = loss_listmle(arr.view(), &[descending.clone()], 0.05).unwrap().value;
            for p in permutations(&(0..m).collect::<Vec<_>>()) {
                let v = loss_listmle(arr.view(), std::slice::from_ref(&p), 0.05).unwrap().value;
                if v < best_value || (v == best_value && p != descending) {
                    ok = false;
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < Duration::from_secs(5),
        format!(
            "descending order is the unique minimizer over {checked} permutations (M=2..5) in {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- A4

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

fn a4_invariance() -> Outcome {
    let mut rng = rng(4);
    let (mut worst_scale, mut worst_perm) = (0.0f64, 0.0f64);
    let mut ok = true;
    for trial in 0..200 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=6);
        let fx = Fixture::random(&mut rng, n, d);
        let hp = hyperparam_sets()[trial % 2];
        let base = library_losses(&fx, &hp);
        let other = if trial < 100 {
            let factors: Vec<f64> = (0..6 * n).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
            let mut k = 0;
            fx.map_rows(|m| {
                m.iter()
                    .map(|r| {
                        let f = factors[k % factors.len()];
                        k += 1;
                        r.iter().map(|x| x * f).collect()
                    })
                    .collect()
            })
        } else {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut moved = fx.map_rows(|m| perm.iter().map(|&i| m[i].clone()).collect());
            moved.labels = perm.iter().map(|&i| fx.labels[i]).collect();
            moved
        };
        let after = library_losses(&other, &hp);
        for k in 0..9 {
            let err = (base[k] - after[k]).abs() / base[k].abs().max(1.0);
            if trial < 100 {
                worst_scale = worst_scale.max(err);
            } else {
                worst_perm = worst_perm.max(err);
            }
            ok &= close(base[k], after[k]);
        }
    }
    outcome(
        ok,
        format!("100 rescaling trials max dev {worst_scale:.1e}; 100 permutation trials max dev {worst_perm:.1e}"),
    )
}

// ---------------------------------------------------------------- A5

fn a5_kl() -> Outcome {
    let mut rng = rng(5);
    let (mut min_kl, mut max_self) = (f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(2..=10);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let mut logits = |_: ()| {
            Array2::from_shape_simple_fn((rows, cols), || scale * rng.random_range(-1.0..1.0))
        };
        let q = softmax_rows(logits(()).view(), 1.0).unwrap();
        let p = softmax_rows(logits(()).view(), 1.0).unwrap();
        min_kl = kl_rows(&q, &p).unwrap().iter().copied().fold(min_kl, f64::min);
        max_self = kl_rows(&q, &q).unwrap().iter().copied().fold(max_self, f64::max);
    }
    outcome(
        min_kl >= -1e-12 && max_self <= 1e-12,
        format!("1000 trials: min KL(Q||P) {min_kl:.3e}, max KL(Q||Q) {max_self:.3e}"),
    )
}

// ---------------------------------------------------------------- A6-A8

const A6_STEPS: usize = 500;

struct HeldOut {
    spearman: f64,
    alignment: f64,
}

fn held_out(model: &StudentModel, data: &SyntheticData, layer: EmbeddingLayer) -> HeldOut {
    let test = &data.test;
    let gold = test.ground_truth.as_ref().unwrap();
    let emb = model.embed(&test.text_features, layer).unwrap();
    let nn = gold_nearest_neighbors(gold).unwrap();
    HeldOut {
        spearman: similarity_spearman(&emb, gold).unwrap(),
        alignment: alignment_metric(&emb, &emb.select(&nn)).unwrap(),
    }
}

fn a6_config() -> TrainConfig {
    TrainConfig {
        steps: A6_STEPS,
        seed: 42,
        ..Default::default()
    }
}

fn initial_model(data: &SyntheticData, cfg: &TrainConfig) -> StudentModel {
    let model_cfg = ModelConfig {
        d_in: data.train.text_features.d(),
        hidden: cfg.hidden,
        text_dim: cfg.text_dim,
        shared_dim: data.train.image_teacher.d(),
        dropout: cfg.dropout,
    };
    StudentModel::init(model_cfg, derive_seed(cfg.seed, "model")).unwrap()
}

fn a6_end_to_end(data: &SyntheticData, full: &TrainOutcome, elapsed: Duration) -> Outcome {
    let cfg = a6_config();
    let init = held_out(&initial_model(data, &cfg), data, cfg.eval_layer);
    let trained = held_out(&full.best.model, data, cfg.eval_layer);

    let ablation_cfg = TrainConfig {
        hp: Hyperparams {
            lambda_w: 0.0,
            mu_w: 0.0,
            ..cfg.hp
        },
        ..cfg.clone()
    };
    let ablation = train_loop(&data.train, &data.dev, &ablation_cfg).unwrap();
    let ablated = held_out(&ablation.best.model, data, cfg.eval_layer);

    let pass = init.spearman.abs() < 0.2
        && trained.spearman >= 0.8
        && trained.alignment < init.alignment
        && trained.spearman >= ablated.spearman - 0.02
        && full.dead_parameters == 0
        && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "test rho {:.4} -> {:.4} (best dev {:.4} @ step {}, {} steps), ablation {:.4}, alignment {:.4} -> {:.4}, dead params {}, {:.1}s",
            init.spearman,
            trained.spearman,
            full.best.dev_metric,
            full.best.step,
            A6_STEPS,
            ablated.spearman,
            init.alignment,
            trained.alignment,
            full.dead_parameters,
            elapsed.as_secs_f64()
        ),
    )
}

fn a7_retrieval(data: &SyntheticData, full: &TrainOutcome) -> Outcome {
    let test = &data.test;
    let shared = full
        .best
        .model
        .embed(&test.text_features, EmbeddingLayer::SharedHead)
        .unwrap();
    let sim = cosine_sim_matrix(&shared, &test.image_teacher).unwrap();
    let (i2t, t2i) = recall_at_k(sim.view(), 1).unwrap();
    outcome(
        i2t >= 0.9 && t2i >= 0.9 && test.len() == 256,
        format!("R@1 image->text {i2t:.4}, text->image {t2i:.4} on {} pairs", test.len()),
    )
}

fn a8_determinism(data: &SyntheticData, full: &TrainOutcome) -> Outcome {
    let again = train_loop(&data.train, &data.dev, &a6_config()).unwrap();
    let (a, b) = (full.history.to_tsv(), again.history.to_tsv());
    outcome(
        a.as_bytes() == b.as_bytes(),
        format!("two seed-42 runs, history {} bytes each, identical: {}", a.len(), a == b),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        println!("{id} {name:<26} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    };
    report("A1", "gradient suite", a1_gradients());
    report("A2", "oracle equality", a2_oracles());
    report("A3", "ListMLE optimality", a3_listmle_optimality());
    report("A4", "invariance suite", a4_invariance());
    report("A5", "KL properties", a5_kl());

    let data = generate_synthetic(&GeneratorConfig {
        n_pairs: 2048,
        latent_dim: 16,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let teacher_bytes = checksum(&data);
    let start = Instant::now();
    let full = train_loop(&data.train, &data.dev, &a6_config()).unwrap();
    let elapsed = start.elapsed();
    report("A6", "synthetic end-to-end", a6_end_to_end(&data, &full, elapsed));
    report("A7", "retrieval", a7_retrieval(&data, &full));
    report("A8", "determinism", a8_determinism(&data, &full));
    assert_eq!(checksum(&data), teacher_bytes, "teacher embeddings were mutated");

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}

fn checksum(data: &SyntheticData) -> Vec<u64> {
    let sum = |b: &EmbeddingBatch| b.view().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits());
    let mut out = vec![sum(&data.train.image_teacher)];
    out.extend(data.train.text_teachers.iter().map(sum));
    out
}
