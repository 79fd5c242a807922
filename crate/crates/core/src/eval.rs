//! Measurement: rank correlation, alignment and uniformity, retrieval
//! recall, and scatter export for anisotropy plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim_matrix, log_sum_exp, EmbeddingBatch};

/// Fractional ranks (1-based); tied values share their average rank.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape("spearman", pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(Error::param("pred", "need at least 2 values"));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::param("pred/gold", "values must be finite"));
    }
    let rp = fractional_ranks(pred);
    let rg = fractional_ranks(gold);
    let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    if constant(&rp) {
        return Err(Error::UndefinedCorrelation("pred"));
    }
    if constant(&rg) {
        return Err(Error::UndefinedCorrelation("gold"));
    }
    Ok(pearson(&rp, &rg).expect("non-constant ranks"))
}

fn unit(x: &EmbeddingBatch) -> Result<Array2<f64>> {
    Ok(x.normalized()?.into_inner())
}

/// Mean squared distance between normalized positive pairs.
pub fn alignment_metric(x: &EmbeddingBatch, x_pos: &EmbeddingBatch) -> Result<f64> {
    if x.n() != x_pos.n() || x.d() != x_pos.d() {
        return Err(Error::shape(
            "alignment_metric",
            format!("{}x{}", x.n(), x.d()),
            format!("{}x{}", x_pos.n(), x_pos.d()),
        ));
    }
    let (a, b) = (unit(x)?, unit(x_pos)?);
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(r, s)| r.iter().zip(s.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum();
    Ok(total / x.n() as f64)
}

/// Log of the mean Gaussian potential `exp(-2 |f(x_i) - f(x_j)|^2)` over
/// distinct unordered pairs `i < j`.
pub fn uniformity_metric(x: &EmbeddingBatch) -> Result<f64> {
    let n = x.n();
    if n < 2 {
        return Err(Error::param("x", format!("uniformity needs 2 rows, got {n}")));
    }
    let u = unit(x)?;
    let gram = u.dot(&u.t());
    let mut exponents = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            // |a - b|^2 = 2 - 2 <a, b> on the unit sphere
            let sq = (2.0 - 2.0 * gram[[i, j]]).max(0.0);
            exponents.push(-2.0 * sq);
        }
    }
    let count = exponents.len() as f64;
    Ok(log_sum_exp(ndarray::ArrayView1::from(&exponents)) - count.ln())
}

fn top_k_contains(scores: impl Iterator<Item = f64>, target: usize, k: usize) -> bool {
    let scores: Vec<f64> = scores.collect();
    let t = scores[target];
    // items ranked ahead of the target: strictly higher, or equal with a
    // smaller index
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count();
    ahead < k
}

/// Recall@k in both directions for a square matrix whose row `i` and column
/// `i` are the true match. Returns `(image_to_text, text_to_image)` where rows
/// index texts and columns index images.
pub fn recall_at_k(sim: ArrayView2<'_, f64>, k: usize) -> Result<(f64, f64)> {
    let (n, m) = sim.dim();
    if n != m {
        return Err(Error::shape("recall_at_k", format!("square, {n} rows"), m));
    }
    if k == 0 || k > n {
        return Err(Error::param("k", format!("must lie in 1..={n}, got {k}")));
    }
    let t2i = (0..n)
        .filter(|&i| top_k_contains(sim.row(i).iter().copied(), i, k))
        .count();
    let i2t = (0..n)
        .filter(|&j| top_k_contains(sim.column(j).iter().copied(), j, k))
        .count();
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}

/// Predicted and gold similarity for every unordered pair `i < j`.
pub fn pairwise_scores(
    embeddings: &EmbeddingBatch,
    gold_latents: &EmbeddingBatch,
) -> Result<Vec<(f64, f64)>> {
    if embeddings.n() != gold_latents.n() {
        return Err(Error::shape("pairwise_scores", embeddings.n(), gold_latents.n()));
    }
    let pred = cosine_sim_matrix(embeddings, embeddings)?.into_inner();
    let gold = cosine_sim_matrix(gold_latents, gold_latents)?.into_inner();
    let n = embeddings.n();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((pred[[i, j]], gold[[i, j]]));
        }
    }
    Ok(out)
}

/// Spearman between predicted and gold pairwise similarities.
pub fn similarity_spearman(embeddings: &EmbeddingBatch, gold_latents: &EmbeddingBatch) -> Result<f64> {
    let pairs = pairwise_scores(embeddings, gold_latents)?;
    let (pred, gold): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    spearman(&pred, &gold)
}

/// For each item, its nearest other item under the gold similarity.
pub fn gold_nearest_neighbors(gold_latents: &EmbeddingBatch) -> Result<Vec<usize>> {
    let gold = cosine_sim_matrix(gold_latents, gold_latents)?.into_inner();
    let n = gold.nrows();
    if n < 2 {
        return Err(Error::param("gold_latents", "need at least 2 rows"));
    }
    Ok((0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .max_by(|&a, &b| gold[[i, a]].total_cmp(&gold[[i, b]]).then(b.cmp(&a)))
                .expect("n >= 2")
        })
        .collect())
}

pub const SCATTER_HEADER: &str = "# gold\tcosine";

/// Writes `(cosine, gold)` pairs as a two-column TSV (gold first) with nine
/// significant digits.
pub fn export_anisotropy_scatter(pairs: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(32 * (pairs.len() + 1));
    out.push_str(SCATTER_HEADER);
    out.push('\n');
    for (i, &(cosine, gold)) in pairs.iter().enumerate() {
        if !cosine.is_finite() || !gold.is_finite() {
            return Err(Error::param("pairs", format!("non-finite value in pair {i}")));
        }
        writeln!(out, "{gold:.8e}\t{cosine:.8e}").expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scatter(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let mut cols = l.split('\t').map(str::parse::<f64>);
            match (cols.next(), cols.next(), cols.next()) {
                (Some(Ok(gold)), Some(Ok(cos)), None) => Ok((cos, gold)),
                _ => Err(Error::format(path, format!("bad scatter line `{l}`"))),
            }
        })
        .collect()
}

/// Everything `eval` reports for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub spearman: f64,
    pub alignment: f64,
    pub uniformity: f64,
    /// `k -> (image_to_text, text_to_image)`.
    pub recall_at: BTreeMap<usize, (f64, f64)>,
}

impl MetricReport {
    /// `key<TAB>value` lines under a `#` header, stable key order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# metric\tvalue\n");
        let _ = writeln!(out, "spearman_x100\t{}", self.spearman * 100.0);
        let _ = writeln!(out, "alignment\t{}", self.alignment);
        let _ = writeln!(out, "uniformity\t{}", self.uniformity);
        for (k, (i2t, t2i)) in &self.recall_at {
            let _ = writeln!(out, "recall@{k}_i2t\t{i2t}");
            let _ = writeln!(out, "recall@{k}_t2i\t{t2i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad report line `{line}`")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("bad number in `{line}`")))?;
            values.insert(k.to_owned(), v);
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("report missing `{k}`")))
        };
        let mut recall_at = BTreeMap::new();
        for key in values.keys() {
            if let Some(k) = key
                .strip_prefix("recall@")
                .and_then(|r| r.strip_suffix("_i2t"))
            {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad recall key `{key}`")))?;
                recall_at.insert(k, (get(key)?, get(&format!("recall@{k}_t2i"))?));
            }
        }
        Ok(Self {
            spearman: get("spearman_x100")? / 100.0,
            alignment: get("alignment")?,
            uniformity: get("uniformity")?,
            recall_at,
        })
    }
}
