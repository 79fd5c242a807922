//! Dense numeric primitives shared by every objective.
//!
//! Everything here operates on row-major `f64` matrices: rows are items,
//! columns are embedding dimensions. Similarities are always cosine, so every
//! downstream loss is invariant to per-row positive rescaling of its inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const KL_EPSILON: f64 = 1e-12;

const NORM_TOLERANCE: f64 = 1e-6;
const STOCHASTIC_TOLERANCE: f64 = 1e-6;

/// A batch of row vectors living in one representation space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps a matrix after checking it is non-empty and finite.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 {
            return Err(Error::Empty("embedding batch has no rows"));
        }
        if d == 0 {
            return Err(Error::Empty("embedding batch has no columns"));
        }
        check_finite(data.view())?;
        Ok(Self {
            data,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Empty("embedding batch has no rows"));
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::shape(
                    "EmbeddingBatch::from_rows",
                    format!("{d} columns"),
                    format!("{} columns in row {i}", row.len()),
                ));
            }
            flat.extend_from_slice(row);
        }
        let data = Array2::from_shape_vec((n, d), flat).expect("length checked above");
        Self::new(data)
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let norms = row_norms(self.data.view())?;
        let mut data = self.data.clone();
        for (mut row, norm) in data.rows_mut().into_iter().zip(norms.iter()) {
            row /= *norm;
        }
        Ok(Self {
            data,
            normalized: true,
        })
    }

    /// Marks the batch as normalized after verifying every row norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (i, row) in self.data.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::param(
                    "normalized",
                    format!("row {i} has norm {norm}, expected 1"),
                ));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Gathers the listed rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), rows),
            normalized: self.normalized,
        }
    }
}

/// Pairwise cosine similarities between the rows of two batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    data: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        check_finite(data.view())?;
        for ((i, j), v) in data.indexed_iter() {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(v) {
                return Err(Error::param(
                    "similarity",
                    format!("entry ({i}, {j}) = {v} outside [-1, 1]"),
                ));
            }
        }
        Ok(Self { data })
    }
}

/// A row-stochastic matrix: each row is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDistribution {
    data: Array2<f64>,
}

impl RowDistribution {
    /// Validates non-negativity and that each row sums to one within 1e-6.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        check_finite(data.view())?;
        for (i, row) in data.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::NotStochastic {
                    name: "distribution",
                    row: i,
                    sum: row.sum(),
                });
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(Error::NotStochastic {
                    name: "distribution",
                    row: i,
                    sum,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Restricts the distribution to a sub-batch and renormalizes each row.
    pub fn select(&self, rows: &[usize]) -> Self {
        let sub = self.data.select(Axis(0), rows).select(Axis(1), rows);
        let mut data = sub;
        for mut row in data.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        Self { data }
    }
}

fn check_finite(data: ArrayView2<'_, f64>) -> Result<()> {
    if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(())
}

/// L2 norm of every row; a zero row is an error naming its index.
pub fn row_norms(data: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let mut norms = Array1::zeros(data.nrows());
    for (i, row) in data.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        norms[i] = norm;
    }
    Ok(norms)
}

fn unit_rows(data: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = row_norms(data)?;
    let mut unit = data.to_owned();
    Zip::from(unit.rows_mut())
        .and(&norms)
        .for_each(|mut row, &norm| row /= norm);
    Ok((unit, norms))
}

/// `out[i][j] = <a_i, b_j> / (|a_i| |b_j|)`.
pub fn cosine_sim_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    Ok(SimilarityMatrix {
        data: cosine_forward(a.view(), b.view())?.sim,
    })
}

/// Cached forward pass of a cosine similarity matrix, kept for the backward pass.
pub(crate) struct CosineCache {
    pub sim: Array2<f64>,
    a_unit: Array2<f64>,
    b_unit: Array2<f64>,
    a_norm: Array1<f64>,
    b_norm: Array1<f64>,
}

pub(crate) fn cosine_forward(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CosineCache> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            format!("{} columns", a.ncols()),
            format!("{} columns", b.ncols()),
        ));
    }
    let (a_unit, a_norm) = unit_rows(a)?;
    let (b_unit, b_norm) = unit_rows(b)?;
    let mut sim = a_unit.dot(&b_unit.t());
    sim.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(CosineCache {
        sim,
        a_unit,
        b_unit,
        a_norm,
        b_norm,
    })
}

impl CosineCache {
    /// Gradient with respect to the left operand given `dL/dsim`.
    pub fn backward_left(&self, grad_sim: ArrayView2<'_, f64>) -> Array2<f64> {
        let g_unit = grad_sim.dot(&self.b_unit);
        unit_backward(&self.a_unit, &self.a_norm, g_unit)
    }

    /// Gradient with respect to the right operand given `dL/dsim`.
    pub fn backward_right(&self, grad_sim: ArrayView2<'_, f64>) -> Array2<f64> {
        let g_unit = grad_sim.t().dot(&self.a_unit);
        unit_backward(&self.b_unit, &self.b_norm, g_unit)
    }
}

// d(x/|x|)/dx applied to an upstream gradient: (g - <g, u> u) / |x|.
fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, mut grad: Array2<f64>) -> Array2<f64> {
    Zip::from(grad.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &norm| {
            let proj = g.dot(&u);
            g.scaled_add(-proj, &u);
            g /= norm;
        });
    grad
}

/// Row-wise `log(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp_rows(logits: ArrayView2<'_, f64>) -> Array1<f64> {
    logits.map_axis(Axis(1), |row| log_sum_exp(row))
}

pub fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows_raw(logits: ArrayView2<'_, f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Temperature-scaled softmax of every row, stabilized by max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<RowDistribution> {
    check_temperature("temperature", temperature)?;
    check_finite(logits)?;
    Ok(RowDistribution {
        data: softmax_rows_raw(logits, temperature),
    })
}

pub(crate) fn check_temperature(name: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param(name, format!("must be positive, got {t}")));
    }
    Ok(())
}

/// `out[i] = sum_j q_ij ln(q_ij / max(p_ij, eps))`, with `0 ln 0 = 0`.
pub fn kl_rows(q: &RowDistribution, p: &RowDistribution) -> Result<Array1<f64>> {
    kl_rows_raw(q.view(), p.view())
}

pub(crate) fn kl_rows_raw(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if q.dim() != p.dim() {
        return Err(Error::shape(
            "kl_rows",
            format!("{:?}", q.dim()),
            format!("{:?}", p.dim()),
        ));
    }
    let mut out = Array1::zeros(q.nrows());
    Zip::from(&mut out)
        .and(q.rows())
        .and(p.rows())
        .for_each(|o, q_row, p_row| {
            *o = q_row
                .iter()
                .zip(p_row.iter())
                .filter(|(&qv, _)| qv > 0.0)
                .map(|(&qv, &pv)| qv * (qv.ln() - pv.max(KL_EPSILON).ln()))
                .sum();
        });
    Ok(out)
}
