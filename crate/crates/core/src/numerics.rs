//! Dense kernels, softmax cross-entropy, optimizers and a finite-difference
//! gradient checker.
//!
//! Everything here computes in `f64`. Storage elsewhere in the crate is `f32`;
//! conversion happens at the boundary.
//!
//! Matrix products accumulate every output entry in increasing inner-index
//! order. Row-parallel execution only partitions output rows, so results are
//! bitwise identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row count above which products are split across the rayon pool.
const PAR_ROWS: usize = 64;
/// Tile edge for [`DenseMatrix::matmul_blocked`].
const BLOCK: usize = 64;

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, naive i-k-j loop.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_inner(other)?;
        let (n, p) = (self.cols, other.cols);
        let mut out = DenseMatrix::zeros(self.rows, p);
        let kernel = |(i, orow): (usize, &mut [f64])| {
            let arow = &self.data[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        };
        if self.rows >= PAR_ROWS {
            out.data.par_chunks_mut(p.max(1)).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(p.max(1)).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// Cache-blocked `self · other`. Bitwise identical to [`matmul`](Self::matmul).
    pub fn matmul_blocked(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_inner(other)?;
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = DenseMatrix::zeros(m, p);
        for i0 in (0..m).step_by(BLOCK) {
            for k0 in (0..n).step_by(BLOCK) {
                for j0 in (0..p).step_by(BLOCK) {
                    for i in i0..(i0 + BLOCK).min(m) {
                        for k in k0..(k0 + BLOCK).min(n) {
                            let a = self.data[i * n + k];
                            let brow = &other.data[k * p..(k + 1) * p];
                            let orow = &mut out.data[i * p..(i + 1) * p];
                            for j in j0..(j0 + BLOCK).min(p) {
                                orow[j] += a * brow[j];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; entry (i, j) is the dot product of row i and row j.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot form {}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let p = other.rows;
        let mut out = DenseMatrix::zeros(self.rows, p);
        let kernel = |(i, orow): (usize, &mut [f64])| {
            let a = self.row(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(a, other.row(j));
            }
        };
        if self.rows >= PAR_ROWS {
            out.data.par_chunks_mut(p.max(1)).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(p.max(1)).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    fn check_inner(&self, other: &DenseMatrix) -> Result<()> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numerical(format!("row {i} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Pairwise cosine similarities between the rows of `x` and `y`.
pub fn cosine_matrix(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols != y.cols {
        return Err(Error::Shape(format!(
            "cosine between dim {} and dim {}",
            x.cols, y.cols
        )));
    }
    let xn = l2_normalize_rows(x)?;
    let yn = l2_normalize_rows(y)?;
    let mut c = xn.matmul_nt(&yn)?;
    c.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(c)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Cross-entropy `-log softmax(logits)[target]` and its gradient with
/// respect to the logits.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Usage(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Binary cross-entropy on a single logit; returns (loss, d loss / d logit).
pub fn sigmoid_bce(logit: f64, target: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    // log(1 + e^-|z|) form avoids overflow on both tails
    let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
    let loss = if target {
        softplus(-logit)
    } else {
        softplus(logit)
    };
    (loss, p - if target { 1.0 } else { 0.0 })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |fd_i - g_i| / max(1, |g_i|)`.
pub fn grad_check<F>(f: F, analytic: &[f64], theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters have {}",
            analytic.len(),
            theta.len()
        )));
    }
    let mut point = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let fp = f(&point);
        point[i] = orig - h;
        let fm = f(&point);
        point[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective while perturbing coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let moments = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("gradient {i} is not finite")));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "optimizer sized for {} parameters, got {}",
                        self.m.len(),
                        params.len()
                    )));
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
