//! Loss terms and their weighted combination. Every loss returns its value
//! together with the gradient with respect to its matrix inputs.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{sigmoid, softplus, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// BPR share; reconstruction gets `1 - lambda_b`.
    pub lambda_b: f64,
    pub lambda_c: f64,
    /// Collaboration balance.
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_b: 0.7, lambda_c: 5e-3, lambda_l: 1e-3, lambda_g: 5e-3, tau: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_b) {
            return Err(Error::config("lambda_b", "must lie in [0, 1]"));
        }
        for (k, v) in [("lambda_c", self.lambda_c), ("lambda_l", self.lambda_l), ("lambda_g", self.lambda_g)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, "must be a non-negative number"));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        Ok(())
    }
}

/// Unweighted loss values. Channel terms are already summed over channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub bpr: f64,
    pub con: f64,
    pub balance: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.bpr, self.con, self.balance, self.reg, self.total].iter().all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.recon += other.recon;
        self.bpr += other.bpr;
        self.con += other.con;
        self.balance += other.balance;
        self.reg += other.reg;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            recon: self.recon * s,
            bpr: self.bpr * s,
            con: self.con * s,
            balance: self.balance * s,
            reg: self.reg * s,
            total: self.total * s,
        }
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} recon={:.6} bpr={:.6} con={:.6} balance={:.6} reg={:.6}",
            self.total, self.recon, self.bpr, self.con, self.balance, self.reg
        )
    }
}

/// Fills in `total` from the component values.
pub fn total_loss(parts: LossBreakdown, w: &LossWeights) -> LossBreakdown {
    let total = (1.0 - w.lambda_b) * parts.recon
        + w.lambda_b * parts.bpr
        + w.lambda_c * parts.con
        + w.lambda_l * parts.balance
        + w.lambda_g * parts.reg;
    LossBreakdown { total, ..parts }
}

/// Row-normalized copy (flat, row-major, f64) and the original row norms.
fn unit_rows(m: &Matrix<impl Scalar>) -> (Vec<f64>, Vec<f64>) {
    let d = m.cols();
    let mut unit = vec![0.0; m.rows() * d];
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r = m.row(i);
        let n = crate::linalg::norm_f64(r);
        if n > 0.0 {
            for (u, v) in unit[i * d..(i + 1) * d].iter_mut().zip(r) {
                *u = v.f64() / n;
            }
        }
        norms.push(n);
    }
    (unit, norms)
}

/// In-batch InfoNCE with cosine similarity: row `i` of `generated` is the
/// positive for row `i` of `items`, every other row a negative. Zero-norm
/// rows have cosine 0 with everything.
///
/// Returns `(loss, d/d generated, d/d items)`.
pub fn infonce_loss<T: Scalar>(
    generated: &Matrix<T>,
    items: &Matrix<T>,
    tau: f64,
) -> Result<(f64, Matrix<T>, Matrix<T>)> {
    if generated.shape() != items.shape() || generated.rows() == 0 {
        return Err(Error::shape(format!(
            "infonce on {:?} vs {:?}",
            generated.shape(),
            items.shape()
        )));
    }
    let (n, d) = generated.shape();
    let (a, na) = unit_rows(generated);
    let (b, nb) = unit_rows(items);
    let mut loss = 0.0;
    // logits, then overwritten in place by d loss / d cos
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        let row = &mut g[i * n..(i + 1) * n];
        for (j, out) in row.iter_mut().enumerate() {
            *out = ai.iter().zip(&b[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let positive = row[i];
        let mut z = 0.0;
        for l in row.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        loss += mx + z.ln() - positive;
        for (j, l) in row.iter_mut().enumerate() {
            *l = (*l / z - if i == j { 1.0 } else { 0.0 }) / tau;
        }
    }
    // d loss / d unit vectors: G·B and Gᵀ·A
    let mut da = vec![0.0; n * d];
    let mut db = vec![0.0; n * d];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let gij = g[i * n + j];
            let bj = &b[j * d..(j + 1) * d];
            for (o, x) in da[i * d..(i + 1) * d].iter_mut().zip(bj) {
                *o += gij * x;
            }
            for (o, x) in db[j * d..(j + 1) * d].iter_mut().zip(ai) {
                *o += gij * x;
            }
        }
    }
    // through the normalization x / |x|
    let back = |unit: &[f64], norms: &[f64], du: &[f64]| -> Matrix<T> {
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            if norms[i] == 0.0 {
                continue;
            }
            let (u, g) = (&unit[i * d..(i + 1) * d], &du[i * d..(i + 1) * d]);
            let proj: f64 = g.iter().zip(u).map(|(x, y)| x * y).sum();
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = T::of((g[k] - proj * u[k]) / norms[i]);
            }
        }
        out
    };
    Ok((loss, back(&a, &na, &da), back(&b, &nb, &db)))
}

/// `-Σ ln σ(pos - neg)`; returns the loss and `d/d pos` (`d/d neg` is its
/// negation).
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pos.len() != neg.len() {
        return Err(Error::shape(format!("{} positive vs {} negative scores", pos.len(), neg.len())));
    }
    let mut loss = 0.0;
    let grad = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| {
            let x = p - n;
            loss += softplus(-x);
            -sigmoid(-x)
        })
        .collect();
    Ok((loss, grad))
}

/// Frobenius norm of the generated batch divided by its row count.
pub fn balance_loss<T: Scalar>(generated: &Matrix<T>) -> (f64, Matrix<T>) {
    let rows = generated.rows().max(1) as f64;
    let norm = generated.frobenius_norm();
    if norm == 0.0 {
        return (0.0, Matrix::zeros(generated.rows(), generated.cols()));
    }
    (norm / rows, generated.map(|v| T::of(v.f64() / (norm * rows))))
}

/// Sum of squared entries over the given rows; gradient is `2x`.
pub fn reg_loss<'a, T: Scalar + 'a>(rows: impl IntoIterator<Item = &'a [T]>) -> f64 {
    rows.into_iter().flat_map(|r| r.iter()).map(|v| v.f64() * v.f64()).sum()
}

/// `Σ_i |e_i - ê_i|²`; returns the loss and `d/d ê` (`d/d e` is its
/// negation).
pub fn reconstruction_loss<T: Scalar>(items: &Matrix<T>, predicted: &Matrix<T>) -> Result<(f64, Matrix<T>)> {
    let diff = predicted.sub(items)?;
    let loss = diff.data().iter().map(|v| v.f64() * v.f64()).sum();
    Ok((loss, diff.scale(T::of(2.0))))
}
