//! Truncated SVD by Householder QR followed by one-sided Jacobi on `R`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// `Y ≈ U·diag(sigma)·Vᵀ` with `U` batch×d and `V` D×d.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.rank(), |i, k| self.u.get(i, k) * self.sigma[k]);
        us.matmul_nt(&self.v).expect("factor shapes agree")
    }
}

/// Upper-triangular `R` (min(m,n) × n) with `RᵀR = YᵀY`, stored by column.
fn householder_r(y: &Matrix<f64>) -> Vec<Vec<f64>> {
    let (m, n) = y.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| y.get(i, j)).collect()).collect();
    let r = m.min(n);
    for j in 0..r {
        let norm = cols[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut h: Vec<f64> = cols[j][j..].to_vec();
        h[0] -= alpha;
        let hh: f64 = h.iter().map(|v| v * v).sum();
        if hh == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(j) {
            let proj: f64 = h.iter().zip(&col[j..]).map(|(a, b)| a * b).sum::<f64>() * 2.0 / hh;
            for (c, hv) in col[j..].iter_mut().zip(&h) {
                *c -= proj * hv;
            }
        }
    }
    cols.into_iter().map(|mut c| {
        c.truncate(r);
        c
    }).collect()
}

/// Rank-`d` factorization with descending singular values. Each column of
/// `V` has its largest-magnitude entry made positive.
pub fn truncated_svd<T: Scalar>(y: &Matrix<T>, d: usize) -> Result<SvdFactors<T>> {
    let (m, n) = y.shape();
    if m == 0 || n == 0 {
        return Err(Error::Empty("svd of an empty matrix".into()));
    }
    if d == 0 || d > m.min(n) {
        return Err(Error::OutOfRange(format!("svd rank {d} for a {m}x{n} matrix")));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let y64: Matrix<f64> = y.cast();
    let mut a = householder_r(&y64);
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    order.truncate(d);

    let top = norms[order[0]];
    let mut u = Matrix::<T>::zeros(m, d);
    let mut vout = Matrix::<T>::zeros(n, d);
    let mut sigma = Vec::with_capacity(d);
    for (k, &j) in order.iter().enumerate() {
        let mut col = v[j].clone();
        let pivot = col.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > col[best].abs() { i } else { best });
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        let s = norms[j];
        let zero = s <= top * 1e-13 || s == 0.0;
        sigma.push(T::of(if zero { 0.0 } else { s }));
        for (i, &x) in col.iter().enumerate() {
            vout.set(i, k, T::of(x));
        }
        if !zero {
            for i in 0..m {
                let proj: f64 = y64.row(i).iter().zip(&col).map(|(a, b)| a * b).sum();
                u.set(i, k, T::of(proj / s));
            }
        }
    }
    Ok(SvdFactors { u, sigma, v: vout })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
