//! Variance-preserving noise schedule, the x₀-predicting denoiser, and the
//! deterministic DDIM machinery used by the theory checks.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nncore::{Activation, Mlp, MlpCache, ParamTensor};
use crate::scalar::Scalar;
use rand::Rng;

pub const TIME_EMBED_DIM: usize = 16;

/// Linear β schedule; index 0 of the cumulative products is the clean
/// state (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_first: f64, beta_last: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps", "need at least one diffusion step"));
        }
        if !(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0) {
            return Err(Error::config(
                "beta_first",
                format!("need 0 < beta_first <= beta_last < 1, got {beta_first} and {beta_last}"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_first
                } else {
                    beta_first + (beta_last - beta_first) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * (1.0 - b));
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn checked(&self, t: usize) -> Result<usize> {
        if t > self.steps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(t)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.checked(t)?])
    }

    /// Signal coefficient `a_t = sqrt(ᾱ_t)`.
    pub fn a(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// Noise coefficient `s_t = sqrt(1 − ᾱ_t)`.
    pub fn s(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }
}

/// `sqrt(ᾱ)·e + sqrt(1 − ᾱ)·noise` for an explicit `ᾱ`.
pub fn diffuse_with<T: Scalar>(e: &Matrix<T>, noise: &Matrix<T>, alpha_bar: f64) -> Result<Matrix<T>> {
    let (a, s) = (T::of(alpha_bar.sqrt()), T::of((1.0 - alpha_bar).sqrt()));
    e.zip_with(noise, |x, n| a * x + s * n)
}

/// Forward process at step `t` (`t = 0` returns `e`).
pub fn forward_diffuse<T: Scalar>(
    e: &Matrix<T>,
    noise: &Matrix<T>,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Matrix<T>> {
    diffuse_with(e, noise, schedule.alpha_bar(t)?)
}

/// Sinusoidal embedding: `dim/2` sines followed by the matching cosines.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

/// `μ_θ`: MLP over `[z ‖ time embedding]` predicting the clean embedding.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub dim: usize,
    pub mlp: Mlp<T>,
}

pub struct DenoiserCache<T> {
    mlp: MlpCache<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::new(name, &[dim + TIME_EMBED_DIM, 4 * dim, dim], Activation::Relu, Activation::Identity, rng)?;
        Ok(Denoiser { dim, mlp })
    }

    fn input(&self, z: &Matrix<T>, t: usize) -> Result<Matrix<T>> {
        if z.cols() != self.dim {
            return Err(Error::shape(format!("denoiser expects {} columns, got {}", self.dim, z.cols())));
        }
        let emb = time_embedding(t as f64, TIME_EMBED_DIM);
        Ok(Matrix::from_fn(z.rows(), self.dim + TIME_EMBED_DIM, |i, j| {
            if j < self.dim {
                z.get(i, j)
            } else {
                T::of(emb[j - self.dim])
            }
        }))
    }

    pub fn predict(&self, z: &Matrix<T>, t: usize) -> Result<Matrix<T>> {
        self.mlp.forward(&self.input(z, t)?)
    }

    pub fn predict_cached(&self, z: &Matrix<T>, t: usize) -> Result<(Matrix<T>, DenoiserCache<T>)> {
        let (out, mlp) = self.mlp.forward_cached(&self.input(z, t)?)?;
        Ok((out, DenoiserCache { mlp }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `z`.
    pub fn backward(&mut self, cache: &DenoiserCache<T>, dout: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.mlp.backward(&cache.mlp, dout)?.col_block(0, self.dim))
    }

    /// Deterministic x₀-parameterized DDIM chain from `z` at `t_start` down
    /// to 0 in steps of `stride`.
    pub fn reverse_chain(
        &self,
        z: &Matrix<T>,
        t_start: usize,
        stride: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<Matrix<T>> {
        if stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        let mut t = t_start;
        let mut z = z.clone();
        while t > 0 {
            let next = t.saturating_sub(stride);
            let x0 = self.predict(&z, t)?;
            let (a, s) = (schedule.a(t)?, schedule.s(t)?);
            let (an, sn) = (schedule.a(next)?, schedule.s(next)?);
            z = if s == 0.0 {
                x0
            } else {
                x0.zip_with(&z, |x, zt| {
                    let eps = (zt.f64() - a * x.f64()) / s;
                    T::of(an * x.f64() + sn * eps)
                })?
            };
            t = next;
        }
        Ok(z)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.mlp.params_mut()
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.mlp.params()
    }
}

/// Noise predictor `ε(v, t | cond)`; `None` is the unconditional branch.
pub trait NoisePredictor {
    fn predict(&self, v: &[f64], t: f64, cond: Option<&[f64]>) -> Vec<f64>;
}

/// `(1 + ω)·ε(v,t|s) − ω·ε(v,t|∅)`; with no condition the unconditional
/// prediction is returned.
pub fn guided_prediction<P: NoisePredictor + ?Sized>(
    predictor: &P,
    v: &[f64],
    t: f64,
    cond: Option<&[f64]>,
    omega: f64,
) -> Vec<f64> {
    let uncond = predictor.predict(v, t, None);
    match cond {
        None => uncond,
        Some(s) => predictor
            .predict(v, t, Some(s))
            .iter()
            .zip(&uncond)
            .map(|(c, u)| (1.0 + omega) * c - omega * u)
            .collect(),
    }
}

/// One deterministic DDIM step (`t_to < t_from`) or inversion step
/// (`t_to > t_from`), with the guided prediction taken at the source.
pub fn ddim_transport<P: NoisePredictor + ?Sized>(
    v: &[f64],
    t_from: usize,
    t_to: usize,
    predictor: &P,
    cond: Option<&[f64]>,
    omega: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if t_from == t_to {
        return Err(Error::OutOfRange(format!("transport from {t_from} to itself")));
    }
    let (af, sf) = (schedule.a(t_from)?, schedule.s(t_from)?);
    let (at, st) = (schedule.a(t_to)?, schedule.s(t_to)?);
    if af == 0.0 {
        return Err(Error::OutOfRange(format!("signal coefficient vanishes at t = {t_from}")));
    }
    let eps = guided_prediction(predictor, v, t_from as f64, cond, omega);
    Ok(v.iter().zip(&eps).map(|(x, e)| at / af * (x - sf * e) + st * e).collect())
}

/// `g_s = ε(v, t | s) − ε(v, t | ∅)`.
pub fn semantic_gradient<P: NoisePredictor + ?Sized>(predictor: &P, v: &[f64], t: f64, s: &[f64]) -> Vec<f64> {
    let c = predictor.predict(v, t, Some(s));
    let u = predictor.predict(v, t, None);
    c.iter().zip(&u).map(|(a, b)| a - b).collect()
}

/// `κ = Δω·(a_T·s_{T−k} − a_{T−k}·s_T)/a_{T−k}` from raw coefficients.
pub fn kappa_from(a_t: f64, s_t: f64, a_tk: f64, s_tk: f64, omega_gap: f64) -> Result<f64> {
    if a_tk == 0.0 {
        return Err(Error::OutOfRange("signal coefficient at T - k is zero".into()));
    }
    Ok(omega_gap * (a_t * s_tk - a_tk * s_t) / a_tk)
}

pub fn kappa(schedule: &DiffusionSchedule, k: usize, omega_l: f64, omega_w: f64) -> Result<f64> {
    let t = schedule.steps();
    if k == 0 || k > t {
        return Err(Error::OutOfRange(format!("re-denoising span k = {k} with T = {t}")));
    }
    kappa_from(schedule.a(t)?, schedule.s(t)?, schedule.a(t - k)?, schedule.s(t - k)?, omega_l - omega_w)
}

/// `v'_T = v_T + κ·g_s`.
pub fn informative_noise_closed_form(
    v_t: &[f64],
    g_s: &[f64],
    schedule: &DiffusionSchedule,
    k: usize,
    omega_l: f64,
    omega_w: f64,
) -> Result<Vec<f64>> {
    let kap = kappa(schedule, k, omega_l, omega_w)?;
    Ok(v_t.iter().zip(g_s).map(|(v, g)| v + kap * g).collect())
}
