//! Post-training analyses: latent SNR curves, singular-vector alignment of
//! the diffusion input and output, numerical checks of the two informative
//! noise theorems on controlled toys, and embedding export.

use crate::diffusion::{ddim_transport, semantic_gradient, kappa, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::linalg::{norm_f64, Matrix};
use crate::model::{gaussian, InfoDcl};
use crate::psnet::truncated_svd;
use crate::scalar::Scalar;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt::Write;

/// `mean² / variance` with the unbiased variance.
pub fn snr(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Degenerate("snr needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok(mean * mean / var)
}

/// Coordinate-wise SNR of a sample matrix (rows are samples), averaged
/// over columns. Constant columns are skipped.
pub fn matrix_snr<T: Scalar>(m: &Matrix<T>) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    let mut col = vec![0.0; m.rows()];
    for j in 0..m.cols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = m.get(i, j).f64();
        }
        match snr(&col) {
            Ok(v) => {
                total += v;
                used += 1;
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every coordinate is constant".into()));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrCurve {
    pub steps: Vec<usize>,
    pub gaussian: Vec<f64>,
    pub informative: Vec<f64>,
    pub samples: usize,
}

impl SnrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,snr_gaussian,snr_informative\n");
        for ((t, g), i) in self.steps.iter().zip(&self.gaussian).zip(&self.informative) {
            let _ = writeln!(s, "{t},{g},{i}");
        }
        s
    }

    pub fn at(&self, t: usize) -> Option<(f64, f64)> {
        self.steps.iter().position(|&x| x == t).map(|p| (self.gaussian[p], self.informative[p]))
    }
}

/// Paired SNR curves of `z_t` under raw and informative noise for one
/// channel. Items are sampled without replacement when the catalog is large
/// enough, with replacement otherwise; both curves share the same items and
/// Gaussian draws. `stride` thins the timesteps; `T` is always included.
pub fn snr_curve<T: Scalar>(
    model: &InfoDcl<T>,
    channel: usize,
    samples: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<SnrCurve> {
    if samples < 2 || stride == 0 {
        return Err(Error::config("snr_samples", "need at least two samples and a positive stride"));
    }
    if channel >= model.channels.len() {
        return Err(Error::OutOfRange(format!("channel {channel}")));
    }
    let n = model.items.shape[0];
    let items: Vec<u32> = if samples <= n {
        let mut v: Vec<u32> = sample(rng, n, samples).into_iter().map(|i| i as u32).collect();
        v.sort_unstable();
        v
    } else {
        (0..samples).map(|_| rng.random_range(0..n as u32)).collect()
    };
    let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
    let e = model.items.as_matrix().gather_rows(&idx);
    let eps = gaussian::<T>(items.len(), model.dim(), rng);
    let info = model.informative_noise(channel, &items, &eps)?;
    let big_t = model.schedule.steps();
    let mut steps: Vec<usize> = (1..=big_t).step_by(stride).collect();
    if steps.last() != Some(&big_t) {
        steps.push(big_t);
    }
    let mut curve = SnrCurve { steps: Vec::new(), gaussian: Vec::new(), informative: Vec::new(), samples: items.len() };
    for t in steps {
        let (a, s) = (model.schedule.a(t)?, model.schedule.s(t)?);
        let mix = |noise: &Matrix<T>| e.zip_with(noise, |x, z| T::of(a * x.f64() + s * z.f64()));
        curve.gaussian.push(matrix_snr(&mix(&eps)?)?);
        curve.informative.push(matrix_snr(&mix(&info)?)?);
        curve.steps.push(t);
    }
    Ok(curve)
}

/// `|cos|` between matching top right-singular vectors of two matrices
/// with the same column count.
pub fn singular_vector_cosines<T: Scalar>(input: &Matrix<T>, output: &Matrix<T>, rank: usize) -> Result<Vec<f64>> {
    if input.cols() != output.cols() {
        return Err(Error::shape("inputs need the same column count"));
    }
    let a = truncated_svd(input, rank)?;
    let b = truncated_svd(output, rank)?;
    Ok((0..rank)
        .map(|k| (0..input.cols()).map(|j| a.v.get(j, k).f64() * b.v.get(j, k).f64()).sum::<f64>().abs())
        .collect())
}

/// For `batches` random item batches at random timesteps, the `|cos|`
/// between the top singular vectors of the denoiser input `z_t` and its
/// output `ê`.
pub fn spectral_similarity<T: Scalar>(
    model: &InfoDcl<T>,
    channel: usize,
    batches: usize,
    batch_size: usize,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = model.items.shape[0];
    let size = batch_size.min(n);
    let mut out = Vec::with_capacity(batches * rank);
    for _ in 0..batches {
        let mut items: Vec<u32> = sample(rng, n, size).into_iter().map(|i| i as u32).collect();
        items.sort_unstable();
        let eps = gaussian::<T>(items.len(), model.dim(), rng);
        let t = rng.random_range(1..=model.schedule.steps());
        let o = model.channel_forward(channel, &items, &eps, t)?;
        out.extend(singular_vector_cosines(&o.latent, &o.generated, rank.min(size).min(model.dim()))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Items,
    Users,
    Generated,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "items" => Ok(EmbeddingKind::Items),
            "users" => Ok(EmbeddingKind::Users),
            "generated" => Ok(EmbeddingKind::Generated),
            other => Err(Error::config("which", format!("unknown selector `{other}` (items, users, generated)"))),
        }
    }
}

/// Embedding table for export. `Generated` runs every item through channel
/// 0 at `t = T` with fresh noise from `rng`.
pub fn export_embeddings<T: Scalar>(model: &InfoDcl<T>, which: EmbeddingKind, rng: &mut impl Rng) -> Result<Matrix<T>> {
    Ok(match which {
        EmbeddingKind::Items => model.items.as_matrix(),
        EmbeddingKind::Users => model.users.as_matrix(),
        EmbeddingKind::Generated => {
            if model.channels.is_empty() {
                return Err(Error::config("channels", "model has no channel"));
            }
            let n = model.items.shape[0];
            let items: Vec<u32> = (0..n as u32).collect();
            let eps = gaussian::<T>(n, model.dim(), rng);
            model.channel_forward(0, &items, &eps, model.schedule.steps())?.generated
        }
    })
}

/// Linear noise predictor `ε(v,t|s) = W·v + P·s + b·t/T`, `ε(v,t|∅)` the
/// same without the `P·s` term.
#[derive(Clone, Debug)]
pub struct LinearPredictor {
    pub w: Matrix<f64>,
    pub p: Matrix<f64>,
    pub b: Vec<f64>,
    pub horizon: f64,
}

impl LinearPredictor {
    /// Random toy with spectral scale `lipschitz` on `W`.
    pub fn random(dim: usize, cond_dim: usize, lipschitz: f64, horizon: usize, rng: &mut impl Rng) -> Self {
        let scale = lipschitz / (dim as f64).sqrt();
        LinearPredictor {
            w: Matrix::from_fn(dim, dim, |_, _| scale * rng.random_range(-1.0..1.0)),
            p: Matrix::from_fn(dim, cond_dim, |_, _| rng.random_range(-1.0..1.0)),
            b: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            horizon: horizon as f64,
        }
    }

    /// `W = 0`, `b = 0`: predictions ignore the latent and the time.
    pub fn constant(dim: usize, cond_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::random(dim, cond_dim, 0.0, 1, rng);
        p.b = vec![0.0; dim];
        p
    }
}

impl NoisePredictor for LinearPredictor {
    fn predict(&self, v: &[f64], t: f64, cond: Option<&[f64]>) -> Vec<f64> {
        (0..self.w.rows())
            .map(|i| {
                let mut acc = crate::linalg::dot(self.w.row(i), v) + self.b[i] * t / self.horizon;
                if let Some(s) = cond {
                    acc += crate::linalg::dot(self.p.row(i), s);
                }
                acc
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremARow {
    pub k: usize,
    pub kappa: f64,
    /// `‖explicit step-down + inversion − (v_T + κ·g_s)‖`
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremAReport {
    pub rows: Vec<TheoremARow>,
}

impl TheoremAReport {
    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.deviation).fold(0.0, f64::max)
    }

    /// Deviation strictly shrinks as `k` shrinks.
    pub fn decreasing_in_k(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| std::cmp::Reverse(r.k));
        rows.windows(2).all(|w| w[1].deviation < w[0].deviation)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,kappa,deviation\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.k, r.kappa, r.deviation);
        }
        s
    }
}

/// One round of re-denoising (DDIM step `T → T−k` under guidance `ω_ℓ`,
/// then inversion `T−k → T` under `ω_w`) compared with the closed form
/// `v_T + κ·g_s`, where `g_s` is taken at the midpoint time and latent.
pub fn verify_theorem_a<P: NoisePredictor + ?Sized>(
    schedule: &DiffusionSchedule,
    predictor: &P,
    v_t: &[f64],
    cond: &[f64],
    ks: &[usize],
    omega_l: f64,
    omega_w: f64,
) -> Result<TheoremAReport> {
    let big_t = schedule.steps();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let kap = kappa(schedule, k, omega_l, omega_w)?;
        let down = ddim_transport(v_t, big_t, big_t - k, predictor, Some(cond), omega_l, schedule)?;
        let back = ddim_transport(&down, big_t - k, big_t, predictor, Some(cond), omega_w, schedule)?;
        let mid: Vec<f64> = v_t.iter().zip(&down).map(|(a, b)| 0.5 * (a + b)).collect();
        let g = semantic_gradient(predictor, &mid, big_t as f64 - k as f64 / 2.0, cond);
        let closed: Vec<f64> = v_t.iter().zip(&g).map(|(v, g)| v + kap * g).collect();
        let dev: Vec<f64> = back.iter().zip(&closed).map(|(a, b)| a - b).collect();
        let deviation = norm_f64(&dev);
        if !(deviation.is_finite() && kap.is_finite()) {
            return Err(Error::NonFinite(format!("theorem check at k = {k}")));
        }
        rows.push(TheoremARow { k, kappa: kap, deviation });
    }
    Ok(TheoremAReport { rows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremBRow {
    pub kappa: f64,
    pub improvement: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremBReport {
    pub delta: f64,
    pub gamma: f64,
    /// Smallest sampled Lipschitz ratio, for the spread of the estimate.
    pub gamma_min: f64,
    pub norm_u: f64,
    pub norm_g: f64,
    pub kappa_star: f64,
    pub delta_star: f64,
    /// Grid maximizer of measured improvement minus `γκ²‖u‖‖g‖`.
    pub measured_kappa: f64,
    pub rows: Vec<TheoremBRow>,
    /// `false` when `⟨u, g_s⟩ ≤ 0`; no pass/fail applies then.
    pub alignment_holds: bool,
}

impl TheoremBReport {
    /// Bound satisfied on every grid point, up to `tol`.
    pub fn bound_holds(&self, tol: f64) -> bool {
        self.alignment_holds && self.rows.iter().all(|r| r.improvement >= r.bound - tol)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kappa,improvement,bound\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.kappa, r.improvement, r.bound);
        }
        s
    }
}

/// `κ* = δ/(2γ‖u‖‖g‖)` and `Δ* = δ²/(4γ‖u‖‖g‖)`.
pub fn optimal_injection(delta: f64, gamma: f64, norm_u: f64, norm_g: f64) -> (f64, f64) {
    let denom = gamma * norm_u * norm_g;
    (delta / (2.0 * denom), delta * delta / (4.0 * denom))
}

/// Largest `‖G(x) − G(y)‖/‖x − y‖` over `pairs` Gaussian pairs, and the
/// smallest.
pub fn estimate_lipschitz(generator: &dyn Fn(&[f64]) -> Vec<f64>, dim: usize, pairs: usize, rng: &mut impl Rng) -> (f64, f64) {
    let mut hi: f64 = 0.0;
    let mut lo = f64::INFINITY;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let (gx, gy) = (generator(&x), generator(&y));
        let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let den = norm_f64(&dx);
        if den > 0.0 {
            let r = norm_f64(&dg) / den;
            hi = hi.max(r);
            lo = lo.min(r);
        }
    }
    (hi, lo)
}

/// Monte-Carlo check of the expected-preference bound over a grid of
/// `grid` injection strengths spanning `[0, 2κ*]`, with paired draws of
/// `v_T` for the standard and informative runs.
pub fn verify_theorem_b(
    generator: &dyn Fn(&[f64]) -> Vec<f64>,
    u: &[f64],
    g_s: &[f64],
    grid: usize,
    samples: usize,
    lipschitz_pairs: usize,
    rng: &mut impl Rng,
) -> Result<TheoremBReport> {
    if u.len() != g_s.len() || u.is_empty() {
        return Err(Error::shape("u and g_s must share a positive dimension"));
    }
    if grid < 2 || samples == 0 {
        return Err(Error::config("theorem_samples", "need a grid of at least two points and one sample"));
    }
    let dim = u.len();
    let delta = crate::linalg::dot(u, g_s);
    let (norm_u, norm_g) = (norm_f64(u), norm_f64(g_s));
    let (gamma, gamma_min) = estimate_lipschitz(generator, dim, lipschitz_pairs, rng);
    let mut report = TheoremBReport {
        delta,
        gamma,
        gamma_min,
        norm_u,
        norm_g,
        kappa_star: f64::NAN,
        delta_star: f64::NAN,
        measured_kappa: f64::NAN,
        rows: Vec::new(),
        alignment_holds: delta > 0.0,
    };
    if !report.alignment_holds || gamma == 0.0 {
        return Ok(report);
    }
    let (ks, ds) = optimal_injection(delta, gamma, norm_u, norm_g);
    report.kappa_star = ks;
    report.delta_star = ds;

    let draws: Vec<Vec<f64>> = (0..samples).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let base: Vec<f64> = draws.iter().map(|v| crate::linalg::dot(u, &generator(v))).collect();
    let mut best = f64::NEG_INFINITY;
    for step in 0..grid {
        let kap = 2.0 * ks * step as f64 / (grid - 1) as f64;
        let mut acc = 0.0;
        for (v, b) in draws.iter().zip(&base) {
            let shifted: Vec<f64> = v.iter().zip(g_s).map(|(x, g)| x + kap * g).collect();
            acc += crate::linalg::dot(u, &generator(&shifted)) - b;
        }
        let improvement = acc / samples as f64;
        let penalty = gamma * kap * kap * norm_u * norm_g;
        let bound = kap * delta - penalty;
        if improvement - penalty > best {
            best = improvement - penalty;
            report.measured_kappa = kap;
        }
        report.rows.push(TheoremBRow { kappa: kap, improvement, bound });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn snr_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let zero: Vec<f64> = (0..1_000_000).map(|_| r.sample(StandardNormal)).collect();
        assert!(snr(&zero).unwrap() < 0.01);
        let two: Vec<f64> = zero.iter().map(|x| x + 2.0).collect();
        assert!((snr(&two).unwrap() - 4.0).abs() < 0.2);
        assert!(matches!(snr(&[1.0, 1.0, 1.0]), Err(Error::Degenerate(_))));
        assert!(snr(&[1.0]).is_err());
    }

    #[test]
    fn snr_matches_two_pass_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = r.random_range(2..40);
            let xs: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..5.0)).collect();
            let mut mean = 0.0;
            for x in &xs {
                mean += x;
            }
            mean /= n as f64;
            let mut ss = 0.0;
            for x in &xs {
                ss += (x - mean).powi(2);
            }
            let want = mean * mean / (ss / (n as f64 - 1.0));
            assert!((snr(&xs).unwrap() - want).abs() <= 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn singular_vector_cosine_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian::<f64>(40, 64, &mut r);
        for c in singular_vector_cosines(&a, &a, 4).unwrap() {
            assert!((c - 1.0).abs() < 1e-9);
        }
        for c in singular_vector_cosines(&a, &a.scale(-1.0), 4).unwrap() {
            assert!((c - 1.0).abs() < 1e-9);
        }
        let mut all = Vec::new();
        for _ in 0..30 {
            let x = gaussian::<f64>(40, 64, &mut r);
            let y = gaussian::<f64>(40, 64, &mut r);
            all.extend(singular_vector_cosines(&x, &y, 4).unwrap());
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(all[all.len() / 2] < 0.3, "median {}", all[all.len() / 2]);
    }

    #[test]
    fn theorem_a_constant_predictor_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for (steps, b0, b1) in [(200, 1e-4, 0.02), (50, 1e-3, 0.05), (500, 1e-4, 0.01)] {
            let s = DiffusionSchedule::new(steps, b0, b1).unwrap();
            let p = LinearPredictor::constant(6, 3, &mut r);
            let v: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
            let c = [0.5, -1.0, 2.0];
            let rep = verify_theorem_a(&s, &p, &v, &c, &[8, 4, 2, 1], 3.0, 1.0).unwrap();
            assert!(rep.max_deviation() < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn theorem_a_linear_predictor_converges_in_k() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let s = DiffusionSchedule::new(200, 1e-4, 0.02).unwrap();
        let p = LinearPredictor::random(6, 3, 0.8, 200, &mut r);
        let v: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
        let rep = verify_theorem_a(&s, &p, &v, &[0.5, -1.0, 2.0], &[8, 4, 2, 1], 3.0, 1.0).unwrap();
        assert!(rep.decreasing_in_k(), "{rep:?}");
        assert!(rep.rows.iter().all(|r| r.deviation > 0.0));

        let same = verify_theorem_a(&s, &p, &v, &[0.5, -1.0, 2.0], &[4], 2.0, 2.0).unwrap();
        assert_eq!(same.rows[0].kappa, 0.0);
        assert!(same.rows[0].deviation.is_finite());
    }

    #[test]
    fn theorem_b_identity_generator() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let id = |v: &[f64]| v.to_vec();
        let u = [1.0, 0.0, 0.0];
        let g = [1.0, 0.0, 0.0];
        let rep = verify_theorem_b(&id, &u, &g, 20, 2000, 2000, &mut r).unwrap();
        assert!((rep.gamma - 1.0).abs() < 1e-9);
        assert!((rep.kappa_star - 0.5).abs() < 1e-9);
        assert!((rep.delta_star - 0.25).abs() < 1e-9);
        assert_eq!(rep.rows[0].kappa, 0.0);
        assert!(rep.rows[0].improvement.abs() < 1e-12 && rep.rows[0].bound == 0.0);
        for row in &rep.rows {
            assert!((row.improvement - row.kappa * rep.delta).abs() < 1e-9);
        }
        assert!(rep.bound_holds(1e-9));
        assert!((rep.measured_kappa - rep.kappa_star).abs() <= 0.2 * rep.kappa_star);
    }

    #[test]
    fn theorem_b_reports_misalignment() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let id = |v: &[f64]| v.to_vec();
        let rep = verify_theorem_b(&id, &[1.0, 0.0], &[-1.0, 0.5], 10, 10, 10, &mut r).unwrap();
        assert!(!rep.alignment_holds);
        assert!(rep.rows.is_empty());
        assert!(!rep.bound_holds(0.0));
        assert_eq!(optimal_injection(1.0, 1.0, 1.0, 1.0), (0.5, 0.25));
    }

    #[test]
    fn lipschitz_estimate_of_a_contraction() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let g = |v: &[f64]| v.iter().map(|x| 0.5 * x.tanh()).collect::<Vec<_>>();
        let (hi, lo) = estimate_lipschitz(&g, 4, 10_000, &mut r);
        assert!(hi <= 0.5 + 1e-12 && hi > 0.3);
        assert!(lo <= hi);
        assert!("other".parse::<EmbeddingKind>().is_err());
        assert_eq!("users".parse::<EmbeddingKind>().unwrap(), EmbeddingKind::Users);
    }
}
