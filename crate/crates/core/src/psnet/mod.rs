//! Informative-noise generator: spectral rectification plus contextual
//! re-encoding, fused with a metadata residual.
//!
//! Gradients stop at the SVD factors; `ε` and `m` are treated as constants.

mod svd;

pub use svd::{truncated_svd, SvdFactors};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nncore::{layer_norm_rows, layer_norm_rows_backward, Activation, Init, Linear, Mlp, MlpCache, ParamTensor};
use crate::scalar::{sigmoid, Scalar};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

/// Which paths exist. A disabled path has no parameters at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsNetLayout {
    pub spectral: bool,
    pub reencode: bool,
}

impl Default for PsNetLayout {
    fn default() -> Self {
        PsNetLayout { spectral: true, reencode: true }
    }
}

#[derive(Clone, Debug)]
pub struct SpectralBranch<T> {
    pub u_mlp: Mlp<T>,
    pub v_mlp: Mlp<T>,
    pub s_mlp: Mlp<T>,
    /// `Φ`, 3d → D followed by tanh.
    pub fusion: Linear<T>,
    pub alpha: ParamTensor<T>,
}

#[derive(Clone, Debug)]
pub struct ReencodeBranch<T> {
    pub psi: Linear<T>,
    pub rho: ParamTensor<T>,
    pub eta0: ParamTensor<T>,
}

#[derive(Clone, Debug)]
pub struct PsNet<T> {
    pub dim: usize,
    pub rank: usize,
    pub spectral: Option<SpectralBranch<T>>,
    pub reencode: Option<ReencodeBranch<T>>,
    /// Shared metadata projection, identity at init.
    pub phi: Linear<T>,
    pub eta1: ParamTensor<T>,
}

struct SpectralCache<T> {
    u_cache: MlpCache<T>,
    v_cache: MlpCache<T>,
    s_cache: MlpCache<T>,
    cat: Matrix<T>,
    g: Matrix<T>,
}

struct ReencodeCache<T> {
    eps_plus: Matrix<T>,
    pre_norm: Matrix<T>,
    h: Matrix<T>,
    c: Matrix<T>,
}

/// Forward state needed by [`PsNet::backward`].
pub struct PsNetCache<T> {
    meta: Matrix<T>,
    phi_m: Matrix<T>,
    spectral: Option<SpectralCache<T>>,
    reencode: Option<ReencodeCache<T>>,
}

impl<T: Scalar> PsNet<T> {
    pub fn new(name: &str, dim: usize, rank: usize, layout: PsNetLayout, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("psnet dimension must be positive"));
        }
        if rank == 0 || rank > dim {
            return Err(Error::config("svd_rank", format!("must lie in 1..={dim}, got {rank}")));
        }
        let spectral = if layout.spectral {
            Some(SpectralBranch {
                u_mlp: Mlp::new(&format!("{name}.u_mlp"), &[rank, 2 * rank, rank], Activation::Relu, Activation::Identity, rng)?,
                v_mlp: Mlp::new(&format!("{name}.v_mlp"), &[dim, 2 * rank, rank], Activation::Relu, Activation::Identity, rng)?,
                s_mlp: Mlp::new(&format!("{name}.s_mlp"), &[rank, 2 * rank, rank], Activation::Relu, Activation::Identity, rng)?,
                fusion: Linear::new(&format!("{name}.fusion"), 3 * rank, dim, Init::Xavier, rng)?,
                alpha: ParamTensor::new(format!("{name}.alpha"), &[dim], Init::Zeros, rng)?,
            })
        } else {
            None
        };
        let reencode = if layout.reencode {
            Some(ReencodeBranch {
                psi: Linear::new(&format!("{name}.psi"), dim, dim, Init::Xavier, rng)?,
                rho: ParamTensor::new(format!("{name}.rho"), &[1], Init::Zeros, rng)?,
                eta0: ParamTensor::new(format!("{name}.eta0"), &[1], Init::Constant(1.0), rng)?,
            })
        } else {
            None
        };
        Ok(PsNet {
            dim,
            rank,
            spectral,
            reencode,
            phi: Linear::new(&format!("{name}.phi"), dim, dim, Init::Identity, rng)?,
            eta1: ParamTensor::new(format!("{name}.eta1"), &[1], Init::Constant(1.0), rng)?,
        })
    }

    pub fn layout(&self) -> PsNetLayout {
        PsNetLayout { spectral: self.spectral.is_some(), reencode: self.reencode.is_some() }
    }

    fn check(&self, eps: &Matrix<T>, meta: &Matrix<T>) -> Result<()> {
        if eps.shape() != meta.shape() || eps.cols() != self.dim || eps.rows() == 0 {
            return Err(Error::shape(format!(
                "psnet expects matching batch×{} inputs, got {:?} and {:?}",
                self.dim,
                eps.shape(),
                meta.shape()
            )));
        }
        Ok(())
    }

    /// Spectral rectification `S(ε, m)`; requires the spectral path.
    pub fn spectral_rectify(&self, eps: &Matrix<T>, meta: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(eps, meta)?;
        let branch = self.spectral.as_ref().ok_or_else(|| Error::config("variant", "spectral path disabled"))?;
        Ok(self.spectral_forward(branch, eps, meta)?.0)
    }

    /// Contextual re-encoding `C(ε, m)`; requires the re-encoding path.
    pub fn contextual_reencode(&self, eps: &Matrix<T>, meta: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(eps, meta)?;
        let branch = self.reencode.as_ref().ok_or_else(|| Error::config("variant", "re-encoding path disabled"))?;
        let phi_m = self.phi.forward(meta)?;
        Ok(Self::reencode_forward(branch, eps, &phi_m)?.c)
    }

    fn spectral_forward(
        &self,
        branch: &SpectralBranch<T>,
        eps: &Matrix<T>,
        meta: &Matrix<T>,
    ) -> Result<(Matrix<T>, SpectralCache<T>)> {
        let d = self.rank;
        let y = eps.add(meta)?;
        let batch = y.rows();
        let usable = d.min(batch);
        let f = truncated_svd(&y, usable)?;
        let u = Matrix::from_fn(batch, d, |i, k| if k < usable { f.u.get(i, k) } else { T::zero() });
        let sigma = Matrix::from_fn(1, d, |_, k| if k < usable { f.sigma[k] } else { T::zero() });
        let v1 = Matrix::from_fn(1, self.dim, |_, j| f.v.get(j, 0));

        let (ut, u_cache) = branch.u_mlp.forward_cached(&u)?;
        let (vt, v_cache) = branch.v_mlp.forward_cached(&v1)?;
        let (st, s_cache) = branch.s_mlp.forward_cached(&sigma)?;
        let cat = Matrix::from_fn(batch, 3 * d, |i, k| match k / d {
            0 => ut.get(i, k),
            1 => vt.get(0, k - d),
            _ => st.get(0, k - 2 * d),
        });
        let g = branch.fusion.forward(&cat)?.map(|x| x.tanh());
        let scale: Vec<T> = branch.alpha.values.iter().map(|a| a.tanh()).collect();
        let mut s = y;
        for i in 0..batch {
            for ((o, &gv), &a) in s.row_mut(i).iter_mut().zip(g.row(i)).zip(&scale) {
                *o += a * gv;
            }
        }
        Ok((s, SpectralCache { u_cache, v_cache, s_cache, cat, g }))
    }

    fn reencode_forward(branch: &ReencodeBranch<T>, eps: &Matrix<T>, phi_m: &Matrix<T>) -> Result<ReencodeCache<T>> {
        let eps_plus = eps.add(phi_m)?;
        let pre_norm = branch.psi.forward(&eps_plus)?;
        let h = layer_norm_rows(&pre_norm, LN_EPS);
        let gate = T::of(sigmoid(branch.rho.scalar().f64()));
        let mut c = eps.clone();
        c.axpy(gate, &h);
        Ok(ReencodeCache { eps_plus, pre_norm, h, c })
    }

    /// `ε^(m) = S + η₀·C + σ(η₁ − 1)·φ(m)` with disabled paths dropped
    /// (`S` falls back to `ε`).
    pub fn forward(&self, eps: &Matrix<T>, meta: &Matrix<T>) -> Result<(Matrix<T>, PsNetCache<T>)> {
        self.check(eps, meta)?;
        let phi_m = self.phi.forward(meta)?;
        let (mut out, spectral) = match &self.spectral {
            Some(b) => {
                let (s, c) = self.spectral_forward(b, eps, meta)?;
                (s, Some(c))
            }
            None => (eps.clone(), None),
        };
        let reencode = match &self.reencode {
            Some(b) => {
                let c = Self::reencode_forward(b, eps, &phi_m)?;
                out.axpy(b.eta0.scalar(), &c.c);
                Some(c)
            }
            None => None,
        };
        out.axpy(T::of(sigmoid(self.eta1.scalar().f64() - 1.0)), &phi_m);
        Ok((out, PsNetCache { meta: meta.clone(), phi_m, spectral, reencode }))
    }

    /// Accumulates parameter gradients for upstream gradient `dout`.
    pub fn backward(&mut self, cache: &PsNetCache<T>, dout: &Matrix<T>) -> Result<()> {
        let d = self.rank;
        let res_gate = sigmoid(self.eta1.scalar().f64() - 1.0);
        self.eta1.grad[0] += T::of(res_gate * (1.0 - res_gate) * frob_dot(dout, &cache.phi_m));
        let mut dphi = dout.scale(T::of(res_gate));

        if let (Some(b), Some(c)) = (self.spectral.as_mut(), cache.spectral.as_ref()) {
            let batch = dout.rows();
            let scale: Vec<T> = b.alpha.values.iter().map(|a| a.tanh()).collect();
            let mut dpre = Matrix::<T>::zeros(batch, self.dim);
            for i in 0..batch {
                for j in 0..self.dim {
                    let (g, up) = (c.g.get(i, j), dout.get(i, j));
                    b.alpha.grad[j] += up * g * (T::one() - scale[j] * scale[j]);
                    dpre.set(i, j, up * scale[j] * (T::one() - g * g));
                }
            }
            let dcat = b.fusion.backward(&c.cat, &dpre)?;
            let du = dcat.col_block(0, d);
            let dv = Matrix::from_vec(1, d, dcat.col_block(d, d).col_sums())?;
            let ds = Matrix::from_vec(1, d, dcat.col_block(2 * d, d).col_sums())?;
            b.u_mlp.backward(&c.u_cache, &du)?;
            b.v_mlp.backward(&c.v_cache, &dv)?;
            b.s_mlp.backward(&c.s_cache, &ds)?;
        }

        if let (Some(b), Some(c)) = (self.reencode.as_mut(), cache.reencode.as_ref()) {
            let eta0 = b.eta0.scalar();
            b.eta0.grad[0] += T::of(frob_dot(dout, &c.c));
            let gate = sigmoid(b.rho.scalar().f64());
            let dc = dout.scale(eta0);
            b.rho.grad[0] += T::of(gate * (1.0 - gate) * frob_dot(&dc, &c.h));
            let dh = dc.scale(T::of(gate));
            let dpre = layer_norm_rows_backward(&c.pre_norm, LN_EPS, &dh);
            let deps_plus = b.psi.backward(&c.eps_plus, &dpre)?;
            dphi.add_assign(&deps_plus);
        }

        self.phi.backward(&cache.meta, &dphi)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = self.spectral.as_mut() {
            out.extend(b.u_mlp.params_mut());
            out.extend(b.v_mlp.params_mut());
            out.extend(b.s_mlp.params_mut());
            out.extend(b.fusion.params_mut());
            out.push(&mut b.alpha);
        }
        if let Some(b) = self.reencode.as_mut() {
            out.extend(b.psi.params_mut());
            out.push(&mut b.rho);
            out.push(&mut b.eta0);
        }
        out.extend(self.phi.params_mut());
        out.push(&mut self.eta1);
        out
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = self.spectral.as_ref() {
            out.extend(b.u_mlp.params());
            out.extend(b.v_mlp.params());
            out.extend(b.s_mlp.params());
            out.extend(b.fusion.params());
            out.push(&b.alpha);
        }
        if let Some(b) = self.reencode.as_ref() {
            out.extend(b.psi.params());
            out.push(&b.rho);
            out.push(&b.eta0);
        }
        out.extend(self.phi.params());
        out.push(&self.eta1);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn frob_dot<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.f64() * y.f64()).sum()
}
