//! The recommender: user/item embeddings plus one or two contrastive
//! channels, each with frozen metadata, a PSNet and a denoiser.

use crate::config::{RunConfig, Variant};
use crate::data::{sample_bpr_triples, InteractionDataset, Triple};
use crate::diffusion::{DiffusionSchedule, Denoiser};
use crate::error::{Error, Result};
use crate::linalg::{dot_f64, Matrix};
use crate::nncore::{Init, ParamTensor};
use crate::objectives::{balance_loss, bpr_loss, infonce_loss, reconstruction_loss, total_loss, LossBreakdown, LossWeights};
use crate::psnet::{PsNet, PsNetLayout};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Channel<T> {
    /// Item-aligned frozen metadata, N×D.
    pub metadata: Matrix<T>,
    /// Absent for the Gaussian-noise ablation.
    pub psnet: Option<PsNet<T>>,
    pub denoiser: Denoiser<T>,
}

#[derive(Clone, Debug)]
pub struct InfoDcl<T> {
    pub users: ParamTensor<T>,
    pub items: ParamTensor<T>,
    pub channels: Vec<Channel<T>>,
    pub schedule: DiffusionSchedule,
    pub variant: Variant,
}

/// Everything random about one optimization step, drawn up front so the
/// step's loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct BatchPlan<T> {
    pub triples: Vec<Triple>,
    /// Distinct positive items, ascending.
    pub items: Vec<u32>,
    /// Per channel: Gaussian noise (items × D) and the diffusion step.
    pub noise: Vec<Matrix<T>>,
    pub steps: Vec<usize>,
}

/// Per-channel intermediate results of a forward pass.
pub struct ChannelOutput<T> {
    pub noise: Matrix<T>,
    pub latent: Matrix<T>,
    pub generated: Matrix<T>,
}

fn layout(variant: Variant) -> Option<PsNetLayout> {
    match variant {
        Variant::NoPsnet => None,
        Variant::NoSr => Some(PsNetLayout { spectral: false, reencode: true }),
        Variant::NoCr => Some(PsNetLayout { spectral: true, reencode: false }),
        Variant::Full | Variant::NoCbl => Some(PsNetLayout::default()),
    }
}

pub fn gaussian<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
}

impl<T: Scalar> InfoDcl<T> {
    /// `metadata` holds one item-aligned matrix per configured channel.
    pub fn new(
        num_users: usize,
        num_items: usize,
        metadata: Vec<Matrix<T>>,
        cfg: &RunConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dim = cfg.model.dim;
        if metadata.len() != cfg.metadata.channels.len() {
            return Err(Error::config("channels", format!("{} metadata matrices for {} channels", metadata.len(), cfg.metadata.channels.len())));
        }
        let users = ParamTensor::new("users", &[num_users, dim], Init::Xavier, rng)?;
        let items = ParamTensor::new("items", &[num_items, dim], Init::Xavier, rng)?;
        let mut channels = Vec::with_capacity(metadata.len());
        for (c, meta) in metadata.into_iter().enumerate() {
            if meta.shape() != (num_items, dim) {
                return Err(Error::shape(format!("channel {c} metadata is {:?}, expected {:?}", meta.shape(), (num_items, dim))));
            }
            if !meta.is_finite() {
                return Err(Error::NonFinite(format!("channel {c} metadata")));
            }
            let psnet = match layout(cfg.model.variant) {
                Some(l) => Some(PsNet::new(&format!("ch{c}.psnet"), dim, cfg.model.svd_rank, l, rng)?),
                None => None,
            };
            let denoiser = Denoiser::new(&format!("ch{c}.denoiser"), dim, rng)?;
            channels.push(Channel { metadata: meta, psnet, denoiser });
        }
        let schedule = DiffusionSchedule::new(cfg.model.steps, cfg.model.beta_first, cfg.model.beta_last)?;
        Ok(InfoDcl { users, items, channels, schedule, variant: cfg.model.variant })
    }

    pub fn dim(&self) -> usize {
        self.items.shape[1]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = vec![&mut self.users, &mut self.items];
        for ch in &mut self.channels {
            if let Some(p) = ch.psnet.as_mut() {
                out.extend(p.params_mut());
            }
            out.extend(ch.denoiser.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut out = vec![&self.users, &self.items];
        for ch in &self.channels {
            if let Some(p) = ch.psnet.as_ref() {
                out.extend(p.params());
            }
            out.extend(ch.denoiser.params());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn plan_batch(&self, ds: &InteractionDataset, batch: usize, rng: &mut impl Rng) -> Result<BatchPlan<T>> {
        let triples = sample_bpr_triples(ds, batch, rng)?;
        let mut items: Vec<u32> = triples.iter().map(|t| t.1).collect();
        items.sort_unstable();
        items.dedup();
        let mut noise = Vec::with_capacity(self.channels.len());
        let mut steps = Vec::with_capacity(self.channels.len());
        for _ in &self.channels {
            noise.push(gaussian(items.len(), self.dim(), rng));
            steps.push(rng.random_range(1..=self.schedule.steps()));
        }
        Ok(BatchPlan { triples, items, noise, steps })
    }

    /// Informative noise for the given items (raw noise for the ablation).
    pub fn informative_noise(&self, channel: usize, items: &[u32], eps: &Matrix<T>) -> Result<Matrix<T>> {
        let ch = &self.channels[channel];
        match &ch.psnet {
            Some(p) => {
                let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
                Ok(p.forward(eps, &ch.metadata.gather_rows(&idx))?.0)
            }
            None => Ok(eps.clone()),
        }
    }

    /// Noise, latent and generated embeddings for one channel on one batch.
    pub fn channel_forward(&self, channel: usize, items: &[u32], eps: &Matrix<T>, t: usize) -> Result<ChannelOutput<T>> {
        let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let e = self.items.as_matrix().gather_rows(&idx);
        let noise = self.informative_noise(channel, items, eps)?;
        let (a, s) = (T::of(self.schedule.a(t)?), T::of(self.schedule.s(t)?));
        let latent = e.zip_with(&noise, |x, n| a * x + s * n)?;
        let generated = self.channels[channel].denoiser.predict(&latent, t)?;
        Ok(ChannelOutput { noise, latent, generated })
    }

    /// Loss of one planned batch; with `backprop` the parameter gradients
    /// are accumulated (not zeroed) as well.
    pub fn batch_loss(&mut self, plan: &BatchPlan<T>, w: &LossWeights, backprop: bool) -> Result<LossBreakdown> {
        let dim = self.dim();
        let mut parts = LossBreakdown::default();

        let pos: Vec<f64> = plan.triples.iter().map(|&(u, i, _)| dot_f64(self.users.row(u as usize), self.items.row(i as usize))).collect();
        let neg: Vec<f64> = plan.triples.iter().map(|&(u, _, j)| dot_f64(self.users.row(u as usize), self.items.row(j as usize))).collect();
        let (bpr, dpos) = bpr_loss(&pos, &neg)?;
        parts.bpr = bpr;

        let mut touched_users: Vec<u32> = plan.triples.iter().map(|t| t.0).collect();
        touched_users.sort_unstable();
        touched_users.dedup();
        let mut touched_items: Vec<u32> = plan.triples.iter().flat_map(|t| [t.1, t.2]).collect();
        touched_items.sort_unstable();
        touched_items.dedup();
        parts.reg = touched_users.iter().map(|&u| self.users.row(u as usize)).chain(touched_items.iter().map(|&i| self.items.row(i as usize))).flat_map(|r| r.iter()).map(|v| v.f64() * v.f64()).sum();

        if backprop {
            for (&(u, i, j), g) in plan.triples.iter().zip(&dpos) {
                let g = w.lambda_b * g;
                let (u, i, j) = (u as usize, i as usize, j as usize);
                for k in 0..dim {
                    let (uk, ik, jk) = (self.users.values[u * dim + k].f64(), self.items.values[i * dim + k].f64(), self.items.values[j * dim + k].f64());
                    self.users.grad[u * dim + k] += T::of(g * (ik - jk));
                    self.items.grad[i * dim + k] += T::of(g * uk);
                    self.items.grad[j * dim + k] -= T::of(g * uk);
                }
            }
            let two_g = T::of(2.0 * w.lambda_g);
            for &u in &touched_users {
                let r = u as usize * dim..(u as usize + 1) * dim;
                for k in r {
                    let v = self.users.values[k];
                    self.users.grad[k] += two_g * v;
                }
            }
            for &i in &touched_items {
                let r = i as usize * dim..(i as usize + 1) * dim;
                for k in r {
                    let v = self.items.values[k];
                    self.items.grad[k] += two_g * v;
                }
            }
        }

        let channels_active = 1.0 - w.lambda_b != 0.0 || w.lambda_c != 0.0 || w.lambda_l != 0.0;
        if channels_active && !plan.items.is_empty() {
            let idx: Vec<usize> = plan.items.iter().map(|&i| i as usize).collect();
            let e = self.items.as_matrix().gather_rows(&idx);
            for c in 0..self.channels.len() {
                let t = plan.steps[c];
                let (a, s) = (self.schedule.a(t)?, self.schedule.s(t)?);
                let meta = self.channels[c].metadata.gather_rows(&idx);
                let (noise, ps_cache) = match &self.channels[c].psnet {
                    Some(p) => {
                        let (n, cache) = p.forward(&plan.noise[c], &meta)?;
                        (n, Some(cache))
                    }
                    None => (plan.noise[c].clone(), None),
                };
                let (ta, ts) = (T::of(a), T::of(s));
                let latent = e.zip_with(&noise, |x, n| ta * x + ts * n)?;
                let (generated, den_cache) = self.channels[c].denoiser.predict_cached(&latent, t)?;
                let (recon, d_recon) = reconstruction_loss(&e, &generated)?;
                let (con, d_con_gen, d_con_items) = infonce_loss(&generated, &e, w.tau)?;
                let (bal, d_bal) = balance_loss(&generated);
                parts.recon += recon;
                parts.con += con;
                parts.balance += bal;
                if !backprop {
                    continue;
                }
                let wr = 1.0 - w.lambda_b;
                let mut d_gen = d_recon.scale(T::of(wr));
                d_gen.axpy(T::of(w.lambda_c), &d_con_gen);
                d_gen.axpy(T::of(w.lambda_l), &d_bal);
                let d_latent = self.channels[c].denoiser.backward(&den_cache, &d_gen)?;
                let mut d_e = d_recon.scale(T::of(-wr));
                d_e.axpy(T::of(w.lambda_c), &d_con_items);
                d_e.axpy(T::of(a), &d_latent);
                if let (Some(p), Some(cache)) = (self.channels[c].psnet.as_mut(), ps_cache.as_ref()) {
                    p.backward(cache, &d_latent.scale(T::of(s)))?;
                }
                for (r, &i) in idx.iter().enumerate() {
                    for (g, &d) in self.items.grad_row_mut(i).iter_mut().zip(d_e.row(r)) {
                        *g += d;
                    }
                }
            }
        }
        Ok(total_loss(parts, w))
    }
}
