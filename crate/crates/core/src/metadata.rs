//! Frozen auxiliary metadata built from train interactions only: LightGCN
//! pretraining, cosine similarity graphs, and neighbor-mean aggregation.

use crate::data::{sample_bpr_triples, InteractionDataset, NormalizedAdjacency};
use crate::error::{Error, Result};
use crate::evaluation::propagate_gcn;
use crate::linalg::{dot_f64, Matrix};
use crate::nncore::{Init, Optimizer, OptimizerConfig, ParamTensor};
use crate::objectives::bpr_loss;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    User,
    Item,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub pretrain_layers: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_reg: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { pretrain_layers: 2, pretrain_epochs: 20, pretrain_lr: 5e-3, pretrain_batch: 2048, pretrain_reg: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained<T> {
    pub users: Matrix<T>,
    pub items: Matrix<T>,
    /// Mean per-triple BPR loss; entry 0 is measured before any update.
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> Pretrained<T> {
    pub fn side(&self, side: Side) -> &Matrix<T> {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }
}

/// LightGCN trained with BPR; returns the propagated (layer-mean) tables.
pub fn pretrain_base_embeddings<T: Scalar>(
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    dim: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = ParamTensor::<T>::new("pretrain.users", &[ds.num_users, dim], Init::Xavier, &mut rng)?;
    let mut items = ParamTensor::<T>::new("pretrain.items", &[ds.num_items, dim], Init::Xavier, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerConfig { learning_rate: cfg.pretrain_lr, ..Default::default() });
    let batch = cfg.pretrain_batch.max(1);
    let batches = ds.train.len().div_ceil(batch).max(1);
    let layers = cfg.pretrain_layers;

    let mut history = Vec::with_capacity(cfg.pretrain_epochs + 1);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    {
        let (pu, pi) = propagate_gcn(&users.as_matrix(), &items.as_matrix(), adj, layers);
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..batches {
            let triples = sample_bpr_triples(ds, batch, &mut probe_rng)?;
            total += bpr_scores(&pu, &pi, &triples).0;
            count += triples.len();
        }
        history.push(total / count.max(1) as f64);
    }

    for epoch in 1..=cfg.pretrain_epochs {
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..batches {
            let triples = sample_bpr_triples(ds, batch, &mut rng)?;
            let (pu, pi) = propagate_gcn(&users.as_matrix(), &items.as_matrix(), adj, layers);
            let (loss, dpos) = bpr_scores(&pu, &pi, &triples);
            let mut du = Matrix::<T>::zeros(ds.num_users, dim);
            let mut di = Matrix::<T>::zeros(ds.num_items, dim);
            for (&(u, i, j), g) in triples.iter().zip(&dpos) {
                let (u, i, j) = (u as usize, i as usize, j as usize);
                for k in 0..dim {
                    let (uk, ik, jk) = (pu.get(u, k).f64(), pi.get(i, k).f64(), pi.get(j, k).f64());
                    du.row_mut(u)[k] += T::of(g * (ik - jk));
                    di.row_mut(i)[k] += T::of(g * uk);
                    di.row_mut(j)[k] -= T::of(g * uk);
                }
            }
            let (gu, gi) = propagate_gcn(&du, &di, adj, layers);
            users.grad.copy_from_slice(gu.data());
            items.grad.copy_from_slice(gi.data());
            let mut reg = 0.0;
            for &(u, i, j) in &triples {
                reg += add_reg(&mut users, u as usize, dim, cfg.pretrain_reg);
                reg += add_reg(&mut items, i as usize, dim, cfg.pretrain_reg);
                reg += add_reg(&mut items, j as usize, dim, cfg.pretrain_reg);
            }
            let loss = loss + cfg.pretrain_reg * reg;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "pretraining loss not finite in epoch {epoch}; last finite epoch {}",
                    epoch - 1
                )));
            }
            opt.step(&mut [&mut users, &mut items])?;
            total += loss;
            count += triples.len();
        }
        history.push(total / count.max(1) as f64);
    }
    let (pu, pi) = propagate_gcn(&users.as_matrix(), &items.as_matrix(), adj, layers);
    Ok(Pretrained { users: pu, items: pi, loss_history: history })
}

fn add_reg<T: Scalar>(p: &mut ParamTensor<T>, row: usize, dim: usize, weight: f64) -> f64 {
    let mut sq = 0.0;
    for k in row * dim..(row + 1) * dim {
        let v = p.values[k].f64();
        sq += v * v;
        p.grad[k] += T::of(2.0 * weight * v);
    }
    sq
}

fn bpr_scores<T: Scalar>(users: &Matrix<T>, items: &Matrix<T>, triples: &[(u32, u32, u32)]) -> (f64, Vec<f64>) {
    let pos: Vec<f64> = triples.iter().map(|&(u, i, _)| dot_f64(users.row(u as usize), items.row(i as usize))).collect();
    let neg: Vec<f64> = triples.iter().map(|&(u, _, j)| dot_f64(users.row(u as usize), items.row(j as usize))).collect();
    bpr_loss(&pos, &neg).expect("equal lengths")
}

/// Per-node top-k cosine neighbors over binary interaction vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub side: Side,
    /// `(neighbor, cosine)` sorted by descending score, then ascending index.
    pub neighbors: Vec<Vec<(u32, f64)>>,
}

/// Only nodes that share at least one interaction are candidates, so a
/// node without overlaps gets an empty list.
pub fn build_similarity_graph(ds: &InteractionDataset, side: Side, k: usize) -> Result<SimilarityGraph> {
    if k == 0 {
        return Err(Error::config("neighbors", "k must be at least 1"));
    }
    let (own, other) = match side {
        Side::User => (&ds.user_neighbors, &ds.item_neighbors),
        Side::Item => (&ds.item_neighbors, &ds.user_neighbors),
    };
    let n = own.len();
    let mut counts = vec![0u32; n];
    let mut touched = Vec::new();
    let mut neighbors = Vec::with_capacity(n);
    for a in 0..n {
        for &x in &own[a] {
            for &b in &other[x as usize] {
                let b = b as usize;
                if b != a {
                    if counts[b] == 0 {
                        touched.push(b);
                    }
                    counts[b] += 1;
                }
            }
        }
        let da = own[a].len() as f64;
        let mut scored: Vec<(u32, f64)> = touched
            .iter()
            .map(|&b| (b as u32, counts[b] as f64 / (da * own[b].len() as f64).sqrt()))
            .collect();
        for &b in &touched {
            counts[b] = 0;
        }
        touched.clear();
        scored.sort_unstable_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        scored.truncate(k);
        neighbors.push(scored);
    }
    Ok(SimilarityGraph { side, neighbors })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetadataMatrix<T> {
    pub side: Side,
    pub rows: Matrix<T>,
}

/// Row `n` is the mean of the pretrained rows of `n`'s neighbors, or `n`'s
/// own pretrained row when it has none.
pub fn synthesize_metadata<T: Scalar>(pretrained: &Matrix<T>, graph: &SimilarityGraph) -> Result<MetadataMatrix<T>> {
    if pretrained.rows() != graph.neighbors.len() {
        return Err(Error::shape(format!(
            "{} pretrained rows for a {}-node similarity graph",
            pretrained.rows(),
            graph.neighbors.len()
        )));
    }
    let dim = pretrained.cols();
    let mut rows = Matrix::zeros(pretrained.rows(), dim);
    for (n, nbrs) in graph.neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            rows.row_mut(n).copy_from_slice(pretrained.row(n));
            continue;
        }
        let mut acc = vec![0.0f64; dim];
        for &(v, _) in nbrs {
            for (a, x) in acc.iter_mut().zip(pretrained.row(v as usize)) {
                *a += x.f64();
            }
        }
        let c = nbrs.len() as f64;
        for (o, a) in rows.row_mut(n).iter_mut().zip(acc) {
            *o = T::of(a / c);
        }
    }
    Ok(MetadataMatrix { side: graph.side, rows })
}

/// Carries user-side metadata onto items with one normalized-adjacency hop.
pub fn project_users_to_items<T: Scalar>(user_meta: &Matrix<T>, adj: &NormalizedAdjacency) -> Matrix<T> {
    let dim = user_meta.cols();
    let mut out = Matrix::zeros(adj.num_items, dim);
    for (i, row) in adj.by_item.iter().enumerate() {
        let mut acc = vec![0.0f64; dim];
        for &(u, w) in row {
            for (a, x) in acc.iter_mut().zip(user_meta.row(u as usize)) {
                *a += w * x.f64();
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = T::of(a);
        }
    }
    out
}

/// Loads an externally supplied metadata matrix and checks its shape.
pub fn load_external_metadata<T: Scalar + std::str::FromStr>(path: &Path, rows: usize, dim: usize) -> Result<Matrix<T>> {
    let m: Matrix<T> = crate::linalg::read_matrix_text(path)?;
    if m.shape() != (rows, dim) {
        return Err(Error::shape(format!(
            "metadata file {} is {}x{}, expected {rows}x{dim}",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("metadata file {}", path.display())));
    }
    Ok(m)
}

/// Item-aligned metadata for each configured channel: item channels
/// aggregate item neighbors, user channels aggregate user neighbors and
/// hop onto items. Configured files replace synthesis entirely.
pub fn channel_metadata<T: Scalar + std::str::FromStr>(
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    cfg: &crate::config::RunConfig,
) -> Result<Vec<Matrix<T>>> {
    let dim = cfg.model.dim;
    let meta = &cfg.metadata;
    if !meta.metadata_files.is_empty() {
        return meta
            .metadata_files
            .iter()
            .map(|f| load_external_metadata(Path::new(f), ds.num_items, dim))
            .collect();
    }
    let pretrained: Pretrained<T> = pretrain_base_embeddings(ds, adj, dim, &meta.pretrain(), meta.metadata_seed)?;
    meta.channels
        .iter()
        .map(|&side| {
            let graph = build_similarity_graph(ds, side, meta.neighbors)?;
            let m = synthesize_metadata(pretrained.side(side), &graph)?;
            Ok(match side {
                Side::Item => m.rows,
                Side::User => project_users_to_items(&m.rows, adj),
            })
        })
        .collect()
}
