//! Inference-time graph propagation and all-ranking evaluation.

use crate::data::{InteractionDataset, NormalizedAdjacency};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use std::cmp::Ordering;
use std::fmt::Write as _;

/// `K` rounds of bipartite propagation over the normalized adjacency; the
/// result is the mean of layers `0..=K`. The operator is symmetric, so the
/// same call also backpropagates gradients through the propagation.
pub fn propagate_gcn<T: Scalar>(
    users: &Matrix<T>,
    items: &Matrix<T>,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> (Matrix<T>, Matrix<T>) {
    if layers == 0 {
        return (users.clone(), items.clone());
    }
    let dim = users.cols();
    let mut sum_u: Vec<f64> = users.data().iter().map(|v| v.f64()).collect();
    let mut sum_i: Vec<f64> = items.data().iter().map(|v| v.f64()).collect();
    let mut cur_u = sum_u.clone();
    let mut cur_i = sum_i.clone();
    for _ in 0..layers {
        let mut next_u = vec![0.0; cur_u.len()];
        let mut next_i = vec![0.0; cur_i.len()];
        for (u, row) in adj.by_user.iter().enumerate() {
            let out = &mut next_u[u * dim..(u + 1) * dim];
            for &(i, w) in row {
                let src = &cur_i[i as usize * dim..(i as usize + 1) * dim];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        for (i, row) in adj.by_item.iter().enumerate() {
            let out = &mut next_i[i * dim..(i + 1) * dim];
            for &(u, w) in row {
                let src = &cur_u[u as usize * dim..(u as usize + 1) * dim];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        for (s, v) in sum_u.iter_mut().zip(&next_u) {
            *s += v;
        }
        for (s, v) in sum_i.iter_mut().zip(&next_i) {
            *s += v;
        }
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = 1.0 / (layers as f64 + 1.0);
    let to = |v: Vec<f64>, rows: usize| {
        Matrix::from_vec(rows, dim, v.into_iter().map(|x| T::of(x * scale)).collect()).expect("same shape")
    };
    (to(sum_u, users.rows()), to(sum_i, items.rows()))
}

fn by_score_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Top `k` items by inner product, skipping `exclude` (sorted). Ties go to
/// the lower item index.
pub fn rank_topk<T: Scalar>(user: &[T], items: &Matrix<T>, exclude: &[u32], k: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = (0..items.rows() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (crate::linalg::dot_f64(user, items.row(i as usize)), i))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_score_then_index);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.ndcg[p])
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (p, k) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(s, "recall@{k} = {:.6}", self.recall[p]);
            let _ = writeln!(s, "ndcg@{k} = {:.6}", self.ndcg[p]);
        }
        let _ = writeln!(s, "users_evaluated = {}", self.users_evaluated);
        let _ = writeln!(s, "users_skipped = {}", self.users_skipped);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,cutoff,value\n");
        for (p, k) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(s, "recall,{k},{}", self.recall[p]);
            let _ = writeln!(s, "ndcg,{k},{}", self.ndcg[p]);
        }
        s
    }
}

/// Recall@K and NDCG@K (binary gain, `1/log2(rank+1)` discount) averaged
/// over users with at least one ground-truth item. `ranked[u]` must hold at
/// least `max(cutoffs)` items when that many candidates exist.
pub fn ranking_metrics(ranked: &[Vec<u32>], truth: &[Vec<u32>], cutoffs: &[usize]) -> EvalReport {
    let mut recall = vec![0.0; cutoffs.len()];
    let mut ndcg = vec![0.0; cutoffs.len()];
    let (mut evaluated, mut skipped) = (0, 0);
    for (list, gt) in ranked.iter().zip(truth) {
        if gt.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        for (p, &k) in cutoffs.iter().enumerate() {
            let mut hits = 0usize;
            let mut dcg = 0.0;
            for (r, item) in list.iter().take(k).enumerate() {
                if gt.contains(item) {
                    hits += 1;
                    dcg += 1.0 / ((r + 2) as f64).log2();
                }
            }
            let idcg: f64 = (0..gt.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
            recall[p] += hits as f64 / gt.len() as f64;
            ndcg[p] += dcg / idcg;
        }
    }
    if evaluated > 0 {
        recall.iter_mut().chain(ndcg.iter_mut()).for_each(|v| *v /= evaluated as f64);
    }
    EvalReport {
        cutoffs: cutoffs.to_vec(),
        recall,
        ndcg,
        users_evaluated: evaluated,
        users_skipped: skipped,
        config_hash: String::new(),
    }
}

/// Full pipeline: propagate, rank every user against all non-train items,
/// and score against `split` (the dataset's valid or test pairs).
pub fn evaluate<T: Scalar>(
    users: &Matrix<T>,
    items: &Matrix<T>,
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    layers: usize,
    split: &[(u32, u32)],
    cutoffs: &[usize],
) -> EvalReport {
    let (u_hat, i_hat) = propagate_gcn(users, items, adj, layers);
    let truth = ds.ground_truth(split);
    let depth = cutoffs.iter().copied().max().unwrap_or(0);
    let ranked: Vec<Vec<u32>> = (0..ds.num_users)
        .map(|u| {
            if truth[u].is_empty() {
                Vec::new()
            } else {
                rank_topk(u_hat.row(u), &i_hat, &ds.user_neighbors[u], depth)
            }
        })
        .collect();
    ranking_metrics(&ranked, &truth, cutoffs)
}
