//! Seeded synthetic interaction logs with latent cluster structure, used for
//! desk-scale experiments when no public dataset is at hand.

use super::RawInteractions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Target mean interactions per user.
    pub mean_per_user: usize,
    pub clusters: usize,
    /// Probability that an interaction comes from one of the user's
    /// preferred clusters rather than the global popularity distribution.
    pub affinity: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Roughly the size of MovieLens-100K (943 users, 1682 items, ~100k
    /// interactions).
    pub fn ml100k_sized(seed: u64) -> Self {
        SyntheticSpec { users: 943, items: 1682, mean_per_user: 106, clusters: 20, affinity: 0.8, seed }
    }

    pub fn toy(users: usize, items: usize, seed: u64) -> Self {
        SyntheticSpec { users, items, mean_per_user: (items / 8).max(3), clusters: 6, affinity: 0.85, seed }
    }
}

/// Draws from a cumulative weight table.
fn pick(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let x = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> RawInteractions {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters = spec.clusters.max(1);
    let cluster_of: Vec<usize> = (0..spec.items).map(|_| rng.random_range(0..clusters)).collect();
    // Zipf-like popularity over a random permutation of items.
    let popularity: Vec<f64> = (0..spec.items).map(|_| 1.0 / (1.0 + rng.random_range(0..spec.items) as f64).powf(0.8)).collect();
    let global = cumulative(popularity.iter().copied());
    let members: Vec<Vec<usize>> = (0..clusters)
        .map(|c| (0..spec.items).filter(|&i| cluster_of[i] == c).collect())
        .collect();
    let member_cdf: Vec<Vec<f64>> =
        members.iter().map(|m| cumulative(m.iter().map(|&i| popularity[i]))).collect();

    let mut pairs = Vec::new();
    for u in 0..spec.users {
        let liked: Vec<usize> = (0..2).map(|_| rng.random_range(0..clusters)).collect();
        // count spread between 20% and 180% of the mean, at least 2
        let n = ((spec.mean_per_user as f64) * rng.random_range(0.2..1.8)).round() as usize;
        let n = n.clamp(2, spec.items / 2 + 1);
        let mut chosen = HashSet::new();
        let mut guard = 0;
        while chosen.len() < n && guard < 50 * n {
            guard += 1;
            let item = if rng.random::<f64>() < spec.affinity {
                let c = liked[rng.random_range(0..liked.len())];
                if members[c].is_empty() {
                    continue;
                }
                members[c][pick(&member_cdf[c], &mut rng)]
            } else {
                pick(&global, &mut rng)
            };
            chosen.insert(item);
        }
        let mut chosen: Vec<usize> = chosen.into_iter().collect();
        chosen.sort_unstable();
        pairs.extend(chosen.into_iter().map(|i| (format!("u{u}"), format!("i{i}"))));
    }
    RawInteractions::from_raw_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())))
}
