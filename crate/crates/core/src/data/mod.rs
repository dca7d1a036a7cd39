//! Implicit-feedback interactions: ingestion, id maps, splits, graph
//! normalization and BPR triple sampling.

pub mod synthetic;

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// How a delimited interaction file is laid out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextFormat {
    /// `tab`, `comma`, `whitespace`, or a literal separator such as `::`.
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    pub skip_header: bool,
}

impl Default for TextFormat {
    fn default() -> Self {
        TextFormat { delimiter: "tab".into(), user_col: 0, item_col: 1, skip_header: false }
    }
}

impl TextFormat {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self.delimiter.as_str() {
            "tab" => line.split('\t').collect(),
            "comma" => line.split(',').collect(),
            "whitespace" => line.split_whitespace().collect(),
            lit => line.split(lit).collect(),
        }
    }
}

/// Deduplicated interactions with dense ids, before splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteractions {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub pairs: Vec<(u32, u32)>,
    pub duplicates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub duplicates: usize,
    /// `1 - interactions / (users * items)`
    pub sparsity: f64,
}

impl std::fmt::Display for IngestStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} duplicates_collapsed={} sparsity={:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.duplicates,
            self.sparsity * 100.0
        )
    }
}

#[derive(Default)]
struct IdMap {
    index: HashMap<String, u32>,
    raw: Vec<String>,
}

impl IdMap {
    fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len() as u32;
        self.index.insert(raw.to_string(), i);
        self.raw.push(raw.to_string());
        i
    }
}

impl RawInteractions {
    /// Builds dense ids in order of first appearance and collapses repeats.
    pub fn from_raw_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut users = IdMap::default();
        let mut items = IdMap::default();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut duplicates = 0;
        for (u, i) in pairs {
            let pair = (users.intern(u), items.intern(i));
            if seen.insert(pair) {
                out.push(pair);
            } else {
                duplicates += 1;
            }
        }
        RawInteractions { user_ids: users.raw, item_ids: items.raw, pairs: out, duplicates }
    }

    pub fn stats(&self) -> IngestStats {
        let (users, items) = (self.user_ids.len(), self.item_ids.len());
        IngestStats {
            users,
            items,
            interactions: self.pairs.len(),
            duplicates: self.duplicates,
            sparsity: 1.0 - self.pairs.len() as f64 / (users as f64 * items as f64),
        }
    }
}

/// Reads `user, item[, rating][, timestamp]` lines. Any listed pair counts as
/// a positive interaction.
pub fn load_interactions(path: &Path, format: &TextFormat) -> Result<RawInteractions> {
    let reader = BufReader::new(fs::File::open(path)?);
    let need = format.user_col.max(format.item_col);
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut duplicates = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if n == 0 && format.skip_header {
            continue;
        }
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields = format.split(trimmed);
        if fields.len() <= need {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected at least {} fields, found {}", need + 1, fields.len()),
            });
        }
        let (u, i) = (fields[format.user_col].trim(), fields[format.item_col].trim());
        if u.is_empty() || i.is_empty() {
            return Err(Error::Parse { line: n + 1, message: "empty user or item id".into() });
        }
        let pair = (users.intern(u), items.intern(i));
        if seen.insert(pair) {
            pairs.push(pair);
        } else {
            duplicates += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no interactions in {}", path.display())));
    }
    Ok(RawInteractions { user_ids: users.raw, item_ids: items.raw, pairs, duplicates })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("ratios {all:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Train/valid/test interactions over a shared id space.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Sorted train items per user.
    pub user_neighbors: Vec<Vec<u32>>,
    /// Sorted train users per item.
    pub item_neighbors: Vec<Vec<u32>>,
}

fn neighbor_lists(n: usize, pairs: impl Iterator<Item = (u32, u32)>) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); n];
    for (a, b) in pairs {
        out[a as usize].push(b);
    }
    for l in &mut out {
        l.sort_unstable();
    }
    out
}

impl InteractionDataset {
    pub fn new(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        train: Vec<(u32, u32)>,
        valid: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let (num_users, num_items) = (user_ids.len(), item_ids.len());
        for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
            let mut seen = HashSet::new();
            for &(u, i) in split {
                if u as usize >= num_users || i as usize >= num_items {
                    return Err(Error::OutOfRange(format!("{name} pair ({u}, {i}) outside id space")));
                }
                if !seen.insert((u, i)) {
                    return Err(Error::shape(format!("duplicate {name} pair ({u}, {i})")));
                }
            }
        }
        let user_neighbors = neighbor_lists(num_users, train.iter().copied());
        let item_neighbors = neighbor_lists(num_items, train.iter().map(|&(u, i)| (i, u)));
        for &(u, i) in valid.iter().chain(&test) {
            if user_neighbors[u as usize].is_empty() {
                return Err(Error::shape(format!("user {u} is evaluated but has no train interactions")));
            }
            if user_neighbors[u as usize].binary_search(&i).is_ok() {
                return Err(Error::shape(format!("pair ({u}, {i}) leaks from train into evaluation")));
            }
        }
        Ok(InteractionDataset { num_users, num_items, user_ids, item_ids, train, valid, test, user_neighbors, item_neighbors })
    }

    #[inline]
    pub fn in_train(&self, u: u32, i: u32) -> bool {
        self.user_neighbors[u as usize].binary_search(&i).is_ok()
    }

    pub fn total_interactions(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// Ground-truth item lists per user for an evaluation split.
    pub fn ground_truth(&self, split: &[(u32, u32)]) -> Vec<Vec<u32>> {
        neighbor_lists(self.num_users, split.iter().copied())
    }

    /// Writes `train.txt`, `valid.txt`, `test.txt` (dense `user<TAB>item`)
    /// plus `user_ids.txt` / `item_ids.txt` (line `k` holds raw id `k`).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, split) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.txt")))?);
            for (u, i) in split {
                writeln!(w, "{u}\t{i}")?;
            }
            w.flush()?;
        }
        for (name, ids) in [("user_ids", &self.user_ids), ("item_ids", &self.item_ids)] {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.txt")))?);
            for id in ids {
                writeln!(w, "{id}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read_ids = |name: &str| -> Result<Vec<String>> {
            let text = fs::read_to_string(dir.join(name))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let read_pairs = |name: &str| -> Result<Vec<(u32, u32)>> {
            let text = fs::read_to_string(dir.join(name))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| {
                    let mut it = l.split('\t').map(|f| f.trim().parse::<u32>());
                    match (it.next(), it.next()) {
                        (Some(Ok(u)), Some(Ok(i))) => Ok((u, i)),
                        _ => Err(Error::Parse { line: n + 1, message: format!("bad pair in {name}: `{l}`") }),
                    }
                })
                .collect()
        };
        InteractionDataset::new(
            read_ids("user_ids.txt")?,
            read_ids("item_ids.txt")?,
            read_pairs("train.txt")?,
            read_pairs("valid.txt")?,
            read_pairs("test.txt")?,
        )
    }
}

/// Per-user random split. Users with a single interaction keep it in train,
/// and every user keeps at least one train interaction.
pub fn split_dataset(raw: &RawInteractions, ratios: SplitRatios, seed: u64) -> Result<InteractionDataset> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_user = neighbor_lists(raw.user_ids.len(), raw.pairs.iter().copied());
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, items) in per_user.iter_mut().enumerate() {
        let u = u as u32;
        let n = items.len();
        if n <= 1 {
            train.extend(items.iter().map(|&i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let mut n_test = (n as f64 * ratios.test).round() as usize;
        let mut n_valid = (n as f64 * ratios.valid).round() as usize;
        while n_test + n_valid >= n {
            if n_valid >= n_test && n_valid > 0 {
                n_valid -= 1;
            } else {
                n_test -= 1;
            }
        }
        let (te, rest) = items.split_at(n_test);
        let (va, tr) = rest.split_at(n_valid);
        test.extend(te.iter().map(|&i| (u, i)));
        valid.extend(va.iter().map(|&i| (u, i)));
        train.extend(tr.iter().map(|&i| (u, i)));
    }
    InteractionDataset::new(raw.user_ids.clone(), raw.item_ids.clone(), train, valid, test)
}

/// Symmetrically normalized train adjacency, `w = 1 / sqrt(|N_u| |N_i|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub num_users: usize,
    pub num_items: usize,
    /// `(item, weight)` per user.
    pub by_user: Vec<Vec<(u32, f64)>>,
    /// `(user, weight)` per item.
    pub by_item: Vec<Vec<(u32, f64)>>,
}

impl NormalizedAdjacency {
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.by_user
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(i, w)| (u as u32, i, w)))
    }

    pub fn weight(&self, u: u32, i: u32) -> Option<f64> {
        self.by_user[u as usize].iter().find(|&&(j, _)| j == i).map(|&(_, w)| w)
    }

    pub fn nnz(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }
}

pub fn build_normalized_adjacency(ds: &InteractionDataset) -> NormalizedAdjacency {
    let w = |u: u32, i: u32| {
        let du = ds.user_neighbors[u as usize].len() as f64;
        let di = ds.item_neighbors[i as usize].len() as f64;
        1.0 / (du * di).sqrt()
    };
    let by_user = ds
        .user_neighbors
        .iter()
        .enumerate()
        .map(|(u, items)| items.iter().map(|&i| (i, w(u as u32, i))).collect())
        .collect();
    let by_item = ds
        .item_neighbors
        .iter()
        .enumerate()
        .map(|(i, users)| users.iter().map(|&u| (u, w(u, i as u32))).collect())
        .collect();
    NormalizedAdjacency { num_users: ds.num_users, num_items: ds.num_items, by_user, by_item }
}

/// `(user, positive item, negative item)`
pub type Triple = (u32, u32, u32);

/// Uniform user, uniform positive from the user's train items, uniform
/// negative among items the user never interacted with in train.
pub fn sample_bpr_triples(ds: &InteractionDataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Triple>> {
    if batch_size == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<u32> = (0..ds.num_users as u32)
        .filter(|&u| {
            let d = ds.user_neighbors[u as usize].len();
            d > 0 && d < ds.num_items
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Empty("no user has both positive and negative items".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u = eligible[rng.random_range(0..eligible.len())];
        let pos = &ds.user_neighbors[u as usize];
        let i = pos[rng.random_range(0..pos.len())];
        let j = loop {
            let j = rng.random_range(0..ds.num_items as u32);
            if pos.binary_search(&j).is_err() {
                break j;
            }
        };
        out.push((u, i, j));
    }
    Ok(out)
}
