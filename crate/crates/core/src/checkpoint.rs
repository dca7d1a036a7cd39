//! Single-file checkpoints: a text manifest followed by a flat
//! little-endian `f32` payload.
//!
//! ```text
//! infodcl-checkpoint 1
//! config_hash <hex>
//! epoch <n>
//! optimizer_steps <n>
//! rng <seed-hex> <stream> <word-pos>
//! config <lines>
//! ...TOML...
//! history <lines>
//! ...CSV records...
//! tensors <count>
//! tensor <name> <d0>x<d1>... <offset> <len>
//! end
//! <payload>
//! ```
//!
//! Offsets and lengths count `f32` values from the start of the payload.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::InfoDcl;
use crate::nncore::Optimizer;
use crate::scalar::Scalar;
use crate::trainer::{EpochRecord, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "infodcl-checkpoint";

/// Trainer state plus the history that produced it.
pub struct Checkpoint<T> {
    pub trainer: Trainer<T>,
    pub history: Vec<EpochRecord>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn metadata_name(c: usize) -> String {
    format!("ch{c}.metadata")
}

fn tensors<T: Scalar>(t: &Trainer<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    for p in t.model.params() {
        out.push((p.name.clone(), p.shape.clone(), &p.values));
    }
    for (c, ch) in t.model.channels.iter().enumerate() {
        out.push((metadata_name(c), vec![ch.metadata.rows(), ch.metadata.cols()], ch.metadata.data()));
    }
    let params = t.model.params();
    for (p, m) in params.iter().zip(&t.optimizer.first_moment) {
        out.push((format!("opt.m.{}", p.name), p.shape.clone(), m));
    }
    for (p, v) in params.iter().zip(&t.optimizer.second_moment) {
        out.push((format!("opt.v.{}", p.name), p.shape.clone(), v));
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (k, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * k..2 * k + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Serializes to bytes. Values are narrowed to `f32`, which is lossless
/// for `f32` models.
pub fn encode<T: Scalar>(trainer: &Trainer<T>, history: &[EpochRecord]) -> Vec<u8> {
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(head, "config_hash {}", trainer.config.hash());
    let _ = writeln!(head, "epoch {}", trainer.epoch);
    let _ = writeln!(head, "optimizer_steps {}", trainer.optimizer.step_count);
    let r = &trainer.rng;
    let _ = writeln!(head, "rng {} {} {}", hex(&r.get_seed()), r.get_stream(), r.get_word_pos());
    let toml = trainer.config.to_toml();
    let _ = writeln!(head, "config {}", toml.lines().count());
    for line in toml.lines() {
        let _ = writeln!(head, "{line}");
    }
    let _ = writeln!(head, "history {}", history.len());
    for h in history {
        let _ = writeln!(head, "{}", h.to_csv());
    }
    let list = tensors(trainer);
    let _ = writeln!(head, "tensors {}", list.len());
    let mut offset = 0;
    for (name, shape, values) in &list {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(head, "tensor {name} {} {offset} {}", dims.join("x"), values.len());
        offset += values.len();
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    bytes.reserve(offset * 4);
    for (_, _, values) in &list {
        for v in values.iter() {
            bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn save<T: Scalar>(trainer: &Trainer<T>, history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(trainer, history))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("manifest is truncated"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("manifest is not UTF-8"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(corrupt(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn number<N: std::str::FromStr>(&mut self, key: &str) -> Result<N> {
        let v = self.field(key)?;
        v.parse().map_err(|_| corrupt(format!("bad `{key}` value `{v}`")))
    }
}

fn parse_entry(line: &str) -> Result<Entry> {
    let bad = || corrupt(format!("bad tensor line `{line}`"));
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 5 || f[0] != "tensor" {
        return Err(bad());
    }
    let shape = f[2].split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
    let entry = Entry {
        name: f[1].to_string(),
        shape,
        offset: f[3].parse().map_err(|_| bad())?,
        len: f[4].parse().map_err(|_| bad())?,
    };
    if entry.shape.iter().product::<usize>() != entry.len {
        return Err(bad());
    }
    Ok(entry)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut lines = Lines { bytes, pos: 0 };
    let first = lines.next().map_err(|_| corrupt("not a checkpoint file"))?;
    match first.split_once(' ') {
        Some((MAGIC, v)) if v == FORMAT_VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(corrupt(format!("unsupported checkpoint version {v} (this build reads {FORMAT_VERSION})")))
        }
        _ => return Err(corrupt("not a checkpoint file")),
    }
    let hash = lines.field("config_hash")?.to_string();
    let epoch: usize = lines.number("epoch")?;
    let steps: u64 = lines.number("optimizer_steps")?;
    let rng_line: Vec<&str> = lines.field("rng")?.split(' ').collect();
    let rng = match rng_line.as_slice() {
        [seed, stream, pos] => {
            let seed = unhex(seed).ok_or_else(|| corrupt("bad rng seed"))?;
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(stream.parse().map_err(|_| corrupt("bad rng stream"))?);
            r.set_word_pos(pos.parse().map_err(|_| corrupt("bad rng position"))?);
            r
        }
        _ => return Err(corrupt("bad rng line")),
    };
    let config_lines: usize = lines.number("config")?;
    let mut toml = String::new();
    for _ in 0..config_lines {
        toml.push_str(lines.next()?);
        toml.push('\n');
    }
    let config = RunConfig::from_toml(&toml).map_err(|e| corrupt(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(corrupt("embedded config does not match its hash"));
    }
    let history_lines: usize = lines.number("history")?;
    let mut history = Vec::with_capacity(history_lines);
    for _ in 0..history_lines {
        history.push(EpochRecord::from_csv(lines.next()?).map_err(|e| corrupt(e.to_string()))?);
    }
    let count: usize = lines.number("tensors")?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        entries.push(parse_entry(lines.next()?)?);
    }
    if lines.next()? != "end" {
        return Err(corrupt("missing `end` marker"));
    }
    let payload = &bytes[lines.pos..];
    let total: usize = entries.iter().map(|e| e.len).sum();
    if payload.len() < total * 4 {
        return Err(corrupt(format!("payload is truncated: {} of {} bytes", payload.len(), total * 4)));
    }
    if payload.len() > total * 4 {
        return Err(corrupt("trailing bytes after payload"));
    }
    let read = |e: &Entry| -> Result<Vec<T>> {
        if e.offset + e.len > total {
            return Err(corrupt(format!("tensor `{}` lies outside the payload", e.name)));
        }
        Ok(payload[e.offset * 4..(e.offset + e.len) * 4]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    };
    let find = |name: &str| entries.iter().find(|e| e.name == name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")));

    let users = find("users")?;
    let items = find("items")?;
    if users.shape.len() != 2 || items.shape.len() != 2 {
        return Err(corrupt("embedding tables must be matrices"));
    }
    let dim = config.model.dim;
    if users.shape[1] != dim || items.shape[1] != dim {
        return Err(corrupt(format!(
            "embedding width {} does not match configured dim {dim}",
            items.shape[1]
        )));
    }
    let mut metadata = Vec::with_capacity(config.metadata.channels.len());
    for c in 0..config.metadata.channels.len() {
        let e = find(&metadata_name(c))?;
        if e.shape != [items.shape[0], dim] {
            return Err(corrupt(format!("`{}` has shape {:?}", e.name, e.shape)));
        }
        metadata.push(Matrix::from_vec(e.shape[0], e.shape[1], read(e)?)?);
    }
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut model = InfoDcl::new(users.shape[0], items.shape[0], metadata, &config, &mut scratch)
        .map_err(|e| corrupt(format!("cannot rebuild model: {e}")))?;

    let mut known = config.metadata.channels.len();
    for p in model.params_mut() {
        let e = find(&p.name)?;
        if e.shape != p.shape {
            return Err(corrupt(format!("tensor `{}` has shape {:?}, configuration expects {:?}", p.name, e.shape, p.shape)));
        }
        p.values = read(e)?;
        known += 1;
    }
    let mut optimizer = Optimizer::new(config.train.optimizer());
    optimizer.step_count = steps;
    let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    let has_moments = entries.iter().any(|e| e.name.starts_with("opt."));
    if has_moments {
        for (name, shape) in &names {
            for (prefix, store) in [("opt.m.", &mut optimizer.first_moment), ("opt.v.", &mut optimizer.second_moment)] {
                let e = find(&format!("{prefix}{name}"))?;
                if &e.shape != shape {
                    return Err(corrupt(format!("optimizer state for `{name}` has shape {:?}", e.shape)));
                }
                store.push(read(e)?);
                known += 1;
            }
        }
    }
    if known != entries.len() {
        return Err(corrupt(format!("{} unexpected tensors", entries.len() - known)));
    }
    Ok(Checkpoint { trainer: Trainer { model, optimizer, config, rng, epoch }, history })
}

impl<T: Scalar> Checkpoint<T> {
    /// Refuses a checkpoint whose architecture differs from `config`.
    pub fn ensure_compatible(&self, config: &RunConfig) -> Result<()> {
        let have = &self.trainer.config;
        let checks: [(&str, String, String); 5] = [
            ("dim", have.model.dim.to_string(), config.model.dim.to_string()),
            ("svd_rank", have.model.svd_rank.to_string(), config.model.svd_rank.to_string()),
            ("steps", have.model.steps.to_string(), config.model.steps.to_string()),
            ("variant", have.model.variant.name().to_string(), config.model.variant.name().to_string()),
            ("channels", format!("{:?}", have.metadata.channels), format!("{:?}", config.metadata.channels)),
        ];
        for (key, a, b) in checks {
            if a != b {
                return Err(Error::config(key, format!("checkpoint was trained with {a}, configuration asks for {b}")));
            }
        }
        Ok(())
    }
}
