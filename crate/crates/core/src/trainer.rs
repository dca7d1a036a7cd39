//! Epoch loop, validation-driven model selection and early stopping.

use crate::config::RunConfig;
use crate::data::{InteractionDataset, NormalizedAdjacency};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::linalg::Matrix;
use crate::model::InfoDcl;
use crate::nncore::Optimizer;
use crate::objectives::LossBreakdown;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One line of training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Validation recall at the monitored cutoff.
    pub valid_recall: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,total,recon,bpr,con,balance,reg,valid_recall";

    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, l.total, l.recon, l.bpr, l.con, l.balance, l.reg, self.valid_recall
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Parse { line: 0, message: format!("bad history record `{line}`") };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let n = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss: LossBreakdown { total: n(1)?, recon: n(2)?, bpr: n(3)?, con: n(4)?, balance: n(5)?, reg: n(6)? },
            valid_recall: n(7)?,
        })
    }
}

/// Mutable training state: model, optimizer and the sampling stream.
pub struct Trainer<T> {
    pub model: InfoDcl<T>,
    pub optimizer: Optimizer<T>,
    pub config: RunConfig,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes parameters from `train.seed`; metadata is supplied
    /// pre-built, one item-aligned matrix per channel.
    pub fn new(ds: &InteractionDataset, metadata: Vec<Matrix<T>>, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = InfoDcl::new(ds.num_users, ds.num_items, metadata, config, &mut rng)?;
        Ok(Trainer { model, optimizer: Optimizer::new(config.train.optimizer()), config: config.clone(), rng, epoch: 0 })
    }

    pub fn batches_per_epoch(&self, ds: &InteractionDataset) -> usize {
        ds.train.len().div_ceil(self.config.train.batch_size).max(1)
    }

    /// One pass of `|train| / batch_size` sampled batches; returns the mean
    /// per-batch breakdown.
    pub fn train_epoch(&mut self, ds: &InteractionDataset) -> Result<LossBreakdown> {
        let weights = self.config.effective_weights();
        let batches = self.batches_per_epoch(ds);
        let mut sum = LossBreakdown::default();
        for b in 0..batches {
            let plan = self.model.plan_batch(ds, self.config.train.batch_size, &mut self.rng)?;
            self.model.zero_grad();
            let parts = self.model.batch_loss(&plan, &weights, true)?;
            if !parts.is_finite() {
                return Err(Error::Diverged(format!("epoch {} batch {b}: {parts}", self.epoch + 1)));
            }
            self.optimizer.step(&mut self.model.params_mut())?;
            sum.accumulate(&parts);
        }
        self.epoch += 1;
        Ok(sum.scaled(1.0 / batches as f64))
    }

    pub fn evaluate(&self, ds: &InteractionDataset, adj: &NormalizedAdjacency, split: &[(u32, u32)]) -> EvalReport {
        let mut report = evaluate(
            &self.model.users.as_matrix(),
            &self.model.items.as_matrix(),
            ds,
            adj,
            self.config.eval.layers,
            split,
            &self.config.eval.cutoffs,
        );
        report.config_hash = self.config.hash();
        report
    }
}

/// Result of [`run_training`]: the best-validation snapshot and the full
/// per-epoch history.
pub struct TrainOutcome<T> {
    pub best: Trainer<T>,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains up to `train.epochs` epochs, keeping the snapshot with the best
/// validation recall and stopping after `train.patience` epochs without
/// improvement. `on_epoch` sees every record as it is produced.
pub fn run_training<T: Scalar>(
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    metadata: Vec<Matrix<T>>,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(ds, metadata, config)?;
    let monitor = config.eval.monitor_cutoff;
    let recall = |t: &Trainer<T>| t.evaluate(ds, adj, &ds.valid).recall_at(monitor).unwrap_or(0.0);

    let mut best_recall = recall(&trainer);
    let mut best = snapshot(&trainer);
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for _ in 0..config.train.epochs {
        let loss = trainer.train_epoch(ds)?;
        let valid_recall = recall(&trainer);
        let record = EpochRecord { epoch: trainer.epoch, loss, valid_recall };
        on_epoch(&record);
        history.push(record);
        if valid_recall > best_recall {
            best_recall = valid_recall;
            best = snapshot(&trainer);
            best_epoch = trainer.epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.train.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { best, best_epoch, best_recall, history, stopped_early })
}

fn snapshot<T: Scalar>(t: &Trainer<T>) -> Trainer<T> {
    Trainer {
        model: t.model.clone(),
        optimizer: t.optimizer.clone(),
        config: t.config.clone(),
        rng: t.rng.clone(),
        epoch: t.epoch,
    }
}
