//! Mini-batch training with Adam and early stopping on validation HR@10.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainBatch;
use crate::datakit::{LeaveOneOut, UserSplit};
use crate::diffcore::{Adam, AdamConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalSplit};
use crate::hscache::HiddenSource;
use crate::model::CrossanModel;
use crate::rng::SeedStreams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_steps_per_epoch: Option<usize>,
    /// Evaluate validation HR@10 on at most this many users.
    pub eval_users: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            optimizer: AdamConfig::default(),
            patience: 5,
            max_steps_per_epoch: None,
            eval_users: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!("bad optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// One optimizer step, with the simplex health of every gate and fusion
/// weight row seen during its forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub min_weight: f64,
    pub max_sum_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_hr10: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_hr10: f64,
}

impl TrainReport {
    /// Training log as JSON lines `{epoch, loss, val_hr10, seconds}`.
    pub fn log_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

fn simplex_stats(w: &Tensor, min: &mut f64, err: &mut f64) {
    for r in 0..w.rows() {
        let row = w.row(r);
        *min = row.iter().copied().fold(*min, f64::min);
        *err = err.max((row.iter().sum::<f64>() - 1.0).abs());
    }
}

/// Optimizer state and batch order across epochs.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    streams: SeedStreams,
    opt: Adam,
    step: usize,
    users: Vec<&'a UserSplit>,
    log_pop: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a LeaveOneOut, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        split.require_train_pairs()?;
        Ok(Self {
            opt: Adam::new(config.optimizer),
            config,
            streams: SeedStreams::new(seed),
            step: 0,
            users: split.users.iter().filter(|u| u.train.len() >= 2).collect(),
            log_pop: split.popularity()?.log_probs(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Users in this epoch's order, chunked into batches.
    pub fn batches(&self, epoch: usize, max_len: usize) -> Vec<TrainBatch> {
        let mut order = self.users.clone();
        order.shuffle(&mut self.streams.stream(&format!("batch.{epoch}")));
        let mut out: Vec<TrainBatch> = order
            .chunks(self.config.batch_size)
            .map(|c| TrainBatch::from_splits(c, max_len))
            .collect();
        if let Some(cap) = self.config.max_steps_per_epoch {
            out.truncate(cap);
        }
        out
    }

    /// One pass over the batches of `epoch`.
    pub fn run_epoch(
        &mut self,
        model: &mut CrossanModel,
        source: &dyn HiddenSource,
        epoch: usize,
    ) -> Result<Vec<StepRecord>> {
        let batches = self.batches(epoch, model.config.seqrec.max_seq_len);
        let mut records = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let step = self.step;
            let mut g = Graph::training(self.streams.stream(&format!("dropout.{epoch}.{i}")));
            let nan = |e: Error| match e {
                Error::NonFinite(_) => Error::NanLoss { step },
                other => other,
            };
            batch.validate(self.log_pop.len())?;
            let plan = batch.plan();
            let (emb, fwd) = model.embedding_var(&mut g, source, &plan.items).map_err(nan)?;
            let loss = plan.loss(&mut g, &model.store, &model.seq, emb, &self.log_pop).map_err(nan)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NanLoss { step });
            }

            let (mut min_weight, mut max_sum_error) = (f64::INFINITY, 0.0);
            for w in fwd.side.gates.iter().flatten().chain(fwd.fusion.weights.iter()) {
                simplex_stats(g.value(*w), &mut min_weight, &mut max_sum_error);
            }

            g.backward(loss).map_err(nan)?;
            model.store.zero_grads();
            g.accumulate_into(&mut model.store);
            self.opt.step(&mut model.store);
            self.step += 1;
            records.push(StepRecord {
                epoch,
                step,
                loss: value,
                min_weight,
                max_sum_error,
            });
        }
        Ok(records)
    }
}

/// Train `model` in place. On return the model holds the parameters of the
/// best validation epoch.
pub fn train(
    model: &mut CrossanModel,
    split: &LeaveOneOut,
    source: &dyn HiddenSource,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(split, config.clone(), seed)?;
    let mut report = TrainReport {
        best_val_hr10: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = model.store.clone();
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let steps = trainer.run_epoch(model, source, epoch)?;
        let seconds = t0.elapsed().as_secs_f64();
        let loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64;
        let val = evaluate(model, source, split, EvalSplit::Valid, config.eval_users)?.hr10;
        log::info!("epoch {epoch}: loss {loss:.5} val HR@10 {val:.4} ({seconds:.2}s)");
        report.steps.extend(steps);
        report.epochs.push(EpochLog {
            epoch,
            loss,
            val_hr10: val,
            seconds,
        });
        if val > report.best_val_hr10 {
            report.best_val_hr10 = val;
            report.best_epoch = Some(epoch);
            best = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    model.store = best;
    Ok(report)
}
