use std::path::Path;

use rand::seq::SliceRandom;

use super::{init_params, predicted_class, ModelParams, Network, Optimizer, OptimizerKind};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::{Cohort, Split};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-5,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adamax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "batch size and learning rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean training loss and accuracy over the mini-batches of one epoch,
/// measured on the forward passes that produced the updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Trains from `init_params(config, seed)`. `cohort` should already be
/// normalized; only its training split is used.
pub fn train(cohort: &Cohort, network: &Network, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params(network.config(), cfg.seed)?;
    train_from(cohort, network, params, cfg)
}

/// Mini-batch training from the given parameters. Batch order is drawn from
/// the `Shuffle` stream of `cfg.seed`, reshuffled every epoch.
pub fn train_from(cohort: &Cohort, network: &Network, mut params: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.check(network.config())?;
    let mut order = cohort.indices(Split::Train);
    if order.is_empty() {
        return Err(Error::DegenerateInput("training split is empty".into()));
    }
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut optimizer = Optimizer::new(cfg.optimizer, &params);
    let names = params.names().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let locate = |e: Error| match e {
                Error::NumericFault(msg) => {
                    Error::NumericFault(format!("epoch {epoch}, batch {}: {msg}", batch_no + 1))
                }
                other => other,
            };
            let subjects: Vec<_> = batch.iter().map(|&i| &cohort.subjects[i]).collect();
            // The parameters move onto the tape and back, so the batch does
            // not copy the dense head weights.
            let mut tape = Tape::new();
            let vars: Vec<_> = params.into_tensors().into_iter().map(|t| tape.param(t)).collect();
            let (loss, fwd) = network.loss(&mut tape, &vars, &subjects).map_err(locate)?;
            loss_sum += tape.value(loss).data()[0] * batch.len() as f64;
            let classes = network.config().classes;
            for (logits, s) in tape.value(fwd.logits).data().chunks_exact(classes).zip(&subjects) {
                correct += usize::from(predicted_class(logits) == s.label);
            }
            let mut grads = tape.backward(loss).map_err(locate)?;
            let tensors: Vec<_> = vars.iter().map(|v| tape.take_value(*v)).collect();
            let grads: Vec<_> = vars.iter().zip(&tensors).map(|(v, p)| grads.take_or_zeros(*v, p)).collect();
            drop(tape);
            params = ModelParams::new(names.clone(), tensors)?;
            optimizer.step(&mut params, &grads, cfg.learning_rate).map_err(locate)?;
        }
        let n = order.len() as f64;
        history.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            train_acc: correct as f64 / n,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Training log CSV: `epoch,loss,train_acc`.
pub fn write_training_log(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "train_acc"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.loss.to_string(), h.train_acc.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochStats>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |_| Error::parse(path, i + 2, "bad number");
        out.push(EpochStats {
            epoch: record[0].parse().map_err(|_| Error::parse(path, i + 2, "bad epoch"))?,
            loss: record[1].parse().map_err(bad)?,
            train_acc: record[2].parse().map_err(bad)?,
        });
    }
    Ok(out)
}
