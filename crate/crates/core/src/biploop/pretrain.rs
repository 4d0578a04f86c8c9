use serde::{Deserialize, Serialize};

use crate::corpus::{shuffle, SentencePair};
use crate::error::{Error, Result};
use crate::rlcore::{corpus_nll, mle_step, AdamState, OptimConfig};
use crate::scalar::Scalar;
use crate::seqmodel::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: f64,
    /// First epoch (1-based) at which a rise in validation perplexity decays the rate.
    pub decay_start: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Stop once validation perplexity falls below this value.
    pub stop_below: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            rate: 1e-3,
            decay_start: 5,
            decay_factor: 0.5,
            seed: 0,
            stop_below: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.rate > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("invalid pretraining rate or decay factor".into()));
        }
        Ok(())
    }
}

/// Halves (by `factor`) the rate whenever validation perplexity rises, from
/// epoch `start` on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateSchedule {
    rate: f64,
    start: usize,
    factor: f64,
    previous: Option<f64>,
}

impl RateSchedule {
    pub fn new(rate: f64, start: usize, factor: f64) -> Self {
        Self {
            rate,
            start,
            factor,
            previous: None,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Records validation perplexity after `epoch` (1-based); returns the rate
    /// for the next epoch.
    pub fn observe(&mut self, epoch: usize, perplexity: f64) -> f64 {
        if let Some(prev) = self.previous {
            if epoch >= self.start && perplexity > prev {
                self.rate *= self.factor;
            }
        }
        self.previous = Some(perplexity);
        self.rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_perplexity: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_perplexity: f64,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_perplexity: f64,
}

pub fn perplexity<T: Scalar>(params: &ModelParams<T>, pairs: &[SentencePair]) -> Result<f64> {
    Ok(corpus_nll(params, pairs)?.exp())
}

/// Supervised teacher-forced training. On return `actor` holds the
/// parameters with the best validation perplexity seen.
pub fn pretrain<T: Scalar>(
    actor: &mut ModelParams<T>,
    train: &[SentencePair],
    valid: &[SentencePair],
    cfg: &PretrainConfig,
    optim: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<PretrainReport> {
    cfg.validate()?;
    optim.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input("pretraining needs non-empty training and validation data".into()));
    }
    let initial_perplexity = perplexity(actor, valid)?;
    let mut best = (actor.clone(), initial_perplexity, 0usize);
    let mut adam = AdamState::new(actor.dims());
    let mut schedule = RateSchedule::new(cfg.rate, cfg.decay_start, cfg.decay_factor);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, cfg.seed.wrapping_add(epoch as u64));
        let rate = schedule.rate();
        let mut nll = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SentencePair> = chunk.iter().map(|&i| train[i].clone()).collect();
            nll += mle_step(actor, &mut adam, &batch, rate, optim)?.nll_per_token;
            batches += 1;
        }
        let valid_perplexity = perplexity(actor, valid)?;
        schedule.observe(epoch, valid_perplexity);
        let report = EpochReport {
            epoch,
            train_nll: nll / batches as f64,
            valid_perplexity,
            rate,
        };
        on_epoch(&report);
        epochs.push(report);
        if valid_perplexity < best.1 {
            best = (actor.clone(), valid_perplexity, epoch);
        }
        if cfg.stop_below.is_some_and(|limit| valid_perplexity < limit) {
            break;
        }
    }
    let (params, best_perplexity, best_epoch) = best;
    *actor = params;
    Ok(PretrainReport {
        initial_perplexity,
        epochs,
        best_epoch,
        best_perplexity,
    })
}
