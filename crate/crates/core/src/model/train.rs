use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_batch_observed, forward_tape};
use super::NjodeParams;
use crate::error::{Error, Result};
use crate::losses::{loss_report, target_row, term, LossVariant, OLD_LOSS_EPS};
use crate::nn::{Adam, AdamConfig, Gradients, Tape};
use crate::paths::PathSample;

fn default_epochs() -> usize {
    200
}

fn default_batch() -> usize {
    200
}

fn default_loss() -> LossVariant {
    LossVariant::Io
}

fn default_eps() -> f64 {
    OLD_LOSS_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_loss")]
    pub loss: LossVariant,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 200,
            optimizer: AdamConfig::default(),
            loss: LossVariant::Io,
            eps: OLD_LOSS_EPS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.loss == LossVariant::Jump {
            return Err(Error::invalid(
                "the jump loss is a diagnostic and cannot be trained on",
            ));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps must be a nonnegative number"));
        }
        self.optimizer.validate()
    }
}

/// One row of the training history. Epoch 0 holds the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_jump_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation IO loss.
    pub best: NjodeParams,
    pub best_epoch: usize,
    pub last: NjodeParams,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }

    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean batch loss and its gradient, recorded with dropout when `rng` is
/// given.
fn batch_gradient(
    params: &NjodeParams,
    batch: &[&PathSample],
    variant: LossVariant,
    eps: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&params.store);
    let readouts = forward_tape(params, batch, &mut tape, rng)?;
    let d_v = params.arch.dims.d_v;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for ro in &readouts {
        let mut g_pre = Array2::zeros((ro.rows.len(), d_v));
        let mut g_post = Array2::zeros((ro.rows.len(), d_v));
        let mut any = false;
        for (r, (&p, &i)) in ro.rows.iter().zip(&ro.obs_pos).enumerate() {
            let s = batch[p];
            let n = s.pattern().len() - 1;
            if i == 0 || n == 0 {
                continue;
            }
            let target = target_row(variant, s, i)?;
            let pre = tape.value(ro.pre).row(r).to_vec();
            let post = tape.value(ro.post).row(r).to_vec();
            let t = term(
                variant,
                &pre,
                &post,
                &target,
                s.pattern().output_mask(i),
                eps,
            );
            let w = 1.0 / (n as f64 * b);
            loss += t.value * w;
            for j in 0..d_v {
                g_pre[[r, j]] = t.d_pre[j] * w;
                g_post[[r, j]] = t.d_post[j] * w;
            }
            any = true;
        }
        debug_assert!(ro.k > 0 || !any);
        if any {
            seeds.push((ro.pre, g_pre));
            seeds.push((ro.post, g_post));
        }
    }
    let grads = tape.backward(seeds)?;
    Ok((loss, grads))
}

/// Mean loss over `samples` and its gradient w.r.t. all parameters, without
/// dropout.
pub fn loss_gradient(
    params: &NjodeParams,
    samples: &[PathSample],
    variant: LossVariant,
    eps: f64,
) -> Result<(f64, Gradients)> {
    if samples.is_empty() {
        return Err(Error::invalid("no paths"));
    }
    let refs: Vec<&PathSample> = samples.iter().collect();
    batch_gradient(params, &refs, variant, eps, None)
}

/// Mean IO and jump losses in evaluation mode.
pub fn evaluate_losses(params: &NjodeParams, samples: &[PathSample]) -> Result<(f64, f64)> {
    let traces = forward_batch_observed(params, samples)?;
    let io = loss_report(LossVariant::Io, &traces, samples, 0.0)?.total;
    let jump = loss_report(LossVariant::Jump, &traces, samples, 0.0)?.total;
    Ok((io, jump))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Divergence { grid_index } => Error::TrainingDiverged {
            epoch: Some(epoch),
            reason: format!("latent state non-finite at grid index {grid_index}"),
        },
        Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged {
            epoch: Some(epoch),
            reason,
        },
        other => other,
    }
}

/// Minibatch Adam on the chosen loss; keeps the parameters with the lowest
/// validation IO loss.
pub fn train(
    params0: &NjodeParams,
    train_set: &[PathSample],
    val_set: &[PathSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be nonempty",
        ));
    }
    if train_set[0].grid() != val_set[0].grid() || train_set[0].dims() != val_set[0].dims() {
        return Err(Error::invalid(
            "training and validation sets must share grid and dimensions",
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params0.clone();
    let mut opt = Adam::new(cfg.optimizer, &params.store);

    let initial_train = {
        let traces = forward_batch_observed(&params, train_set).map_err(|e| diverged(0, e))?;
        loss_report(cfg.loss, &traces, train_set, cfg.eps)?.total
    };
    let (val_loss, val_jump_loss) =
        evaluate_losses(&params, val_set).map_err(|e| diverged(0, e))?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss,
        val_jump_loss,
        wall_time: start.elapsed().as_secs_f64(),
    }];
    let mut best = params.clone();
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PathSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch, cfg.loss, cfg.eps, Some(&mut rng))
                .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: Some(epoch),
                    reason: "non-finite training loss".into(),
                });
            }
            opt.step(&mut params.store, &grads)
                .map_err(|e| diverged(epoch, e))?;
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_jump_loss) =
            evaluate_losses(&params, val_set).map_err(|e| diverged(epoch, e))?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_jump_loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6} val_jump {:.3e} ({:.1}s)",
            rec.train_loss,
            rec.val_loss,
            rec.val_jump_loss,
            rec.wall_time
        );
        if val_loss < history[best_epoch].val_loss {
            best = params.clone();
            best_epoch = epoch;
        }
        history.push(rec);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}
