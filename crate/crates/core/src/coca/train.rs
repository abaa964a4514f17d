use serde::{Deserialize, Serialize};

use super::loss::{joint_loss, Pair};
use super::model::ToyModel;
use super::optim::{AdamW, CosineSchedule};
use super::params::ToyConfig;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub caption_weight: f64,
    pub contrastive_weight: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 20,
            caption_weight: 1.0,
            contrastive_weight: 1.0,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub captioning: f64,
    pub final_lr: f64,
}

/// What to do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

/// Initializes a model and trains it on `corpus`.
pub fn train_toy(
    model_config: ToyConfig,
    corpus: &[Pair],
    config: &TrainConfig,
) -> Result<(ToyModel, Vec<EpochLog>)> {
    let mut rng = SeededRng::derive(config.seed, 0);
    let mut model = ToyModel::new(model_config, &mut rng)?;
    let log = fit(&mut model, corpus, config, |_, _| EpochControl::Continue)?;
    Ok((model, log))
}

/// Trains `model` in place. `on_epoch` sees the model after each epoch and
/// may stop training early.
pub fn fit<F>(
    model: &mut ToyModel,
    corpus: &[Pair],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &ToyModel) -> EpochControl,
{
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "training corpus needs at least 2 pairs".into(),
        ));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size and epochs must be positive".into(),
        ));
    }
    let per_epoch = corpus.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps: per_epoch * config.epochs,
    };
    let mut opt = AdamW::new(
        model.num_params(),
        config.beta1,
        config.beta2,
        config.weight_decay,
        model.layout().decay_mask(),
    );
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        SeededRng::derive(config.seed, 1 + epoch as u64).shuffle(&mut order);
        let (mut total, mut con, mut cap) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Pair> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let out = joint_loss(
                model,
                &batch,
                config.caption_weight,
                config.contrastive_weight,
            )
            .map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            let mut grad = out.grad;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite gradient".into(),
                });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            lr = schedule.lr(step);
            opt.step(model.params_mut(), &grad, lr);
            step += 1;
            let w = chunk.len() as f64;
            total += out.loss * w;
            con += out.contrastive * w;
            cap += out.captioning * w;
        }
        let n = corpus.len() as f64;
        let log = EpochLog {
            epoch,
            loss: total / n,
            contrastive: con / n,
            captioning: cap / n,
            final_lr: lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (contrastive {:.4}, captioning {:.4})",
            log.loss,
            log.contrastive,
            log.captioning
        );
        if !log.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "loss diverged".into(),
            });
        }
        let control = on_epoch(&log, model);
        logs.push(log);
        if control == EpochControl::Stop {
            break;
        }
    }
    Ok(logs)
}
