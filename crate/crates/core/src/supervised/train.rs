use serde::{Deserialize, Serialize};

use super::abmil::{Abmil, AbmilConfig, Mode};
use crate::coca::{AdamW, CosineSchedule};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2D};

/// Slide-level optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training schedule {self:?}")))
        }
    }
}

/// A labelled bag of instance embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBag {
    pub bag: Tensor2D,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    /// Set when the training labels contain a single class.
    pub degenerate: bool,
}

/// Draw weights `1 / count(label_i)`, so each class is drawn equally often
/// on average.
pub fn inverse_frequency_weights(labels: &[usize]) -> Vec<f64> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    labels.iter().map(|&l| 1.0 / counts[l] as f64).collect()
}

/// Indices for one epoch: `labels.len()` draws with replacement.
pub fn sample_epoch(labels: &[usize], rng: &mut SeededRng) -> Vec<usize> {
    let w = inverse_frequency_weights(labels);
    (0..labels.len()).map(|_| rng.weighted_index(&w)).collect()
}

/// Train an ABMIL head with batch size 1, AdamW and cosine decay.
pub fn train_abmil(
    data: &[LabeledBag],
    config: AbmilConfig,
    schedule: &TrainingSchedule,
) -> Result<(Abmil, AbmilReport)> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training slides".into()));
    }
    if let Some(b) = data.iter().find(|b| b.label >= config.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} >= {} classes",
            b.label, config.n_classes
        )));
    }
    let labels: Vec<usize> = data.iter().map(|b| b.label).collect();
    let degenerate = labels.iter().all(|&l| l == labels[0]);
    if degenerate {
        log::warn!(
            "all training slides share label {}; classifier is degenerate",
            labels[0]
        );
    }

    let mut rng = SeededRng::new(schedule.seed);
    let mut model = Abmil::new(config, &mut rng)?;
    let n = model.params().len();
    let mut opt = AdamW::new(
        n,
        schedule.beta1,
        schedule.beta2,
        schedule.weight_decay,
        vec![true; n],
    );
    let total = schedule.epochs * data.len();
    let sched = CosineSchedule {
        base_lr: schedule.lr,
        warmup_steps: 0,
        total_steps: total,
    };
    let mut curve = Vec::with_capacity(schedule.epochs);
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let order = sample_epoch(&labels, &mut rng);
        let mut sum = 0.0;
        for i in order {
            let keep = model.dropout_mask(data[i].bag.rows(), &mut rng);
            let (loss, grad) =
                model.loss_and_grad_at(model.params(), &data[i].bag, data[i].label, Some(keep))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {loss} at step {step}"),
                });
            }
            opt.step(model.params_mut(), &grad, sched.lr(step));
            sum += loss;
            step += 1;
        }
        curve.push(sum / data.len() as f64);
    }
    Ok((
        model,
        AbmilReport {
            loss_curve: curve,
            steps: step,
            degenerate,
        },
    ))
}

/// Eval-mode predicted class for each bag.
pub fn predict_bags(model: &Abmil, bags: &[Tensor2D]) -> Result<Vec<usize>> {
    bags.iter()
        .map(|b| {
            Ok(crate::zeroshot::argmax(
                &model.forward(b, Mode::Eval, None)?.probs,
            ))
        })
        .collect()
}
