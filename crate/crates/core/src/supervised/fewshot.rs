use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::abmil::AbmilConfig;
use super::train::{predict_bags, train_abmil, LabeledBag, TrainingSchedule};
use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, weighted_f1, LabeledPredictions};
use crate::numerics::SeededRng;

/// Labels per class and replicate count for a few-shot sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPlan {
    pub shots: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl FewShotPlan {
    pub fn new(seed: u64) -> Self {
        FewShotPlan {
            shots: vec![1, 2, 4, 8, 16],
            replicates: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) || self.replicates == 0 {
            return Err(Error::Config(format!("invalid few-shot plan {self:?}")));
        }
        Ok(())
    }

    /// Seed of replicate `r` at the `s`-th shot count.
    pub fn replicate_seed(&self, s: usize, r: usize) -> u64 {
        SeededRng::derive(self.seed, (s * self.replicates + r) as u64).next_u64()
    }
}

/// One training subset of a few-shot sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub n_c: usize,
    pub replicate: usize,
    pub seed: u64,
    /// Indices into the pool, grouped by class, ascending within each class.
    pub indices: Vec<usize>,
}

/// Stratified draws without replacement: for every shot count and
/// replicate, `n_c` examples per class (fewer, with a warning, when a class
/// is smaller).
pub fn build_fewshot_splits(
    labels: &[usize],
    n_classes: usize,
    plan: &FewShotPlan,
) -> Result<Vec<FewShotSplit>> {
    plan.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} >= {n_classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "class {c} absent from the training pool"
        )));
    }
    let mut out = Vec::with_capacity(plan.shots.len() * plan.replicates);
    for (s, &n_c) in plan.shots.iter().enumerate() {
        for (c, members) in by_class.iter().enumerate() {
            if members.len() < n_c {
                log::warn!(
                    "class {c} has {} examples; clamping n_c = {n_c}",
                    members.len()
                );
            }
        }
        for r in 0..plan.replicates {
            let seed = plan.replicate_seed(s, r);
            let mut rng = SeededRng::new(seed);
            let mut indices = Vec::new();
            for members in &by_class {
                let mut pick: Vec<usize> = rng
                    .sample_without_replacement(members.len(), n_c)
                    .into_iter()
                    .map(|j| members[j])
                    .collect();
                pick.sort_unstable();
                indices.extend(pick);
            }
            out.push(FewShotSplit {
                n_c,
                replicate: r,
                seed,
                indices,
            });
        }
    }
    Ok(out)
}

/// One JSON line of few-shot results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRecord {
    pub n_c: usize,
    pub replicate: usize,
    pub seed: u64,
    pub n_train: usize,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
}

/// Train ABMIL on every split (in parallel) and score it on `test`.
pub fn run_fewshot(
    pool: &[LabeledBag],
    test: &[LabeledBag],
    config: &AbmilConfig,
    schedule: &TrainingSchedule,
    plan: &FewShotPlan,
) -> Result<Vec<FewShotRecord>> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let labels: Vec<usize> = pool.iter().map(|b| b.label).collect();
    let splits = build_fewshot_splits(&labels, config.n_classes, plan)?;
    let truth: Vec<usize> = test.iter().map(|b| b.label).collect();
    let bags: Vec<_> = test.iter().map(|b| b.bag.clone()).collect();
    splits
        .par_iter()
        .map(|split| {
            let train: Vec<LabeledBag> = split.indices.iter().map(|&i| pool[i].clone()).collect();
            let sched = TrainingSchedule {
                seed: split.seed,
                ..schedule.clone()
            };
            let (model, _) = train_abmil(&train, config.clone(), &sched)?;
            let preds = LabeledPredictions::new(
                truth.clone(),
                predict_bags(&model, &bags)?,
                config.n_classes,
            )?;
            Ok(FewShotRecord {
                n_c: split.n_c,
                replicate: split.replicate,
                seed: split.seed,
                n_train: train.len(),
                balanced_accuracy: balanced_accuracy(&preds)?,
                weighted_f1: weighted_f1(&preds)?,
            })
        })
        .collect()
}

/// Median balanced accuracy per shot count, in plan order.
pub fn median_by_shots(records: &[FewShotRecord], plan: &FewShotPlan) -> Vec<(usize, f64)> {
    plan.shots
        .iter()
        .map(|&n_c| {
            let mut v: Vec<f64> = records
                .iter()
                .filter(|r| r.n_c == n_c)
                .map(|r| r.balanced_accuracy)
                .collect();
            v.sort_by(f64::total_cmp);
            let m = match v.len() {
                0 => f64::NAN,
                n if n % 2 == 1 => v[n / 2],
                n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
            };
            (n_c, m)
        })
        .collect()
}

/// Whether `values` is nondecreasing except for at most one drop no larger
/// than `slack`.
pub fn nearly_monotone(values: &[f64], slack: f64) -> bool {
    let drops: Vec<f64> = values
        .windows(2)
        .filter(|w| w[1] < w[0])
        .map(|w| w[0] - w[1])
        .collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= slack)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(shots: Vec<usize>) -> FewShotPlan {
        FewShotPlan {
            shots,
            replicates: 5,
            seed: 3,
        }
    }

    #[test]
    fn full_class_is_identical_across_replicates() {
        let labels = [0, 1, 0, 1, 0, 1];
        let splits = build_fewshot_splits(&labels, 2, &plan(vec![3, 5])).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            assert_eq!(s.indices, vec![0, 2, 4, 1, 3, 5]);
        }
    }

    #[test]
    fn one_shot_two_classes() {
        let labels = [0, 0, 0, 1, 1, 1, 1];
        let splits = build_fewshot_splits(&labels, 2, &plan(vec![1])).unwrap();
        for s in &splits {
            assert_eq!(s.indices.len(), 2);
            assert_eq!(labels[s.indices[0]], 0);
            assert_eq!(labels[s.indices[1]], 1);
        }
        let seeds: std::collections::HashSet<u64> = splits.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn absent_class_is_an_error() {
        assert!(build_fewshot_splits(&[0, 0, 2], 3, &plan(vec![1])).is_err());
    }

    #[test]
    fn draws_match_enumeration() {
        // all C(6, 2) = 15 subsets of a 6-item pool should be equally likely
        let mut subsets = Vec::new();
        for a in 0..6 {
            for b in a + 1..6 {
                subsets.push(vec![a, b]);
            }
        }
        let labels = [0usize; 6];
        let trials = 3000;
        let mut counts = vec![0usize; subsets.len()];
        for seed in 0..trials {
            let p = FewShotPlan {
                shots: vec![2],
                replicates: 5,
                seed,
            };
            for s in build_fewshot_splits(&labels, 1, &p).unwrap() {
                let k = subsets
                    .iter()
                    .position(|x| *x == s.indices)
                    .expect("draw outside the enumeration");
                counts[k] += 1;
            }
        }
        let expected = (trials * 5) as f64 / 15.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 14 degrees of freedom
        assert!(chi2 < 36.12, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn monotone_check() {
        assert!(nearly_monotone(&[0.1, 0.2, 0.2, 0.5], 0.02));
        assert!(nearly_monotone(&[0.1, 0.3, 0.29, 0.5], 0.02));
        assert!(!nearly_monotone(&[0.1, 0.3, 0.2, 0.5], 0.02));
        assert!(!nearly_monotone(&[0.3, 0.29, 0.4, 0.39], 0.02));
    }
}
