use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned truth labels, predicted labels and optional per-class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPredictions {
    pub n_classes: usize,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    #[serde(default)]
    pub scores: Option<Vec<Vec<f64>>>,
}

impl LabeledPredictions {
    pub fn new(truth: Vec<usize>, pred: Vec<usize>, n_classes: usize) -> Result<Self> {
        let p = LabeledPredictions {
            n_classes,
            truth,
            pred,
            scores: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_scores(mut self, scores: Vec<Vec<f64>>) -> Result<Self> {
        self.scores = Some(scores);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.truth.len() != self.pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                self.truth.len(),
                self.pred.len()
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("zero classes".into()));
        }
        if let Some(&bad) = self
            .truth
            .iter()
            .chain(&self.pred)
            .find(|&&l| l >= self.n_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= {} classes",
                self.n_classes
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != self.truth.len() || s.iter().any(|r| r.len() != self.n_classes) {
                return Err(Error::Shape("scores must be N x C".into()));
            }
            if s.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite score".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Rows `idx` (with repetition), as used by resampling.
    pub fn select(&self, idx: &[usize]) -> LabeledPredictions {
        LabeledPredictions {
            n_classes: self.n_classes,
            truth: idx.iter().map(|&i| self.truth[i]).collect(),
            pred: idx.iter().map(|&i| self.pred[i]).collect(),
            scores: self
                .scores
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    /// `counts[t][p]`.
    pub fn confusion(&self) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; self.n_classes]; self.n_classes];
        for (&t, &p) in self.truth.iter().zip(&self.pred) {
            m[t][p] += 1;
        }
        m
    }
}

pub fn accuracy(p: &LabeledPredictions) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = p.truth.iter().zip(&p.pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Mean per-class recall over all `n_classes`; every class needs support.
pub fn balanced_accuracy(p: &LabeledPredictions) -> Result<f64> {
    let cm = p.confusion();
    let mut total = 0.0;
    for (c, row) in cm.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            return Err(Error::UndefinedMetric(format!("class {c} has no samples")));
        }
        total += row[c] as f64 / support as f64;
    }
    Ok(total / p.n_classes as f64)
}

/// Per-class `(F1, support)`; a zero denominator gives F1 = 0.
pub fn per_class_f1(p: &LabeledPredictions) -> Vec<(f64, usize)> {
    let cm = p.confusion();
    (0..p.n_classes)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let support: usize = cm[c].iter().sum();
            let predicted: usize = cm.iter().map(|r| r[c]).sum();
            let denom = (support + predicted) as f64;
            (if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }, support)
        })
        .collect()
}

/// `Σ support·value / Σ support`.
pub fn support_weighted(values: &[(f64, usize)]) -> Result<f64> {
    let total: usize = values.iter().map(|v| v.1).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("zero total support".into()));
    }
    Ok(values.iter().map(|&(v, s)| v * s as f64).sum::<f64>() / total as f64)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(p: &LabeledPredictions) -> Result<f64> {
    support_weighted(&per_class_f1(p))
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by exhaustive pair counting.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Result<f64> {
    if positive.len() != scores.len() {
        return Err(Error::Shape("labels and scores differ in length".into()));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &y)| y)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &y)| !y)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Unweighted mean of one-vs-one AUCs over all ordered class pairs `(i, j)`:
/// samples of classes `i` and `j`, class `i` positive, ranked by score `i`.
pub fn auc_roc(p: &LabeledPredictions) -> Result<f64> {
    let scores = p
        .scores
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("AUC needs per-class scores".into()))?;
    let c = p.n_classes;
    if c < 2 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least two classes".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let (mut y, mut s) = (Vec::new(), Vec::new());
            for (k, &t) in p.truth.iter().enumerate() {
                if t == i || t == j {
                    y.push(t == i);
                    s.push(scores[k][i]);
                }
            }
            total += binary_auc(&y, &s)?;
        }
    }
    Ok(total / (c * (c - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    None,
    Quadratic,
}

/// Cohen's κ = 1 − Σ w·O / Σ w·E with observed and expected (marginal
/// product) proportions.
pub fn cohens_kappa(p: &LabeledPredictions, weighting: KappaWeighting) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::UndefinedMetric("kappa of an empty set".into()));
    }
    let c = p.n_classes;
    let n = p.len() as f64;
    let cm = p.confusion();
    let row: Vec<f64> = cm
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64 / n)
        .collect();
    let col: Vec<f64> = (0..c)
        .map(|j| cm.iter().map(|r| r[j]).sum::<usize>() as f64 / n)
        .collect();
    let w = |i: usize, j: usize| match weighting {
        KappaWeighting::None => f64::from(u8::from(i != j)),
        KappaWeighting::Quadratic => {
            if c == 1 {
                0.0
            } else {
                let d = (i as f64 - j as f64) / (c as f64 - 1.0);
                d * d
            }
        }
    };
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            obs += w(i, j) * cm[i][j] as f64 / n;
            exp += w(i, j) * row[i] * col[j];
        }
    }
    if exp == 0.0 {
        return if obs == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric(
                "kappa with zero expected disagreement".into(),
            ))
        };
    }
    Ok(1.0 - obs / exp)
}

/// Fraction of queries whose ground-truth rank (1-based) is ≤ `k`.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("recall over zero queries".into()));
    }
    let hits = ranks
        .iter()
        .filter(|r| matches!(r, Some(x) if *x <= k))
        .count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Mean of Recall@1, @5 and @10.
pub fn mean_recall(ranks: &[Option<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for k in RECALL_KS {
        total += recall_at_k(ranks, k)?;
    }
    Ok(total / RECALL_KS.len() as f64)
}

/// ROUGE-1 F-measure over lowercased whitespace tokens with clipped counts.
pub fn rouge1(candidate: &str, reference: &str) -> Result<f64> {
    let cand: Vec<String> = candidate
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    let refs: Vec<String> = reference
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    if refs.is_empty() {
        return Err(Error::UndefinedMetric(
            "ROUGE-1 with an empty reference".into(),
        ));
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &refs {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &cand {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / cand.len() as f64;
    let recall = overlap as f64 / refs.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn lp(t: &[usize], p: &[usize], c: usize) -> LabeledPredictions {
        LabeledPredictions::new(t.to_vec(), p.to_vec(), c).unwrap()
    }

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(
            balanced_accuracy(&lp(&[0, 1, 2], &[0, 1, 2], 3)).unwrap(),
            1.0
        );
        assert_eq!(
            balanced_accuracy(&lp(&[0, 0, 1, 1], &[0, 0, 0, 0], 2)).unwrap(),
            0.5
        );
        let p = lp(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 0, 0, 1], 3);
        assert!((balanced_accuracy(&p).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            balanced_accuracy(&lp(&[0], &[0], 2)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn balanced_accuracy_random_predictor() {
        let mut rng = SeededRng::new(1);
        let truth: Vec<usize> = (0..50)
            .map(|i| if i < 40 { 0 } else { 1 + i % 2 })
            .collect();
        let trials = 10_000;
        let vals: Vec<f64> = (0..trials)
            .map(|_| {
                let pred: Vec<usize> = (0..50).map(|_| rng.below(3)).collect();
                balanced_accuracy(&lp(&truth, &pred, 3)).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / trials as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!((mean - 1.0 / 3.0).abs() < 3.0 * (var / trials as f64).sqrt());
    }

    #[test]
    fn weighted_f1_cases() {
        assert_eq!(weighted_f1(&lp(&[0, 1], &[0, 1], 2)).unwrap(), 1.0);
        assert_eq!(weighted_f1(&lp(&[0, 0], &[0, 0], 1)).unwrap(), 1.0);
        // class 0: tp 2, support 3, predicted 2 -> F1 0.8; class 1: tp 1, support 1, predicted 2 -> 2/3
        let p = lp(&[0, 0, 0, 1], &[0, 0, 1, 1], 2);
        let f0 = 0.8;
        let f1 = 2.0 / 3.0;
        assert!((weighted_f1(&p).unwrap() - (3.0 * f0 + f1) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_hand_example() {
        assert!((support_weighted(&[(0.8, 3), (0.5, 1)]).unwrap() - 0.725).abs() < 1e-12);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(binary_auc(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(
            binary_auc(&[true, false, true], &[0.5, 0.5, 0.5]).unwrap(),
            0.5
        );
        let y = [true, false, true, false];
        let s = [0.8, 0.6, 0.6, 0.2];
        // pairs: (0.8>0.6) (0.8>0.2) (0.6=0.6) (0.6>0.2) -> 3.5/4
        assert_eq!(binary_auc(&y, &s).unwrap(), 0.875);
        assert!(binary_auc(&[true], &[1.0]).is_err());
    }

    #[test]
    fn multiclass_auc_perfect() {
        let p = lp(&[0, 1, 2], &[0, 1, 2], 3)
            .with_scores(vec![
                vec![0.8, 0.1, 0.1],
                vec![0.1, 0.8, 0.1],
                vec![0.1, 0.1, 0.8],
            ])
            .unwrap();
        assert_eq!(auc_roc(&p).unwrap(), 1.0);
    }

    #[test]
    fn kappa_cases() {
        for w in [KappaWeighting::None, KappaWeighting::Quadratic] {
            assert_eq!(
                cohens_kappa(&lp(&[0, 1, 2, 1], &[0, 1, 2, 1], 3), w).unwrap(),
                1.0
            );
        }
        let k = cohens_kappa(&lp(&[0, 0, 1, 1], &[1, 1, 0, 0], 2), KappaWeighting::None).unwrap();
        assert!((k + 1.0).abs() < 1e-12);
        assert_eq!(
            cohens_kappa(&lp(&[0, 0], &[0, 0], 2), KappaWeighting::None).unwrap(),
            1.0
        );
        assert_eq!(
            cohens_kappa(&lp(&[0, 0], &[1, 1], 2), KappaWeighting::None).unwrap(),
            0.0
        );
    }

    #[test]
    fn recall_cases() {
        let ranks = [Some(1), Some(6), Some(11)];
        assert!((recall_at_k(&ranks, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&ranks, 5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&ranks, 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((mean_recall(&ranks).unwrap() - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[Some(1)], 1).unwrap(), 1.0);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge1("a b c", "A B C").unwrap(), 1.0);
        assert_eq!(rouge1("x y", "a b").unwrap(), 0.0);
        assert!((rouge1("a b c", "a c d e").unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!(
            (rouge1("a a a", "a b").unwrap() - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs()
                < 1e-12
        );
        assert!(rouge1("a", "").is_err());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let n = 12;
            let truth: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.next_f64()).collect()).collect();
            let p = lp(&truth, &pred, 3).with_scores(scores).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let q = p.select(&perm);
            prop_assert_eq!(balanced_accuracy(&p).unwrap(), balanced_accuracy(&q).unwrap());
            prop_assert_eq!(weighted_f1(&p).unwrap(), weighted_f1(&q).unwrap());
            prop_assert_eq!(auc_roc(&p).unwrap(), auc_roc(&q).unwrap());
            prop_assert_eq!(
                cohens_kappa(&p, KappaWeighting::Quadratic).ok(),
                cohens_kappa(&q, KappaWeighting::Quadratic).ok()
            );
        }

        #[test]
        fn auc_monotone_invariant(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
            let s: Vec<f64> = (0..10).map(|_| (rng.below(5) as f64) / 4.0).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(binary_auc(&y, &s).unwrap(), binary_auc(&y, &t).unwrap());
        }
    }
}
