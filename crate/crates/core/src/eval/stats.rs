use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_resamples: usize,
    pub level: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redrawn: usize,
}

/// Nearest-rank percentile of sorted data: the value at 1-based rank
/// `ceil(q·n)` (rank 1 when `q = 0`).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Percentile bootstrap over `n_samples` rows. `metric` receives the row
/// indices of one resample (drawn with replacement). Resample `b` uses the
/// stream `derive(seed, b)`, so the result is independent of thread count.
pub fn bootstrap_ci<F>(
    n_samples: usize,
    metric: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n_samples < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least 2 samples".into(),
        ));
    }
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(
            "need n_resamples >= 1 and level in (0, 1)".into(),
        ));
    }
    let all: Vec<usize> = (0..n_samples).collect();
    let point = metric(&all)?;
    let budget = n_resamples / 2;
    let draws = (0..n_resamples)
        .into_par_iter()
        .map(|b| -> Result<(Option<f64>, usize)> {
            let mut rng = SeededRng::derive(seed, b as u64);
            let mut idx = vec![0; n_samples];
            let mut failures = 0;
            loop {
                idx.iter_mut().for_each(|i| *i = rng.below(n_samples));
                match metric(&idx) {
                    Ok(v) => return Ok((Some(v), failures)),
                    Err(Error::UndefinedMetric(_)) => {
                        failures += 1;
                        if failures > budget {
                            return Ok((None, failures));
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let redrawn: usize = draws.iter().map(|d| d.1).sum();
    if redrawn > budget || draws.iter().any(|d| d.0.is_none()) {
        return Err(Error::UndefinedMetric(format!(
            "metric undefined on {redrawn} resamples (limit {budget})"
        )));
    }
    let mut values: Vec<f64> = draws.into_iter().map(|d| d.0.unwrap()).collect();
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(ConfidenceInterval {
        point,
        lower: nearest_rank(&values, alpha / 2.0),
        upper: nearest_rank(&values, 1.0 - alpha / 2.0),
        n_resamples,
        level,
        redrawn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    /// True when every swap pattern was enumerated.
    pub exhaustive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_permutations: usize,
    pub seed: u64,
    /// Count only `|Δ'| > |Δ|` instead of `≥`.
    pub strict: bool,
    /// Enumerate all `2^n` swap patterns when that is no more than
    /// `n_permutations`.
    pub exact_when_feasible: bool,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            n_permutations: 1000,
            seed: 0,
            strict: false,
            exact_when_feasible: true,
        }
    }
}

const TIE_TOL: f64 = 1e-12;

/// Two-sided paired permutation test of `metric(a) − metric(b)`. Each
/// permutation swaps the pair `(a_i, b_i)` independently with probability ½;
/// permutation 0 is the identity.
pub fn paired_permutation_test<T, F>(
    a: &[T],
    b: &[T],
    metric: F,
    config: &PermutationConfig,
) -> Result<PermutationResult>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64> + Sync,
{
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} vs {} paired predictions",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || config.n_permutations == 0 {
        return Err(Error::InvalidArgument(
            "need at least one pair and one permutation".into(),
        ));
    }
    let n = a.len();
    let observed = metric(a)? - metric(b)?;
    let threshold = observed.abs();
    let delta = |swap: &dyn Fn(usize) -> bool| -> Result<f64> {
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            if swap(i) {
                x.push(b[i].clone());
                y.push(a[i].clone());
            } else {
                x.push(a[i].clone());
                y.push(b[i].clone());
            }
        }
        Ok(metric(&x)? - metric(&y)?)
    };
    let exceeds = |d: f64| {
        let d = d.abs();
        let tol = TIE_TOL * threshold.max(1.0);
        if config.strict {
            d > threshold + tol
        } else {
            d >= threshold - tol
        }
    };
    let exhaustive =
        config.exact_when_feasible && n < 63 && (1u64 << n) <= config.n_permutations as u64;
    let (hits, total) = if exhaustive {
        let patterns = 1u64 << n;
        let hits = (0..patterns)
            .into_par_iter()
            .map(|mask| delta(&|i| mask >> i & 1 == 1).map(|d| usize::from(exceeds(d))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        (hits, patterns as usize)
    } else {
        let hits = (0..config.n_permutations)
            .into_par_iter()
            .map(|p| {
                if p == 0 {
                    return Ok(1);
                }
                let mut rng = SeededRng::derive(config.seed, p as u64);
                let mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
                delta(&|i| mask[i]).map(|d| usize::from(exceeds(d)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        (hits, config.n_permutations)
    };
    Ok(PermutationResult {
        observed,
        p_value: hits as f64 / total as f64,
        n_permutations: total,
        exhaustive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(rows: &[(usize, usize)]) -> Result<f64> {
        Ok(rows.iter().filter(|(t, p)| t == p).count() as f64 / rows.len() as f64)
    }

    #[test]
    fn constant_metric_ci() {
        let ci = bootstrap_ci(10, |_| Ok(1.0), 1000, 0.95, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.0, 1.0));
    }

    #[test]
    fn two_point_support() {
        let hits = [1.0, 0.0];
        let ci = bootstrap_ci(
            2,
            |idx| Ok(idx.iter().map(|&i| hits[i]).sum::<f64>() / 2.0),
            1000,
            0.95,
            2,
        )
        .unwrap();
        for v in [ci.lower, ci.upper] {
            assert!([0.0, 0.5, 1.0].contains(&v));
        }
        assert!(ci.lower <= ci.upper);
        let again = bootstrap_ci(
            2,
            |idx| Ok(idx.iter().map(|&i| hits[i]).sum::<f64>() / 2.0),
            1000,
            0.95,
            2,
        )
        .unwrap();
        assert_eq!(ci, again);
    }

    #[test]
    fn undefined_resamples() {
        let r = bootstrap_ci(3, |_| Err(Error::UndefinedMetric("x".into())), 10, 0.95, 0);
        assert!(matches!(r, Err(Error::UndefinedMetric(_))));
        // defined only when row 0 appears: most resamples succeed, some are redrawn
        let ci = bootstrap_ci(
            4,
            |idx| {
                if idx.contains(&0) {
                    Ok(1.0)
                } else {
                    Err(Error::UndefinedMetric("x".into()))
                }
            },
            20,
            0.95,
            3,
        );
        assert!(ci.is_err() || ci.unwrap().redrawn <= 10);
    }

    #[test]
    fn nearest_rank_values() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.025), 25.0);
        assert_eq!(nearest_rank(&v, 0.975), 975.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
    }

    #[test]
    fn identical_predictions_p_one() {
        let a: Vec<(usize, usize)> = (0..20).map(|i| (i % 2, (i / 3) % 2)).collect();
        let r = paired_permutation_test(&a, &a, acc, &PermutationConfig::default()).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn exhaustive_matches_enumeration() {
        let a = [(0, 0), (1, 1), (1, 1), (0, 1)];
        let b = [(0, 1), (1, 0), (1, 1), (0, 1)];
        let r = paired_permutation_test(&a, &b, acc, &PermutationConfig::default()).unwrap();
        assert!(r.exhaustive);
        let obs = (acc(&a).unwrap() - acc(&b).unwrap()).abs();
        let mut hits = 0;
        for mask in 0..16 {
            let x: Vec<_> = (0..4)
                .map(|i| if mask >> i & 1 == 1 { b[i] } else { a[i] })
                .collect();
            let y: Vec<_> = (0..4)
                .map(|i| if mask >> i & 1 == 1 { a[i] } else { b[i] })
                .collect();
            if (acc(&x).unwrap() - acc(&y).unwrap()).abs() >= obs - 1e-12 {
                hits += 1;
            }
        }
        assert_eq!(r.p_value, hits as f64 / 16.0);
    }

    #[test]
    fn sampled_mode_is_deterministic() {
        let a: Vec<(usize, usize)> = (0..30).map(|i| (i % 2, i % 2)).collect();
        let b: Vec<(usize, usize)> = (0..30).map(|i| (i % 2, (i / 2) % 2)).collect();
        let cfg = PermutationConfig {
            seed: 9,
            ..Default::default()
        };
        let r1 = paired_permutation_test(&a, &b, acc, &cfg).unwrap();
        let r2 = paired_permutation_test(&a, &b, acc, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert!(!r1.exhaustive);
        assert!(r1.p_value >= 1.0 / 1000.0 && r1.p_value < 0.05);
        let strict = paired_permutation_test(
            &a,
            &b,
            acc,
            &PermutationConfig {
                strict: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(strict.p_value <= r1.p_value);
    }
}
