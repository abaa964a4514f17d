//! Classification metrics with bootstrap confidence intervals, and a paired
//! permutation test between two classifiers scored on the same items.

use pathvl::eval::{
    accuracy, auc_roc, balanced_accuracy, bootstrap_ci, cohens_kappa, paired_permutation_test,
    weighted_f1, KappaWeighting, LabeledPredictions, PermutationConfig,
};
use pathvl::numerics::SeededRng;
use pathvl::Result;

/// Predictions that are right with probability `skill`, plus softmax-like scores.
fn classifier(
    truth: &[usize],
    classes: usize,
    skill: f64,
    seed: u64,
) -> Result<LabeledPredictions> {
    let mut rng = SeededRng::new(seed);
    let mut pred = Vec::new();
    let mut scores = Vec::new();
    for &t in truth {
        let p = if rng.uniform(0.0, 1.0) < skill {
            t
        } else {
            rng.below(classes)
        };
        let mut s = vec![(1.0 - 0.6) / (classes - 1) as f64; classes];
        s[p] = 0.6;
        pred.push(p);
        scores.push(s);
    }
    LabeledPredictions::new(truth.to_vec(), pred, classes)?.with_scores(scores)
}

fn main() -> Result<()> {
    let classes = 4;
    let truth: Vec<usize> = (0..200).map(|i| i % classes).collect();
    let a = classifier(&truth, classes, 0.8, 1)?;
    let b = classifier(&truth, classes, 0.7, 2)?;

    println!("classifier A");
    let metrics: [(&str, fn(&LabeledPredictions) -> Result<f64>); 5] = [
        ("accuracy", accuracy),
        ("balanced accuracy", balanced_accuracy),
        ("weighted F1", weighted_f1),
        ("quadratic kappa", |p| {
            cohens_kappa(p, KappaWeighting::Quadratic)
        }),
        ("macro AUC", auc_roc),
    ];
    for (name, f) in metrics {
        let ci = bootstrap_ci(a.len(), |idx| f(&a.select(idx)), 1000, 0.95, 0)?;
        println!(
            "  {name:<18} {:.3}  95% CI [{:.3}, {:.3}]",
            ci.point, ci.lower, ci.upper
        );
    }

    let pairs = |p: &LabeledPredictions| -> Vec<(usize, usize)> {
        p.truth
            .iter()
            .copied()
            .zip(p.pred.iter().copied())
            .collect()
    };
    let score = |rows: &[(usize, usize)]| {
        let (t, y): (Vec<usize>, Vec<usize>) = rows.iter().copied().unzip();
        balanced_accuracy(&LabeledPredictions::new(t, y, classes)?)
    };
    let test =
        paired_permutation_test(&pairs(&a), &pairs(&b), score, &PermutationConfig::default())?;
    println!(
        "A - B balanced accuracy {:+.3}, two-sided p = {:.4} over {} permutations",
        test.observed, test.p_value, test.n_permutations
    );
    Ok(())
}
