//! Few-shot ABMIL: train on 1, 2, 4 and 8 labelled bags per class, with
//! several random draws per size, and report the median balanced accuracy.

use pathvl::numerics::{SeededRng, Tensor2D};
use pathvl::supervised::{
    build_fewshot_splits, median_by_shots, run_fewshot, AbmilConfig, FewShotPlan, LabeledBag,
    TrainingSchedule,
};
use pathvl::Result;

const DIM: usize = 12;
const CLASSES: usize = 3;

fn bags(n_per_class: usize, rng: &mut SeededRng) -> Result<Vec<LabeledBag>> {
    (0..n_per_class * CLASSES)
        .map(|i| {
            let label = i % CLASSES;
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|j| {
                    let mut v: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
                    if j < 4 {
                        v[label] += 2.5;
                    }
                    v
                })
                .collect();
            Ok(LabeledBag {
                bag: Tensor2D::from_rows(&rows)?,
                label,
            })
        })
        .collect()
}

fn main() -> Result<()> {
    let mut rng = SeededRng::new(5);
    let pool = bags(8, &mut rng)?;
    let test = bags(10, &mut rng)?;
    let plan = FewShotPlan {
        shots: vec![1, 2, 4, 8],
        replicates: 3,
        seed: 1,
    };
    let labels: Vec<usize> = pool.iter().map(|b| b.label).collect();
    let splits = build_fewshot_splits(&labels, CLASSES, &plan)?;
    println!(
        "first split (n_c = 1): training bags {:?}",
        splits[0].indices
    );

    let schedule = TrainingSchedule {
        lr: 1e-3,
        epochs: 10,
        ..TrainingSchedule::default()
    };
    let records = run_fewshot(
        &pool,
        &test,
        &AbmilConfig::new(DIM, CLASSES),
        &schedule,
        &plan,
    )?;
    for (n_c, m) in median_by_shots(&records, &plan) {
        println!("{n_c} bag(s) per class: median balanced accuracy {m:.3}");
    }
    Ok(())
}
