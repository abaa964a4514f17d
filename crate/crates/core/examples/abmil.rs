//! Attention-based multiple instance learning on synthetic bags: positive
//! bags hide a few signal instances among noise, and after training the
//! attention weights point at them.

use pathvl::numerics::{SeededRng, Tensor2D};
use pathvl::supervised::{
    predict_bags, train_abmil, AbmilConfig, LabeledBag, Mode, TrainingSchedule,
};
use pathvl::Result;

const DIM: usize = 16;

/// A bag of `n` noise instances; for label 1 the first `signal` of them
/// are shifted along the first axis.
fn bag(label: usize, n: usize, signal: usize, rng: &mut SeededRng) -> Result<LabeledBag> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut v: Vec<f64> = (0..DIM).map(|_| rng.normal()).collect();
            if label == 1 && i < signal {
                v[0] += 4.0;
            }
            v
        })
        .collect();
    Ok(LabeledBag {
        bag: Tensor2D::from_rows(&rows)?,
        label,
    })
}

fn main() -> Result<()> {
    let mut rng = SeededRng::new(3);
    let train: Vec<LabeledBag> = (0..40)
        .map(|i| bag(i % 2, 20, 2, &mut rng))
        .collect::<Result<_>>()?;
    let test: Vec<LabeledBag> = (0..20)
        .map(|i| bag(i % 2, 20, 2, &mut rng))
        .collect::<Result<_>>()?;

    let schedule = TrainingSchedule {
        lr: 5e-4,
        ..TrainingSchedule::default()
    };
    let (model, report) = train_abmil(&train, AbmilConfig::new(DIM, 2), &schedule)?;
    println!(
        "{} optimizer steps; mean loss per epoch {:.3} -> {:.3}",
        report.steps,
        report.loss_curve[0],
        report.loss_curve.last().unwrap()
    );

    let bags: Vec<Tensor2D> = test.iter().map(|b| b.bag.clone()).collect();
    let pred = predict_bags(&model, &bags)?;
    let correct = pred
        .iter()
        .zip(&test)
        .filter(|(p, b)| **p == b.label)
        .count();
    println!("test accuracy {correct}/{}", test.len());

    let positive = &test[1];
    let out = model.forward(&positive.bag, Mode::Eval, None)?;
    let mut order: Vec<usize> = (0..out.attention.len()).collect();
    order.sort_by(|&a, &b| out.attention[b].total_cmp(&out.attention[a]));
    println!(
        "positive bag: instances 0 and 1 carry the signal; highest attention on {:?} ({:.3}, {:.3})",
        &order[..2],
        out.attention[order[0]],
        out.attention[order[1]]
    );
    Ok(())
}
