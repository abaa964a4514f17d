//! Linear probe: L2-regularized multinomial logistic regression fitted by
//! L-BFGS on fixed features, with the default strength 100 / (dim * classes).

use pathvl::numerics::{SeededRng, Tensor2D};
use pathvl::supervised::{linear_probe_fit, LinearProbeConfig};
use pathvl::Result;

fn main() -> Result<()> {
    let (dim, classes, per_class) = (32, 4, 50);
    let mut rng = SeededRng::new(9);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();
    let mut sample = |n: usize| -> Result<(Tensor2D, Vec<usize>)> {
        let labels: Vec<usize> = (0..n * classes).map(|i| i % classes).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| centers[c].iter().map(|m| m + 1.5 * rng.normal()).collect())
            .collect();
        Ok((Tensor2D::from_rows(&rows)?, labels))
    };
    let (x, y) = sample(per_class)?;
    let (x_test, y_test) = sample(per_class)?;

    let config = LinearProbeConfig::for_shape(dim, classes);
    let probe = linear_probe_fit(&x, &y, classes, &config)?;
    println!(
        "lambda {:.5}; {} L-BFGS iterations, objective {:.4}, gradient norm {:.1e}, converged {}",
        config.lambda, probe.iterations, probe.objective, probe.grad_norm, probe.converged
    );
    let correct = (0..x_test.rows())
        .filter(|&i| probe.predict(x_test.row(i)) == y_test[i])
        .count();
    println!("test accuracy {:.3}", correct as f64 / x_test.rows() as f64);
    println!(
        "class probabilities of the first test point: {:.3?}",
        probe.predict_proba(x_test.row(0))
    );
    Ok(())
}
