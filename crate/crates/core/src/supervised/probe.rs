use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// L2-regularised multinomial logistic regression settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl LinearProbeConfig {
    /// `λ = 100 / (M·C)` for `M`-dimensional features and `C` classes.
    pub fn for_shape(dim: usize, n_classes: usize) -> Self {
        LinearProbeConfig {
            lambda: 100.0 / (dim * n_classes) as f64,
            max_iter: 800,
            tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || self.tol <= 0.0 || self.max_iter == 0
        {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `C × M`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * self.dim..(c + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x);
        crate::numerics::softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::zeroshot::argmax(&self.logits(x))
    }
}

/// `Σᵢ CE(W·xᵢ + b, yᵢ) + (λ/2)‖W‖²` and its gradient, with parameters laid
/// out as `W` (row-major `C × M`) followed by `b`. The bias is not
/// regularised.
pub fn probe_objective(
    params: &[f64],
    features: &Tensor2D,
    labels: &[usize],
    n_classes: usize,
    lambda: f64,
) -> (f64, Vec<f64>) {
    let (n, m) = features.shape();
    let c = n_classes;
    let (w, b) = params.split_at(c * m);
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    let mut z = vec![0.0; c];
    for i in 0..n {
        let x = features.row(i);
        for k in 0..c {
            z[k] = b[k]
                + w[k * m..(k + 1) * m]
                    .iter()
                    .zip(x)
                    .map(|(a, v)| a * v)
                    .sum::<f64>();
        }
        let logp = crate::numerics::log_softmax(&z);
        value -= logp[labels[i]];
        for k in 0..c {
            let r = logp[k].exp() - if k == labels[i] { 1.0 } else { 0.0 };
            grad[c * m + k] += r;
            grad[k * m..(k + 1) * m]
                .iter_mut()
                .zip(x)
                .for_each(|(g, v)| *g += r * v);
        }
    }
    value += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    grad[..c * m]
        .iter_mut()
        .zip(w)
        .for_each(|(g, v)| *g += lambda * v);
    (value, grad)
}

/// Fit a linear probe by L-BFGS (history 10, strong-Wolfe line search) from
/// a zero start.
pub fn linear_probe_fit(
    features: &Tensor2D,
    labels: &[usize],
    n_classes: usize,
    config: &LinearProbeConfig,
) -> Result<LinearProbe> {
    config.validate()?;
    let (n, m) = features.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if !features.is_finite() {
        return Err(Error::InvalidArgument(
            "features contain non-finite values".into(),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} >= {n_classes} classes"
        )));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument(
            "linear probe needs at least two classes present".into(),
        ));
    }
    let cfg = LbfgsConfig {
        max_iter: config.max_iter,
        tol: config.tol,
        ..LbfgsConfig::default()
    };
    let r = lbfgs::minimize(
        |p| probe_objective(p, features, labels, n_classes, config.lambda),
        vec![0.0; n_classes * (m + 1)],
        &cfg,
    )?;
    let (w, b) = r.x.split_at(n_classes * m);
    Ok(LinearProbe {
        n_classes,
        dim: m,
        weights: w.to_vec(),
        bias: b.to_vec(),
        objective: r.value,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
        converged: r.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, SeededRng};

    /// Fixed-step gradient descent with step `1/L`, where `L` bounds the
    /// Hessian's largest eigenvalue.
    fn gd_oracle(
        features: &Tensor2D,
        labels: &[usize],
        c: usize,
        lambda: f64,
        steps: usize,
    ) -> f64 {
        let (n, m) = features.shape();
        let lip = lambda
            + 0.5
                * (0..n)
                    .map(|i| 1.0 + features.row(i).iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>();
        let mut p = vec![0.0; c * (m + 1)];
        for _ in 0..steps {
            let (_, g) = probe_objective(&p, features, labels, c, lambda);
            p.iter_mut().zip(&g).for_each(|(x, gi)| *x -= gi / lip);
        }
        probe_objective(&p, features, labels, c, lambda).0
    }

    fn instance(rng: &mut SeededRng) -> (Tensor2D, Vec<usize>, usize) {
        let c = 2 + rng.below(3);
        let m = 1 + rng.below(6);
        let n = c + rng.below(30);
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < c { i } else { rng.below(c) })
            .collect();
        let scale = rng.uniform(0.5, 3.0);
        let data = (0..n * m)
            .map(|k| rng.normal() * scale + labels[k / m] as f64 * 0.5)
            .collect();
        (Tensor2D::from_vec(n, m, data).unwrap(), labels, c)
    }

    #[test]
    fn lambda_formula() {
        assert_eq!(LinearProbeConfig::for_shape(512, 9).lambda, 100.0 / 4608.0);
    }

    #[test]
    fn objective_gradient() {
        let mut rng = SeededRng::new(3);
        let (x, y, c) = instance(&mut rng);
        let p: Vec<f64> = (0..c * (x.cols() + 1)).map(|_| rng.normal()).collect();
        let (_, g) = probe_objective(&p, &x, &y, c, 0.3);
        let err =
            finite_diff_check(|q| probe_objective(q, &x, &y, c, 0.3).0, &g, &p, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let (x, y, c) = instance(&mut rng);
            let cfg = LinearProbeConfig::for_shape(x.cols(), c);
            let probe = linear_probe_fit(&x, &y, c, &cfg).unwrap();
            let oracle = gd_oracle(&x, &y, c, cfg.lambda, 10_000);
            assert!(
                probe.objective <= oracle + 1e-3,
                "{} vs {oracle}",
                probe.objective
            );
            assert!(probe.converged && probe.grad_norm < cfg.tol, "{probe:?}");
        }
    }

    #[test]
    fn separable_one_dimensional() {
        let x = Tensor2D::from_vec(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let cfg = LinearProbeConfig::for_shape(1, 2);
        let probe = linear_probe_fit(&x, &y, 2, &cfg).unwrap();
        assert!(probe.weights.iter().all(|w| w.is_finite()));
        assert!((0..6).all(|i| probe.predict(x.row(i)) == y[i]));
        assert!((probe.objective - gd_oracle(&x, &y, 2, cfg.lambda, 10_000)).abs() < 1e-3);
    }

    #[test]
    fn zero_features_give_uniform_predictions() {
        let x = Tensor2D::zeros(6, 3);
        let y = [0, 1, 2, 0, 1, 2];
        let probe = linear_probe_fit(&x, &y, 3, &LinearProbeConfig::for_shape(3, 3)).unwrap();
        assert!(probe.weights.iter().all(|w| w.abs() < 1e-9));
        for p in probe.predict_proba(&[0.0; 3]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut x = Tensor2D::zeros(2, 1);
        x.set(0, 0, f64::NAN);
        assert!(linear_probe_fit(&x, &[0, 1], 2, &LinearProbeConfig::for_shape(1, 2)).is_err());
        let x = Tensor2D::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(linear_probe_fit(&x, &[1, 1], 2, &LinearProbeConfig::for_shape(1, 2)).is_err());
    }
}
