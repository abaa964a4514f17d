//! Forward/backward kernels for the dense building blocks shared by the toy
//! visual-language model and the MIL head. Backward functions accumulate
//! parameter gradients (`+=`) and return the input gradient.

use super::tensor::{gemm, MatMut, MatRef, Tensor2D};

/// `y = x·W + b` with `W` stored `in × out`.
pub fn linear_forward(x: &Tensor2D, w: MatRef<'_>, b: Option<&[f64]>) -> Tensor2D {
    let mut y = Tensor2D::zeros(x.rows(), w.cols);
    if let Some(b) = b {
        for r in 0..y.rows() {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm(1.0, x.into(), false, w, false, 1.0, (&mut y).into());
    } else {
        gemm(1.0, x.into(), false, w, false, 0.0, (&mut y).into());
    }
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ_rows dy`; returns `dx = dy·Wᵀ`.
pub fn linear_backward(
    x: &Tensor2D,
    w: MatRef<'_>,
    dy: &Tensor2D,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Tensor2D {
    gemm(
        1.0,
        x.into(),
        true,
        dy.into(),
        false,
        1.0,
        MatMut::new(dw, w.rows, w.cols),
    );
    if let Some(db) = db {
        for r in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
    let mut dx = Tensor2D::zeros(x.rows(), x.cols());
    gemm(1.0, dy.into(), false, w, true, 0.0, (&mut dx).into());
    dx
}

/// Same as [`linear_backward`] without computing the input gradient.
pub fn linear_backward_params(x: &Tensor2D, dy: &Tensor2D, dw: &mut [f64], db: Option<&mut [f64]>) {
    gemm(
        1.0,
        x.into(),
        true,
        dy.into(),
        false,
        1.0,
        MatMut::new(dw, x.cols(), dy.cols()),
    );
    if let Some(db) = db {
        for r in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm_forward(x: &Tensor2D, gain: &[f64], bias: &[f64]) -> (Tensor2D, LayerNormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut y = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..cols {
            yr[c] = xhat.get(r, c) * gain[c] + bias[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &Tensor2D,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Tensor2D {
    let (rows, cols) = dy.shape();
    let mut dx = Tensor2D::zeros(rows, cols);
    let n = cols as f64;
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn map(x: &Tensor2D, f: impl Fn(f64) -> f64) -> Tensor2D {
    Tensor2D::from_raw(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())
}

/// `dy ⊙ f'(x)`.
pub fn map_backward(x: &Tensor2D, dy: &Tensor2D, fprime: impl Fn(f64) -> f64) -> Tensor2D {
    Tensor2D::from_raw(
        x.rows(),
        x.cols(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &d)| d * fprime(v))
            .collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scales a vector to unit length; returns the norm used.
pub fn l2_normalize_forward(z: &[f64]) -> (Vec<f64>, f64) {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    (z.iter().map(|v| v / n).collect(), n)
}

/// Gradient of `u = z/|z|`: `dz = (du − u·(u·du)) / |z|`.
pub fn l2_normalize_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(du)
        .map(|(ui, di)| (di - ui * proj) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, SeededRng};

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2D {
        Tensor2D::from_raw(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    #[test]
    fn linear_gradients() {
        let mut rng = SeededRng::new(11);
        let x = random(3, 4, &mut rng);
        let w = random(4, 5, &mut rng);
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let probe = random(3, 5, &mut rng);
        let loss = |wv: &[f64]| {
            let y = linear_forward(&x, MatRef::new(wv, 4, 5), Some(&b));
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        let mut dw = vec![0.0; 20];
        let mut db = vec![0.0; 5];
        let dx = linear_backward(
            &x,
            MatRef::new(w.data(), 4, 5),
            &probe,
            &mut dw,
            Some(&mut db),
        );
        assert!(finite_diff_check(loss, &dw, w.data(), 1e-5).unwrap() < 1e-6);
        let loss_x = |xv: &[f64]| {
            let xt = Tensor2D::from_raw(3, 4, xv.to_vec());
            let y = linear_forward(&xt, MatRef::new(w.data(), 4, 5), Some(&b));
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        assert!(finite_diff_check(loss_x, dx.data(), x.data(), 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = SeededRng::new(5);
        let x = random(4, 6, &mut rng);
        let gain: Vec<f64> = (0..6).map(|_| 1.0 + 0.3 * rng.normal()).collect();
        let bias: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let probe = random(4, 6, &mut rng);
        let f = |xv: &[f64]| {
            let xt = Tensor2D::from_raw(4, 6, xv.to_vec());
            let (y, _) = layer_norm_forward(&xt, &gain, &bias);
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        let (_, cache) = layer_norm_forward(&x, &gain, &bias);
        let mut dg = vec![0.0; 6];
        let mut db = vec![0.0; 6];
        let dx = layer_norm_backward(&cache, &gain, &probe, &mut dg, &mut db);
        assert!(finite_diff_check(f, dx.data(), x.data(), 1e-5).unwrap() < 1e-5);
        let fg = |gv: &[f64]| {
            let (y, _) = layer_norm_forward(&x, gv, &bias);
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        assert!(finite_diff_check(fg, &dg, &gain, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let z = vec![0.3, -1.2, 2.0];
        let du = vec![0.5, 0.1, -0.7];
        let (u, n) = l2_normalize_forward(&z);
        let g = l2_normalize_backward(&u, n, &du);
        let f = |zv: &[f64]| {
            let (u, _) = l2_normalize_forward(zv);
            u.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!(finite_diff_check(f, &g, &z, 1e-6).unwrap() < 1e-6);
    }
}
