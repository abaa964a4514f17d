//! Dense kernels, softmax/attention primitives, gradient checking and the
//! deterministic RNG used everywhere else in the crate.

mod attention;
mod gradcheck;
pub mod layers;
mod rng;
mod tensor;

pub use attention::{
    attentional_pool, mha_backward, mha_forward, AttentionCache, AttentionGrads, AttentionWeights,
    AttentionalPoolerConfig,
};
pub use gradcheck::{finite_diff_check, finite_diff_check_coords};
pub use rng::SeededRng;
pub use tensor::{dot, gemm, l2_norm, normalized, MatMut, MatRef, Tensor2D};

use crate::error::{invalid, Result};

/// `softmax(temperature_scale · logits)`, stabilised by max-subtraction.
pub fn softmax(logits: &[f64], temperature_scale: f64) -> Result<Vec<f64>> {
    if !(temperature_scale > 0.0 && temperature_scale.is_finite()) {
        return Err(invalid(format!(
            "temperature scale must be positive, got {temperature_scale}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax input contains non-finite values"));
    }
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let mut out: Vec<f64> = logits.iter().map(|v| v * temperature_scale).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked in-place softmax for hot loops.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

/// `log softmax(x)` computed via log-sum-exp.
pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_for_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_element_is_one() {
        assert_eq!(softmax(&[123.4], 0.3).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_element_values() {
        let p = softmax(&[1.0, 2.0], 1.0).unwrap();
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(softmax(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[1.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -2.0).is_err());
    }

    #[test]
    fn large_vector_sums_to_one() {
        let mut rng = SeededRng::new(1);
        let logits: Vec<f64> = (0..1_000_000).map(|_| rng.normal() * 30.0).collect();
        let s: f64 = softmax(&logits, 1.0).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_consistent() {
        let x = [0.5, -1.0, 3.0];
        let p = softmax(&x, 1.0).unwrap();
        for (a, b) in log_softmax(&x).iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn sums_to_one(logits in prop::collection::vec(-500.0f64..500.0, 1..64), scale in 0.01f64..20.0) {
            let p = softmax(&logits, scale).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..32), shift in -100.0f64..100.0) {
            let a = softmax(&logits, 1.0).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
