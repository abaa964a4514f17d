//! Multi-head scaled dot-product attention with a hand-derived backward pass.
//!
//! Projections carry no bias. Scores are scaled by `1/sqrt(d_head)` before
//! the softmax. The same kernel serves self-attention (optionally causal),
//! cross-attention and the learned-query attentional pooler.

use super::softmax_in_place;
use super::tensor::{gemm, MatMut, MatRef, Tensor2D};
use crate::error::{shape, Result};

/// Shape of an attentional pooler: `n_queries` learned queries attending
/// over a variable-length token set with `n_heads` heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionalPoolerConfig {
    pub n_queries: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
}

impl AttentionalPoolerConfig {
    pub fn new(n_queries: usize, n_heads: usize, d_model: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(shape(format!(
                "{n_heads} heads do not divide d_model {d_model}"
            )));
        }
        let cfg = AttentionalPoolerConfig {
            n_queries,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(shape("n_heads * d_head must equal d_model"));
        }
        if self.n_queries == 0 {
            return Err(shape("attentional pooler needs at least one query"));
        }
        Ok(())
    }
}

/// The four `d_model × d_model` projections of one attention layer.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub d_model: usize,
}

/// Mutable gradient buffers matching [`AttentionWeights`].
pub struct AttentionGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
}

pub struct AttentionCache {
    q_in: Tensor2D,
    kv_in: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    /// Per-head attention probabilities, `n_heads` blocks of `Lq × Lk`.
    probs: Vec<Tensor2D>,
    ctx: Tensor2D,
    n_heads: usize,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Tensor2D] {
        &self.probs
    }
}

fn project(x: &Tensor2D, w: &[f64], d: usize) -> Tensor2D {
    let mut y = Tensor2D::zeros(x.rows(), d);
    gemm(
        1.0,
        x.into(),
        false,
        MatRef::new(w, d, d),
        false,
        0.0,
        (&mut y).into(),
    );
    y
}

/// Attention of `q_in` rows over `kv_in` rows. With `causal`, query `i` only
/// sees keys `j <= i`.
pub fn mha_forward(
    q_in: &Tensor2D,
    kv_in: &Tensor2D,
    w: AttentionWeights<'_>,
    n_heads: usize,
    causal: bool,
) -> (Tensor2D, AttentionCache) {
    let d = w.d_model;
    let dh = d / n_heads;
    let (lq, lk) = (q_in.rows(), kv_in.rows());
    let q = project(q_in, w.wq, d);
    let k = project(kv_in, w.wk, d);
    let v = project(kv_in, w.wv, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Tensor2D::zeros(lq, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut s = Tensor2D::zeros(lq, lk);
        gemm(
            scale,
            MatRef::cols_of(q.data(), lq, d, h * dh, dh),
            false,
            MatRef::cols_of(k.data(), lk, d, h * dh, dh),
            true,
            0.0,
            (&mut s).into(),
        );
        for i in 0..lq {
            let row = s.row_mut(i);
            let visible = if causal { (i + 1).min(lk) } else { lk };
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm(
            1.0,
            (&s).into(),
            false,
            MatRef::cols_of(v.data(), lk, d, h * dh, dh),
            false,
            0.0,
            MatMut::cols_of(ctx.data_mut(), lq, d, h * dh, dh),
        );
        probs.push(s);
    }
    let out = project(&ctx, w.wo, d);
    let cache = AttentionCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        probs,
        ctx,
        n_heads,
    };
    (out, cache)
}

/// Backward pass; accumulates weight gradients and returns `(d q_in, d kv_in)`.
pub fn mha_backward(
    dout: &Tensor2D,
    cache: &AttentionCache,
    w: AttentionWeights<'_>,
    grads: AttentionGrads<'_>,
) -> (Tensor2D, Tensor2D) {
    let d = w.d_model;
    let n_heads = cache.n_heads;
    let dh = d / n_heads;
    let (lq, lk) = (cache.q_in.rows(), cache.kv_in.rows());
    let scale = 1.0 / (dh as f64).sqrt();
    fn wmat(m: &[f64], d: usize) -> MatRef<'_> {
        MatRef::new(m, d, d)
    }

    gemm(
        1.0,
        (&cache.ctx).into(),
        true,
        dout.into(),
        false,
        1.0,
        MatMut::new(grads.wo, d, d),
    );
    let mut dctx = Tensor2D::zeros(lq, d);
    gemm(
        1.0,
        dout.into(),
        false,
        wmat(w.wo, d),
        true,
        0.0,
        (&mut dctx).into(),
    );

    let mut dq = Tensor2D::zeros(lq, d);
    let mut dk = Tensor2D::zeros(lk, d);
    let mut dv = Tensor2D::zeros(lk, d);
    let mut dp = Tensor2D::zeros(lq, lk);
    for h in 0..n_heads {
        let p = &cache.probs[h];
        let dctx_h = MatRef::cols_of(dctx.data(), lq, d, h * dh, dh);
        // dV_h = P^T dctx_h
        gemm(
            1.0,
            p.into(),
            true,
            dctx_h,
            false,
            0.0,
            MatMut::cols_of(dv.data_mut(), lk, d, h * dh, dh),
        );
        // dP = dctx_h V_h^T
        gemm(
            1.0,
            dctx_h,
            false,
            MatRef::cols_of(cache.v.data(), lk, d, h * dh, dh),
            true,
            0.0,
            (&mut dp).into(),
        );
        // softmax backward, folded with the score scale
        for i in 0..lq {
            let pr = p.row(i);
            let dr = dp.row_mut(i);
            let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (dv_, pv) in dr.iter_mut().zip(pr) {
                *dv_ = pv * (*dv_ - inner) * scale;
            }
        }
        gemm(
            1.0,
            (&dp).into(),
            false,
            MatRef::cols_of(cache.k.data(), lk, d, h * dh, dh),
            false,
            0.0,
            MatMut::cols_of(dq.data_mut(), lq, d, h * dh, dh),
        );
        gemm(
            1.0,
            (&dp).into(),
            true,
            MatRef::cols_of(cache.q.data(), lq, d, h * dh, dh),
            false,
            0.0,
            MatMut::cols_of(dk.data_mut(), lk, d, h * dh, dh),
        );
    }

    gemm(
        1.0,
        (&cache.q_in).into(),
        true,
        (&dq).into(),
        false,
        1.0,
        MatMut::new(grads.wq, d, d),
    );
    gemm(
        1.0,
        (&cache.kv_in).into(),
        true,
        (&dk).into(),
        false,
        1.0,
        MatMut::new(grads.wk, d, d),
    );
    gemm(
        1.0,
        (&cache.kv_in).into(),
        true,
        (&dv).into(),
        false,
        1.0,
        MatMut::new(grads.wv, d, d),
    );

    let mut dq_in = Tensor2D::zeros(lq, d);
    gemm(
        1.0,
        (&dq).into(),
        false,
        wmat(w.wq, d),
        true,
        0.0,
        (&mut dq_in).into(),
    );
    let mut dkv_in = Tensor2D::zeros(lk, d);
    gemm(
        1.0,
        (&dk).into(),
        false,
        wmat(w.wk, d),
        true,
        0.0,
        (&mut dkv_in).into(),
    );
    gemm(
        1.0,
        (&dv).into(),
        false,
        wmat(w.wv, d),
        true,
        1.0,
        (&mut dkv_in).into(),
    );
    (dq_in, dkv_in)
}

/// Learned-query attention pooling: compresses `keys_values` (any number of
/// rows, `d_model` columns) into `n_queries` output rows.
pub fn attentional_pool(
    queries: &Tensor2D,
    keys_values: &Tensor2D,
    weights: AttentionWeights<'_>,
    config: &AttentionalPoolerConfig,
) -> Result<Tensor2D> {
    config.validate()?;
    if queries.rows() != config.n_queries || queries.cols() != config.d_model {
        return Err(shape(format!(
            "queries are {}x{}, expected {}x{}",
            queries.rows(),
            queries.cols(),
            config.n_queries,
            config.d_model
        )));
    }
    if keys_values.cols() != config.d_model || keys_values.rows() == 0 {
        return Err(shape(format!(
            "keys/values are {}x{}, expected Nx{} with N >= 1",
            keys_values.rows(),
            keys_values.cols(),
            config.d_model
        )));
    }
    let dd = config.d_model * config.d_model;
    if [weights.wq, weights.wk, weights.wv, weights.wo]
        .iter()
        .any(|m| m.len() != dd)
        || weights.d_model != config.d_model
    {
        return Err(shape("projection matrices must be d_model x d_model"));
    }
    Ok(mha_forward(queries, keys_values, weights, config.n_heads, false).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, SeededRng};

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2D {
        Tensor2D::from_raw(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.normal() * 0.5).collect(),
        )
    }

    struct Fixture {
        wq: Vec<f64>,
        wk: Vec<f64>,
        wv: Vec<f64>,
        wo: Vec<f64>,
        d: usize,
    }

    impl Fixture {
        fn new(d: usize, rng: &mut SeededRng) -> Self {
            let mut m = || {
                (0..d * d)
                    .map(|_| rng.normal() / (d as f64).sqrt())
                    .collect::<Vec<_>>()
            };
            Fixture {
                wq: m(),
                wk: m(),
                wv: m(),
                wo: m(),
                d,
            }
        }
        fn weights(&self) -> AttentionWeights<'_> {
            AttentionWeights {
                wq: &self.wq,
                wk: &self.wk,
                wv: &self.wv,
                wo: &self.wo,
                d_model: self.d,
            }
        }
    }

    /// Straight-line attention written from the textbook formula, one
    /// scalar at a time.
    fn reference(
        q_in: &Tensor2D,
        kv: &Tensor2D,
        f: &Fixture,
        heads: usize,
        causal: bool,
    ) -> Tensor2D {
        let d = f.d;
        let dh = d / heads;
        let proj = |x: &Tensor2D, w: &[f64]| {
            let mut y = vec![vec![0.0; d]; x.rows()];
            for r in 0..x.rows() {
                for c in 0..d {
                    for k in 0..d {
                        y[r][c] += x.get(r, k) * w[k * d + c];
                    }
                }
            }
            y
        };
        let q = proj(q_in, &f.wq);
        let k = proj(kv, &f.wk);
        let v = proj(kv, &f.wv);
        let mut ctx = vec![vec![0.0; d]; q_in.rows()];
        for h in 0..heads {
            for i in 0..q_in.rows() {
                let limit = if causal { i + 1 } else { kv.rows() };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| {
                        (0..dh)
                            .map(|t| q[i][h * dh + t] * k[j][h * dh + t])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..limit {
                    for t in 0..dh {
                        ctx[i][h * dh + t] += e[j] / z * v[j][h * dh + t];
                    }
                }
            }
        }
        let ctx_t = Tensor2D::from_rows(&ctx).unwrap();
        Tensor2D::from_rows(&proj(&ctx_t, &f.wo)).unwrap()
    }

    #[test]
    fn matches_reference_oracle() {
        let mut rng = SeededRng::new(21);
        let f = Fixture::new(8, &mut rng);
        let q = random(3, 8, &mut rng);
        let kv = random(3, 8, &mut rng);
        let cfg = AttentionalPoolerConfig::new(3, 2, 8).unwrap();
        let out = attentional_pool(&q, &kv, f.weights(), &cfg).unwrap();
        let want = reference(&q, &kv, &f, 2, false);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let (causal, _) = mha_forward(&q, &kv, f.weights(), 2, true);
        let want = reference(&q, &kv, &f, 2, true);
        for (a, b) in causal.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_projected_value() {
        let mut rng = SeededRng::new(2);
        let f = Fixture::new(8, &mut rng);
        let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let kv = Tensor2D::from_rows(&vec![row.clone(); 5]).unwrap();
        let q = random(4, 8, &mut rng);
        let cfg = AttentionalPoolerConfig::new(4, 4, 8).unwrap();
        let out = attentional_pool(&q, &kv, f.weights(), &cfg).unwrap();
        let single = Tensor2D::from_rows(&[row]).unwrap();
        let wv = Tensor2D::from_vec(8, 8, f.wv.clone()).unwrap();
        let wo = Tensor2D::from_vec(8, 8, f.wo.clone()).unwrap();
        let projected = single.matmul(&wv).unwrap().matmul(&wo).unwrap();
        for r in 0..4 {
            for (a, b) in out.row(r).iter().zip(projected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_query_single_key() {
        let mut rng = SeededRng::new(8);
        let f = Fixture::new(4, &mut rng);
        let q = random(1, 4, &mut rng);
        let kv = random(1, 4, &mut rng);
        let cfg = AttentionalPoolerConfig::new(1, 2, 4).unwrap();
        let out = attentional_pool(&q, &kv, f.weights(), &cfg).unwrap();
        let wv = Tensor2D::from_vec(4, 4, f.wv.clone()).unwrap();
        let wo = Tensor2D::from_vec(4, 4, f.wo.clone()).unwrap();
        let want = kv.matmul(&wv).unwrap().matmul(&wo).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = SeededRng::new(4);
        let f = Fixture::new(8, &mut rng);
        let x = random(6, 8, &mut rng);
        let (_, cache) = mha_forward(&x, &x, f.weights(), 2, true);
        for p in cache.probs() {
            for i in 0..6 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = SeededRng::new(4);
        let f = Fixture::new(8, &mut rng);
        let cfg = AttentionalPoolerConfig::new(2, 2, 8).unwrap();
        assert!(attentional_pool(
            &random(3, 8, &mut rng),
            &random(3, 8, &mut rng),
            f.weights(),
            &cfg
        )
        .is_err());
        assert!(attentional_pool(
            &random(2, 8, &mut rng),
            &random(3, 7, &mut rng),
            f.weights(),
            &cfg
        )
        .is_err());
        assert!(AttentionalPoolerConfig::new(1, 3, 8).is_err());
        assert!(AttentionalPoolerConfig::new(0, 2, 8).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(99);
        let f = Fixture::new(8, &mut rng);
        let q = random(3, 8, &mut rng);
        let kv = random(5, 8, &mut rng);
        let probe = random(3, 8, &mut rng);
        let loss_of = |q: &Tensor2D, kv: &Tensor2D, f: &Fixture| {
            let (o, _) = mha_forward(q, kv, f.weights(), 2, false);
            o.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = mha_forward(&q, &kv, f.weights(), 2, false);
        let mut g = [vec![0.0; 64], vec![0.0; 64], vec![0.0; 64], vec![0.0; 64]];
        let [gq, gk, gv, go] = &mut g;
        let (dq, dkv) = mha_backward(
            &probe,
            &cache,
            f.weights(),
            AttentionGrads {
                wq: gq,
                wk: gk,
                wv: gv,
                wo: go,
            },
        );
        let err = finite_diff_check(
            |x: &[f64]| loss_of(&Tensor2D::from_raw(3, 8, x.to_vec()), &kv, &f),
            dq.data(),
            q.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dq {err}");
        let err = finite_diff_check(
            |x: &[f64]| loss_of(&q, &Tensor2D::from_raw(5, 8, x.to_vec()), &f),
            dkv.data(),
            kv.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dkv {err}");
        for (idx, grad) in g.iter().enumerate() {
            let base = [&f.wq, &f.wk, &f.wv, &f.wo][idx].clone();
            let err = finite_diff_check(
                |x: &[f64]| {
                    let mut ff = Fixture {
                        wq: f.wq.clone(),
                        wk: f.wk.clone(),
                        wv: f.wv.clone(),
                        wo: f.wo.clone(),
                        d: 8,
                    };
                    *[&mut ff.wq, &mut ff.wk, &mut ff.wv, &mut ff.wo][idx] = x.to_vec();
                    loss_of(&q, &kv, &ff)
                },
                grad,
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "weight {idx}: {err}");
        }
    }
}
