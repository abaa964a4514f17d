//! Gated-attention multiple-instance learning head with hand-derived
//! backpropagation.
//!
//! `h = dropout(relu(x·W1 + b1))`, `a = tanh(h·Va + ba)`, `g = σ(h·Ua + bu)`,
//! `s = (a ∘ g)·w + bw`, `α = softmax(s)` over the bag, `z = Σ αᵢ hᵢ`,
//! `p = softmax(z·Wc + bc)`.

use serde::{Deserialize, Serialize};

use crate::data_io::{Checkpoint, EmbeddingStore};
use crate::error::{Error, Result};
use crate::numerics::layers::{linear_backward, linear_backward_params, linear_forward, sigmoid};
use crate::numerics::{MatRef, SeededRng, Tensor2D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl AbmilConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        AbmilConfig {
            input_dim,
            hidden_dim: 512,
            attention_dim: 384,
            n_classes,
            dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden_dim == 0
            || self.attention_dim == 0
            || self.n_classes == 0
        {
            return Err(Error::Config("ABMIL dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> Offsets {
        let (i, h, a, c) = (
            self.input_dim,
            self.hidden_dim,
            self.attention_dim,
            self.n_classes,
        );
        let mut next = 0;
        let mut take = |n: usize| {
            let o = next;
            next += n;
            o
        };
        Offsets {
            w1: take(i * h),
            b1: take(h),
            va: take(h * a),
            ba: take(a),
            ua: take(h * a),
            bu: take(a),
            w: take(a),
            bw: take(1),
            wc: take(h * c),
            bc: take(c),
            total: next,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().total
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    w1: usize,
    b1: usize,
    va: usize,
    ba: usize,
    ua: usize,
    bu: usize,
    w: usize,
    bw: usize,
    wc: usize,
    bc: usize,
    total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
}

struct Cache {
    pre: Tensor2D,
    keep: Option<Vec<f64>>,
    h: Tensor2D,
    a: Tensor2D,
    g: Tensor2D,
    alpha: Vec<f64>,
    z: Tensor2D,
}

/// Attention-MIL classifier with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Abmil {
    config: AbmilConfig,
    params: Vec<f64>,
}

/// A bag of instance embeddings, one per row.
pub fn bag_from_store(store: &EmbeddingStore) -> Result<Tensor2D> {
    let data: Vec<f64> = (0..store.len()).flat_map(|i| store.get_f64(i)).collect();
    Tensor2D::from_vec(store.len(), store.dim(), data)
}

impl Abmil {
    /// Weight matrices drawn `N(0, 1/fan_in)`, biases zero.
    pub fn new(config: AbmilConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let o = config.offsets();
        let mut params = vec![0.0; o.total];
        let (i, h, a, c) = (
            config.input_dim,
            config.hidden_dim,
            config.attention_dim,
            config.n_classes,
        );
        for (off, len, fan_in) in [
            (o.w1, i * h, i),
            (o.va, h * a, h),
            (o.ua, h * a, h),
            (o.w, a, a),
            (o.wc, h * c, h),
        ] {
            let s = 1.0 / (fan_in as f64).sqrt();
            params[off..off + len]
                .iter_mut()
                .for_each(|p| *p = rng.normal() * s);
        }
        Ok(Abmil { config, params })
    }

    pub fn from_params(config: AbmilConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters, expected {}",
                params.len(),
                config.num_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite ABMIL parameter".into()));
        }
        Ok(Abmil { config, params })
    }

    pub fn config(&self) -> &AbmilConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_bag(&self, bag: &Tensor2D) -> Result<()> {
        if bag.rows() == 0 {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        if bag.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "bag width {} vs input dim {}",
                bag.cols(),
                self.config.input_dim
            )));
        }
        if !bag.is_finite() {
            return Err(Error::InvalidArgument(
                "bag contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Dropout keep-scales (`0` or `1/(1 − p)`) for a bag of `n` instances.
    pub fn dropout_mask(&self, n: usize, rng: &mut SeededRng) -> Vec<f64> {
        let p = self.config.dropout;
        (0..n * self.config.hidden_dim)
            .map(|_| {
                if rng.bernoulli(p) {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect()
    }

    fn forward_cache(&self, params: &[f64], bag: &Tensor2D, keep: Option<Vec<f64>>) -> Cache {
        let cfg = &self.config;
        let o = cfg.offsets();
        let (i, h, a) = (cfg.input_dim, cfg.hidden_dim, cfg.attention_dim);
        let pre = linear_forward(
            bag,
            MatRef::new(&params[o.w1..o.w1 + i * h], i, h),
            Some(&params[o.b1..o.b1 + h]),
        );
        let mut hid = pre.clone();
        for (k, v) in hid.data_mut().iter_mut().enumerate() {
            *v = v.max(0.0) * keep.as_ref().map_or(1.0, |m| m[k]);
        }
        let mut at = linear_forward(
            &hid,
            MatRef::new(&params[o.va..o.va + h * a], h, a),
            Some(&params[o.ba..o.ba + a]),
        );
        at.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let mut gt = linear_forward(
            &hid,
            MatRef::new(&params[o.ua..o.ua + h * a], h, a),
            Some(&params[o.bu..o.bu + a]),
        );
        gt.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let w = &params[o.w..o.w + a];
        let mut alpha: Vec<f64> = (0..bag.rows())
            .map(|r| {
                at.row(r)
                    .iter()
                    .zip(gt.row(r))
                    .zip(w)
                    .map(|((x, y), wk)| x * y * wk)
                    .sum::<f64>()
                    + params[o.bw]
            })
            .collect();
        crate::numerics::softmax_in_place(&mut alpha);
        let mut z = Tensor2D::zeros(1, h);
        for (r, &al) in alpha.iter().enumerate() {
            for (zk, hk) in z.row_mut(0).iter_mut().zip(hid.row(r)) {
                *zk += al * hk;
            }
        }
        Cache {
            pre,
            keep,
            h: hid,
            a: at,
            g: gt,
            alpha,
            z,
        }
    }

    fn head(&self, params: &[f64], z: &Tensor2D) -> Vec<f64> {
        let o = self.config.offsets();
        let (h, c) = (self.config.hidden_dim, self.config.n_classes);
        linear_forward(
            z,
            MatRef::new(&params[o.wc..o.wc + h * c], h, c),
            Some(&params[o.bc..o.bc + c]),
        )
        .into_vec()
    }

    /// Class probabilities and attention weights. Dropout runs only in
    /// [`Mode::Train`], drawing its mask from `rng`.
    pub fn forward(
        &self,
        bag: &Tensor2D,
        mode: Mode,
        rng: Option<&mut SeededRng>,
    ) -> Result<AbmilOutput> {
        self.check_bag(bag)?;
        let keep = match (mode, rng) {
            (Mode::Train, Some(rng)) => Some(self.dropout_mask(bag.rows(), rng)),
            (Mode::Train, None) => {
                return Err(Error::InvalidArgument("training mode needs an rng".into()))
            }
            (Mode::Eval, _) => None,
        };
        let cache = self.forward_cache(&self.params, bag, keep);
        let logits = self.head(&self.params, &cache.z);
        let mut probs = logits.clone();
        crate::numerics::softmax_in_place(&mut probs);
        Ok(AbmilOutput {
            logits,
            probs,
            attention: cache.alpha,
        })
    }

    /// Cross-entropy of `label` and its gradient at `params`. `keep` is an
    /// optional dropout mask from [`Abmil::dropout_mask`].
    pub fn loss_and_grad_at(
        &self,
        params: &[f64],
        bag: &Tensor2D,
        label: usize,
        keep: Option<Vec<f64>>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_bag(bag)?;
        let cfg = &self.config;
        if label >= cfg.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} >= {} classes",
                cfg.n_classes
            )));
        }
        let o = cfg.offsets();
        let (i, h, a, c) = (
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.attention_dim,
            cfg.n_classes,
        );
        let n = bag.rows();
        let cache = self.forward_cache(params, bag, keep);
        let logits = self.head(params, &cache.z);
        let logp = crate::numerics::log_softmax(&logits);
        let loss = -logp[label];
        let mut grad = vec![0.0; o.total];

        let mut dlogits: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        dlogits[label] -= 1.0;
        let dlogits = Tensor2D::from_vec(1, c, dlogits)?;
        let (gw, rest) = grad[o.wc..].split_at_mut(h * c);
        let dz = linear_backward(
            &cache.z,
            MatRef::new(&params[o.wc..o.wc + h * c], h, c),
            &dlogits,
            gw,
            Some(&mut rest[..c]),
        );

        // attention pooling
        let dalpha: Vec<f64> = (0..n)
            .map(|r| {
                cache
                    .h
                    .row(r)
                    .iter()
                    .zip(dz.row(0))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
        let ds: Vec<f64> = cache
            .alpha
            .iter()
            .zip(&dalpha)
            .map(|(al, da)| al * (da - mean))
            .collect();
        let mut dh = Tensor2D::zeros(n, h);
        for r in 0..n {
            for (d, z) in dh.row_mut(r).iter_mut().zip(dz.row(0)) {
                *d = cache.alpha[r] * z;
            }
        }

        // gated scores
        let w = &params[o.w..o.w + a];
        let mut da_pre = Tensor2D::zeros(n, a);
        let mut dg_pre = Tensor2D::zeros(n, a);
        for r in 0..n {
            grad[o.bw] += ds[r];
            for k in 0..a {
                let (av, gv) = (cache.a.get(r, k), cache.g.get(r, k));
                grad[o.w + k] += ds[r] * av * gv;
                let dag = ds[r] * w[k];
                da_pre.set(r, k, dag * gv * (1.0 - av * av));
                dg_pre.set(r, k, dag * av * gv * (1.0 - gv));
            }
        }
        let (gva, rest) = grad[o.va..].split_at_mut(h * a);
        let dh_a = linear_backward(
            &cache.h,
            MatRef::new(&params[o.va..o.va + h * a], h, a),
            &da_pre,
            gva,
            Some(&mut rest[..a]),
        );
        let (gua, rest) = grad[o.ua..].split_at_mut(h * a);
        let dh_g = linear_backward(
            &cache.h,
            MatRef::new(&params[o.ua..o.ua + h * a], h, a),
            &dg_pre,
            gua,
            Some(&mut rest[..a]),
        );
        for (k, d) in dh.data_mut().iter_mut().enumerate() {
            let pass = if cache.pre.data()[k] > 0.0 {
                cache.keep.as_ref().map_or(1.0, |m| m[k])
            } else {
                0.0
            };
            *d = (*d + dh_a.data()[k] + dh_g.data()[k]) * pass;
        }
        let (gw1, rest) = grad[o.w1..].split_at_mut(i * h);
        linear_backward_params(bag, &dh, gw1, Some(&mut rest[..h]));
        Ok((loss, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "abmil", "config": self.config }));
        ck.push("params", self.params.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("abmil") {
            return Err(Error::Format("checkpoint is not an ABMIL model".into()));
        }
        let config: AbmilConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let params = ck.section("params")?;
        Abmil::from_params(config, params.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn small(rng: &mut SeededRng) -> Abmil {
        let cfg = AbmilConfig {
            input_dim: 6,
            hidden_dim: 7,
            attention_dim: 5,
            n_classes: 3,
            dropout: 0.25,
        };
        let mut m = Abmil::new(cfg, rng).unwrap();
        // nonzero biases so every path is exercised
        m.params_mut()
            .iter_mut()
            .for_each(|p| *p += 0.05 * rng.normal());
        m
    }

    fn bag(rng: &mut SeededRng, n: usize, d: usize) -> Tensor2D {
        Tensor2D::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = AbmilConfig::new(64, 5);
        assert_eq!(
            cfg.num_params(),
            64 * 512 + 512 + 2 * (512 * 384 + 384) + 384 + 1 + 512 * 5 + 5
        );
    }

    #[test]
    fn single_instance_and_duplicates() {
        let mut rng = SeededRng::new(1);
        let m = small(&mut rng);
        let one = bag(&mut rng, 1, 6);
        let out = m.forward(&one, Mode::Eval, None).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        let dup = Tensor2D::from_vec(4, 6, one.row(0).repeat(4)).unwrap();
        let out4 = m.forward(&dup, Mode::Eval, None).unwrap();
        for (a, b) in out.probs.iter().zip(&out4.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.forward(&Tensor2D::zeros(0, 6), Mode::Eval, None).is_err());
    }

    #[test]
    fn gradient_check() {
        let mut rng = SeededRng::new(2);
        for _ in 0..4 {
            let m = small(&mut rng);
            let b = bag(&mut rng, 5, 6);
            let label = rng.below(3);
            let (_, g) = m.loss_and_grad_at(m.params(), &b, label, None).unwrap();
            let err = finite_diff_check(
                |p| m.loss_and_grad_at(p, &b, label, None).unwrap().0,
                &g,
                m.params(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn gradient_check_with_dropout_mask() {
        let mut rng = SeededRng::new(3);
        let m = small(&mut rng);
        let b = bag(&mut rng, 4, 6);
        let keep = m.dropout_mask(4, &mut rng);
        let (_, g) = m
            .loss_and_grad_at(m.params(), &b, 1, Some(keep.clone()))
            .unwrap();
        let err = finite_diff_check(
            |p| m.loss_and_grad_at(p, &b, 1, Some(keep.clone())).unwrap().0,
            &g,
            m.params(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(4);
        let m = small(&mut rng);
        let back =
            Abmil::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap())
                .unwrap();
        assert_eq!(m, back);
    }

    proptest::proptest! {
        #[test]
        fn attention_sums_to_one_and_order_free(seed in proptest::prelude::any::<u64>(), n in 1usize..12) {
            let mut rng = SeededRng::new(seed);
            let m = small(&mut rng);
            let b = bag(&mut rng, n, 6);
            let out = m.forward(&b, Mode::Eval, None).unwrap();
            proptest::prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let shuffled = Tensor2D::from_vec(n, 6, order.iter().flat_map(|&r| b.row(r).to_vec()).collect()).unwrap();
            let out2 = m.forward(&shuffled, Mode::Eval, None).unwrap();
            for (x, y) in out.probs.iter().zip(&out2.probs) {
                proptest::prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
