use rayon::prelude::*;

use super::image::ToyImage;
use super::model::{matmul_nt, ToyModel};
use super::tokenizer::TokenSequence;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax_in_place, Tensor2D};

/// One image-caption training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub image: ToyImage,
    pub caption: TokenSequence,
}

/// Image and text embeddings of a mini-batch (row `i` of `u` pairs with row
/// `i` of `v`) and the inverse temperature τ.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutputs {
    pub u: Tensor2D,
    pub v: Tensor2D,
    pub tau: f64,
}

impl ContrastiveOutputs {
    pub fn new(u: &[Embedding], v: &[Embedding], tau: f64) -> Result<Self> {
        if u.len() != v.len() || u.is_empty() {
            return Err(Error::Shape(format!(
                "{} image vs {} text embeddings",
                u.len(),
                v.len()
            )));
        }
        let rows = |e: &[Embedding]| {
            Tensor2D::from_rows(&e.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>())
        };
        Ok(ContrastiveOutputs {
            u: rows(u)?,
            v: rows(v)?,
            tau,
        })
    }

    /// `τ · U Vᵀ`.
    pub fn logits(&self) -> Tensor2D {
        let mut s = matmul_nt(&self.u, &self.v);
        s.scale(self.tau);
        s
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub du: Tensor2D,
    pub dv: Tensor2D,
    pub dtau: f64,
    pub logits: Tensor2D,
}

/// Symmetric InfoNCE: mean of the image-to-text (row) and text-to-image
/// (column) cross-entropies of `τ U Vᵀ` against the diagonal.
pub fn contrastive_loss(o: &ContrastiveOutputs) -> Result<ContrastiveLoss> {
    let m = o.u.rows();
    if m == 0 || o.v.rows() != m || o.u.cols() != o.v.cols() {
        return Err(Error::Shape(format!(
            "u is {:?}, v is {:?}",
            o.u.shape(),
            o.v.shape()
        )));
    }
    if !o.u.is_finite() || !o.v.is_finite() || !o.tau.is_finite() {
        return Err(Error::Numerical(
            "non-finite embeddings or temperature".into(),
        ));
    }
    let cos = matmul_nt(&o.u, &o.v);
    let mut logits = cos.clone();
    logits.scale(o.tau);
    let mut p_row = logits.clone();
    let mut loss = 0.0;
    for i in 0..m {
        loss -= log_softmax(logits.row(i))[i];
        softmax_in_place(p_row.row_mut(i));
    }
    let lt = logits.transpose();
    let mut p_col = lt.clone();
    for j in 0..m {
        loss -= log_softmax(lt.row(j))[j];
        softmax_in_place(p_col.row_mut(j));
    }
    let inv = 1.0 / (2.0 * m as f64);
    loss *= inv;
    // dL/dS = ((P_row − I) + (P_col − I)) / 2M, with P_col column-normalized
    let mut ds = Tensor2D::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let eye = if i == j { 2.0 } else { 0.0 };
            ds.set(i, j, (p_row.get(i, j) + p_col.get(j, i) - eye) * inv);
        }
    }
    let dtau: f64 = ds.data().iter().zip(cos.data()).map(|(a, b)| a * b).sum();
    let mut du = ds.matmul(&o.v)?;
    du.scale(o.tau);
    let mut dv = ds.transpose().matmul(&o.u)?;
    dv.scale(o.tau);
    if !loss.is_finite() {
        return Err(Error::Numerical("contrastive loss is not finite".into()));
    }
    Ok(ContrastiveLoss {
        loss,
        du,
        dv,
        dtau,
        logits,
    })
}

/// Summed next-token negative log-likelihood of `targets` under `logits`
/// (row `t` scores `targets[t]`), and its gradient w.r.t. the logits.
pub fn sequence_nll(logits: &Tensor2D, targets: &[u32]) -> Result<(f64, Tensor2D)> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    let mut nll = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let y = y as usize;
        if y >= logits.cols() {
            return Err(Error::InvalidArgument(format!(
                "target {y} outside vocabulary of {}",
                logits.cols()
            )));
        }
        nll -= log_softmax(logits.row(t))[y];
        let g = grad.row_mut(t);
        g.copy_from_slice(logits.row(t));
        softmax_in_place(g);
        g[y] -= 1.0;
    }
    Ok((nll, grad))
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `caption_weight · captioning + contrastive_weight · contrastive`.
    pub loss: f64,
    pub contrastive: f64,
    pub captioning: f64,
    /// Gradient of `loss` w.r.t. the flat parameter vector.
    pub grad: Vec<f64>,
}

/// Joint objective at the model's own parameters.
pub fn joint_loss(
    model: &ToyModel,
    batch: &[Pair],
    caption_weight: f64,
    contrastive_weight: f64,
) -> Result<LossOutput> {
    joint_loss_at(
        model,
        model.params(),
        batch,
        caption_weight,
        contrastive_weight,
    )
}

/// Captioning term alone: `−(1/M) Σ_i Σ_t log p(w_{i,t} | w_{i,<t}, x_i)`.
pub fn captioning_loss(model: &ToyModel, batch: &[Pair]) -> Result<(f64, Vec<f64>)> {
    let out = joint_loss(model, batch, 1.0, 0.0)?;
    Ok((out.captioning, out.grad))
}

/// Joint objective evaluated at an arbitrary parameter vector with the
/// model's architecture. Per-sample gradients are computed independently and
/// summed in batch order, so results do not depend on the thread count.
pub fn joint_loss_at(
    model: &ToyModel,
    params: &[f64],
    batch: &[Pair],
    caption_weight: f64,
    contrastive_weight: f64,
) -> Result<LossOutput> {
    if !(caption_weight >= 0.0
        && contrastive_weight >= 0.0
        && caption_weight.is_finite()
        && contrastive_weight.is_finite())
    {
        return Err(Error::InvalidArgument(
            "loss weights must be finite and non-negative".into(),
        ));
    }
    if caption_weight == 0.0 && contrastive_weight == 0.0 {
        return Err(Error::InvalidArgument(
            "at least one loss weight must be positive".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty mini-batch".into()));
    }
    if params.len() != model.num_params() {
        return Err(Error::Shape(
            "parameter vector does not match the model".into(),
        ));
    }
    let net = model.net_at(params);
    let with_caption = caption_weight > 0.0;
    let with_contrast = contrastive_weight > 0.0;
    let m = batch.len();

    let forwards = batch
        .par_iter()
        .map(|pair| -> Result<_> {
            let (img, img_cache) = net.image_forward(&pair.image, with_caption)?;
            let (txt, txt_cache) = net.text_forward(pair.caption.ids())?;
            let dec = if with_caption {
                let n = pair.caption.len() - 1;
                let inputs = txt.hidden.slice_rows(0, n);
                let (logits, cache) =
                    net.decoder_forward(&inputs, img.caption_tokens.as_ref().expect("requested"));
                let (nll, dlogits) = sequence_nll(&logits, &pair.caption.ids()[1..])?;
                Some((nll, dlogits, cache))
            } else {
                None
            };
            Ok((img, img_cache, txt, txt_cache, dec))
        })
        .collect::<Result<Vec<_>>>()?;

    let (tau, clamped) = net.logit_scale();
    let contrast = if with_contrast {
        let u = Tensor2D::from_rows(&forwards.iter().map(|f| f.0.u.clone()).collect::<Vec<_>>())?;
        let v = Tensor2D::from_rows(&forwards.iter().map(|f| f.2.v.clone()).collect::<Vec<_>>())?;
        Some(contrastive_loss(&ContrastiveOutputs { u, v, tau })?)
    } else {
        None
    };
    let captioning = forwards
        .iter()
        .map(|f| f.4.as_ref().map_or(0.0, |d| d.0))
        .sum::<f64>()
        / m as f64;
    let contrastive = contrast.as_ref().map_or(0.0, |c| c.loss);
    let loss = caption_weight * captioning + contrastive_weight * contrastive;
    if !loss.is_finite() {
        return Err(Error::Numerical("joint loss is not finite".into()));
    }

    let cap_scale = caption_weight / m as f64;
    let grads = forwards
        .par_iter()
        .enumerate()
        .map(|(i, (img, img_cache, txt, txt_cache, dec))| {
            let mut g = vec![0.0; params.len()];
            let du: Option<Vec<f64>> = contrast
                .as_ref()
                .map(|c| c.du.row(i).iter().map(|x| x * contrastive_weight).collect());
            let dv: Option<Vec<f64>> = contrast
                .as_ref()
                .map(|c| c.dv.row(i).iter().map(|x| x * contrastive_weight).collect());
            let (dhidden, dmem) = match dec {
                Some((_, dlogits, cache)) => {
                    let mut dl = dlogits.clone();
                    dl.scale(cap_scale);
                    let rows = img.caption_tokens.as_ref().map_or(0, |t| t.rows());
                    let (dh, dm) = net.decoder_backward(&mut g, cache, &dl, rows);
                    (Some(dh), Some(dm))
                }
                None => (None, None),
            };
            net.text_backward(&mut g, txt, txt_cache, dv.as_deref(), dhidden.as_ref());
            net.image_backward(&mut g, img, img_cache, du.as_deref(), dmem.as_ref());
            g
        })
        .collect::<Vec<_>>();
    let mut grad = vec![0.0; params.len()];
    for g in &grads {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    if let Some(c) = &contrast {
        if !clamped {
            grad[model.layout().log_tau.off] += contrastive_weight * c.dtau * tau;
        }
    }
    Ok(LossOutput {
        loss,
        contrastive,
        captioning,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coca::params::ToyConfig;
    use crate::numerics::{finite_diff_check, finite_diff_check_coords, SeededRng};

    fn random_unit_rows(m: usize, d: usize, rng: &mut SeededRng) -> Tensor2D {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                crate::numerics::normalized(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>())
                    .unwrap()
            })
            .collect();
        Tensor2D::from_rows(&rows).unwrap()
    }

    /// Straight-line evaluation with explicit loops and no shared helpers.
    fn contrastive_oracle(u: &Tensor2D, v: &Tensor2D, tau: f64) -> f64 {
        let m = u.rows();
        let s = |i: usize, j: usize| {
            tau * (0..u.cols())
                .map(|k| u.get(i, k) * v.get(j, k))
                .sum::<f64>()
        };
        let mut total = 0.0;
        for i in 0..m {
            let denom: f64 = (0..m).map(|j| s(i, j).exp()).sum();
            total += (s(i, i).exp() / denom).ln();
        }
        for j in 0..m {
            let denom: f64 = (0..m).map(|i| s(i, j).exp()).sum();
            total += (s(j, j).exp() / denom).ln();
        }
        -total / (2.0 * m as f64)
    }

    #[test]
    fn single_pair_is_zero() {
        let mut rng = SeededRng::new(1);
        let o = ContrastiveOutputs {
            u: random_unit_rows(1, 8, &mut rng),
            v: random_unit_rows(1, 8, &mut rng),
            tau: 14.0,
        };
        assert_eq!(contrastive_loss(&o).unwrap().loss, 0.0);
    }

    #[test]
    fn identical_embeddings_give_log2() {
        let e = random_unit_rows(1, 8, &mut SeededRng::new(2));
        let u = Tensor2D::vstack(&[&e, &e]).unwrap();
        let o = ContrastiveOutputs {
            u: u.clone(),
            v: u,
            tau: 1.0 / 0.07,
        };
        assert!((contrastive_loss(&o).unwrap().loss - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn matches_oracle_and_gradients() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let (m, d) = (4, 6);
            let o = ContrastiveOutputs {
                u: random_unit_rows(m, d, &mut rng),
                v: random_unit_rows(m, d, &mut rng),
                tau: rng.uniform(0.5, 20.0),
            };
            let r = contrastive_loss(&o).unwrap();
            assert!((r.loss - contrastive_oracle(&o.u, &o.v, o.tau)).abs() < 1e-10);
            let mut point = o.u.data().to_vec();
            point.extend_from_slice(o.v.data());
            point.push(o.tau);
            let mut grad = r.du.data().to_vec();
            grad.extend_from_slice(r.dv.data());
            grad.push(r.dtau);
            let f = |x: &[f64]| {
                let u = Tensor2D::from_vec(m, d, x[..m * d].to_vec()).unwrap();
                let v = Tensor2D::from_vec(m, d, x[m * d..2 * m * d].to_vec()).unwrap();
                contrastive_oracle(&u, &v, x[2 * m * d])
            };
            let err = finite_diff_check(f, &grad, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn permutation_symmetric() {
        let mut rng = SeededRng::new(4);
        let u = random_unit_rows(5, 4, &mut rng);
        let v = random_unit_rows(5, 4, &mut rng);
        let a = contrastive_loss(&ContrastiveOutputs {
            u: u.clone(),
            v: v.clone(),
            tau: 3.0,
        })
        .unwrap()
        .loss;
        let perm = [3, 0, 4, 1, 2];
        let pu = Tensor2D::from_rows(&perm.iter().map(|&i| u.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let pv = Tensor2D::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let b = contrastive_loss(&ContrastiveOutputs {
            u: pu,
            v: pv,
            tau: 3.0,
        })
        .unwrap()
        .loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nll_one_hot_and_uniform() {
        let mut logits = Tensor2D::zeros(3, 5);
        logits.set(0, 1, 1000.0);
        logits.set(1, 2, 1000.0);
        logits.set(2, 4, 1000.0);
        assert_eq!(sequence_nll(&logits, &[1, 2, 4]).unwrap().0, 0.0);
        let (u, _) = sequence_nll(&Tensor2D::zeros(3, 5), &[1, 2, 4]).unwrap();
        assert!((u - 3.0 * 5f64.ln()).abs() < 1e-12);
        assert!(sequence_nll(&Tensor2D::zeros(1, 5), &[5]).is_err());
    }

    pub(crate) fn tiny_config() -> ToyConfig {
        ToyConfig {
            image_side: 8,
            patch: 4,
            d_model: 8,
            n_heads: 2,
            mlp_ratio: 2,
            image_blocks: 1,
            text_blocks: 1,
            decoder_blocks: 1,
            n_caption_queries: 3,
            embed_dim: 6,
            vocab_size: 9,
            max_len: 8,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        }
    }

    pub(crate) fn random_batch(cfg: &ToyConfig, m: usize, rng: &mut SeededRng) -> Vec<Pair> {
        (0..m)
            .map(|_| {
                let n = cfg.image_side * cfg.image_side * 3;
                let image = ToyImage::new(cfg.image_side, (0..n).map(|_| rng.next_f64()).collect())
                    .unwrap();
                let len = 1 + rng.below(4);
                let content: Vec<u32> = (0..len)
                    .map(|_| 3 + rng.below(cfg.vocab_size - 3) as u32)
                    .collect();
                Pair {
                    image,
                    caption: TokenSequence::from_content(&content),
                }
            })
            .collect()
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut rng = SeededRng::new(5);
        let mut model = ToyModel::new(cfg.clone(), &mut rng).unwrap();
        // a smaller τ keeps the contrastive term well conditioned for FD
        let tau_off = model.layout().log_tau.off;
        model.params_mut()[tau_off] = 2f64.ln();
        let batch = random_batch(&cfg, 3, &mut rng);
        for (wc, wt) in [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)] {
            let out = joint_loss(&model, &batch, wc, wt).unwrap();
            let f = |x: &[f64]| joint_loss_at(&model, x, &batch, wc, wt).unwrap().loss;
            let err = finite_diff_check(f, &out.grad, model.params(), 1e-5).unwrap();
            assert!(err < 1e-4, "weights ({wc},{wt}): relative error {err}");
        }
    }

    #[test]
    fn weights_compose() {
        let cfg = tiny_config();
        let mut rng = SeededRng::new(6);
        let model = ToyModel::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 2, &mut rng);
        let both = joint_loss(&model, &batch, 1.0, 1.0).unwrap();
        let cap = joint_loss(&model, &batch, 1.0, 0.0).unwrap();
        let con = joint_loss(&model, &batch, 0.0, 1.0).unwrap();
        assert!((both.loss - cap.loss - con.loss).abs() < 1e-12);
        assert!(joint_loss(&model, &batch, 0.0, 0.0).is_err());
        assert!(joint_loss(&model, &batch[..1], 0.0, 1.0).unwrap().loss == 0.0);
        let coords: Vec<usize> = (0..model.num_params()).step_by(7).collect();
        let f = |x: &[f64]| joint_loss_at(&model, x, &batch, 1.0, 1.0).unwrap().loss;
        assert!(
            finite_diff_check_coords(f, &both.grad, model.params(), 1e-5, &coords).unwrap() < 1e-4
        );
    }

    #[test]
    fn causal_decoder() {
        let cfg = tiny_config();
        let mut rng = SeededRng::new(7);
        let model = ToyModel::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 1, &mut rng);
        let a = TokenSequence::from_content(&[4, 5, 6]);
        let b = TokenSequence::from_content(&[4, 5, 7]);
        let la = model.caption_logits(&batch[0].image, &a).unwrap();
        let lb = model.caption_logits(&batch[0].image, &b).unwrap();
        // rows 0..=2 predict tokens 1..=3 and only see ids[..=row]
        for t in 0..3 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(3), lb.row(3));
    }
}
