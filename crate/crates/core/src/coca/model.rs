use super::block::{
    attn_grads, attn_weights, block_backward, block_forward, ln_backward, ln_forward, BlockCache,
};
use super::image::ToyImage;
use super::params::{pair_mut, Layout, ToyConfig};
use super::tokenizer::{TokenSequence, Vocab};
use crate::data_io::Checkpoint;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::numerics::layers::{
    l2_normalize_backward, l2_normalize_forward, linear_backward, linear_forward, LayerNormCache,
};
use crate::numerics::{
    gemm, mha_backward, mha_forward, AttentionCache, MatMut, MatRef, SeededRng, Tensor2D,
};

/// Toy CoCa model: image encoder with contrastive and captioning poolers,
/// causal text encoder with a trailing CLS token, and a multimodal decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    layout: Layout,
    params: Vec<f64>,
}

pub(crate) struct ImageCache {
    patches: Tensor2D,
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
    contrast: AttentionCache,
    pooled: Tensor2D,
    caption: Option<AttentionCache>,
}

pub(crate) struct ImageOut {
    pub u: Vec<f64>,
    pub u_norm: f64,
    pub caption_tokens: Option<Tensor2D>,
}

pub(crate) struct TextCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
    cls_out: Tensor2D,
}

pub(crate) struct TextOut {
    pub v: Vec<f64>,
    pub v_norm: f64,
    /// Final-LN hidden states for every position (CLS last).
    pub hidden: Tensor2D,
}

pub(crate) struct DecoderCache {
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
    y: Tensor2D,
}

/// Borrowed view of a parameter vector under a layout.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a> {
    pub cfg: &'a ToyConfig,
    pub lay: &'a Layout,
    pub p: &'a [f64],
}

pub(crate) fn patchify(cfg: &ToyConfig, img: &ToyImage) -> Result<Tensor2D> {
    if img.side() != cfg.image_side {
        return Err(Error::Shape(format!(
            "image side {} but model expects {}",
            img.side(),
            cfg.image_side
        )));
    }
    let (s, k) = (cfg.image_side, cfg.patch);
    let per_row = s / k;
    let mut out = Tensor2D::zeros(cfg.n_patches(), cfg.patch_dim());
    let src = img.data();
    for py in 0..per_row {
        for px in 0..per_row {
            let row = out.row_mut(py * per_row + px);
            let mut i = 0;
            for dy in 0..k {
                for dx in 0..k {
                    let base = ((py * k + dy) * s + px * k + dx) * 3;
                    for c in 0..3 {
                        row[i] = src[base + c] - 0.5;
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn mat(p: &[f64], s: super::params::Slot) -> MatRef<'_> {
    MatRef::new(s.get(p), s.rows, s.cols)
}

fn add_rows(dst: &mut Tensor2D, src: &[f64]) {
    let cols = dst.cols();
    for r in 0..dst.rows() {
        for (a, b) in dst
            .row_mut(r)
            .iter_mut()
            .zip(&src[r * cols..(r + 1) * cols])
        {
            *a += b;
        }
    }
}

impl<'a> Net<'a> {
    pub fn logit_scale(&self) -> (f64, bool) {
        let t = self.p[self.lay.log_tau.off].exp();
        if t > self.cfg.max_logit_scale {
            (self.cfg.max_logit_scale, true)
        } else {
            (t, false)
        }
    }

    pub fn image_forward(
        &self,
        img: &ToyImage,
        with_caption: bool,
    ) -> Result<(ImageOut, ImageCache)> {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let d = cfg.d_model;
        let patches = patchify(cfg, img)?;
        let mut x = linear_forward(
            &patches,
            mat(p, lay.patch_embed.w),
            Some(lay.patch_embed.b.get(p)),
        );
        add_rows(&mut x, lay.image_pos.get(p));
        let mut blocks = Vec::with_capacity(lay.image_blocks.len());
        for b in &lay.image_blocks {
            let (y, c) = block_forward(p, b, &x, None, cfg.n_heads, false);
            blocks.push(c);
            x = y;
        }
        let (h, ln) = ln_forward(p, lay.image_ln, &x);
        let q = Tensor2D::from_raw(1, d, lay.contrast_query.get(p).to_vec());
        let (pooled, contrast) = mha_forward(
            &q,
            &h,
            attn_weights(p, lay.contrast_attn, d),
            cfg.n_heads,
            false,
        );
        let z = linear_forward(&pooled, mat(p, lay.image_proj), None);
        let (u, u_norm) = l2_normalize_forward(z.data());
        let (caption_tokens, caption) = if with_caption {
            let q = Tensor2D::from_raw(cfg.n_caption_queries, d, lay.caption_query.get(p).to_vec());
            let (t, c) = mha_forward(
                &q,
                &h,
                attn_weights(p, lay.caption_attn, d),
                cfg.n_heads,
                false,
            );
            (Some(t), Some(c))
        } else {
            (None, None)
        };
        Ok((
            ImageOut {
                u,
                u_norm,
                caption_tokens,
            },
            ImageCache {
                patches,
                blocks,
                ln,
                contrast,
                pooled,
                caption,
            },
        ))
    }

    pub fn image_backward(
        &self,
        g: &mut [f64],
        out: &ImageOut,
        cache: &ImageCache,
        du: Option<&[f64]>,
        dcaption: Option<&Tensor2D>,
    ) {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let d = cfg.d_model;
        let n = cfg.n_patches();
        let mut dh = Tensor2D::zeros(n, d);
        if let Some(du) = du {
            let dz = l2_normalize_backward(&out.u, out.u_norm, du);
            let dz = Tensor2D::from_raw(1, dz.len(), dz);
            let dpooled = linear_backward(
                &cache.pooled,
                mat(p, lay.image_proj),
                &dz,
                lay.image_proj.get_mut(g),
                None,
            );
            let (dq, dk) = mha_backward(
                &dpooled,
                &cache.contrast,
                attn_weights(p, lay.contrast_attn, d),
                attn_grads(g, lay.contrast_attn, d),
            );
            lay.contrast_query
                .get_mut(g)
                .iter_mut()
                .zip(dq.data())
                .for_each(|(a, b)| *a += b);
            dh.add_assign(&dk);
        }
        if let (Some(dc), Some(cc)) = (dcaption, &cache.caption) {
            let (dq, dk) = mha_backward(
                dc,
                cc,
                attn_weights(p, lay.caption_attn, d),
                attn_grads(g, lay.caption_attn, d),
            );
            lay.caption_query
                .get_mut(g)
                .iter_mut()
                .zip(dq.data())
                .for_each(|(a, b)| *a += b);
            dh.add_assign(&dk);
        }
        let mut dx = ln_backward(p, g, lay.image_ln, &cache.ln, &dh);
        for (b, c) in lay.image_blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(p, g, b, c, &dx).0;
        }
        lay.image_pos
            .get_mut(g)
            .iter_mut()
            .zip(dx.data())
            .for_each(|(a, b)| *a += b);
        let (dw, db) = pair_mut(g, lay.patch_embed.w, lay.patch_embed.b);
        crate::numerics::layers::linear_backward_params(&cache.patches, &dx, dw, Some(db));
    }

    /// Runs the text encoder over `ids` followed by CLS.
    pub fn text_forward(&self, ids: &[u32]) -> Result<(TextOut, TextCache)> {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let d = cfg.d_model;
        if ids.len() > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds the maximum {}",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let l = ids.len() + 1;
        let emb = lay.token_embed.get(p);
        let pos = lay.text_pos.get(p);
        let mut x = Tensor2D::zeros(l, d);
        for i in 0..l {
            let src = if i < ids.len() {
                &emb[ids[i] as usize * d..(ids[i] as usize + 1) * d]
            } else {
                lay.cls_embed.get(p)
            };
            for (c, o) in x.row_mut(i).iter_mut().enumerate() {
                *o = src[c] + pos[i * d + c];
            }
        }
        let mut blocks = Vec::with_capacity(lay.text_blocks.len());
        for b in &lay.text_blocks {
            let (y, c) = block_forward(p, b, &x, None, cfg.n_heads, true);
            blocks.push(c);
            x = y;
        }
        let (hidden, ln) = ln_forward(p, lay.text_ln, &x);
        let cls_out = hidden.slice_rows(l - 1, l);
        let z = linear_forward(&cls_out, mat(p, lay.text_proj), None);
        let (v, v_norm) = l2_normalize_forward(z.data());
        Ok((
            TextOut { v, v_norm, hidden },
            TextCache {
                ids: ids.to_vec(),
                blocks,
                ln,
                cls_out,
            },
        ))
    }

    /// `dhidden` covers any prefix of positions (decoder inputs).
    pub fn text_backward(
        &self,
        g: &mut [f64],
        out: &TextOut,
        cache: &TextCache,
        dv: Option<&[f64]>,
        dhidden: Option<&Tensor2D>,
    ) {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let d = cfg.d_model;
        let l = cache.ids.len() + 1;
        let mut dh = Tensor2D::zeros(l, d);
        if let Some(dv) = dv {
            let dz = l2_normalize_backward(&out.v, out.v_norm, dv);
            let dz = Tensor2D::from_raw(1, dz.len(), dz);
            let dcls = linear_backward(
                &cache.cls_out,
                mat(p, lay.text_proj),
                &dz,
                lay.text_proj.get_mut(g),
                None,
            );
            dh.row_mut(l - 1).copy_from_slice(dcls.data());
        }
        if let Some(dy) = dhidden {
            for r in 0..dy.rows() {
                for (a, b) in dh.row_mut(r).iter_mut().zip(dy.row(r)) {
                    *a += b;
                }
            }
        }
        let mut dx = ln_backward(p, g, lay.text_ln, &cache.ln, &dh);
        for (b, c) in lay.text_blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(p, g, b, c, &dx).0;
        }
        {
            let pos = lay.text_pos.get_mut(g);
            for (a, b) in pos[..l * d].iter_mut().zip(dx.data()) {
                *a += b;
            }
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let emb = lay.token_embed.get_mut(g);
            for (a, b) in emb[id as usize * d..(id as usize + 1) * d]
                .iter_mut()
                .zip(dx.row(i))
            {
                *a += b;
            }
        }
        lay.cls_embed
            .get_mut(g)
            .iter_mut()
            .zip(dx.row(l - 1))
            .for_each(|(a, b)| *a += b);
    }

    /// Next-token logits for each of the `n` input rows.
    pub fn decoder_forward(
        &self,
        inputs: &Tensor2D,
        memory: &Tensor2D,
    ) -> (Tensor2D, DecoderCache) {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let mut x = inputs.clone();
        let mut blocks = Vec::with_capacity(lay.decoder_blocks.len());
        for b in &lay.decoder_blocks {
            let (y, c) = block_forward(p, b, &x, Some(memory), cfg.n_heads, true);
            blocks.push(c);
            x = y;
        }
        let (y, ln) = ln_forward(p, lay.decoder_ln, &x);
        let logits = linear_forward(&y, mat(p, lay.lm_head.w), Some(lay.lm_head.b.get(p)));
        (logits, DecoderCache { blocks, ln, y })
    }

    /// Returns `(d inputs, d memory)`.
    pub fn decoder_backward(
        &self,
        g: &mut [f64],
        cache: &DecoderCache,
        dlogits: &Tensor2D,
        mem_rows: usize,
    ) -> (Tensor2D, Tensor2D) {
        let (cfg, lay, p) = (self.cfg, self.lay, self.p);
        let dy = {
            let (dw, db) = pair_mut(g, lay.lm_head.w, lay.lm_head.b);
            linear_backward(&cache.y, mat(p, lay.lm_head.w), dlogits, dw, Some(db))
        };
        let mut dx = ln_backward(p, g, lay.decoder_ln, &cache.ln, &dy);
        let mut dmem = Tensor2D::zeros(mem_rows, cfg.d_model);
        for (b, c) in lay.decoder_blocks.iter().zip(&cache.blocks).rev() {
            let (d, m) = block_backward(p, g, b, c, &dx);
            dx = d;
            dmem.add_assign(&m.expect("decoder blocks have cross-attention"));
        }
        (dx, dmem)
    }
}

impl ToyModel {
    pub fn new(config: ToyConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config, rng);
        Ok(ToyModel {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ToyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(ToyModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, offset, length)` for every parameter tensor.
    pub fn param_names(&self) -> Vec<(String, usize, usize)> {
        self.layout
            .names
            .iter()
            .map(|(n, s, _)| (n.clone(), s.off, s.len()))
            .collect()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.config,
            lay: &self.layout,
            p: &self.params,
        }
    }

    pub(crate) fn net_at<'a>(&'a self, p: &'a [f64]) -> Net<'a> {
        Net {
            cfg: &self.config,
            lay: &self.layout,
            p,
        }
    }

    /// Learned inverse temperature τ = min(exp(log τ), max_logit_scale).
    pub fn logit_scale(&self) -> f64 {
        self.net().logit_scale().0
    }

    pub fn encode_image(&self, img: &ToyImage) -> Result<Embedding> {
        let (out, _) = self.net().image_forward(img, false)?;
        Embedding::from_unit(out.u)
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Result<Embedding> {
        let (out, _) = self.net().text_forward(seq.ids())?;
        Embedding::from_unit(out.v)
    }

    /// Captioning-pooler tokens for `img`, the decoder's cross-attention memory.
    pub fn caption_memory(&self, img: &ToyImage) -> Result<Tensor2D> {
        let (out, _) = self.net().image_forward(img, true)?;
        Ok(out.caption_tokens.expect("requested"))
    }

    /// Next-token logits after `prefix` (which starts with BOS).
    pub fn next_token_logits(&self, memory: &Tensor2D, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty decoding prefix".into()));
        }
        let net = self.net();
        let (text, _) = net.text_forward(prefix)?;
        let inputs = text.hidden.slice_rows(0, prefix.len());
        let (logits, _) = net.decoder_forward(&inputs, memory);
        Ok(logits.row(prefix.len() - 1).to_vec())
    }

    /// Full next-token logits table for a teacher-forced sequence: row `t`
    /// predicts `ids[t + 1]`.
    pub fn caption_logits(&self, img: &ToyImage, seq: &TokenSequence) -> Result<Tensor2D> {
        let memory = self.caption_memory(img)?;
        let net = self.net();
        let (text, _) = net.text_forward(seq.ids())?;
        let inputs = text.hidden.slice_rows(0, seq.len() - 1);
        Ok(net.decoder_forward(&inputs, &memory).0)
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "toy_coca",
            "config": self.config,
            "vocab": vocab.tokens(),
        }));
        for (name, s, _) in &self.layout.names {
            ck.push(name.clone(), s.get(&self.params).to_vec());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ToyModel, Vocab)> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("toy_coca") {
            return Err(Error::Format("checkpoint is not a toy CoCa model".into()));
        }
        let config: ToyConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| Error::Format(format!("checkpoint vocab: {e}")))?;
        let vocab = Vocab::from_tokens(tokens)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Format(
                "vocabulary size does not match config".into(),
            ));
        }
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        for (name, s, _) in &layout.names {
            let src = ck.section(name)?;
            if src.len() != s.len() {
                return Err(Error::Format(format!(
                    "section {name} has {} values, expected {}",
                    src.len(),
                    s.len()
                )));
            }
            s.get_mut(&mut params).copy_from_slice(src);
        }
        Ok((ToyModel::from_params(config, params)?, vocab))
    }
}

/// `C = A·Bᵀ` helper used by the losses.
pub(crate) fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let mut c = Tensor2D::zeros(a.rows(), b.rows());
    gemm(
        1.0,
        a.into(),
        false,
        b.into(),
        true,
        0.0,
        MatMut::new(c.data_mut(), a.rows(), b.rows()),
    );
    c
}
