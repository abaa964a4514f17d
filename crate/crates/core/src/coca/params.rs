use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Toy model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub image_side: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    pub decoder_blocks: usize,
    pub n_caption_queries: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    /// Longest token sequence accepted, BOS and EOS included.
    pub max_len: usize,
    pub init_temperature: f64,
    pub max_logit_scale: f64,
}

impl ToyConfig {
    pub fn new(vocab_size: usize) -> Self {
        ToyConfig {
            image_side: 32,
            patch: 8,
            d_model: 64,
            n_heads: 4,
            mlp_ratio: 2,
            image_blocks: 2,
            text_blocks: 1,
            decoder_blocks: 1,
            n_caption_queries: 16,
            embed_dim: 64,
            vocab_size,
            max_len: 128,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy model: {m}")));
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return bad("image side must be a multiple of the patch size");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 5 {
            return bad("vocabulary too small");
        }
        if self.max_len < 2
            || self.n_caption_queries == 0
            || self.embed_dim == 0
            || self.mlp_ratio == 0
        {
            return bad("zero-sized component");
        }
        if !(self.init_temperature > 0.0 && self.max_logit_scale > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// A named `rows × cols` window into the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len()]
    }

    pub fn get_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len()]
    }
}

/// Two disjoint slots borrowed mutably; `a` must precede `b`.
pub(crate) fn pair_mut<'a>(p: &'a mut [f64], a: Slot, b: Slot) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(a.off + a.len() <= b.off);
    let (lo, hi) = p.split_at_mut(b.off);
    (&mut lo[a.off..a.off + a.len()], &mut hi[..b.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LnSlots {
    pub g: Slot,
    pub b: Slot,
}

/// Attention projections `wq, wk, wv, wo`, stored contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnSlots {
    pub all: Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LinearSlots {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockSlots {
    pub ln1: LnSlots,
    pub attn: AttnSlots,
    pub cross: Option<(LnSlots, AttnSlots)>,
    pub ln2: LnSlots,
    pub fc1: LinearSlots,
    pub fc2: LinearSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub names: Vec<(String, Slot, bool)>,
    pub total: usize,
    pub patch_embed: LinearSlots,
    pub image_pos: Slot,
    pub image_blocks: Vec<BlockSlots>,
    pub image_ln: LnSlots,
    pub contrast_query: Slot,
    pub contrast_attn: AttnSlots,
    pub image_proj: Slot,
    pub caption_query: Slot,
    pub caption_attn: AttnSlots,
    pub token_embed: Slot,
    pub text_pos: Slot,
    pub cls_embed: Slot,
    pub text_blocks: Vec<BlockSlots>,
    pub text_ln: LnSlots,
    pub text_proj: Slot,
    pub decoder_blocks: Vec<BlockSlots>,
    pub decoder_ln: LnSlots,
    pub lm_head: LinearSlots,
    pub log_tau: Slot,
}

struct Builder {
    names: Vec<(String, Slot, bool)>,
    off: usize,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize, decay: bool) -> Slot {
        let s = Slot {
            off: self.off,
            rows,
            cols,
        };
        self.off += s.len();
        self.names.push((name, s, decay));
        s
    }

    fn ln(&mut self, name: &str, d: usize) -> LnSlots {
        LnSlots {
            g: self.slot(format!("{name}.gain"), 1, d, false),
            b: self.slot(format!("{name}.bias"), 1, d, false),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnSlots {
        let first = self.slot(format!("{name}.wq"), d, d, true);
        for p in ["wk", "wv", "wo"] {
            self.slot(format!("{name}.{p}"), d, d, true);
        }
        AttnSlots {
            all: Slot {
                off: first.off,
                rows: 4 * d,
                cols: d,
            },
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearSlots {
        LinearSlots {
            w: self.slot(format!("{name}.weight"), i, o, true),
            b: self.slot(format!("{name}.bias"), 1, o, false),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize, cross: bool) -> BlockSlots {
        let ln1 = self.ln(&format!("{name}.ln1"), d);
        let attn = self.attn(&format!("{name}.attn"), d);
        let cross = cross.then(|| {
            (
                self.ln(&format!("{name}.ln_cross"), d),
                self.attn(&format!("{name}.cross"), d),
            )
        });
        let ln2 = self.ln(&format!("{name}.ln2"), d);
        let fc1 = self.linear(&format!("{name}.fc1"), d, hidden);
        let fc2 = self.linear(&format!("{name}.fc2"), hidden, d);
        BlockSlots {
            ln1,
            attn,
            cross,
            ln2,
            fc1,
            fc2,
        }
    }
}

impl Layout {
    pub fn new(c: &ToyConfig) -> Layout {
        let d = c.d_model;
        let h = d * c.mlp_ratio;
        let mut b = Builder {
            names: Vec::new(),
            off: 0,
        };
        let patch_embed = b.linear("image.patch", c.patch_dim(), d);
        let image_pos = b.slot("image.pos".into(), c.n_patches(), d, false);
        let image_blocks = (0..c.image_blocks)
            .map(|i| b.block(&format!("image.block{i}"), d, h, false))
            .collect();
        let image_ln = b.ln("image.ln", d);
        let contrast_query = b.slot("pool.contrast.query".into(), 1, d, false);
        let contrast_attn = b.attn("pool.contrast", d);
        let image_proj = b.slot("image.proj".into(), d, c.embed_dim, true);
        let caption_query = b.slot("pool.caption.query".into(), c.n_caption_queries, d, false);
        let caption_attn = b.attn("pool.caption", d);
        let token_embed = b.slot("text.token_embed".into(), c.vocab_size, d, false);
        let text_pos = b.slot("text.pos".into(), c.max_len + 1, d, false);
        let cls_embed = b.slot("text.cls".into(), 1, d, false);
        let text_blocks = (0..c.text_blocks)
            .map(|i| b.block(&format!("text.block{i}"), d, h, false))
            .collect();
        let text_ln = b.ln("text.ln", d);
        let text_proj = b.slot("text.proj".into(), d, c.embed_dim, true);
        let decoder_blocks = (0..c.decoder_blocks)
            .map(|i| b.block(&format!("decoder.block{i}"), d, h, true))
            .collect();
        let decoder_ln = b.ln("decoder.ln", d);
        let lm_head = b.linear("decoder.lm_head", d, c.vocab_size);
        let log_tau = b.slot("log_tau".into(), 1, 1, false);
        Layout {
            names: b.names,
            total: b.off,
            patch_embed,
            image_pos,
            image_blocks,
            image_ln,
            contrast_query,
            contrast_attn,
            image_proj,
            caption_query,
            caption_attn,
            token_embed,
            text_pos,
            cls_embed,
            text_blocks,
            text_ln,
            text_proj,
            decoder_blocks,
            decoder_ln,
            lm_head,
            log_tau,
        }
    }

    /// Mask of coordinates subject to weight decay (matrices only).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for (_, s, decay) in &self.names {
            if *decay {
                m[s.off..s.off + s.len()].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }

    /// Gaussian init scaled by fan-in for matrices, small for embeddings,
    /// unit gains, zero biases; `log τ = ln(1/T₀)`.
    pub fn init(&self, c: &ToyConfig, rng: &mut SeededRng) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        for (name, s, decay) in &self.names {
            let dst = s.get_mut(&mut p);
            if name.ends_with(".gain") {
                dst.iter_mut().for_each(|v| *v = 1.0);
            } else if *decay {
                let std = 1.0 / (s.rows as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = rng.normal() * std);
            } else if name.ends_with(".bias") {
            } else if name == "log_tau" {
                dst[0] = (1.0 / c.init_temperature).ln();
            } else {
                dst.iter_mut().for_each(|v| *v = rng.normal() * 0.2);
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_tile_the_vector() {
        let c = ToyConfig::new(40);
        let l = Layout::new(&c);
        let mut end = 0;
        for (_, s, _) in &l.names {
            assert_eq!(s.off, end);
            end += s.len();
        }
        assert_eq!(end, l.total);
        let p = l.init(&c, &mut SeededRng::new(1));
        assert!((p[l.log_tau.off] - (1.0f64 / 0.07).ln()).abs() < 1e-15);
    }
}
