//! Pre-LN transformer block with optional cross-attention.

use super::params::{pair_mut, AttnSlots, BlockSlots, LnSlots};
use crate::numerics::layers::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, map,
    map_backward, LayerNormCache,
};
use crate::numerics::{
    mha_backward, mha_forward, AttentionCache, AttentionGrads, AttentionWeights, MatRef, Tensor2D,
};

pub(crate) fn attn_weights<'a>(p: &'a [f64], s: AttnSlots, d: usize) -> AttentionWeights<'a> {
    let w = s.all.get(p);
    let n = d * d;
    AttentionWeights {
        wq: &w[..n],
        wk: &w[n..2 * n],
        wv: &w[2 * n..3 * n],
        wo: &w[3 * n..],
        d_model: d,
    }
}

pub(crate) fn attn_grads<'a>(g: &'a mut [f64], s: AttnSlots, d: usize) -> AttentionGrads<'a> {
    let n = d * d;
    let w = s.all.get_mut(g);
    let (wq, rest) = w.split_at_mut(n);
    let (wk, rest) = rest.split_at_mut(n);
    let (wv, wo) = rest.split_at_mut(n);
    AttentionGrads { wq, wk, wv, wo }
}

pub(crate) fn ln_forward(p: &[f64], s: LnSlots, x: &Tensor2D) -> (Tensor2D, LayerNormCache) {
    layer_norm_forward(x, s.g.get(p), s.b.get(p))
}

pub(crate) fn ln_backward(
    p: &[f64],
    g: &mut [f64],
    s: LnSlots,
    cache: &LayerNormCache,
    dy: &Tensor2D,
) -> Tensor2D {
    let (dg, db) = pair_mut(g, s.g, s.b);
    layer_norm_backward(cache, s.g.get(p), dy, dg, db)
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    cross: Option<(LayerNormCache, AttentionCache)>,
    ln2: LayerNormCache,
    c: Tensor2D,
    h: Tensor2D,
    a: Tensor2D,
}

pub(crate) fn block_forward(
    p: &[f64],
    s: &BlockSlots,
    x: &Tensor2D,
    memory: Option<&Tensor2D>,
    n_heads: usize,
    causal: bool,
) -> (Tensor2D, BlockCache) {
    let d = x.cols();
    let (a1, ln1) = ln_forward(p, s.ln1, x);
    let (att, attn) = mha_forward(&a1, &a1, attn_weights(p, s.attn, d), n_heads, causal);
    let mut x1 = x.clone();
    x1.add_assign(&att);
    let cross = match (&s.cross, memory) {
        (Some((lnx, ax)), Some(mem)) => {
            let (b, lnc) = ln_forward(p, *lnx, &x1);
            let (xa, ac) = mha_forward(&b, mem, attn_weights(p, *ax, d), n_heads, false);
            x1.add_assign(&xa);
            Some((lnc, ac))
        }
        (None, None) => None,
        _ => panic!("cross-attention slots and memory must be given together"),
    };
    let (c, ln2) = ln_forward(p, s.ln2, &x1);
    let h = linear_forward(
        &c,
        MatRef::new(s.fc1.w.get(p), s.fc1.w.rows, s.fc1.w.cols),
        Some(s.fc1.b.get(p)),
    );
    let a = map(&h, gelu);
    let m = linear_forward(
        &a,
        MatRef::new(s.fc2.w.get(p), s.fc2.w.rows, s.fc2.w.cols),
        Some(s.fc2.b.get(p)),
    );
    x1.add_assign(&m);
    (
        x1,
        BlockCache {
            ln1,
            attn,
            cross,
            ln2,
            c,
            h,
            a,
        },
    )
}

/// Returns `(dx, d memory)`; parameter gradients accumulate into `g`.
pub(crate) fn block_backward(
    p: &[f64],
    g: &mut [f64],
    s: &BlockSlots,
    cache: &BlockCache,
    dout: &Tensor2D,
) -> (Tensor2D, Option<Tensor2D>) {
    let d = dout.cols();
    let mut dx = dout.clone();
    // MLP branch
    let da = {
        let (dw, db) = pair_mut(g, s.fc2.w, s.fc2.b);
        linear_backward(
            &cache.a,
            MatRef::new(s.fc2.w.get(p), s.fc2.w.rows, s.fc2.w.cols),
            dout,
            dw,
            Some(db),
        )
    };
    let dh = map_backward(&cache.h, &da, gelu_grad);
    let dc = {
        let (dw, db) = pair_mut(g, s.fc1.w, s.fc1.b);
        linear_backward(
            &cache.c,
            MatRef::new(s.fc1.w.get(p), s.fc1.w.rows, s.fc1.w.cols),
            &dh,
            dw,
            Some(db),
        )
    };
    dx.add_assign(&ln_backward(p, g, s.ln2, &cache.ln2, &dc));
    // cross-attention branch
    let dmem = match (&s.cross, &cache.cross) {
        (Some((lnx, ax)), Some((lnc, ac))) => {
            let (db, dmem) = mha_backward(&dx, ac, attn_weights(p, *ax, d), attn_grads(g, *ax, d));
            dx.add_assign(&ln_backward(p, g, *lnx, lnc, &db));
            Some(dmem)
        }
        _ => None,
    };
    // self-attention branch
    let (dq, dkv) = mha_backward(
        &dx,
        &cache.attn,
        attn_weights(p, s.attn, d),
        attn_grads(g, s.attn, d),
    );
    let mut da1 = dq;
    da1.add_assign(&dkv);
    dx.add_assign(&ln_backward(p, g, s.ln1, &cache.ln1, &da1));
    (dx, dmem)
}
