//! Transformer sublayers recorded on a tape.

use alloc::vec::Vec;

use crate::model::{AttentionIds, FeedForwardIds, LayerNormIds};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    ids: LayerNormIds,
    x: Var,
) -> Var {
    let g = params.bind(tape, ids.gain);
    let b = params.bind(tape, ids.bias);
    tape.layer_norm(x, g, b)
}

/// `relu(x W1 + b1) W2 + b2`
pub fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    ids: FeedForwardIds,
    x: Var,
) -> Var {
    let w1 = params.bind(tape, ids.w1);
    let b1 = params.bind(tape, ids.b1);
    let w2 = params.bind(tape, ids.w2);
    let b2 = params.bind(tape, ids.b2);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let y = tape.matmul(h, w2);
    tape.add_row(y, b2)
}

/// Scaled dot-product attention per head over column slices of already
/// projected queries, keys and values. `visible` is row-major
/// `rows(q) × rows(k)`. Returns the concatenated head outputs and each head's
/// attention matrix node.
pub fn attend_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    visible: &[bool],
) -> (Var, Vec<Var>) {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let logits = tape.matmul_t(qh, kh);
        let logits = tape.scale(logits, scale);
        let a = tape.masked_softmax(logits, visible);
        weights.push(a);
        outs.push(tape.matmul(a, vh));
    }
    (tape.concat_cols(&outs), weights)
}

/// Multi-head attention with output projection.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    ids: AttentionIds,
    heads: usize,
    query_in: Var,
    kv_in: Var,
    visible: &[bool],
) -> Var {
    let wq = params.bind(tape, ids.wq);
    let wk = params.bind(tape, ids.wk);
    let wv = params.bind(tape, ids.wv);
    let wo = params.bind(tape, ids.wo);
    let q = tape.matmul(query_in, wq);
    let k = tape.matmul(kv_in, wk);
    let v = tape.matmul(kv_in, wv);
    let (ctx, _) = attend_heads(tape, q, k, v, heads, visible);
    tape.matmul(ctx, wo)
}

/// Mask letting every query row see the first `valid` of `cols` keys.
pub fn key_padding_mask(rows: usize, cols: usize, valid: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        m.extend((0..cols).map(|j| j < valid));
    }
    m
}
