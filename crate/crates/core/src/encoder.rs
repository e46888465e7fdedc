//! Hierarchical query encoder.
//!
//! Each query is first encoded on its own by a pre-normalized self-attention
//! stack (inner-query encoding, giving `S_t`). Turn-level relative attention
//! then lets `S_t` attend to `S_1..S_t` jointly, with key/value biases chosen
//! by the clipped turn distance, followed by a feed-forward sublayer
//! (inter-query encoding, giving `Ŝ_t`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers;
use crate::matrix::Matrix;
use crate::model::{Model, TurnAttentionIds};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Clipped turn distance `min(t - p, r_max)`.
pub fn relative_distance(t: usize, p: usize, r_max: usize) -> Result<usize> {
    if p == 0 || p > t {
        return Err(Error::Contract(format!(
            "relative distance needs 1 <= p <= t, got p={p}, t={t}"
        )));
    }
    Ok((t - p).min(r_max))
}

/// Inner-query encoding of one (possibly padded) query whose first `len`
/// rows are real. Padding keys are hidden from every row.
pub fn inner_query_encode<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    input: Var,
    len: usize,
) -> Var {
    let ids = &model.ids.encoder;
    let n = tape.value(input).rows();
    let mask = layers::key_padding_mask(n, n, len);
    let mut x = input;
    for layer in &ids.layers {
        let h = layers::layer_norm(tape, &model.params, layer.ln_attn, x);
        let a = layers::multi_head_attention(
            tape,
            &model.params,
            layer.attn,
            model.config.heads,
            h,
            h,
            &mask,
        );
        x = tape.add(x, a);
        let h = layers::layer_norm(tape, &model.params, layer.ln_ffn, x);
        let f = layers::feed_forward(tape, &model.params, layer.ffn, h);
        x = tape.add(x, f);
    }
    match ids.final_ln {
        Some(ln) => layers::layer_norm(tape, &model.params, ln, x),
        None => x,
    }
}

/// One element of `𝒮_{≤t}`.
#[derive(Clone, Copy, Debug)]
pub struct HistoryEntry {
    pub turn: usize,
    pub states: Var,
    pub len: usize,
}

/// Where query `p`'s keys sit inside the concatenated key axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeySpan {
    pub turn: usize,
    pub start: usize,
    pub width: usize,
    pub valid: usize,
}

/// Output of turn-level relative attention for turn `t`.
#[derive(Clone, Debug)]
pub struct TurnAttention {
    /// `S_t + Σ_p A_{t→p} V̂_p`, before the feed-forward sublayer.
    pub context: Var,
    /// Per-head `|Q_t| × Σ_p |Q_p|` attention over the concatenated keys.
    pub weights: Vec<Var>,
    pub spans: Vec<KeySpan>,
}

/// Attention of `S_t` (the last history entry) over every `S_p`, `p ≤ t`.
/// Logits for all `p` share one softmax per query row.
pub fn turn_relative_attention<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    ids: TurnAttentionIds,
    history: &[HistoryEntry],
) -> Result<TurnAttention> {
    let current = *history
        .last()
        .ok_or_else(|| Error::Contract("turn attention needs a non-empty history".into()))?;
    let t = current.turn;
    let params = &model.params;
    let wq = params.bind(tape, ids.wq);
    let wk = params.bind(tape, ids.wk);
    let wv = params.bind(tape, ids.wv);
    let bk = params.bind(tape, ids.bias_k);
    let bv = params.bind(tape, ids.bias_v);
    let q = tape.matmul(current.states, wq);

    let mut keys = Vec::with_capacity(history.len());
    let mut values = Vec::with_capacity(history.len());
    let mut spans = Vec::with_capacity(history.len());
    let mut start = 0;
    for entry in history {
        let r = relative_distance(t, entry.turn, model.config.r_max)?;
        let k = tape.matmul(entry.states, wk);
        let v = tape.matmul(entry.states, wv);
        let bk_r = tape.slice_rows(bk, r, 1);
        let bv_r = tape.slice_rows(bv, r, 1);
        keys.push(tape.add_row(k, bk_r));
        values.push(tape.add_row(v, bv_r));
        let width = tape.value(entry.states).rows();
        spans.push(KeySpan {
            turn: entry.turn,
            start,
            width,
            valid: entry.len,
        });
        start += width;
    }
    let k_all = tape.concat_rows(&keys);
    let v_all = tape.concat_rows(&values);

    let rows = tape.value(current.states).rows();
    let mut visible = vec![false; rows * start];
    for i in 0..rows {
        for span in &spans {
            for j in span.start..span.start + span.valid {
                visible[i * start + j] = true;
            }
        }
    }
    let (attended, weights) =
        layers::attend_heads(tape, q, k_all, v_all, model.config.heads, &visible);
    let context = tape.add(current.states, attended);
    Ok(TurnAttention {
        context,
        weights,
        spans,
    })
}

/// `Ŝ_t` from the history `S_1..S_t`. With turn-level relative attention
/// ablated this is `S_t` itself.
pub fn inter_query_encode<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    history: &[HistoryEntry],
) -> Result<(Var, Option<TurnAttention>)> {
    let Some(ids) = model.ids.encoder.inter else {
        let last = history
            .last()
            .ok_or_else(|| Error::Contract("empty query history".into()))?;
        return Ok((last.states, None));
    };
    let attn = turn_relative_attention(tape, model, ids, history)?;
    let h = layers::layer_norm(tape, &model.params, ids.ln_ffn, attn.context);
    let f = layers::feed_forward(tape, &model.params, ids.ffn, h);
    let out = tape.add(attn.context, f);
    Ok((out, Some(attn)))
}

/// Retained attention of one query turn, for introspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub turn: usize,
    pub query_len: usize,
    /// One `|Q_t| × Σ_p |Q_p|` matrix per head.
    pub heads: Vec<Matrix<f64>>,
    pub spans: Vec<KeySpan>,
}

impl AttentionRecord {
    /// Slice `A_{t→p}` of head `h` (real query rows, real key columns).
    pub fn slice(&self, head: usize, p: usize) -> Matrix<f64> {
        let span = self.spans[p];
        self.heads[head]
            .slice_rows(0, self.query_len)
            .slice_cols(span.start, span.valid)
    }
}

/// `α_t^p = sum(A_{t→p}) / |Q_t|` for `p = 1..t`, averaged over heads.
pub fn query_attention_weights(record: Option<&AttentionRecord>) -> Result<Vec<f64>> {
    let record = record.ok_or(Error::IntrospectionDisabled)?;
    let heads = record.heads.len() as f64;
    let q = record.query_len as f64;
    Ok((0..record.spans.len())
        .map(|p| {
            let total: f64 = (0..record.heads.len())
                .map(|h| record.slice(h, p).sum())
                .sum();
            total / (heads * q)
        })
        .collect())
}

/// Encoder states for every query turn of a conversation.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `S_t` per turn.
    pub inner: Vec<Var>,
    /// `Ŝ_t` per turn.
    pub context: Vec<ContextStates>,
    /// Present when requested and turn-level relative attention is enabled.
    pub attention: Option<Vec<AttentionRecord>>,
}

/// `Ŝ_t` together with the number of real rows.
#[derive(Clone, Copy, Debug)]
pub struct ContextStates {
    pub turn: usize,
    pub states: Var,
    pub len: usize,
}

/// Encodes queries given as `(padded ids, real length, turn)` in turn order.
pub fn encode_queries<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    queries: &[(&[usize], usize, usize)],
    retain_attention: bool,
) -> Result<EncoderOutput> {
    let mut inner = Vec::with_capacity(queries.len());
    let mut history = Vec::with_capacity(queries.len());
    let mut context = Vec::with_capacity(queries.len());
    let keep = retain_attention && model.ids.encoder.inter.is_some();
    let mut records = keep.then(Vec::new);
    for (k, &(ids, len, turn)) in queries.iter().enumerate() {
        if k > 0 && turn <= queries[k - 1].2 {
            return Err(Error::Contract("query turns must increase".into()));
        }
        let b = crate::embedding::input_representation(tape, model, ids, turn)?;
        let s = inner_query_encode(tape, model, b, len);
        inner.push(s);
        history.push(HistoryEntry {
            turn,
            states: s,
            len,
        });
        let (s_hat, attn) = inter_query_encode(tape, model, &history)?;
        if let (Some(records), Some(attn)) = (records.as_mut(), attn) {
            records.push(AttentionRecord {
                turn,
                query_len: len,
                heads: attn
                    .weights
                    .iter()
                    .map(|&w| tape.value(w).cast::<f64>())
                    .collect(),
                spans: attn.spans,
            });
        }
        context.push(ContextStates {
            turn,
            states: s_hat,
            len,
        });
    }
    Ok(EncoderOutput {
        inner,
        context,
        attention: records,
    })
}
