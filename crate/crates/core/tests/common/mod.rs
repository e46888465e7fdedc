//! Reference forward pass written with plain nested loops over `Vec<Vec<f64>>`,
//! plus random fixtures. Nothing here reuses the crate's matrix or tape code.

#![allow(dead_code, clippy::needless_range_loop)]

use phaed_core::corpus::{Conversation, Role, Utterance, TurnInput};
use phaed_core::model::{AttentionIds, FeedForwardIds, LayerNormIds, Model, ModelConfig};
use phaed_core::params::ParamId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod metric_oracle;

pub type Rows = Vec<Vec<f64>>;

pub fn param(model: &Model<f64>, id: ParamId) -> Rows {
    model.params.get(id).to_f64_rows()
}

pub fn matmul(a: &Rows, w: &Rows) -> Rows {
    a.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|c| (0..row.len()).map(|k| row[k] * w[k][c]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Rows, model: &Model<f64>, ids: LayerNormIds) -> Rows {
    let g = &param(model, ids.gain)[0];
    let b = &param(model, ids.bias)[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / sd * g[c] + b[c])
                .collect()
        })
        .collect()
}

pub fn feed_forward(x: &Rows, model: &Model<f64>, ids: FeedForwardIds) -> Rows {
    let b1 = &param(model, ids.b1)[0];
    let b2 = &param(model, ids.b2)[0];
    let h: Rows = matmul(x, &param(model, ids.w1))
        .into_iter()
        .map(|r| r.iter().zip(b1).map(|(v, b)| (v + b).max(0.0)).collect())
        .collect();
    matmul(&h, &param(model, ids.w2))
        .into_iter()
        .map(|r| r.iter().zip(b2).map(|(v, b)| v + b).collect())
        .collect()
}

/// Softmax over the entries where `visible` holds; others get weight 0.
pub fn softmax_visible(logits: &[f64], visible: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(visible)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(visible)
        .map(|(l, v)| if *v { (l - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per-head scaled dot-product attention on projected rows. Returns the
/// concatenated head outputs and the per-head weight matrices.
pub fn attend(
    q: &Rows,
    k: &Rows,
    v: &Rows,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> (Rows, Vec<Rows>) {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut weights = vec![Vec::new(); heads];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (h * dh..(h + 1) * dh).map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let vis: Vec<bool> = (0..k.len()).map(|j| visible(i, j)).collect();
            let a = softmax_visible(&logits, &vis);
            for (j, w) in a.iter().enumerate() {
                for c in h * dh..(h + 1) * dh {
                    out[i][c] += w * v[j][c];
                }
            }
            weights[h].push(a);
        }
    }
    (out, weights)
}

pub fn mha(
    query_in: &Rows,
    kv_in: &Rows,
    model: &Model<f64>,
    ids: AttentionIds,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Rows {
    let q = matmul(query_in, &param(model, ids.wq));
    let k = matmul(kv_in, &param(model, ids.wk));
    let v = matmul(kv_in, &param(model, ids.wv));
    let (ctx, _) = attend(&q, &k, &v, model.config.heads, visible);
    matmul(&ctx, &param(model, ids.wo))
}

/// `E(w_i) + TE(t) + PE(i)` for each token.
pub fn embed(model: &Model<f64>, tokens: &[usize], turn: usize) -> Rows {
    let e = param(model, model.ids.embedding.token);
    let pe = param(model, model.ids.embedding.position);
    let te = model.ids.embedding.turn.map(|id| param(model, id));
    tokens
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            (0..model.config.d_model)
                .map(|c| e[w][c] + pe[i][c] + te.as_ref().map_or(0.0, |t| t[turn - 1][c]))
                .collect()
        })
        .collect()
}

/// `S_t` of one unpadded query frame.
pub fn inner_encode(model: &Model<f64>, tokens: &[usize], turn: usize) -> Rows {
    let mut x = embed(model, tokens, turn);
    for layer in &model.ids.encoder.layers {
        let h = layer_norm(&x, model, layer.ln_attn);
        x = add(&x, &mha(&h, &h, model, layer.attn, &|_, _| true));
        let h = layer_norm(&x, model, layer.ln_ffn);
        x = add(&x, &feed_forward(&h, model, layer.ffn));
    }
    match model.ids.encoder.final_ln {
        Some(ln) => layer_norm(&x, model, ln),
        None => x,
    }
}

/// Turn-level relative attention of the last entry of `states` (turns
/// `1..=t`) over a materialized concatenation of every turn's keys/values.
/// Returns `S_t + attended` and the per-head weights.
pub fn turn_attention(model: &Model<f64>, states: &[Rows]) -> (Rows, Vec<Rows>) {
    let ids = model.ids.encoder.inter.expect("turn attention enabled");
    let t = states.len();
    let bk = param(model, ids.bias_k);
    let bv = param(model, ids.bias_v);
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (idx, s) in states.iter().enumerate() {
        let p = idx + 1;
        let r = (t - p).min(model.config.r_max);
        for row in matmul(s, &param(model, ids.wk)) {
            keys.push(row.iter().zip(&bk[r]).map(|(a, b)| a + b).collect());
        }
        for row in matmul(s, &param(model, ids.wv)) {
            values.push(row.iter().zip(&bv[r]).map(|(a, b)| a + b).collect());
        }
    }
    let q = matmul(&states[t - 1], &param(model, ids.wq));
    let (att, weights) = attend(&q, &keys, &values, model.config.heads, &|_, _| true);
    (add(&states[t - 1], &att), weights)
}

/// `Ŝ_t` for every turn.
pub fn encode_all(model: &Model<f64>, queries: &[Vec<usize>]) -> Vec<Rows> {
    let mut states = Vec::new();
    let mut out = Vec::new();
    for (k, q) in queries.iter().enumerate() {
        states.push(inner_encode(model, q, k + 1));
        out.push(match model.ids.encoder.inter {
            Some(ids) => {
                let (z, _) = turn_attention(model, &states);
                let h = layer_norm(&z, model, ids.ln_ffn);
                add(&z, &feed_forward(&h, model, ids.ffn))
            }
            None => states[k].clone(),
        });
    }
    out
}

/// Decoder outputs `H^N` for every turn. Layer `n` of turn `t` attends over
/// the explicit row concatenation of the stored layer-`n` inputs of the
/// responses `p` with `t - c <= p < t`, followed by the current rows.
pub fn decode_all(model: &Model<f64>, queries: &[Vec<usize>], responses: &[Vec<usize>]) -> Vec<Rows> {
    let contexts = encode_all(model, queries);
    let c = if model.config.ablations.no_turn_level_recurrence {
        0
    } else {
        model.config.c_max
    };
    let mut stored: Vec<Vec<Rows>> = Vec::new();
    let mut outputs = Vec::new();
    for (k, resp) in responses.iter().enumerate() {
        let t = k + 1;
        let mut x = embed(model, resp, t);
        let mut inputs = Vec::new();
        for (n, layer) in model.ids.decoder.layers.iter().enumerate() {
            inputs.push(x.clone());
            let mut kv_raw: Rows = Vec::new();
            for p in 1..t {
                if t - p <= c {
                    kv_raw.extend(stored[p - 1][n].iter().cloned());
                }
            }
            let mem = kv_raw.len();
            kv_raw.extend(x.iter().cloned());
            let kv = layer_norm(&kv_raw, model, layer.ln_self);
            let q: Rows = kv[mem..].to_vec();
            let a = mha(&q, &kv, model, layer.self_attn, &|i, j| j < mem || j - mem <= i);
            let h_hat = add(&x, &a);
            let h = layer_norm(&h_hat, model, layer.ln_cross);
            let cross = mha(&h, &contexts[k], model, layer.cross_attn, &|_, _| true);
            let b = add(&h_hat, &cross);
            let h = layer_norm(&b, model, layer.ln_ffn);
            x = add(&b, &feed_forward(&h, model, layer.ffn));
        }
        stored.push(inputs);
        outputs.push(match model.ids.decoder.final_ln {
            Some(ln) => layer_norm(&x, model, ln),
            None => x,
        });
    }
    outputs
}

pub fn max_abs_diff(a: &Rows, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub const DESK_VOCAB: usize = 16;

pub fn desk_model(seed: u64) -> Model<f64> {
    Model::new(ModelConfig::desk(DESK_VOCAB), seed).unwrap()
}

/// Random conversation with content ids drawn from the non-reserved range.
pub fn random_conversation(
    rng: &mut ChaCha8Rng,
    vocab: usize,
    turns: usize,
    max_len: usize,
    speaker_tokens: bool,
) -> Conversation {
    let content = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.gen_range(1..=max_len);
        (0..n).map(|_| rng.gen_range(6..vocab)).collect()
    };
    let pairs = (1..=turns)
        .map(|t| {
            (
                Utterance::frame(Role::Query, t, &content(rng), speaker_tokens),
                Utterance::frame(Role::Response, t, &content(rng), speaker_tokens),
            )
        })
        .collect();
    Conversation::from_pairs(pairs).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn frames(conv: &Conversation) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    conv.pairs()
        .iter()
        .map(|(q, r)| (q.tokens.clone(), r.tokens.clone()))
        .unzip()
}

pub fn inputs(conv: &Conversation) -> Vec<TurnInput> {
    conv.turn_inputs()
}

/// The crate's own tape forward pass: `Ŝ_t` and `H^N` for every turn.
pub fn crate_forward(model: &Model<f64>, turns: &[TurnInput]) -> (Vec<Rows>, Vec<Rows>) {
    use phaed_core::decoder::{decoder_forward, ResponseMemory};
    use phaed_core::embedding::input_representation;
    use phaed_core::encoder::encode_queries;
    use phaed_core::tape::Tape;

    let mut tape = Tape::new();
    let q: Vec<(&[usize], usize, usize)> = turns
        .iter()
        .map(|t| (t.query.ids.as_slice(), t.query.len, t.turn))
        .collect();
    let enc = encode_queries(&mut tape, model, &q, false).unwrap();
    let mut memory = ResponseMemory::new(model.config.layers, model.config.effective_c_max());
    let mut outs = Vec::new();
    for (k, t) in turns.iter().enumerate() {
        let x = input_representation(&mut tape, model, &t.response.ids, t.turn).unwrap();
        let pass = decoder_forward(
            &mut tape,
            model,
            x,
            t.response.len,
            &mut memory,
            &enc.context[k],
            t.turn,
        )
        .unwrap();
        outs.push(tape.value(pass.output).to_f64_rows());
    }
    let ctx = enc
        .context
        .iter()
        .map(|c| tape.value(c.states).to_f64_rows())
        .collect();
    (ctx, outs)
}

/// Runs a teacher-forced conversation with every response representation as
/// a tape leaf and returns the gradients of the turn-`t` loss with respect to
/// each of those leaves.
pub fn response_input_gradients(model: &Model<f64>, turns: usize, t: usize) -> Vec<Option<f64>> {
    use phaed_core::decoder::{decoder_forward, ResponseMemory};
    use phaed_core::embedding::EmbeddingTables;
    use phaed_core::encoder::encode_queries;
    use phaed_core::model::teacher_targets;
    use phaed_core::tape::Tape;

    let conv = random_conversation(&mut rng(31), DESK_VOCAB, turns, 4, true);
    let inputs = conv.turn_inputs();
    let mut tape = Tape::new();
    let q: Vec<(&[usize], usize, usize)> = inputs
        .iter()
        .map(|x| (x.query.ids.as_slice(), x.query.len, x.turn))
        .collect();
    let enc = encode_queries(&mut tape, model, &q, false).unwrap();
    let tables = EmbeddingTables::of(model);
    let mut memory = ResponseMemory::new(model.config.layers, model.config.effective_c_max());
    let mut leaves = Vec::new();
    let mut losses = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let b = tables.input_representation(&x.response.ids, x.turn).unwrap();
        let leaf = tape.leaf(b);
        leaves.push(leaf);
        let pass = decoder_forward(
            &mut tape,
            model,
            leaf,
            x.response.len,
            &mut memory,
            &enc.context[k],
            x.turn,
        )
        .unwrap();
        let w = model.params.bind(&mut tape, model.ids.decoder.output.unwrap());
        let logits = tape.matmul(pass.output, w);
        losses.push(tape.cross_entropy(logits, &teacher_targets(&x.response.ids, x.response.len)));
    }
    let grads = tape.backward(losses[t - 1]);
    leaves
        .iter()
        .map(|&l| grads.get(l).map(|g| g.data().iter().map(|v| v.abs()).fold(0.0, f64::max)))
        .collect()
}
