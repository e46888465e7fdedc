//! Greedy multi-turn response generation.
//!
//! [`generate_response`] decodes token by token with per-layer key/value
//! caches and threads the response memory across turns. The memory stores
//! the hidden states computed over the generated tokens themselves.
//! [`generate_conversation_uncached`] recomputes the full decoder pass for
//! every emitted token and serves as the reference path.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    Role, Tokenizer, TokenId, Utterance, Vocabulary, EOU, PAD, SOU, SPEAKER_Q, SPEAKER_R,
};
use crate::decoder::{self, ResponseMemory};
use crate::embedding::{self, EmbeddingTables};
use crate::encoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{AttentionIds, FeedForwardIds, LayerNormIds, Model};
use crate::scalar::Scalar;
use crate::tape::{Tape, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Maximum number of content tokens per response.
    #[serde(default = "default_max_len")]
    pub max_response_len: usize,
}

fn default_max_len() -> usize {
    50
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_response_len: default_max_len(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_response_len == 0 {
            return Err(Error::Config("max_response_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tokens never chosen by the argmax: they are either padding or forced.
fn selectable(id: TokenId) -> bool {
    !matches!(id, PAD | SOU | SPEAKER_Q | SPEAKER_R)
}

/// Index of the largest selectable entry; the lowest index wins ties.
pub fn greedy_pick<T: Scalar>(scores: &[T]) -> TokenId {
    let mut best = EOU;
    for (i, &s) in scores.iter().enumerate() {
        if selectable(i) && s > scores[best] {
            best = i;
        }
    }
    best
}

fn seeds<T: Scalar>(model: &Model<T>) -> Vec<TokenId> {
    if model.config.speaker_tokens() {
        vec![SOU, SPEAKER_R]
    } else {
        vec![SOU]
    }
}

fn layer_norm_row<T: Scalar>(x: &[T], gain: &Matrix<T>, bias: &Matrix<T>) -> Vec<T> {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, &v)| (v - mean) * inv * gain.get(0, c) + bias.get(0, c))
        .collect()
}

fn vec_mat<T: Scalar>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    for (k, &a) in x.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(w.row(k)) {
            *o = *o + a * b;
        }
    }
    out
}

fn add_in_place<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

/// Single-query multi-head attention over explicit key/value rows.
fn attend_row<T: Scalar>(q: &[T], keys: &[Vec<T>], values: &[Vec<T>], heads: usize) -> Vec<T> {
    let d = q.len();
    let dh = d / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let logits: Vec<T> = keys
            .iter()
            .map(|k| {
                q[cols.clone()]
                    .iter()
                    .zip(&k[cols.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
                    * scale
            })
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (e, v) in exps.iter().zip(values) {
            let w = *e / total;
            for c in cols.clone() {
                out[c] = out[c] + w * v[c];
            }
        }
    }
    out
}

struct LayerCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    cross_keys: Vec<Vec<T>>,
    cross_values: Vec<Vec<T>>,
    inputs: Vec<Vec<T>>,
}

fn rows_of<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<T>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Step-by-step decoder for one response with cached keys and values.
pub struct IncrementalDecoder<'a, T> {
    model: &'a Model<T>,
    turn: usize,
    caches: Vec<LayerCache<T>>,
    position: usize,
}

impl<'a, T: Scalar> IncrementalDecoder<'a, T> {
    /// `context` holds the real rows of `Ŝ_t`.
    pub fn new(
        model: &'a Model<T>,
        context: &Matrix<T>,
        memory: &ResponseMemory<T>,
        turn: usize,
    ) -> Result<Self> {
        if memory.latest_turn().is_some_and(|last| last >= turn) {
            return Err(Error::Contract("memory already holds this turn".into()));
        }
        let p = &model.params;
        let caches = model
            .ids
            .decoder
            .layers
            .iter()
            .enumerate()
            .map(|(n, layer)| {
                let (keys, values) = match memory.layer_memory(n, turn) {
                    Some(m) => {
                        let normed = norm_rows(&m, layer.ln_self, p);
                        (
                            rows_of(&normed.matmul(p.get(layer.self_attn.wk))),
                            rows_of(&normed.matmul(p.get(layer.self_attn.wv))),
                        )
                    }
                    None => (Vec::new(), Vec::new()),
                };
                LayerCache {
                    keys,
                    values,
                    cross_keys: rows_of(&context.matmul(p.get(layer.cross_attn.wk))),
                    cross_values: rows_of(&context.matmul(p.get(layer.cross_attn.wv))),
                    inputs: Vec::new(),
                }
            })
            .collect();
        Ok(Self {
            model,
            turn,
            caches,
            position: 0,
        })
    }

    /// Feeds the next token; returns the top hidden state `H^N` of its row.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<T>> {
        let model = self.model;
        let tables = EmbeddingTables::of(model);
        tables.check(&vec![token; self.position + 1], self.turn)?;
        let p = &model.params;
        let heads = model.config.heads;
        let mut x = tables.row(token, self.turn, self.position);
        for (layer, cache) in model.ids.decoder.layers.iter().zip(&mut self.caches) {
            cache.inputs.push(x.clone());
            let h = layer_norm_row(&x, p.get(layer.ln_self.gain), p.get(layer.ln_self.bias));
            cache.keys.push(vec_mat(&h, p.get(layer.self_attn.wk)));
            cache.values.push(vec_mat(&h, p.get(layer.self_attn.wv)));
            let a = attention_out(&h, &cache.keys, &cache.values, layer.self_attn, p, heads);
            add_in_place(&mut x, &a);
            let h = layer_norm_row(&x, p.get(layer.ln_cross.gain), p.get(layer.ln_cross.bias));
            let c = attention_out(
                &h,
                &cache.cross_keys,
                &cache.cross_values,
                layer.cross_attn,
                p,
                heads,
            );
            add_in_place(&mut x, &c);
            let h = layer_norm_row(&x, p.get(layer.ln_ffn.gain), p.get(layer.ln_ffn.bias));
            let f = ffn_row(&h, layer.ffn, p);
            add_in_place(&mut x, &f);
        }
        self.position += 1;
        Ok(match model.ids.decoder.final_ln {
            Some(ln) => layer_norm_row(&x, p.get(ln.gain), p.get(ln.bias)),
            None => x,
        })
    }

    /// Vocabulary scores (logits) for a top hidden row.
    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        let p = &self.model.params;
        match self.model.ids.decoder.output {
            Some(w) => vec_mat(hidden, p.get(w)),
            None => {
                let e = p.get(self.model.ids.embedding.token);
                (0..e.rows())
                    .map(|r| hidden.iter().zip(e.row(r)).map(|(&a, &b)| a * b).sum())
                    .collect()
            }
        }
    }

    /// Per-layer inputs of every fed token, ready to cache as memory.
    pub fn layer_states(&self) -> Vec<Matrix<T>> {
        self.caches
            .iter()
            .map(|c| Matrix::from_rows(&c.inputs))
            .collect()
    }
}

fn norm_rows<T: Scalar>(
    m: &Matrix<T>,
    ln: LayerNormIds,
    p: &crate::params::ParamStore<T>,
) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..m.rows())
        .map(|r| layer_norm_row(m.row(r), p.get(ln.gain), p.get(ln.bias)))
        .collect();
    Matrix::from_rows(&rows)
}

fn attention_out<T: Scalar>(
    h: &[T],
    keys: &[Vec<T>],
    values: &[Vec<T>],
    ids: AttentionIds,
    p: &crate::params::ParamStore<T>,
    heads: usize,
) -> Vec<T> {
    let q = vec_mat(h, p.get(ids.wq));
    let ctx = attend_row(&q, keys, values, heads);
    vec_mat(&ctx, p.get(ids.wo))
}

fn ffn_row<T: Scalar>(h: &[T], ids: FeedForwardIds, p: &crate::params::ParamStore<T>) -> Vec<T> {
    let mut a = vec_mat(h, p.get(ids.w1));
    add_in_place(&mut a, p.get(ids.b1).row(0));
    for v in &mut a {
        if *v <= T::zero() {
            *v = T::zero();
        }
    }
    let mut y = vec_mat(&a, p.get(ids.w2));
    add_in_place(&mut y, p.get(ids.b2).row(0));
    y
}

/// Greedily decodes response `turn` against `Ŝ_t` (real rows in `context`),
/// then caches its hidden states in `memory`. Returns the full frame,
/// `[SOU] [Speaker-R] … [EOU]`.
pub fn generate_response<T: Scalar>(
    model: &Model<T>,
    context: &Matrix<T>,
    turn: usize,
    memory: &mut ResponseMemory<T>,
    config: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    let mut dec = IncrementalDecoder::new(model, context, memory, turn)?;
    let mut frame = seeds(model);
    let mut hidden = Vec::new();
    for &s in &frame {
        hidden = dec.step(s)?;
    }
    let head = frame.len();
    loop {
        let next = if frame.len() - head >= config.max_response_len {
            EOU
        } else {
            greedy_pick(&dec.logits(&hidden))
        };
        frame.push(next);
        hidden = dec.step(next)?;
        if next == EOU {
            break;
        }
    }
    memory.push(turn, dec.layer_states())?;
    Ok(frame)
}

/// `Ŝ_t` rows for every query frame (turns `1..=T`), as plain matrices.
pub fn encode_context<T: Scalar>(model: &Model<T>, queries: &[Vec<TokenId>]) -> Result<Vec<Matrix<T>>> {
    let mut tape = Tape::new();
    let q: Vec<(&[usize], usize, usize)> = queries
        .iter()
        .enumerate()
        .map(|(k, ids)| (ids.as_slice(), ids.len(), k + 1))
        .collect();
    let enc = encoder::encode_queries(&mut tape, model, &q, false)?;
    Ok(enc
        .context
        .iter()
        .map(|c| tape.value(c.states).slice_rows(0, c.len))
        .collect())
}

/// Responses for every query turn, carrying the memory forward.
pub fn generate_conversation<T: Scalar>(
    model: &Model<T>,
    queries: &[Vec<TokenId>],
    config: &GenerationConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let contexts = encode_context(model, queries)?;
    let mut memory = ResponseMemory::new(model.config.layers, model.config.effective_c_max());
    contexts
        .iter()
        .enumerate()
        .map(|(k, ctx)| generate_response(model, ctx, k + 1, &mut memory, config))
        .collect()
}

/// Reference decoding that reruns the whole decoder on the prefix for every
/// emitted token.
pub fn generate_conversation_uncached<T: Scalar>(
    model: &Model<T>,
    queries: &[Vec<TokenId>],
    config: &GenerationConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let mut tape = Tape::new();
    let q: Vec<(&[usize], usize, usize)> = queries
        .iter()
        .enumerate()
        .map(|(k, ids)| (ids.as_slice(), ids.len(), k + 1))
        .collect();
    let enc = encoder::encode_queries(&mut tape, model, &q, false)?;
    let mut memory = ResponseMemory::new(model.config.layers, model.config.effective_c_max());
    let mut out = Vec::with_capacity(queries.len());
    for (k, ctx) in enc.context.iter().enumerate() {
        let turn = k + 1;
        let mut frame = seeds(model);
        let head = frame.len();
        loop {
            if frame.len() - head >= config.max_response_len {
                frame.push(EOU);
                break;
            }
            let mut scratch = memory.clone();
            let inputs = embedding::input_representation(&mut tape, model, &frame, turn)?;
            let pass = decoder::decoder_forward(
                &mut tape,
                model,
                inputs,
                frame.len(),
                &mut scratch,
                ctx,
                turn,
            )?;
            let top = tape.value(pass.output).slice_rows(frame.len() - 1, 1);
            let probs = model.output_distribution(&top);
            let next = greedy_pick(probs.row(0));
            frame.push(next);
            if next == EOU {
                break;
            }
        }
        let inputs = embedding::input_representation(&mut tape, model, &frame, turn)?;
        decoder::decoder_forward(&mut tape, model, inputs, frame.len(), &mut memory, ctx, turn)?;
        out.push(frame);
    }
    Ok(out)
}

/// Speaker-Q turn attention weights `α_t^p` for every turn of a conversation.
pub fn query_attention_map<T: Scalar>(
    model: &Model<T>,
    queries: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let q: Vec<(&[usize], usize, usize)> = queries
        .iter()
        .enumerate()
        .map(|(k, ids)| (ids.as_slice(), ids.len(), k + 1))
        .collect();
    let enc = encoder::encode_queries(&mut tape, model, &q, true)?;
    let records = enc.attention.ok_or(Error::IntrospectionDisabled)?;
    records
        .iter()
        .map(|r| encoder::query_attention_weights(Some(r)))
        .collect()
}

/// Reply from an interactive session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatReply {
    pub frame: Vec<TokenId>,
    pub text: String,
    /// The query exceeded the utterance length cap and was cut.
    pub truncated: bool,
}

/// Interactive conversation state: one query per call, memory carried over.
pub struct ChatSession<'a, T> {
    model: &'a Model<T>,
    vocab: &'a Vocabulary,
    tokenizer: &'a dyn Tokenizer,
    config: GenerationConfig,
    max_utterance_len: usize,
    queries: Vec<Vec<TokenId>>,
    memory: ResponseMemory<T>,
}

impl<'a, T: Scalar> ChatSession<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        vocab: &'a Vocabulary,
        tokenizer: &'a dyn Tokenizer,
        config: GenerationConfig,
        max_utterance_len: usize,
    ) -> Self {
        Self {
            model,
            vocab,
            tokenizer,
            config,
            max_utterance_len,
            queries: Vec::new(),
            memory: ResponseMemory::new(model.config.layers, model.config.effective_c_max()),
        }
    }

    pub fn turn(&self) -> usize {
        self.queries.len()
    }

    pub fn queries(&self) -> &[Vec<TokenId>] {
        &self.queries
    }

    pub fn reset(&mut self) {
        self.queries.clear();
        self.memory.clear();
    }

    pub fn respond(&mut self, line: &str) -> Result<ChatReply> {
        let mut words = self.tokenizer.tokenize(line);
        let truncated = words.len() > self.max_utterance_len;
        words.truncate(self.max_utterance_len);
        let ids: Vec<TokenId> = words.iter().map(|w| self.vocab.id(w)).collect();
        let turn = self.queries.len() + 1;
        let query = Utterance::frame(Role::Query, turn, &ids, self.model.config.speaker_tokens());
        self.queries.push(query.tokens);
        let contexts = encode_context(self.model, &self.queries)?;
        let ctx = contexts.last().expect("at least one query");
        let frame = generate_response(self.model, ctx, turn, &mut self.memory, &self.config)?;
        let text = self.vocab.decode_content(&frame).join(" ");
        Ok(ChatReply {
            frame,
            text,
            truncated,
        })
    }
}
