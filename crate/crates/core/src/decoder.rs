//! Response decoder with turn-level recurrence.
//!
//! Layer `n` attends over `[SG(M^{n-1}) ∘ H^{n-1}]`, where the memory `M`
//! holds the layer inputs of up to `c_max` previous responses as constants.
//! Self-attention is causal within the current response while every memory
//! row stays visible. Cross-attention then reads `Ŝ_t`, followed by a
//! feed-forward sublayer; all three sublayers are pre-normalized.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::encoder::ContextStates;
use crate::error::{Error, Result};
use crate::layers;
use crate::matrix::Matrix;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{masked_softmax_forward, Tape, Var};

/// Turns whose responses are visible from turn `t`: `max(t - c_max, 1) .. t`.
pub fn memory_window(t: usize, c_max: usize) -> Range<usize> {
    if t <= 1 || c_max == 0 {
        return t..t;
    }
    t.saturating_sub(c_max).max(1)..t
}

/// Hidden states of one cached response, one matrix per decoder layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T> {
    pub turn: usize,
    /// `states[n]` is `H^n` (`m_c × d`) for `n = 0..N`.
    pub states: Vec<Matrix<T>>,
}

impl<T: Scalar> MemoryEntry<T> {
    pub fn word_count(&self) -> usize {
        self.states.first().map_or(0, Matrix::rows)
    }
}

/// FIFO cache of previous responses' hidden states for one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMemory<T> {
    layers: usize,
    capacity: usize,
    entries: VecDeque<MemoryEntry<T>>,
}

impl<T: Scalar> ResponseMemory<T> {
    pub fn new(layers: usize, capacity: usize) -> Self {
        Self {
            layers,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    pub fn latest_turn(&self) -> Option<usize> {
        self.entries.back().map(|e| e.turn)
    }

    /// Word counts `m_c` of the cached responses, oldest first.
    pub fn word_counts(&self) -> Vec<usize> {
        self.entries.iter().map(MemoryEntry::word_count).collect()
    }

    /// Caches a response's per-layer states, evicting the oldest entry when
    /// over capacity.
    pub fn push(&mut self, turn: usize, states: Vec<Matrix<T>>) -> Result<()> {
        if states.len() != self.layers {
            return Err(Error::Contract(format!(
                "memory expects {} layer states, got {}",
                self.layers,
                states.len()
            )));
        }
        if let Some(last) = self.latest_turn() {
            if turn <= last {
                return Err(Error::Contract(format!(
                    "memory turns must increase ({turn} after {last})"
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        self.entries.push_back(MemoryEntry { turn, states });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Memory matrix `M^{n}` seen from turn `t`: cached layer-`n` states of
    /// the responses inside [`memory_window`], concatenated oldest first.
    pub fn layer_memory(&self, n: usize, t: usize) -> Option<Matrix<T>> {
        let window = memory_window(t, self.capacity);
        let parts: Vec<&Matrix<T>> = self
            .entries
            .iter()
            .filter(|e| window.contains(&e.turn))
            .map(|e| &e.states[n])
            .collect();
        (!parts.is_empty()).then(|| Matrix::concat_rows(&parts))
    }
}

/// Nodes of one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderPass {
    /// `H^N` after the final normalization.
    pub output: Var,
    /// `H^0 .. H^{N-1}`, the inputs of each layer.
    pub layer_inputs: Vec<Var>,
}

/// Decodes response `t` (`inputs` is its `|R_t| × d` representation, first
/// `len` rows real) against `Ŝ_t`, then caches this response's layer inputs
/// in `memory`.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    inputs: Var,
    len: usize,
    memory: &mut ResponseMemory<T>,
    context: &ContextStates,
    turn: usize,
) -> Result<DecoderPass> {
    let pass = decode_with_memory(tape, model, inputs, memory, context, turn)?;
    memory.push(turn, pass.real_states(tape, len))?;
    Ok(pass)
}

/// [`decoder_forward`] without updating the memory.
pub fn decode_with_memory<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    inputs: Var,
    memory: &ResponseMemory<T>,
    context: &ContextStates,
    turn: usize,
) -> Result<DecoderPass> {
    if context.turn != turn {
        return Err(Error::Contract(format!(
            "context is for turn {}, decoding turn {turn}",
            context.turn
        )));
    }
    if memory.latest_turn().is_some_and(|last| last >= turn) {
        return Err(Error::Contract(format!(
            "memory already holds turn {:?} while decoding turn {turn}",
            memory.latest_turn()
        )));
    }
    let ids = &model.ids.decoder;
    let params = &model.params;
    let heads = model.config.heads;
    let rows = tape.value(inputs).rows();
    let ctx_rows = tape.value(context.states).rows();
    let cross_mask = layers::key_padding_mask(rows, ctx_rows, context.len);

    let mut x = inputs;
    let mut layer_inputs = Vec::with_capacity(ids.layers.len());
    for (n, layer) in ids.layers.iter().enumerate() {
        layer_inputs.push(x);
        let mem = memory.layer_memory(n, turn);
        let mem_rows = mem.as_ref().map_or(0, Matrix::rows);
        let kv_raw = match mem {
            Some(m) => {
                let m = tape.constant(m);
                tape.concat_rows(&[m, x])
            }
            None => x,
        };
        let kv = layers::layer_norm(tape, params, layer.ln_self, kv_raw);
        let q = tape.slice_rows(kv, mem_rows, rows);
        let mask = causal_memory_mask(rows, mem_rows);
        let a = layers::multi_head_attention(tape, params, layer.self_attn, heads, q, kv, &mask);
        let h_hat = tape.add(x, a);
        let h = layers::layer_norm(tape, params, layer.ln_cross, h_hat);
        let c = layers::multi_head_attention(
            tape,
            params,
            layer.cross_attn,
            heads,
            h,
            context.states,
            &cross_mask,
        );
        let b = tape.add(h_hat, c);
        let h = layers::layer_norm(tape, params, layer.ln_ffn, b);
        let f = layers::feed_forward(tape, params, layer.ffn, h);
        x = tape.add(b, f);
    }
    let output = match ids.final_ln {
        Some(ln) => layers::layer_norm(tape, params, ln, x),
        None => x,
    };
    Ok(DecoderPass {
        output,
        layer_inputs,
    })
}

impl DecoderPass {
    /// The first `len` rows of every layer input, as cached in memory.
    pub fn real_states<T: Scalar>(&self, tape: &Tape<T>, len: usize) -> Vec<Matrix<T>> {
        self.layer_inputs
            .iter()
            .map(|&v| tape.value(v).slice_rows(0, len))
            .collect()
    }
}

/// Row `i` sees all `mem` memory columns and current columns `0..=i`.
pub fn causal_memory_mask(rows: usize, mem: usize) -> Vec<bool> {
    let cols = mem + rows;
    let mut m = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        m.extend((0..cols).map(|j| j < mem || j - mem <= i));
    }
    m
}

/// Row-wise `softmax(H W^O)`.
pub fn output_distribution<T: Scalar>(hidden: &Matrix<T>, w_out: &Matrix<T>) -> Matrix<T> {
    let logits = hidden.matmul(w_out);
    let all = alloc::vec![true; logits.len()];
    masked_softmax_forward(&logits, &all)
}

impl<T: Scalar> Model<T> {
    /// Per-position probability rows over the vocabulary.
    pub fn output_distribution(&self, hidden: &Matrix<T>) -> Matrix<T> {
        match self.ids.decoder.output {
            Some(w) => output_distribution(hidden, self.params.get(w)),
            None => {
                let e = self.params.get(self.ids.embedding.token).transpose();
                output_distribution(hidden, &e)
            }
        }
    }
}
