//! Model configuration, parameter layout and the teacher-forced conversation
//! forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TurnInput, PAD, SPEAKER_R};
use crate::decoder::{self, ResponseMemory};
use crate::embedding;
use crate::encoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Component switches matching the four ablated variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_speaker_tokens: bool,
    pub no_aligned_turn_embedding: bool,
    pub no_turn_level_relative_attention: bool,
    pub no_turn_level_recurrence: bool,
}

impl AblationFlags {
    /// All sixteen flag combinations.
    pub fn all_combinations() -> Vec<AblationFlags> {
        (0..16u8)
            .map(|m| AblationFlags {
                no_speaker_tokens: m & 1 != 0,
                no_aligned_turn_embedding: m & 2 != 0,
                no_turn_level_relative_attention: m & 4 != 0,
                no_turn_level_recurrence: m & 8 != 0,
            })
            .collect()
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// May be left out (0) in a config file and filled from the vocabulary.
    #[serde(default)]
    pub vocab_size: usize,
    /// Hidden width `d_s`.
    pub d_model: usize,
    pub heads: usize,
    /// Depth `N` of both the inner-query encoder and the decoder.
    pub layers: usize,
    pub ff_dim: usize,
    /// Largest distinguished turn distance.
    pub r_max: usize,
    /// Number of previous responses cached per decoder layer.
    pub c_max: usize,
    /// Rows of the aligned turn table.
    pub max_turns: usize,
    /// Rows of the token-position table.
    pub max_positions: usize,
    #[serde(default)]
    pub tie_output_embeddings: bool,
    #[serde(default)]
    pub ablations: AblationFlags,
}

impl ModelConfig {
    /// The small float64 configuration used for gradient verification.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            heads: 2,
            layers: 2,
            ff_dim: 16,
            r_max: 2,
            c_max: 2,
            max_turns: 64,
            max_positions: 64,
            tie_output_embeddings: false,
            ablations: AblationFlags::default(),
        }
    }

    /// Full-size settings: width 512, 8 heads, feed-forward 2048.
    pub fn paper_scale(vocab_size: usize, layers: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            heads: 8,
            layers,
            ff_dim: 2048,
            r_max: 8,
            c_max: if layers >= 6 { 2 } else { 3 },
            max_turns: 64,
            max_positions: 64,
            tie_output_embeddings: false,
            ablations: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_turns", self.max_turns),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.vocab_size < crate::corpus::RESERVED.len() {
            return Err(Error::Config("vocab_size below the reserved token count".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Memory length actually used, honouring the recurrence ablation.
    pub fn effective_c_max(&self) -> usize {
        if self.ablations.no_turn_level_recurrence {
            0
        } else {
            self.c_max
        }
    }

    pub fn speaker_tokens(&self) -> bool {
        !self.ablations.no_speaker_tokens
    }

    /// Parameter counts per component, derived from the shapes alone.
    pub fn parameter_breakdown(&self) -> Vec<(&'static str, usize)> {
        let d = self.d_model;
        let f = self.ff_dim;
        let v = self.vocab_size;
        let ln = 2 * d;
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let final_ln = if self.layers > 0 { ln } else { 0 };
        let mut out = Vec::new();
        out.push(("embedding.token", v * d));
        if !self.ablations.no_aligned_turn_embedding {
            out.push(("embedding.turn", self.max_turns * d));
        }
        out.push(("embedding.position", self.max_positions * d));
        out.push(("encoder.inner", self.layers * (2 * ln + attn + ffn) + final_ln));
        if !self.ablations.no_turn_level_relative_attention {
            out.push((
                "encoder.inter",
                3 * d * d + 2 * (self.r_max + 1) * d + ln + ffn,
            ));
        }
        out.push(("decoder.layers", self.layers * (3 * ln + 2 * attn + ffn) + final_ln));
        if !self.tie_output_embeddings {
            out.push(("decoder.output", d * v));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_breakdown().iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub turn: Option<ParamId>,
    pub position: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub ln_attn: LayerNormIds,
    pub attn: AttentionIds,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForwardIds,
}

/// Inter-query block: projections, relative-bias tables and its FFN.
#[derive(Clone, Copy, Debug)]
pub struct TurnAttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `(r_max + 1) × d`; row `r` is the key bias for distance `r`.
    pub bias_k: ParamId,
    /// `(r_max + 1) × d`; row `r` is the value bias for distance `r`.
    pub bias_v: ParamId,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForwardIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub layers: Vec<EncoderLayerIds>,
    pub final_ln: Option<LayerNormIds>,
    pub inter: Option<TurnAttentionIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub ln_self: LayerNormIds,
    pub self_attn: AttentionIds,
    pub ln_cross: LayerNormIds,
    pub cross_attn: AttentionIds,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForwardIds,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub layers: Vec<DecoderLayerIds>,
    pub final_ln: Option<LayerNormIds>,
    /// `d × |V|`; `None` when tied to the token table.
    pub output: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub embedding: EmbeddingIds,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
}

/// Parameters plus the layout that locates every tensor.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ids: ModelIds,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.add(name, rows, cols, init, self.rng)
    }

    fn dense(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = libm_sqrt(6.0 / (fan_in + fan_out) as f64);
        self.add(name, fan_in, fan_out, Init::Uniform(bound))
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            wq: self.dense(format!("{prefix}.wq"), d, d),
            wk: self.dense(format!("{prefix}.wk"), d, d),
            wv: self.dense(format!("{prefix}.wv"), d, d),
            wo: self.dense(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FeedForwardIds {
        FeedForwardIds {
            w1: self.dense(format!("{prefix}.w1"), d, f),
            b1: self.add(format!("{prefix}.b1"), 1, f, Init::Zeros),
            w2: self.dense(format!("{prefix}.w2"), f, d),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

/// Bound of the uniform initializer for embedding and relative-bias tables.
pub const EMBEDDING_INIT: f64 = 0.1;

impl<T: Scalar> Model<T> {
    /// Allocates and initializes every tensor from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.d_model;
        let f = config.ff_dim;
        let emb = Init::Uniform(EMBEDDING_INIT);
        let embedding = EmbeddingIds {
            token: b.add("embedding.token".into(), config.vocab_size, d, emb),
            turn: (!config.ablations.no_aligned_turn_embedding)
                .then(|| b.add("embedding.turn".into(), config.max_turns, d, emb)),
            position: b.add("embedding.position".into(), config.max_positions, d, emb),
        };
        let enc_layers = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.inner.{l}");
                EncoderLayerIds {
                    ln_attn: b.layer_norm(&format!("{p}.ln_attn"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ln_ffn: b.layer_norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let enc_final = (config.layers > 0).then(|| b.layer_norm("encoder.inner.final_ln", d));
        let inter = (!config.ablations.no_turn_level_relative_attention).then(|| {
            TurnAttentionIds {
                wq: b.dense("encoder.inter.wq".into(), d, d),
                wk: b.dense("encoder.inter.wk".into(), d, d),
                wv: b.dense("encoder.inter.wv".into(), d, d),
                bias_k: b.add("encoder.inter.bias_k".into(), config.r_max + 1, d, emb),
                bias_v: b.add("encoder.inter.bias_v".into(), config.r_max + 1, d, emb),
                ln_ffn: b.layer_norm("encoder.inter.ln_ffn", d),
                ffn: b.ffn("encoder.inter.ffn", d, f),
            }
        });
        let dec_layers = (0..config.layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerIds {
                    ln_self: b.layer_norm(&format!("{p}.ln_self"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    ln_cross: b.layer_norm(&format!("{p}.ln_cross"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ln_ffn: b.layer_norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let dec_final = (config.layers > 0).then(|| b.layer_norm("decoder.final_ln", d));
        let output = (!config.tie_output_embeddings)
            .then(|| b.dense("decoder.output".into(), d, config.vocab_size));
        let ids = ModelIds {
            embedding,
            encoder: EncoderIds {
                layers: enc_layers,
                final_ln: enc_final,
                inter,
            },
            decoder: DecoderIds {
                layers: dec_layers,
                final_ln: dec_final,
                output,
            },
        };
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    /// Rebuilds a model around existing tensors, e.g. from a checkpoint. Names
    /// and shapes must match the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name
                || want.value.rows() != got.value.rows()
                || want.value.cols() != got.value.cols()
            {
                return Err(Error::Contract(format!(
                    "tensor {} ({}×{}) does not match expected {} ({}×{})",
                    got.name,
                    got.value.rows(),
                    got.value.cols(),
                    want.name,
                    want.value.rows(),
                    want.value.cols()
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Output projection `d × |V|` bound on the tape (transposed token table
    /// when tied).
    pub(crate) fn output_logits(&self, tape: &mut Tape<T>, h: Var) -> Var {
        match self.ids.decoder.output {
            Some(w) => {
                let w = self.params.bind(tape, w);
                tape.matmul(h, w)
            }
            None => {
                let e = self.params.bind(tape, self.ids.embedding.token);
                tape.matmul_t(h, e)
            }
        }
    }

    /// Teacher-forced negative log-likelihood of one conversation.
    pub fn conversation_loss(
        &self,
        tape: &mut Tape<T>,
        turns: &[TurnInput],
    ) -> Result<ConversationLoss<T>> {
        self.loss_with_memory(tape, turns, None)
    }

    /// Same loss, but the memory is filled from `frozen[k]` (the layer states
    /// of response `k + 1`, e.g. [`ConversationLoss::states`] of an earlier
    /// pass) instead of this pass's own states. The memory is a constant
    /// either way, so this is the function whose derivative the tape returns.
    pub fn conversation_loss_frozen(
        &self,
        tape: &mut Tape<T>,
        turns: &[TurnInput],
        frozen: &[Vec<Matrix<T>>],
    ) -> Result<ConversationLoss<T>> {
        if frozen.len() != turns.len() {
            return Err(Error::Contract(format!(
                "{} frozen responses for {} turns",
                frozen.len(),
                turns.len()
            )));
        }
        self.loss_with_memory(tape, turns, Some(frozen))
    }

    fn loss_with_memory(
        &self,
        tape: &mut Tape<T>,
        turns: &[TurnInput],
        frozen: Option<&[Vec<Matrix<T>>]>,
    ) -> Result<ConversationLoss<T>> {
        let queries: Vec<(&[usize], usize, usize)> = turns
            .iter()
            .map(|t| (t.query.ids.as_slice(), t.query.len, t.turn))
            .collect();
        let enc = encoder::encode_queries(tape, self, &queries, false)?;
        let mut memory = ResponseMemory::new(self.config.layers, self.config.effective_c_max());
        let mut per_turn = Vec::with_capacity(turns.len());
        let mut states = Vec::with_capacity(turns.len());
        let mut tokens = 0;
        for (k, turn) in turns.iter().enumerate() {
            let resp = &turn.response;
            let inputs = embedding::input_representation(tape, self, &resp.ids, turn.turn)?;
            let pass = decoder::decode_with_memory(
                tape,
                self,
                inputs,
                &memory,
                &enc.context[k],
                turn.turn,
            )?;
            let own = pass.real_states(tape, resp.len);
            let cached = match frozen {
                Some(f) => f[k].clone(),
                None => own.clone(),
            };
            memory.push(turn.turn, cached)?;
            states.push(own);
            let logits = self.output_logits(tape, pass.output);
            let targets = teacher_targets(&resp.ids, resp.len);
            tokens += targets.iter().flatten().count();
            per_turn.push(tape.cross_entropy(logits, &targets));
        }
        let total = tape.sum(&per_turn);
        Ok(ConversationLoss {
            total,
            per_turn,
            tokens,
            states,
        })
    }

    /// Log-probability of every predicted gold token, tagged with whether it
    /// is the response speaker token.
    pub fn gold_log_probs(&self, turns: &[TurnInput]) -> Result<Vec<(f64, bool)>> {
        let mut tape = Tape::new();
        let queries: Vec<(&[usize], usize, usize)> = turns
            .iter()
            .map(|t| (t.query.ids.as_slice(), t.query.len, t.turn))
            .collect();
        let enc = encoder::encode_queries(&mut tape, self, &queries, false)?;
        let mut memory = ResponseMemory::new(self.config.layers, self.config.effective_c_max());
        let mut out = Vec::new();
        for (k, turn) in turns.iter().enumerate() {
            let resp = &turn.response;
            let inputs = embedding::input_representation(&mut tape, self, &resp.ids, turn.turn)?;
            let pass = decoder::decoder_forward(
                &mut tape,
                self,
                inputs,
                resp.len,
                &mut memory,
                &enc.context[k],
                turn.turn,
            )?;
            let logits = self.output_logits(&mut tape, pass.output);
            let l = tape.value(logits);
            for (i, target) in teacher_targets(&resp.ids, resp.len).iter().enumerate() {
                if let Some(t) = *target {
                    let row = l.row(i);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                    let is_speaker = i == 0 && t == SPEAKER_R && self.config.speaker_tokens();
                    out.push(((row[t] - lse).as_f64(), is_speaker));
                }
            }
        }
        Ok(out)
    }
}

/// Next-token targets: row `i` predicts token `i + 1`; the last real row and
/// padding rows predict nothing.
pub fn teacher_targets(ids: &[usize], len: usize) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|i| (i + 1 < len && ids[i + 1] != PAD).then(|| ids[i + 1]))
        .collect()
}

/// Loss nodes of one conversation forward pass.
#[derive(Clone, Debug)]
pub struct ConversationLoss<T> {
    /// Summed NLL over all turns.
    pub total: Var,
    pub per_turn: Vec<Var>,
    /// Number of predicted tokens.
    pub tokens: usize,
    /// Real-row decoder layer inputs of every response, as cached in memory.
    pub states: Vec<Vec<Matrix<T>>>,
}
