mod common;

use common::*;
use phaed_core::corpus::{PaddedUtterance, TurnInput};
use phaed_core::encoder::{
    inner_query_encode, query_attention_weights, turn_relative_attention, AttentionRecord,
    HistoryEntry,
};
use phaed_core::generation::{
    generate_conversation, generate_conversation_uncached, GenerationConfig,
};
use phaed_core::model::{AblationFlags, Model, ModelConfig};
use phaed_core::tape::Tape;
use phaed_core::Matrix;

fn tape_history(
    tape: &mut Tape<f64>,
    model: &Model<f64>,
    queries: &[PaddedUtterance],
) -> Vec<HistoryEntry> {
    queries
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let b = phaed_core::embedding::input_representation(tape, model, &q.ids, k + 1)
                .unwrap();
            HistoryEntry {
                turn: k + 1,
                states: inner_query_encode(tape, model, b, q.len),
                len: q.len,
            }
        })
        .collect()
}

#[test]
fn turn_attention_matches_materialized_concatenation() {
    for seed in 0..6 {
        let model = desk_model(seed);
        let conv = random_conversation(&mut rng(100 + seed), DESK_VOCAB, 5, 5, true);
        let (queries, _) = frames(&conv);
        let mut tape = Tape::new();
        let padded: Vec<PaddedUtterance> =
            queries.iter().map(|q| PaddedUtterance::new(q, q.len())).collect();
        let history = tape_history(&mut tape, &model, &padded);
        let states: Vec<Rows> = history
            .iter()
            .map(|h| tape.value(h.states).to_f64_rows())
            .collect();
        let ids = model.ids.encoder.inter.unwrap();
        for t in 1..=history.len() {
            let got = turn_relative_attention(&mut tape, &model, ids, &history[..t]).unwrap();
            let (want, want_w) = turn_attention(&model, &states[..t]);
            let diff = max_abs_diff(&want, &tape.value(got.context).to_f64_rows());
            assert!(diff < 1e-9, "seed {seed} turn {t}: {diff}");
            for (h, w) in got.weights.iter().enumerate() {
                assert!(max_abs_diff(&want_w[h], &tape.value(*w).to_f64_rows()) < 1e-9);
            }
        }
    }
}

#[test]
fn padded_queries_give_the_same_turn_attention() {
    let model = desk_model(3);
    let conv = random_conversation(&mut rng(7), DESK_VOCAB, 4, 5, true);
    let (queries, _) = frames(&conv);
    let mut tape = Tape::new();
    let padded: Vec<PaddedUtterance> =
        queries.iter().map(|q| PaddedUtterance::new(q, q.len() + 3)).collect();
    let history = tape_history(&mut tape, &model, &padded);
    let real: Vec<Rows> = queries
        .iter()
        .enumerate()
        .map(|(k, q)| inner_encode(&model, q, k + 1))
        .collect();
    let ids = model.ids.encoder.inter.unwrap();
    let got = turn_relative_attention(&mut tape, &model, ids, &history).unwrap();
    let (want, _) = turn_attention(&model, &real);
    let n = queries.last().unwrap().len();
    let got_rows = tape.value(got.context).slice_rows(0, n).to_f64_rows();
    assert!(max_abs_diff(&want, &got_rows) < 1e-9);
}

#[test]
fn single_token_identity_attention_doubles_the_state() {
    let mut cfg = ModelConfig::desk(DESK_VOCAB);
    cfg.heads = 1;
    let mut model = Model::<f64>::new(cfg, 0).unwrap();
    let ids = model.ids.encoder.inter.unwrap();
    let d = model.config.d_model;
    let mut eye = Matrix::zeros(d, d);
    for i in 0..d {
        eye.set(i, i, 1.0);
    }
    for w in [ids.wq, ids.wk, ids.wv] {
        *model.params.get_mut(w) = eye.clone();
    }
    for b in [ids.bias_k, ids.bias_v] {
        *model.params.get_mut(b) = Matrix::zeros(model.config.r_max + 1, d);
    }
    let s1: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 1.0).collect();
    let mut tape = Tape::new();
    let states = tape.leaf(Matrix::from_rows(std::slice::from_ref(&s1)));
    let history = [HistoryEntry {
        turn: 1,
        states,
        len: 1,
    }];
    let got = turn_relative_attention(&mut tape, &model, ids, &history).unwrap();
    let ctx = tape.value(got.context);
    for (c, v) in s1.iter().enumerate() {
        assert!((ctx.get(0, c) - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn equal_logits_spread_weight_uniformly() {
    let mut model = desk_model(5);
    let ids = model.ids.encoder.inter.unwrap();
    *model.params.get_mut(ids.wq) = Matrix::zeros(8, 8);
    let conv = random_conversation(&mut rng(9), DESK_VOCAB, 3, 4, true);
    let (queries, _) = frames(&conv);
    let mut tape = Tape::new();
    let padded: Vec<PaddedUtterance> =
        queries.iter().map(|q| PaddedUtterance::new(q, q.len())).collect();
    let history = tape_history(&mut tape, &model, &padded);
    let got = turn_relative_attention(&mut tape, &model, ids, &history).unwrap();
    let total: usize = queries.iter().map(Vec::len).sum();
    for w in &got.weights {
        for v in tape.value(*w).data() {
            assert!((v - 1.0 / total as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn alpha_on_a_two_turn_instance_matches_oracle_weights() {
    let model = desk_model(11);
    let q1 = vec![2, 4, 7, 3];
    let q2 = vec![2, 4, 9, 3];
    let states = vec![inner_encode(&model, &q1, 1), inner_encode(&model, &q2, 2)];
    let (_, weights) = turn_attention(&model, &states);
    let heads = weights.len();
    let want: Vec<f64> = [(0, 4), (4, 8)]
        .iter()
        .map(|&(a, b)| {
            let total: f64 = weights
                .iter()
                .flat_map(|w| w.iter().map(move |row| row[a..b].iter().sum::<f64>()))
                .sum();
            total / (heads as f64 * q2.len() as f64)
        })
        .collect();
    let got = phaed_core::generation::query_attention_map(&model, &[q1, q2]).unwrap();
    assert_eq!(got[0].len(), 1);
    assert!((got[0][0] - 1.0).abs() < 1e-12);
    for (g, w) in got[1].iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn alpha_needs_retained_attention() {
    let record: Option<&AttentionRecord> = None;
    assert!(query_attention_weights(record).is_err());
    let mut cfg = ModelConfig::desk(DESK_VOCAB);
    cfg.ablations.no_turn_level_relative_attention = true;
    let model = Model::<f64>::new(cfg, 0).unwrap();
    assert!(phaed_core::generation::query_attention_map(&model, &[vec![2, 4, 3]]).is_err());
}

#[test]
fn encoder_and_decoder_match_the_loop_oracle() {
    for seed in 0..4 {
        let model = desk_model(seed);
        let conv = random_conversation(&mut rng(seed), DESK_VOCAB, 4, 5, true);
        let (queries, responses) = frames(&conv);
        let (ctx, out) = crate_forward(&model, &conv.turn_inputs());
        let want_ctx = encode_all(&model, &queries);
        let want_out = decode_all(&model, &queries, &responses);
        for t in 0..queries.len() {
            assert!(max_abs_diff(&want_ctx[t], &ctx[t]) < 1e-9, "context turn {}", t + 1);
            let d = max_abs_diff(&want_out[t], &out[t]);
            assert!(d < 1e-6, "decoder turn {}: {d}", t + 1);
        }
    }
}

#[test]
fn tiny_single_head_decoder_matches_oracle() {
    let cfg = ModelConfig {
        d_model: 4,
        heads: 1,
        ff_dim: 8,
        c_max: 1,
        ..ModelConfig::desk(DESK_VOCAB)
    };
    let model = Model::<f64>::new(cfg, 21).unwrap();
    let conv = random_conversation(&mut rng(21), DESK_VOCAB, 4, 4, true);
    let (queries, responses) = frames(&conv);
    let (_, out) = crate_forward(&model, &conv.turn_inputs());
    let want = decode_all(&model, &queries, &responses);
    for t in 0..queries.len() {
        assert!(max_abs_diff(&want[t], &out[t]) < 1e-6);
    }
}

#[test]
fn oracle_agreement_holds_under_every_ablation() {
    for flags in AblationFlags::all_combinations() {
        let cfg = ModelConfig {
            ablations: flags,
            ..ModelConfig::desk(DESK_VOCAB)
        };
        let model = Model::<f64>::new(cfg, 2).unwrap();
        let conv = random_conversation(
            &mut rng(2),
            DESK_VOCAB,
            3,
            4,
            !flags.no_speaker_tokens,
        );
        let (queries, responses) = frames(&conv);
        let (_, out) = crate_forward(&model, &conv.turn_inputs());
        let want = decode_all(&model, &queries, &responses);
        for t in 0..queries.len() {
            assert!(max_abs_diff(&want[t], &out[t]) < 1e-6, "{flags:?}");
        }
    }
}

#[test]
fn hand_computed_single_inner_layer() {
    // d = 2, one head, identity weights, zero biases, one token with
    // B = (1, 3).
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 2,
        heads: 1,
        layers: 1,
        ff_dim: 2,
        ..ModelConfig::desk(7)
    };
    let mut model = Model::<f64>::new(cfg, 0).unwrap();
    let eye = Matrix::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let layer = model.ids.encoder.layers[0];
    for w in [
        layer.attn.wq,
        layer.attn.wk,
        layer.attn.wv,
        layer.attn.wo,
        layer.ffn.w1,
        layer.ffn.w2,
    ] {
        *model.params.get_mut(w) = eye.clone();
    }
    let emb = model.ids.embedding;
    *model.params.get_mut(emb.token) = Matrix::zeros(7, 2);
    model.params.get_mut(emb.token).set(6, 1, 3.0);
    *model.params.get_mut(emb.position) = Matrix::zeros(64, 2);
    model.params.get_mut(emb.position).set(0, 0, 1.0);
    *model.params.get_mut(emb.turn.unwrap()) = Matrix::zeros(64, 2);

    let eps = 1e-5;
    // pre-norm attention: LN(1, 3) = (-1, 1) / sqrt(1 + eps); one key so weight 1.
    let s1 = (1.0f64 + eps).sqrt();
    let x = [1.0 - 1.0 / s1, 3.0 + 1.0 / s1];
    // pre-norm FFN: deviation ±u with u = 1 + 1/s1.
    let u = 1.0 + 1.0 / s1;
    let n = u / (u * u + eps).sqrt();
    let x = [x[0], x[1] + n];
    // final LN
    let m = (x[0] + x[1]) / 2.0;
    let dev = (x[1] - x[0]) / 2.0;
    let sd = (dev * dev + eps).sqrt();
    let want = [(x[0] - m) / sd, (x[1] - m) / sd];

    let mut tape = Tape::new();
    let b = phaed_core::embedding::input_representation(&mut tape, &model, &[6], 1).unwrap();
    let s = inner_query_encode(&mut tape, &model, b, 1);
    let got = tape.value(s);
    for (c, w) in want.iter().enumerate().take(2) {
        assert!((got.get(0, c) - w).abs() < 1e-12, "{c}");
    }
    assert!(max_abs_diff(&vec![want.to_vec()], &inner_encode(&model, &[6], 1)) < 1e-12);
}

#[test]
fn zero_layers_is_identity() {
    let cfg = ModelConfig {
        layers: 0,
        ..ModelConfig::desk(DESK_VOCAB)
    };
    let model = Model::<f64>::new(cfg, 4).unwrap();
    let mut tape = Tape::new();
    let toks = [2, 4, 8, 3];
    let b = phaed_core::embedding::input_representation(&mut tape, &model, &toks, 2).unwrap();
    let s = inner_query_encode(&mut tape, &model, b, toks.len());
    assert_eq!(tape.value(s), tape.value(b));
}

#[test]
fn cached_generation_matches_full_recompute() {
    for seed in 0..5 {
        let model = desk_model(seed);
        let conv = random_conversation(&mut rng(seed + 50), DESK_VOCAB, 4, 5, true);
        let (queries, _) = frames(&conv);
        let cfg = GenerationConfig {
            max_response_len: 6,
        };
        let cached = generate_conversation(&model, &queries, &cfg).unwrap();
        let uncached = generate_conversation_uncached(&model, &queries, &cfg).unwrap();
        assert_eq!(cached, uncached, "seed {seed}");
        assert!(cached.iter().any(|r| r.len() > 3), "seed {seed}: only empty responses");
    }
}

#[test]
fn incremental_hidden_states_match_full_pass() {
    use phaed_core::decoder::ResponseMemory;
    use phaed_core::generation::{encode_context, IncrementalDecoder};

    let model = desk_model(8);
    let conv = random_conversation(&mut rng(8), DESK_VOCAB, 3, 5, true);
    let (queries, responses) = frames(&conv);
    let (_, full) = crate_forward(&model, &conv.turn_inputs());
    let contexts = encode_context(&model, &queries).unwrap();
    let mut memory = ResponseMemory::new(model.config.layers, model.config.c_max);
    for (k, resp) in responses.iter().enumerate() {
        let mut dec = IncrementalDecoder::new(&model, &contexts[k], &memory, k + 1).unwrap();
        for (i, &tok) in resp.iter().enumerate() {
            let h = dec.step(tok).unwrap();
            let d: f64 = h
                .iter()
                .zip(&full[k][i])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-6, "turn {} position {i}: {d}", k + 1);
        }
        memory.push(k + 1, dec.layer_states()).unwrap();
    }
}

#[test]
fn turn_inputs_round_trip_through_padding() {
    let conv = random_conversation(&mut rng(1), DESK_VOCAB, 2, 3, true);
    let t: Vec<TurnInput> = conv.turn_inputs();
    assert_eq!(t[0].query.valid(), conv.query(1).tokens.as_slice());
}
