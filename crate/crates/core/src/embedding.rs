//! Speaker-aware input representation: token + aligned turn + token position.
//!
//! Row `i` of an utterance at turn `t` is `E(token_i) + TE(t) + PE(i)`. Query
//! `t` and response `t` read the same `TE(t)` row.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Read-only view of the three lookup tables.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables<'a, T> {
    /// `|V| × d`
    pub token: &'a Matrix<T>,
    /// `T_max × d`, absent when the aligned turn embedding is ablated.
    pub turn: Option<&'a Matrix<T>>,
    /// `I_max × d`
    pub position: &'a Matrix<T>,
}

impl<'a, T: Scalar> EmbeddingTables<'a, T> {
    pub fn of(model: &'a Model<T>) -> Self {
        let ids = &model.ids.embedding;
        Self {
            token: model.params.get(ids.token),
            turn: ids.turn.map(|t| model.params.get(t)),
            position: model.params.get(ids.position),
        }
    }

    pub fn width(&self) -> usize {
        self.token.cols()
    }

    /// Index checks shared by both representation routes.
    pub fn check(&self, tokens: &[usize], turn: usize) -> Result<()> {
        check_capacity(
            tokens,
            turn,
            self.token.rows(),
            self.turn.map(Matrix::rows),
            self.position.rows(),
        )
    }

    /// Representation of the token at position `pos` of an utterance at `turn`.
    pub fn row(&self, token: usize, turn: usize, pos: usize) -> Vec<T> {
        let mut out = self.token.row(token).to_vec();
        if let Some(te) = self.turn {
            for (o, &v) in out.iter_mut().zip(te.row(turn - 1)) {
                *o = *o + v;
            }
        }
        for (o, &v) in out.iter_mut().zip(self.position.row(pos)) {
            *o = *o + v;
        }
        out
    }

    /// `|tokens| × d` representation matrix.
    pub fn input_representation(&self, tokens: &[usize], turn: usize) -> Result<Matrix<T>> {
        self.check(tokens, turn)?;
        let rows: Vec<Vec<T>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| self.row(tok, turn, i))
            .collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.width()));
        }
        Ok(Matrix::from_rows(&rows))
    }
}

fn check_capacity(
    tokens: &[usize],
    turn: usize,
    vocab: usize,
    turns: Option<usize>,
    positions: usize,
) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Capacity {
            dimension: "vocabulary",
            index: bad,
            capacity: vocab,
        });
    }
    if turn == 0 {
        return Err(Error::Contract("turn indices are 1-based".into()));
    }
    if let Some(max_turns) = turns {
        if turn > max_turns {
            return Err(Error::Capacity {
                dimension: "turn",
                index: turn,
                capacity: max_turns,
            });
        }
    }
    if tokens.len() > positions {
        return Err(Error::Capacity {
            dimension: "position",
            index: tokens.len() - 1,
            capacity: positions,
        });
    }
    Ok(())
}

/// Input representation recorded on a tape so gradients reach all three
/// tables.
pub fn input_representation<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    tokens: &[usize],
    turn: usize,
) -> Result<Var> {
    EmbeddingTables::of(model).check(tokens, turn)?;
    let ids = &model.ids.embedding;
    let e = model.params.bind(tape, ids.token);
    let mut rep = tape.gather(e, tokens);
    if let Some(te_id) = ids.turn {
        let te = model.params.bind(tape, te_id);
        let row = tape.slice_rows(te, turn - 1, 1);
        rep = tape.add_row(rep, row);
    }
    let pe = model.params.bind(tape, ids.position);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather(pe, &positions);
    Ok(tape.add(rep, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(turn_embedding: bool) -> Model<f64> {
        let mut cfg = ModelConfig::desk(12);
        cfg.d_model = 2;
        cfg.heads = 1;
        cfg.ablations.no_aligned_turn_embedding = !turn_embedding;
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn hand_sum() {
        let mut m = model(true);
        let ids = m.ids.embedding;
        let w = 7;
        m.params.get_mut(ids.token).row_mut(w).copy_from_slice(&[1.0, 0.0]);
        m.params.get_mut(ids.turn.unwrap()).row_mut(2).copy_from_slice(&[0.0, 1.0]);
        m.params.get_mut(ids.position).row_mut(0).copy_from_slice(&[1.0, 1.0]);
        let rep = EmbeddingTables::of(&m).input_representation(&[w], 3).unwrap();
        assert_eq!(rep.row(0), &[2.0, 2.0]);

        let mut tape = Tape::new();
        let v = input_representation(&mut tape, &m, &[w], 3).unwrap();
        assert_eq!(tape.value(v), &rep);
    }

    #[test]
    fn zero_tables_give_zero_matrix() {
        let mut m = model(true);
        for p in m.params.iter_mut() {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        let rep = EmbeddingTables::of(&m).input_representation(&[2, 4, 9, 3], 5).unwrap();
        assert!(rep.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additivity_and_turn_alignment() {
        let m = model(true);
        let t = EmbeddingTables::of(&m);
        let q = t.input_representation(&[2, 4, 9, 3], 4).unwrap();
        let r = t.input_representation(&[2, 5, 9, 3], 4).unwrap();
        // same token id at the same (turn, position) gives the same row
        assert_eq!(q.row(0), r.row(0));
        assert_eq!(q.row(2), r.row(2));
        for i in 0..4 {
            let tok = [2, 4, 9, 3][i];
            for c in 0..2 {
                let want = t.token.get(tok, c) + t.turn.unwrap().get(3, c) + t.position.get(i, c);
                assert_eq!(q.get(i, c), want);
            }
        }
    }

    #[test]
    fn ablated_turn_table_contributes_nothing() {
        let m = model(false);
        let t = EmbeddingTables::of(&m);
        let a = t.input_representation(&[2, 6, 3], 1).unwrap();
        let b = t.input_representation(&[2, 6, 3], 9).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            for c in 0..2 {
                let tok = [2, 6, 3][i];
                assert_eq!(a.get(i, c), t.token.get(tok, c) + t.position.get(i, c));
            }
        }
    }

    #[test]
    fn capacity_errors_name_the_dimension() {
        let m = model(true);
        let t = EmbeddingTables::of(&m);
        assert!(matches!(
            t.input_representation(&[2], 65),
            Err(Error::Capacity { dimension: "turn", .. })
        ));
        assert!(matches!(
            t.input_representation(&[2; 65], 1),
            Err(Error::Capacity { dimension: "position", .. })
        ));
        assert!(matches!(
            t.input_representation(&[99], 1),
            Err(Error::Capacity { dimension: "vocabulary", .. })
        ));
    }
}
