//! Conversations, vocabulary and the speaker-marked utterance frame.
//!
//! Every encoded utterance has the shape `[SOU] [Speaker-Q|Speaker-R] w_1 .. w_k [EOU]`
//! (the role token is omitted when speaker tokens are ablated). Conversations
//! are sequences of aligned query/response pairs sharing a 1-based turn index.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const SOU: TokenId = 2;
pub const EOU: TokenId = 3;
pub const SPEAKER_Q: TokenId = 4;
pub const SPEAKER_R: TokenId = 5;

/// Surface forms of the reserved tokens, indexed by id.
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[SOU]", "[EOU]", "[Speaker-Q]", "[Speaker-R]"];

/// Default cap on content tokens per utterance.
pub const DEFAULT_MAX_UTTERANCE_LEN: usize = 50;

/// Splits raw text into word tokens.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Query,
    Response,
}

impl Role {
    pub fn token(self) -> TokenId {
        match self {
            Role::Query => SPEAKER_Q,
            Role::Response => SPEAKER_R,
        }
    }
}

/// Token id ↔ surface form bijection with the reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Vocabulary of only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are distinct")
    }

    /// Rebuilds a vocabulary from its id-ordered token list (as stored in a
    /// checkpoint). The list must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Contract(
                "vocabulary must begin with the reserved tokens".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Contract(alloc::format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Keeps the most frequent corpus tokens, up to `max_size` entries in total
    /// including the reserved ones. Ties keep first-occurrence order.
    pub fn build(corpus: &[RawConversation], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size < RESERVED.len() {
            return Err(Error::Contract(alloc::format!(
                "max vocabulary size {max_size} is below the {} reserved tokens",
                RESERVED.len()
            )));
        }
        // (count, first occurrence)
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut order = 0usize;
        for conv in corpus {
            for utt in conv.utterances() {
                for tok in utt {
                    let e = counts.entry(tok.as_str()).or_insert((0, order));
                    e.0 += 1;
                    order += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - RESERVED.len())
                .map(|(t, _, _)| t.to_string()),
        );
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Surface forms of the content tokens of an encoded frame.
    pub fn decode_content(&self, frame: &[TokenId]) -> Vec<String> {
        content_tokens(frame)
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// A conversation of tokenized utterance strings, speaker-Q first, with an
/// even number of utterances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawConversation {
    utterances: Vec<Vec<String>>,
}

impl RawConversation {
    /// Pairs alternating utterances starting with speaker-Q. A trailing
    /// unpaired query is dropped and utterances are truncated to
    /// `max_utterance_len` content tokens.
    pub fn from_utterances(
        mut utterances: Vec<Vec<String>>,
        max_utterance_len: usize,
    ) -> Result<Self> {
        if utterances.len() < 2 {
            return Err(Error::Contract(alloc::format!(
                "a conversation needs at least 2 utterances, got {}",
                utterances.len()
            )));
        }
        if utterances.len() % 2 == 1 {
            utterances.pop();
        }
        for u in &mut utterances {
            u.truncate(max_utterance_len);
        }
        Ok(Self { utterances })
    }

    pub fn from_texts<S: AsRef<str>>(
        texts: &[S],
        tokenizer: &dyn Tokenizer,
        max_utterance_len: usize,
    ) -> Result<Self> {
        let utts = texts.iter().map(|t| tokenizer.tokenize(t.as_ref())).collect();
        Self::from_utterances(utts, max_utterance_len)
    }

    pub fn utterances(&self) -> &[Vec<String>] {
        &self.utterances
    }

    pub fn turns(&self) -> usize {
        self.utterances.len() / 2
    }

    pub fn query(&self, turn: usize) -> &[String] {
        &self.utterances[2 * (turn - 1)]
    }

    pub fn response(&self, turn: usize) -> &[String] {
        &self.utterances[2 * (turn - 1) + 1]
    }
}

/// One encoded utterance frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub turn: usize,
    pub tokens: Vec<TokenId>,
}

impl Utterance {
    /// Wraps content ids in the frame. `speaker_tokens = false` omits the role
    /// token.
    pub fn frame(role: Role, turn: usize, content: &[TokenId], speaker_tokens: bool) -> Self {
        let mut tokens = Vec::with_capacity(content.len() + 3);
        tokens.push(SOU);
        if speaker_tokens {
            tokens.push(role.token());
        }
        tokens.extend_from_slice(content);
        tokens.push(EOU);
        Self { role, turn, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content(&self) -> &[TokenId] {
        content_tokens(&self.tokens)
    }

    /// Whether the token sequence matches the frame for this role.
    pub fn is_well_formed(&self, speaker_tokens: bool) -> bool {
        let t = &self.tokens;
        let head = if speaker_tokens { 2 } else { 1 };
        t.len() > head
            && t[0] == SOU
            && (!speaker_tokens || t[1] == self.role.token())
            && t[t.len() - 1] == EOU
            && t[head..t.len() - 1].iter().all(|&x| x > SPEAKER_R || x == UNK)
    }
}

/// Strips `[SOU]`, role tokens and `[EOU]` from a frame.
pub fn content_tokens(frame: &[TokenId]) -> &[TokenId] {
    let mut start = 0;
    while start < frame.len() && matches!(frame[start], SOU | SPEAKER_Q | SPEAKER_R) {
        start += 1;
    }
    let mut end = frame.len();
    while end > start && matches!(frame[end - 1], EOU | PAD) {
        end -= 1;
    }
    &frame[start..end]
}

/// An encoded conversation: aligned (query, response) pairs for turns 1..=T.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pairs: Vec<(Utterance, Utterance)>,
}

impl Conversation {
    pub fn encode(raw: &RawConversation, vocab: &Vocabulary, speaker_tokens: bool) -> Self {
        let ids = |u: &[String]| u.iter().map(|w| vocab.id(w)).collect::<Vec<_>>();
        let pairs = (1..=raw.turns())
            .map(|t| {
                (
                    Utterance::frame(Role::Query, t, &ids(raw.query(t)), speaker_tokens),
                    Utterance::frame(Role::Response, t, &ids(raw.response(t)), speaker_tokens),
                )
            })
            .collect();
        Self { pairs }
    }

    /// Builds a conversation from already-framed pairs, checking roles and turn
    /// alignment.
    pub fn from_pairs(pairs: Vec<(Utterance, Utterance)>) -> Result<Self> {
        for (i, (q, r)) in pairs.iter().enumerate() {
            if q.role != Role::Query || r.role != Role::Response {
                return Err(Error::Contract("pair roles must be (query, response)".into()));
            }
            if q.turn != i + 1 || r.turn != i + 1 {
                return Err(Error::Contract(alloc::format!(
                    "pair {} carries turns ({}, {})",
                    i + 1,
                    q.turn,
                    r.turn
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn turns(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(Utterance, Utterance)] {
        &self.pairs
    }

    pub fn query(&self, turn: usize) -> &Utterance {
        &self.pairs[turn - 1].0
    }

    pub fn response(&self, turn: usize) -> &Utterance {
        &self.pairs[turn - 1].1
    }

    /// Unpadded model inputs for every turn.
    pub fn turn_inputs(&self) -> Vec<TurnInput> {
        self.pairs
            .iter()
            .map(|(q, r)| TurnInput {
                turn: q.turn,
                query: PaddedUtterance::new(&q.tokens, q.len()),
                response: PaddedUtterance::new(&r.tokens, r.len()),
            })
            .collect()
    }
}

/// A token sequence padded with `[PAD]` to a fixed width; the first `len`
/// positions are real.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedUtterance {
    pub ids: Vec<TokenId>,
    pub len: usize,
}

impl PaddedUtterance {
    pub fn new(tokens: &[TokenId], width: usize) -> Self {
        assert!(width >= tokens.len(), "pad width below utterance length");
        let mut ids = tokens.to_vec();
        ids.resize(width, PAD);
        Self {
            ids,
            len: tokens.len(),
        }
    }

    pub fn width(&self) -> usize {
        self.ids.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    pub fn valid(&self) -> &[TokenId] {
        &self.ids[..self.len]
    }
}

/// Model inputs for one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnInput {
    pub turn: usize,
    pub query: PaddedUtterance,
    pub response: PaddedUtterance,
}

/// Conversations aligned by turn index and padded per turn.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `turn_mask[b][t]` is true when conversation `b` has turn `t + 1`.
    pub turn_mask: Vec<Vec<bool>>,
    /// `queries[t][b]`, padded to the widest query of turn `t + 1`.
    pub queries: Vec<Vec<PaddedUtterance>>,
    /// `responses[t][b]`, padded to the widest response of turn `t + 1`.
    pub responses: Vec<Vec<PaddedUtterance>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.turn_mask.len()
    }

    pub fn max_turns(&self) -> usize {
        self.queries.len()
    }

    /// The padded turn inputs of conversation `b`, up to its last valid turn.
    pub fn conversation(&self, b: usize) -> Vec<TurnInput> {
        (0..self.max_turns())
            .filter(|&t| self.turn_mask[b][t])
            .map(|t| TurnInput {
                turn: t + 1,
                query: self.queries[t][b].clone(),
                response: self.responses[t][b].clone(),
            })
            .collect()
    }
}

/// Groups conversations into padded batches of at most `batch_size`.
pub fn batch_conversations(convs: &[Conversation], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    convs
        .chunks(batch_size)
        .map(|chunk| {
            let max_turns = chunk.iter().map(Conversation::turns).max().unwrap_or(0);
            let turn_mask = chunk
                .iter()
                .map(|c| (0..max_turns).map(|t| t < c.turns()).collect())
                .collect();
            let pad_turn = |t: usize, pick: fn(&(Utterance, Utterance)) -> &Utterance| {
                let width = chunk
                    .iter()
                    .filter(|c| t < c.turns())
                    .map(|c| pick(&c.pairs[t]).len())
                    .max()
                    .unwrap_or(0);
                chunk
                    .iter()
                    .map(|c| match c.pairs.get(t) {
                        Some(p) => PaddedUtterance::new(&pick(p).tokens, width),
                        None => PaddedUtterance::new(&[], width),
                    })
                    .collect::<Vec<_>>()
            };
            let queries = (0..max_turns).map(|t| pad_turn(t, |p| &p.0)).collect();
            let responses = (0..max_turns).map(|t| pad_turn(t, |p| &p.1)).collect();
            Batch {
                turn_mask,
                queries,
                responses,
            }
        })
        .collect()
}

/// Corpus summary in the style of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub avg_utterances_per_dialogue: f64,
    pub avg_tokens_per_utterance: f64,
}

impl CorpusStats {
    /// Counts content tokens (no frame tokens) of the paired utterances.
    pub fn compute(corpus: &[RawConversation]) -> Self {
        let dialogues = corpus.len();
        let utterances: usize = corpus.iter().map(|c| c.utterances().len()).sum();
        let tokens: usize = corpus
            .iter()
            .flat_map(|c| c.utterances())
            .map(Vec::len)
            .sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            dialogues,
            avg_utterances_per_dialogue: ratio(utterances, dialogues),
            avg_tokens_per_utterance: ratio(tokens, utterances),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn raw(texts: &[&str]) -> RawConversation {
        RawConversation::from_texts(texts, &WhitespaceTokenizer, DEFAULT_MAX_UTTERANCE_LEN).unwrap()
    }

    #[test]
    fn pairing_even_and_odd() {
        assert_eq!(raw(&["a", "b", "c", "d"]).turns(), 2);
        let odd = raw(&["a", "b", "c", "d", "e"]);
        assert_eq!(odd.turns(), 2);
        assert_eq!(odd.response(2), &["d".to_string()]);
    }

    #[test]
    fn single_utterance_is_rejected() {
        assert!(RawConversation::from_texts(&["a"], &WhitespaceTokenizer, 50).is_err());
    }

    #[test]
    fn long_utterance_truncated_to_max() {
        let long: Vec<String> = (0..60).map(|i| alloc::format!("w{i}")).collect();
        let text = long.join(" ");
        let c = RawConversation::from_texts(&[text.as_str(), "ok"], &WhitespaceTokenizer, 50).unwrap();
        assert_eq!(c.query(1).len(), 50);
        assert_eq!(c.query(1)[49], "w49");
    }

    #[test]
    fn vocab_frequency_cutoff() {
        let v = Vocabulary::build(&[raw(&["a a b", "a"])], 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_reserved_only() {
        let v = Vocabulary::build(&[raw(&["x y", "z"])], RESERVED.len()).unwrap();
        assert_eq!(v.len(), RESERVED.len());
        assert_eq!(v.id("x"), UNK);
    }

    #[test]
    fn vocab_rank_by_frequency_then_first_occurrence() {
        let v = Vocabulary::build(&[raw(&["x y", "y"])], 100).unwrap();
        assert!(v.id("y") < v.id("x"));
        let tie = Vocabulary::build(&[raw(&["q p", "r"])], 100).unwrap();
        assert!(tie.id("q") < tie.id("p"));
        assert!(tie.id("p") < tie.id("r"));
    }

    #[test]
    fn vocab_empty_corpus_is_error() {
        assert_eq!(Vocabulary::build(&[], 10), Err(Error::EmptyCorpus));
    }

    #[test]
    fn encode_frames() {
        let corpus = [raw(&["hello", ""])];
        let v = Vocabulary::build(&corpus, 20).unwrap();
        let c = Conversation::encode(&corpus[0], &v, true);
        assert_eq!(c.query(1).tokens, vec![SOU, SPEAKER_Q, v.id("hello"), EOU]);
        assert_eq!(c.response(1).tokens, vec![SOU, SPEAKER_R, EOU]);
        assert!(c.query(1).is_well_formed(true));
        assert!(c.response(1).is_well_formed(true));

        let unk = Conversation::encode(&raw(&["hello stranger", "hi"]), &v, true);
        assert_eq!(unk.query(1).tokens[3], UNK);

        let bare = Conversation::encode(&corpus[0], &v, false);
        assert_eq!(bare.query(1).tokens, vec![SOU, v.id("hello"), EOU]);
    }

    #[test]
    fn batch_masks() {
        let corpus = [raw(&["a b c", "d", "e", "f"]), raw(&["a", "b", "c", "d", "e", "f"])];
        let v = Vocabulary::build(&corpus, 50).unwrap();
        let convs: Vec<_> = corpus.iter().map(|c| Conversation::encode(c, &v, true)).collect();
        let batches = batch_conversations(&convs, 8);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.turn_mask[0], vec![true, true, false]);
        assert_eq!(b.turn_mask[1], vec![true, true, true]);
        // turn-1 queries have lengths 6 and 4, padded to 6
        assert_eq!(b.queries[0][1].width(), 6);
        assert_eq!(b.queries[0][1].mask(), vec![true, true, true, true, false, false]);
        assert_eq!(b.conversation(0).len(), 2);
        assert_eq!(b.conversation(1).len(), 3);
    }

    #[test]
    fn stats_hand_counts() {
        let corpus = [raw(&["a b", "c", "d e f", "g"]), raw(&["h", "i j", "k"])];
        let s = CorpusStats::compute(&corpus);
        assert_eq!(s.dialogues, 2);
        // utterances: 4 + 2 (odd trailing dropped) = 6
        assert_eq!(s.avg_utterances_per_dialogue, 3.0);
        // tokens: 2+1+3+1 + 1+2 = 10 over 6
        assert_eq!(s.avg_tokens_per_utterance, 10.0 / 6.0);
    }
}
