//! Corpus, hypothesis and word-vector file readers.

use std::fs;
use std::path::Path;

use anyhow::Context;
use phaed_core::corpus::{RawConversation, Tokenizer, WhitespaceTokenizer};
use phaed_core::metrics::WordEmbeddingStore;
use phaed_core::{Error, Result};
use serde::Deserialize;

use crate::config::CorpusFormat;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueLine {
    dialogue: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponsesLine {
    responses: Vec<String>,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Raw utterance texts of every record, with the 1-based line each came from.
/// Blank lines are skipped.
pub fn read_dialogues(text: &str, format: CorpusFormat) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let utts = match format {
            CorpusFormat::Jsonl => {
                serde_json::from_str::<DialogueLine>(line)
                    .map_err(|e| parse_error(n, e.to_string()))?
                    .dialogue
            }
            CorpusFormat::Eou => {
                let mut parts: Vec<String> =
                    line.split("__eou__").map(|s| s.trim().to_string()).collect();
                // "a __eou__ b __eou__" leaves an empty tail
                if parts.last().is_some_and(String::is_empty) {
                    parts.pop();
                }
                parts
            }
        };
        out.push((n, utts));
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Tokenizes and pairs every record. Records with fewer than two utterances
/// are parse errors.
pub fn parse_corpus(
    text: &str,
    format: CorpusFormat,
    max_utterance_len: usize,
) -> Result<Vec<RawConversation>> {
    read_dialogues(text, format)?
        .into_iter()
        .map(|(n, utts)| {
            RawConversation::from_texts(&utts, &WhitespaceTokenizer, max_utterance_len).map_err(
                |e| match e {
                    Error::Contract(m) => parse_error(n, m),
                    e => e,
                },
            )
        })
        .collect()
}

pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    max_utterance_len: usize,
) -> anyhow::Result<Vec<RawConversation>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    parse_corpus(&text, format, max_utterance_len).with_context(|| path.display().to_string())
}

/// Generation input: queries are the even-indexed utterances, gold responses
/// the odd-indexed ones (possibly absent).
pub struct QueryRecord {
    pub queries: Vec<Vec<String>>,
    pub gold: Vec<Vec<String>>,
}

pub fn load_queries(
    path: &Path,
    format: CorpusFormat,
    max_utterance_len: usize,
) -> anyhow::Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let records = read_dialogues(&text, format).with_context(|| path.display().to_string())?;
    Ok(records
        .into_iter()
        .map(|(_, utts)| {
            let mut rec = QueryRecord {
                queries: Vec::new(),
                gold: Vec::new(),
            };
            for (k, u) in utts.iter().enumerate() {
                let mut words = WhitespaceTokenizer.tokenize(u);
                words.truncate(max_utterance_len);
                if k % 2 == 0 {
                    rec.queries.push(words);
                } else {
                    rec.gold.push(words);
                }
            }
            rec
        })
        .collect())
}

/// Tokenized responses, one list per line.
pub fn parse_hypotheses(text: &str) -> Result<Vec<Vec<Vec<String>>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: ResponsesLine =
                serde_json::from_str(l).map_err(|e| parse_error(i + 1, e.to_string()))?;
            Ok(r.responses
                .iter()
                .map(|s| WhitespaceTokenizer.tokenize(s))
                .collect())
        })
        .collect()
}

/// word2vec text format: `word v1 … vd` per line, optionally preceded by a
/// `count dim` header.
pub fn parse_word_vectors(text: &str) -> Result<WordEmbeddingStore> {
    let mut store: Option<WordEmbeddingStore> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if store.is_none()
            && fields.len() == 2
            && fields.iter().all(|f| f.parse::<usize>().is_ok())
        {
            let dim = fields[1].parse().unwrap_or(0);
            if dim == 0 {
                return Err(parse_error(n, "header declares zero width"));
            }
            store = Some(WordEmbeddingStore::new(dim));
            continue;
        }
        if fields.len() < 2 {
            return Err(parse_error(n, "expected a word followed by its vector"));
        }
        let vector = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_error(n, e.to_string()))?;
        let s = store.get_or_insert_with(|| WordEmbeddingStore::new(vector.len()));
        if vector.len() != s.dim() {
            return Err(parse_error(
                n,
                format!("vector has {} values, expected {}", vector.len(), s.dim()),
            ));
        }
        s.insert(fields[0], vector)?;
    }
    store.ok_or(Error::EmptyCorpus)
}

pub fn load_word_vectors(path: &Path) -> anyhow::Result<WordEmbeddingStore> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    parse_word_vectors(&text).with_context(|| path.display().to_string())
}
