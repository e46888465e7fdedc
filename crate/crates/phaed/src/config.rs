//! Run configuration: one JSON file plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use phaed_core::generation::GenerationConfig;
use phaed_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One `{"dialogue": [...]}` object per line.
    #[default]
    Jsonl,
    /// One dialogue per line, utterances separated by `__eou__`.
    Eou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default = "default_max_utterance_len")]
    pub max_utterance_len: usize,
    /// Vocabulary cap used when `train.model.vocab_size` is 0.
    #[serde(default = "default_max_vocab")]
    pub max_vocab_size: usize,
    /// Pre-generated responses (`{"responses": [...]}` per test line) that
    /// `eval` scores instead of decoding.
    #[serde(default)]
    pub hypotheses: Option<PathBuf>,
}

fn default_max_utterance_len() -> usize {
    phaed_core::corpus::DEFAULT_MAX_UTTERANCE_LEN
}

fn default_max_vocab() -> usize {
    20_000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    pub data: DataConfig,
    /// word2vec text file for the embedding metrics.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

/// Splits `a.b.c=value`. The value is read as JSON when it parses, as a plain
/// string otherwise.
pub fn parse_override(s: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("{} is not an object", path[..i].join(".")))
        })?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        node = obj
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_value(value: Value) -> CliResult<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let at = e.path().to_string();
            let inner = e.into_inner();
            if at == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("{at}: {inner}"))
            }
        })
    }

    /// Reads the file and applies overrides before any typed parsing, so an
    /// override can supply a field the file lacks.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            let (p, v) = parse_override(o)?;
            apply_override(&mut value, &p, v)?;
        }
        Self::from_value(value)
    }

    /// Checks values that do not depend on the vocabulary.
    pub fn validate(&self) -> CliResult<()> {
        self.generation.validate()?;
        let mut train = self.train.clone();
        if train.model.vocab_size == 0 {
            train.model.vocab_size = phaed_core::corpus::RESERVED.len();
        }
        train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.data.max_utterance_len == 0 {
            return Err(CliError::Config("data.max_utterance_len must be positive".into()));
        }
        if self.data.max_vocab_size <= phaed_core::corpus::RESERVED.len() {
            return Err(CliError::Config(
                "data.max_vocab_size must exceed the reserved token count".into(),
            ));
        }
        for (name, p) in self.paths() {
            if !p.exists() {
                return Err(CliError::Config(format!("{name}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Input paths named in the config. The checkpoint is left out: a missing
    /// checkpoint has its own exit status.
    pub fn paths(&self) -> Vec<(&'static str, &Path)> {
        let d = &self.data;
        [
            ("data.train", d.train.as_deref()),
            ("data.valid", d.valid.as_deref()),
            ("data.test", d.test.as_deref()),
            ("data.hypotheses", d.hypotheses.as_deref()),
            ("embeddings", self.embeddings.as_deref()),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.map(|p| (n, p)))
        .collect()
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> CliResult<&'a Path> {
        p.as_deref()
            .ok_or_else(|| CliError::Config(format!("{name} is required for this command")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_values_are_json_or_strings() {
        let (p, v) = parse_override("train.learning_rate=0.01").unwrap();
        assert_eq!(p, ["train", "learning_rate"]);
        assert_eq!(v, json!(0.01));
        assert_eq!(parse_override("out_dir=runs/a").unwrap().1, json!("runs/a"));
        assert_eq!(parse_override("x=true").unwrap().1, json!(true));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn overrides_create_missing_objects() {
        let mut v = json!({"a": {"b": 1}});
        apply_override(&mut v, &["a".into(), "c".into(), "d".into()], json!(2)).unwrap();
        assert_eq!(v, json!({"a": {"b": 1, "c": {"d": 2}}}));
        assert!(apply_override(&mut v, &["a".into(), "b".into(), "x".into()], json!(0)).is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let v = json!({"train": {"model": {"d_model": "wide"}}, "data": {}});
        match RunConfig::from_value(v) {
            Err(CliError::Config(m)) => assert!(m.starts_with("train.model.d_model"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
