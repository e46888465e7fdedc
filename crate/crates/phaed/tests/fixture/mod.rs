//! Temporary run directories with a small corpus and a desk-size config.

#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};
use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_phaed");

pub const CORPUS: &str = r#"{"dialogue": ["hi there", "hello friend", "how are you", "fine thanks"]}
{"dialogue": ["what is your name", "i am bob", "nice to meet you", "likewise", "bye"]}
{"dialogue": ["good morning", "morning to you", "is it raining", "no it is sunny"]}
"#;

pub fn desk_config() -> Value {
    json!({
        "train": {
            "model": {
                "d_model": 8, "heads": 2, "layers": 2, "ff_dim": 16,
                "r_max": 2, "c_max": 2, "max_turns": 16, "max_positions": 64
            },
            "max_steps": 4,
            "batch_size": 2,
            "seed": 7
        },
        "data": {"train": "corpus.jsonl", "test": "corpus.jsonl"},
        "generation": {"max_response_len": 6}
    })
}

pub struct Workspace {
    pub dir: TempDir,
}

impl Workspace {
    pub fn new(config: &Value) -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write("corpus.jsonl", CORPUS);
        ws.write("config.json", &serde_json::to_string_pretty(config).unwrap());
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, contents: &str) {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(p, contents).unwrap();
    }

    pub fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap()
    }

    pub fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }

    /// Runs the binary in the workspace with `--config config.json` appended.
    pub fn phaed(&self, args: &[&str]) -> Output {
        self.phaed_with(args, &[], None)
    }

    pub fn phaed_with(&self, args: &[&str], env: &[(&str, &str)], stdin: Option<&str>) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.current_dir(self.dir.path())
            .args(args)
            .args(["--config", "config.json"])
            .env_remove("PHAED_NUM_THREADS")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for (k, v) in env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().unwrap();
        let mut pipe = child.stdin.take().unwrap();
        if let Some(s) = stdin {
            pipe.write_all(s.as_bytes()).unwrap();
        }
        drop(pipe);
        child.wait_with_output().unwrap()
    }

    /// Trains into `dir` and returns the checkpoint path.
    pub fn train(&self, dir: &str) -> PathBuf {
        let out = self.phaed(&["train", "--out", dir]);
        assert_success(&out);
        self.path(dir).join("checkpoint.bin")
    }
}

pub fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
