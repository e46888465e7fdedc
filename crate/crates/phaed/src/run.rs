//! The six commands and their shared plumbing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use phaed_core::corpus::{
    Conversation, CorpusStats, RawConversation, Role, TokenId, TurnInput, Utterance, Vocabulary,
    WhitespaceTokenizer,
};
use phaed_core::generation::{generate_conversation, query_attention_map, ChatSession};
use phaed_core::metrics::{perplexity, MetricReport};
use phaed_core::training::{apply_gradient, conversation_gradient, reduce_gradients, Adam, Precision};
use phaed_core::{Model, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{sha256_file, AnyCheckpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;

pub const THREADS_ENV: &str = "PHAED_NUM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Generate,
    Chat,
    Attn,
    Stats,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Generate => "generate",
            Command::Chat => "chat",
            Command::Attn => "attn",
            Command::Stats => "stats",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct FileRef {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    config: &'a RunConfig,
    seed: u64,
    checkpoint: Option<FileRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<FileRef>,
    outputs: Vec<String>,
}

struct Run {
    command: Command,
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn create(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let p = self.out.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?))
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> anyhow::Result<()> {
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    fn manifest(
        &self,
        checkpoint: Option<&Path>,
        resumed_from: Option<&Path>,
        outputs: &[&str],
    ) -> anyhow::Result<()> {
        let file_ref = |p: &Path| -> anyhow::Result<FileRef> {
            Ok(FileRef {
                path: p.to_path_buf(),
                sha256: sha256_file(p)?,
            })
        };
        let m = Manifest {
            command: self.command.name(),
            config: &self.cfg,
            seed: self.cfg.train.seed,
            checkpoint: checkpoint.map(file_ref).transpose()?,
            resumed_from: resumed_from.map(file_ref).transpose()?,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        self.write_json("manifest.json", &m)
    }

    /// Loads the checkpoint the run refers to; an absent one maps to exit 3.
    fn load_checkpoint(&self) -> CliResult<(PathBuf, AnyCheckpoint)> {
        let path = self
            .cfg
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::MissingCheckpoint(PathBuf::from("<none given>")))?;
        if !path.is_file() {
            return Err(CliError::MissingCheckpoint(path));
        }
        let ck = AnyCheckpoint::load(&path)?;
        Ok((path, ck))
    }
}

/// Thread count from `PHAED_NUM_THREADS`, if set.
pub fn thread_limit() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Runs one command. Chat reads `input` and writes replies to `output`;
/// warnings go to `log`.
pub fn run(
    inv: &Invocation,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
    log: &mut dyn Write,
) -> CliResult<()> {
    let mut cfg = RunConfig::load(&inv.config, &inv.overrides)?;
    if let Some(c) = &inv.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(o) = &inv.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let threads = thread_limit()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    let run = Run {
        command: inv.command,
        cfg,
        out,
    };
    if run.command == Command::Chat {
        return chat(run, input, output, log);
    }
    let go = move || match run.command {
        Command::Train => train(run),
        Command::Eval => eval(run),
        Command::Generate => generate(run),
        Command::Attn => attn(run),
        Command::Stats => stats(run),
        Command::Chat => unreachable!("handled above"),
    };
    match threads {
        None => go(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)?
            .install(go),
    }
}

fn encode_all(corpus: &[RawConversation], vocab: &Vocabulary, speaker: bool) -> Vec<Vec<TurnInput>> {
    corpus
        .iter()
        .map(|r| Conversation::encode(r, vocab, speaker).turn_inputs())
        .collect()
}

/// Speaker-excluded perplexity of the gold responses.
pub fn corpus_perplexity<T: Scalar>(model: &Model<T>, convs: &[Vec<TurnInput>]) -> anyhow::Result<f64> {
    let parts = convs
        .par_iter()
        .map(|c| model.gold_log_probs(c))
        .collect::<phaed_core::Result<Vec<_>>>()?;
    Ok(perplexity(&parts.concat())?)
}

/// Visit order of epoch `epoch`: a seeded shuffle, one ChaCha stream per
/// epoch so a resumed run continues the same sequence.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx
}

fn train(mut run: Run) -> CliResult<()> {
    let d = &run.cfg.data;
    let train_path = run.cfg.require("data.train", &d.train)?.to_path_buf();
    let corpus = io::load_corpus(&train_path, d.format, d.max_utterance_len)?;
    let valid = d
        .valid
        .as_deref()
        .map(|p| io::load_corpus(p, d.format, d.max_utterance_len))
        .transpose()?;
    let resume = match &run.cfg.checkpoint {
        None => None,
        Some(_) => Some(run.load_checkpoint()?),
    };
    let vocab = match &resume {
        Some((_, ck)) => {
            if ck.config().precision != run.cfg.train.precision {
                return Err(CliError::Config(format!(
                    "train.precision is {} but the checkpoint holds {}",
                    run.cfg.train.precision.name(),
                    ck.config().precision.name()
                )));
            }
            run.cfg.train.model = ck.config().model.clone();
            ck.vocab().clone()
        }
        None => {
            let m = &mut run.cfg.train.model;
            let cap = if m.vocab_size == 0 { d.max_vocab_size } else { m.vocab_size };
            let vocab = Vocabulary::build(&corpus, cap)?;
            if m.vocab_size == 0 {
                m.vocab_size = vocab.len();
            }
            vocab
        }
    };
    run.cfg.train.validate()?;
    let (resume_path, resume) = match resume {
        Some((p, ck)) => (Some(p), Some(ck)),
        None => (None, None),
    };
    match (run.cfg.train.precision, resume) {
        (Precision::Float32, Some(AnyCheckpoint::F32(c))) => train_typed(&run, &corpus, valid, vocab, Some(c))?,
        (Precision::Float64, Some(AnyCheckpoint::F64(c))) => train_typed(&run, &corpus, valid, vocab, Some(c))?,
        (Precision::Float32, None) => train_typed::<f32>(&run, &corpus, valid, vocab, None)?,
        (Precision::Float64, None) => train_typed::<f64>(&run, &corpus, valid, vocab, None)?,
        _ => unreachable!("precision checked above"),
    }
    let ck = run.out.join("checkpoint.bin");
    let mut outputs = vec!["checkpoint.bin", "loss.jsonl"];
    if run.out.join("valid.jsonl").exists() {
        outputs.push("valid.jsonl");
    }
    run.manifest(Some(&ck), resume_path.as_deref(), &outputs)?;
    Ok(())
}

fn train_typed<T: Scalar>(
    run: &Run,
    corpus: &[RawConversation],
    valid: Option<Vec<RawConversation>>,
    vocab: Vocabulary,
    resume: Option<Checkpoint<T>>,
) -> CliResult<()> {
    let tc = &run.cfg.train;
    let speaker = tc.model.speaker_tokens();
    let convs = encode_all(corpus, &vocab, speaker);
    let valid = valid.map(|v| encode_all(&v, &vocab, speaker));
    let (mut model, mut adam, mut step) = match resume {
        Some(c) => {
            let mut adam = c.optimizer.unwrap_or_else(|| Adam::new(&c.model.params, tc));
            adam.learning_rate = tc.learning_rate;
            adam.beta1 = tc.beta1;
            adam.beta2 = tc.beta2;
            adam.eps = tc.adam_eps;
            (c.model, adam, c.step)
        }
        None => {
            let model = Model::<T>::new(tc.model.clone(), tc.seed)?;
            let adam = Adam::new(&model.params, tc);
            (model, adam, 0)
        }
    };
    let mut losses = run.create("loss.jsonl")?;
    let mut checks = match (&valid, tc.eval_every) {
        (Some(_), e) if e > 0 => Some(run.create("valid.jsonl")?),
        _ => None,
    };
    let n = convs.len() as u64;
    let bs = tc.batch_size as u64;
    let mut order: Option<(u64, Vec<usize>)> = None;
    let mut best = f64::INFINITY;
    let mut stale = 0u32;
    while step < tc.max_steps {
        let ids: Vec<usize> = (0..bs)
            .map(|j| {
                let g = step * bs + j;
                let epoch = g / n;
                if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    order = Some((epoch, epoch_order(tc.seed, epoch, n as usize)));
                }
                order.as_ref().expect("set above").1[(g % n) as usize]
            })
            .collect();
        let parts = ids
            .par_iter()
            .map(|&i| conversation_gradient(&model, &convs[i]))
            .collect::<phaed_core::Result<Vec<_>>>()?;
        let gradient = reduce_gradients(parts);
        let loss = apply_gradient(&mut model, &mut adam, &gradient, step as usize)?;
        step += 1;
        serde_json::to_writer(
            &mut losses,
            &json!({"step": step, "loss": loss, "tokens": gradient.tokens}),
        )
        .map_err(anyhow::Error::from)?;
        writeln!(losses)?;
        if let (Some(f), Some(v)) = (checks.as_mut(), valid.as_ref()) {
            if step % tc.eval_every == 0 {
                let ppl = corpus_perplexity(&model, v)?;
                serde_json::to_writer(&mut *f, &json!({"step": step, "perplexity": ppl}))
                    .map_err(anyhow::Error::from)?;
                writeln!(f)?;
                if ppl < best {
                    best = ppl;
                    stale = 0;
                } else {
                    stale += 1;
                    if tc.patience.is_some_and(|p| stale >= p) {
                        break;
                    }
                }
            }
        }
    }
    losses.flush()?;
    if let Some(f) = checks.as_mut() {
        f.flush()?;
    }
    let ck = Checkpoint {
        config: tc.clone(),
        vocab,
        model,
        optimizer: Some(adam),
        step,
    };
    ck.save(&run.out.join("checkpoint.bin"))?;
    Ok(())
}

fn query_frames(queries: &[Vec<String>], vocab: &Vocabulary, speaker: bool) -> Vec<Vec<TokenId>> {
    queries
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let ids: Vec<TokenId> = q.iter().map(|w| vocab.id(w)).collect();
            Utterance::frame(Role::Query, k + 1, &ids, speaker).tokens
        })
        .collect()
}

fn eval(run: Run) -> CliResult<()> {
    let d = &run.cfg.data;
    let test = io::load_corpus(run.cfg.require("data.test", &d.test)?, d.format, d.max_utterance_len)?;
    let hyps = d
        .hypotheses
        .as_deref()
        .map(|p| -> anyhow::Result<_> {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            io::parse_hypotheses(&text).with_context(|| p.display().to_string())
        })
        .transpose()?;
    let store = run.cfg.embeddings.as_deref().map(io::load_word_vectors).transpose()?;
    let (ck_path, ck) = run.load_checkpoint()?;
    let report = match &ck {
        AnyCheckpoint::F32(c) => eval_typed(&run, c, &test, hyps.as_deref())?,
        AnyCheckpoint::F64(c) => eval_typed(&run, c, &test, hyps.as_deref())?,
    };
    let report = MetricReport::compute(&report.0, &report.1, &report.2, store.as_ref())?;
    run.write_json("report.json", &report)?;
    run.manifest(Some(&ck_path), None, &["report.json"])?;
    Ok(())
}

type Scored = (Vec<(f64, bool)>, Vec<Vec<String>>, Vec<Vec<String>>);

fn eval_typed<T: Scalar>(
    run: &Run,
    ck: &Checkpoint<T>,
    test: &[RawConversation],
    hyps: Option<&[Vec<Vec<String>>]>,
) -> anyhow::Result<Scored> {
    if let Some(h) = hyps {
        anyhow::ensure!(
            h.len() == test.len(),
            "{} hypothesis lines for {} test conversations",
            h.len(),
            test.len()
        );
    }
    let speaker = ck.model.config.speaker_tokens();
    let per_conv = test
        .par_iter()
        .enumerate()
        .map(|(i, raw)| -> anyhow::Result<Scored> {
            let conv = Conversation::encode(raw, &ck.vocab, speaker);
            let lp = ck.model.gold_log_probs(&conv.turn_inputs())?;
            let refs: Vec<Vec<String>> = (1..=raw.turns()).map(|t| raw.response(t).to_vec()).collect();
            let cands = match hyps {
                Some(h) => {
                    anyhow::ensure!(
                        h[i].len() == raw.turns(),
                        "hypothesis line {} has {} responses for {} turns",
                        i + 1,
                        h[i].len(),
                        raw.turns()
                    );
                    h[i].clone()
                }
                None => {
                    let queries: Vec<Vec<TokenId>> =
                        conv.pairs().iter().map(|(q, _)| q.tokens.clone()).collect();
                    generate_conversation(&ck.model, &queries, &run.cfg.generation)?
                        .iter()
                        .map(|f| ck.vocab.decode_content(f))
                        .collect()
                }
            };
            Ok((lp, cands, refs))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut all: Scored = Default::default();
    for (lp, c, r) in per_conv {
        all.0.extend(lp);
        all.1.extend(c);
        all.2.extend(r);
    }
    Ok(all)
}

fn generate(run: Run) -> CliResult<()> {
    let d = &run.cfg.data;
    let records = io::load_queries(run.cfg.require("data.test", &d.test)?, d.format, d.max_utterance_len)?;
    let (ck_path, ck) = run.load_checkpoint()?;
    let lines = match &ck {
        AnyCheckpoint::F32(c) => generate_typed(&run, c, &records)?,
        AnyCheckpoint::F64(c) => generate_typed(&run, c, &records)?,
    };
    let mut f = run.create("responses.jsonl")?;
    for responses in lines {
        serde_json::to_writer(&mut f, &json!({ "responses": responses })).map_err(anyhow::Error::from)?;
        writeln!(f)?;
    }
    f.flush()?;
    run.manifest(Some(&ck_path), None, &["responses.jsonl"])?;
    Ok(())
}

fn generate_typed<T: Scalar>(
    run: &Run,
    ck: &Checkpoint<T>,
    records: &[io::QueryRecord],
) -> anyhow::Result<Vec<Vec<String>>> {
    let speaker = ck.model.config.speaker_tokens();
    records
        .par_iter()
        .map(|r| {
            let queries = query_frames(&r.queries, &ck.vocab, speaker);
            Ok(generate_conversation(&ck.model, &queries, &run.cfg.generation)?
                .iter()
                .map(|f| ck.vocab.decode_content(f).join(" "))
                .collect())
        })
        .collect()
}

fn attn(run: Run) -> CliResult<()> {
    let d = &run.cfg.data;
    let records = io::load_queries(run.cfg.require("data.test", &d.test)?, d.format, d.max_utterance_len)?;
    let (ck_path, ck) = run.load_checkpoint()?;
    let maps = match &ck {
        AnyCheckpoint::F32(c) => attn_typed(c, &records)?,
        AnyCheckpoint::F64(c) => attn_typed(c, &records)?,
    };
    let mut f = run.create("attention.jsonl")?;
    for alpha in maps {
        let obj: BTreeMap<usize, Vec<f64>> =
            alpha.into_iter().enumerate().map(|(k, row)| (k + 1, row)).collect();
        serde_json::to_writer(&mut f, &obj).map_err(anyhow::Error::from)?;
        writeln!(f)?;
    }
    f.flush()?;
    run.manifest(Some(&ck_path), None, &["attention.jsonl"])?;
    Ok(())
}

fn attn_typed<T: Scalar>(
    ck: &Checkpoint<T>,
    records: &[io::QueryRecord],
) -> anyhow::Result<Vec<Vec<Vec<f64>>>> {
    let speaker = ck.model.config.speaker_tokens();
    records
        .par_iter()
        .map(|r| Ok(query_attention_map(&ck.model, &query_frames(&r.queries, &ck.vocab, speaker))?))
        .collect()
}

fn chat(
    run: Run,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
    log: &mut dyn Write,
) -> CliResult<()> {
    let (ck_path, ck) = run.load_checkpoint()?;
    let mut transcript = run.create("transcript.jsonl")?;
    match &ck {
        AnyCheckpoint::F32(c) => chat_typed(&run, c, input, output, log, &mut transcript)?,
        AnyCheckpoint::F64(c) => chat_typed(&run, c, input, output, log, &mut transcript)?,
    }
    transcript.flush()?;
    run.manifest(Some(&ck_path), None, &["transcript.jsonl"])?;
    Ok(())
}

fn chat_typed<T: Scalar>(
    run: &Run,
    ck: &Checkpoint<T>,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
    log: &mut dyn Write,
    transcript: &mut dyn Write,
) -> anyhow::Result<()> {
    let mut session = ChatSession::new(
        &ck.model,
        &ck.vocab,
        &WhitespaceTokenizer,
        run.cfg.generation.clone(),
        run.cfg.data.max_utterance_len,
    );
    let mut session_id = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "/quit" => break,
            "/reset" => {
                session.reset();
                session_id += 1;
                continue;
            }
            _ => {}
        }
        let reply = session.respond(text)?;
        if reply.truncated {
            writeln!(
                log,
                "warning: query longer than {} tokens was truncated",
                run.cfg.data.max_utterance_len
            )?;
        }
        writeln!(output, "{}", reply.text)?;
        output.flush()?;
        serde_json::to_writer(
            &mut *transcript,
            &json!({"session": session_id, "turn": session.turn(), "query": text, "response": reply.text}),
        )?;
        writeln!(transcript)?;
    }
    Ok(())
}

fn stats(run: Run) -> CliResult<()> {
    let d = &run.cfg.data;
    let mut out = BTreeMap::new();
    for (name, p) in [("train", &d.train), ("valid", &d.valid), ("test", &d.test)] {
        if let Some(p) = p {
            let corpus = io::load_corpus(p, d.format, d.max_utterance_len)?;
            out.insert(name, CorpusStats::compute(&corpus));
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("stats needs at least one of data.train, data.valid, data.test".into()));
    }
    run.write_json("stats.json", &out)?;
    run.manifest(None, None, &["stats.json"])?;
    Ok(())
}
