//! Subcommand implementations. Each writes its primary output to `out` and
//! progress notes to standard error.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use pagesum::analysis::coherence::{semantic_coherence, LexicalNextSentence};
use pagesum::analysis::fusion::{
    distance_histogram, find_fusion_pairs, write_fusion_csv, FusionParams,
};
use pagesum::analysis::importance_trace;
use pagesum::analysis::locality::{locality_curve, BagOfWords, Embedder, TfIdf, VectorTable};
use pagesum::analysis::memory::{memory_bench, write_memory_csv, MemoryMode};
use pagesum::model::{
    generate, load_checkpoint, DecodeMode, ModelConfig, ModelParameters, Network, SearchStrategy,
};
use pagesum::numerics::finite_diff_check;
use pagesum::paging::{split, Locality, PagingConfig};
use pagesum::text::vocab::RESERVED;
use pagesum::text::{
    build_vocab, detokenize, pieces, read_jsonl, rouge_l_summary, rouge_n, segment_sentences,
    RawDocument, RougeScore, RougeVariant, SentenceDoc, Vocabulary,
};
use pagesum::training::{prepare, train as run_training, TrainConfig};
use pagesum::Error;

use crate::PagingArgs;

/// A process exit code with its one-line reason.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn assertion(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::DegenerateMask { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn paging_config(a: &PagingArgs) -> Result<PagingConfig, Failure> {
    let cfg = PagingConfig {
        locality: a.locality.parse::<Locality>()?,
        page_size: a.page_size,
        num_pages: a.num_pages,
        max_total_tokens: a.max_total_tokens,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sentence_docs(raw: &[RawDocument], vocab: &Vocabulary) -> Result<Vec<SentenceDoc>, Failure> {
    Ok(raw
        .iter()
        .map(|d| d.to_sentence_doc(vocab))
        .collect::<pagesum::Result<_>>()?)
}

fn load_vocab(explicit: Option<&Path>, checkpoint: &Path) -> Result<Vocabulary, Failure> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.json"),
    };
    Ok(Vocabulary::load(&path)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model config JSON; defaults to the tiny reference model.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    /// Minimum corpus frequency for a vocabulary entry.
    #[arg(long, default_value_t = 2)]
    min_freq: usize,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[command(flatten)]
    paging: PagingArgs,
}

pub fn train(a: TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<DecodeMode>()?;
    }
    if let Some(d) = &a.checkpoint_dir {
        cfg.checkpoint_dir = Some(d.clone());
    }
    let dir = cfg
        .checkpoint_dir
        .get_or_insert_with(|| PathBuf::from("checkpoints"))
        .clone();
    cfg.validate()?;
    let paging = paging_config(&a.paging)?;

    let train_raw = read_jsonl(&a.corpus)?;
    let valid_raw = read_jsonl(&a.valid)?;
    let vocab = build_vocab(&train_raw, a.min_freq, a.max_vocab);
    let model_cfg = match &a.model_config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig {
            vocab_size: vocab.len(),
            max_positions: paging.page_size.max(128),
            ..ModelConfig::tiny()
        },
    };
    if model_cfg.vocab_size != vocab.len() {
        return Err(Failure::input(format!(
            "model vocab_size {} differs from corpus vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    model_cfg.validate()?;
    model_cfg.check_page_size(paging.page_size)?;

    let train_set = prepare(&sentence_docs(&train_raw, &vocab)?, &paging)?;
    let valid_set = prepare(&sentence_docs(&valid_raw, &vocab)?, &paging)?;
    fs::create_dir_all(&dir)?;
    vocab.save(&dir.join("vocab.json"))?;
    let mut params = ModelParameters::init(&model_cfg, cfg.seed)?;
    eprintln!(
        "training {} parameters on {} documents ({} validation)",
        params.parameter_count(),
        train_set.len(),
        valid_set.len()
    );
    let report = run_training(&train_set, &valid_set, &mut params, &cfg)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {}: train {:.4} valid {:.4}",
            e.epoch, e.train_loss, e.valid_loss
        );
    }
    serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| Failure::input(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to vocab.json next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "paged")]
    mode: String,
    #[arg(long, default_value = "greedy")]
    strategy: String,
    #[arg(long, default_value_t = 4)]
    beam_size: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[command(flatten)]
    paging: PagingArgs,
}

pub fn summarize(a: SummarizeArgs, out: &mut dyn Write) -> CmdResult {
    let params = load_checkpoint(&a.checkpoint, None)?;
    let vocab = load_vocab(a.vocab.as_deref(), &a.checkpoint)?;
    let paging = paging_config(&a.paging)?;
    params.config.check_page_size(paging.page_size)?;
    let mode = a.mode.parse::<DecodeMode>()?;
    let strategy = a.strategy.parse::<SearchStrategy>()?;
    let max_len = a.max_len.min(params.config.max_positions);
    for doc in sentence_docs(&read_jsonl(&a.corpus)?, &vocab)? {
        let pd = split(&doc, &paging)?;
        let g = generate(
            &params,
            &pd,
            mode,
            strategy,
            a.beam_size,
            max_len,
            a.length_penalty,
        )?;
        let line = json!({"id": doc.id, "summary": detokenize(&g.tokens, &vocab)});
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalRougeArgs {
    /// JSON lines with `id` and `summary`.
    #[arg(long)]
    hyp: PathBuf,
    /// Corpus JSON lines whose `summary` fields are the references.
    #[arg(long = "ref", value_name = "FILE")]
    reference: PathBuf,
}

fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let file = File::open(path)
        .map_err(|e| Failure::input(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Failure::input(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| {
                    Failure::input(format!(
                        "{} line {}: missing string field {k:?}",
                        path.display(),
                        n + 1
                    ))
                })
        };
        out.push((field("id")?, field("summary")?));
    }
    Ok(out)
}

fn sentence_pieces(text: &str) -> Vec<Vec<String>> {
    segment_sentences(text).iter().map(|s| pieces(s)).collect()
}

pub fn eval_rouge(a: EvalRougeArgs, out: &mut dyn Write) -> CmdResult {
    let refs: HashMap<String, String> = read_jsonl(&a.reference)?
        .into_iter()
        .map(|d| (d.id, d.summary))
        .collect();
    let hyps = read_hypotheses(&a.hyp)?;
    if hyps.is_empty() {
        return Err(Failure::input("no hypotheses to score"));
    }
    let mut sums = [[0.0f64; 3]; 3];
    for (id, hyp) in &hyps {
        let reference = refs
            .get(id)
            .ok_or_else(|| Failure::input(format!("no reference for hypothesis {id:?}")))?;
        let (h, r) = (pieces(hyp), pieces(reference));
        let scores: [RougeScore; 3] = [
            rouge_n(&h, &r, 1)?,
            rouge_n(&h, &r, 2)?,
            rouge_l_summary(&sentence_pieces(hyp), &sentence_pieces(reference)),
        ];
        for (acc, s) in sums.iter_mut().zip(scores) {
            acc[0] += s.precision;
            acc[1] += s.recall;
            acc[2] += s.f1;
        }
    }
    let n = hyps.len() as f64;
    let entry = |s: [f64; 3]| json!({"precision": 100.0 * s[0] / n, "recall": 100.0 * s[1] / n, "f1": 100.0 * s[2] / n});
    let report = json!({
        "documents": hyps.len(),
        "rouge1": entry(sums[0]),
        "rouge2": entry(sums[1]),
        "rougeL": entry(sums[2]),
    });
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&report).expect("json value")
    )?;
    Ok(())
}

/// Corpus with a vocabulary covering every token it contains.
fn analysis_corpus(path: &Path) -> Result<(Vec<SentenceDoc>, Vocabulary), Failure> {
    let raw = read_jsonl(path)?;
    let vocab = build_vocab(&raw, 1, None);
    Ok((sentence_docs(&raw, &vocab)?, vocab))
}

#[derive(Args, Debug)]
pub struct LocalityArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_distance: usize,
    /// tfidf or bow; ignored when --vectors is given.
    #[arg(long, default_value = "tfidf")]
    embedder: String,
    /// JSON lines of `{"sentence": ..., "vector": [...]}`.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

pub fn locality(a: LocalityArgs, out: &mut dyn Write) -> CmdResult {
    let (docs, vocab) = analysis_corpus(&a.corpus)?;
    let embedder: Box<dyn Embedder> = match (&a.vectors, a.embedder.as_str()) {
        (Some(p), _) => {
            let f = File::open(p)
                .map_err(|e| Failure::input(format!("cannot open {}: {e}", p.display())))?;
            Box::new(VectorTable::read_jsonl(BufReader::new(f))?)
        }
        (None, "tfidf") => Box::new(TfIdf::fit(&docs, vocab.len())?),
        (None, "bow") => Box::new(BagOfWords { dim: vocab.len() }),
        (None, other) => {
            return Err(Failure::input(format!(
                "unknown embedder {other:?} (expected tfidf or bow)"
            )))
        }
    };
    let curve = locality_curve(&docs, embedder.as_ref(), a.max_distance)?;
    eprintln!(
        "{} pairs, corpus mean similarity {:.4}, {} pairs skipped for zero vectors",
        curve.pairs, curve.mean_sim, curve.skipped_zero
    );
    curve.write_csv(out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Document id; defaults to the first document.
    #[arg(long)]
    doc: Option<String>,
    #[command(flatten)]
    paging: PagingArgs,
}

pub fn importance(a: ImportanceArgs, out: &mut dyn Write) -> CmdResult {
    let params = load_checkpoint(&a.checkpoint, None)?;
    let vocab = load_vocab(a.vocab.as_deref(), &a.checkpoint)?;
    let paging = paging_config(&a.paging)?;
    params.config.check_page_size(paging.page_size)?;
    let raw = read_jsonl(&a.corpus)?;
    let chosen = match &a.doc {
        Some(id) => raw
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Failure::input(format!("no document with id {id:?}")))?,
        None => raw
            .first()
            .ok_or_else(|| Failure::input("corpus is empty"))?,
    };
    let doc = chosen.to_sentence_doc(&vocab)?;
    let pd = split(&doc, &paging)?;
    let mut reference = doc.summary_tokens();
    reference.truncate(params.config.max_positions - 1);
    importance_trace(&params, &pd, &reference)?.write_csv(out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FusionArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    t1: f64,
    #[arg(long, default_value_t = 10.0)]
    t2: f64,
    /// rouge1, rouge2 or rougeL recall.
    #[arg(long, default_value = "rouge1")]
    rouge_variant: String,
    /// Emit the normalised-distance histogram instead of the pairs.
    #[arg(long)]
    histogram: bool,
}

pub fn fusion(a: FusionArgs, out: &mut dyn Write) -> CmdResult {
    let params = FusionParams {
        t1: a.t1,
        t2: a.t2,
        variant: a.rouge_variant.parse::<RougeVariant>()?,
    };
    let (docs, _) = analysis_corpus(&a.corpus)?;
    let rows: Vec<(String, _)> = docs
        .iter()
        .flat_map(|d| {
            find_fusion_pairs(&d.sentences, &d.summary, &params)
                .into_iter()
                .map(|p| (d.id.clone(), p))
        })
        .collect();
    if a.histogram {
        let pairs: Vec<_> = rows.into_iter().map(|(_, p)| p).collect();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bucket_lo", "bucket_hi", "count"])
            .map_err(csv_err)?;
        for (b, count) in distance_histogram(&pairs).iter().enumerate() {
            let (lo, hi) = (
                format!("{:.1}", b as f64 / 10.0),
                format!("{:.1}", (b + 1) as f64 / 10.0),
            );
            w.write_record([lo, hi, count.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    } else {
        write_fusion_csv(out, &rows)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CoherenceArgs {
    /// Scores the reference summaries of this corpus.
    #[arg(long, required_unless_present = "hyp")]
    corpus: Option<PathBuf>,
    /// Scores generated summaries (JSON lines with `id` and `summary`).
    #[arg(long)]
    hyp: Option<PathBuf>,
}

pub fn coherence(a: CoherenceArgs, out: &mut dyn Write) -> CmdResult {
    let summaries: Vec<(String, String)> = match (&a.hyp, &a.corpus) {
        (Some(h), _) => read_hypotheses(h)?,
        (None, Some(c)) => read_jsonl(c)?
            .into_iter()
            .map(|d| (d.id, d.summary))
            .collect(),
        (None, None) => unreachable!("clap requires one of --corpus/--hyp"),
    };
    let raw: Vec<RawDocument> = summaries
        .iter()
        .map(|(id, s)| RawDocument {
            id: id.clone(),
            text: Some(String::new()),
            sections: None,
            documents: None,
            summary: s.clone(),
        })
        .collect();
    let vocab = build_vocab(&raw, 1, None);
    let scorer = LexicalNextSentence::default();
    let mut skipped = 0;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["doc_id", "coherence"]).map_err(csv_err)?;
    for d in sentence_docs(&raw, &vocab)? {
        if d.summary.len() < 2 {
            skipped += 1;
            continue;
        }
        let sc = semantic_coherence(&d.summary, &scorer)?;
        w.write_record([d.id.as_str(), &sc.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    if skipped > 0 {
        eprintln!("{skipped} summaries with fewer than two sentences skipped");
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::input(format!("writing csv: {e}"))
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    /// Comma-separated document lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 1024)]
    page_size: usize,
    /// Comma-separated subset of paged,full.
    #[arg(long, value_delimiter = ',', default_value = "paged,full")]
    mode: Vec<String>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
}

pub fn memory(a: MemoryArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let modes = a
        .mode
        .iter()
        .map(|m| m.parse::<MemoryMode>())
        .collect::<pagesum::Result<Vec<_>>>()?;
    let longest = a
        .lengths
        .iter()
        .copied()
        .max()
        .unwrap_or(1)
        .max(a.page_size);
    let cfg = ModelConfig {
        n_encoder_layers: a.layers,
        n_heads: a.heads,
        d_model: 4 * a.heads,
        ..pagesum::analysis::counting_config(longest)
    };
    cfg.validate()?;
    let reports = memory_bench(&a.lengths, a.page_size, &cfg, &modes, seed)?;
    write_memory_csv(out, &reports)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradsArgs {
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Coordinates checked per tensor; all when omitted.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pages: usize,
}

pub fn grads(a: GradsArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let cfg = ModelConfig::tiny();
    let mut params = ModelParameters::<f64>::init(&cfg, seed)?;
    params.randomize_confidence(seed.wrapping_add(1), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = RESERVED.len() as u32..cfg.vocab_size as u32;
    let pages: Vec<Vec<u32>> = (0..a.pages.max(1))
        .map(|_| (0..6).map(|_| rng.gen_range(vocab.clone())).collect())
        .collect();
    let target: Vec<u32> = (0..5).map(|_| rng.gen_range(vocab.clone())).collect();
    let report = finite_diff_check(
        |b| Network::new(&cfg, b).loss(&pages, &target, DecodeMode::Paged, 0.1),
        &params.tensors,
        a.eps,
        a.tolerance,
        a.samples.unwrap_or(usize::MAX),
        seed,
    )?;
    for (name, err) in &report.per_param {
        writeln!(out, "{name}\t{err:.3e}")?;
    }
    writeln!(
        out,
        "max relative error {:.3e} over {} coordinates (tolerance {:.0e})",
        report.max_rel_error, report.checked, report.tolerance
    )?;
    if report.passed() {
        Ok(())
    } else {
        let (name, i, an, nu) = report.worst.expect("failure has a worst coordinate");
        Err(Failure::assertion(format!(
            "gradient check failed at {name}[{i}]: analytic {an:e} vs numeric {nu:e}"
        )))
    }
}
