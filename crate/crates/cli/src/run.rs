//! `train` and `eval`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sffn_core::analysis::RoutingTrace;
use sffn_core::selectors::SelectorKind;
use sffn_core::corpus::{load_corpus, smoke_corpus, SMOKE_CORPUS_ENV};
use sffn_core::training::{
    byte_tokens, decode_checkpoint, encode_checkpoint, metrics_csv, MetricsRow, Model, TokenSplits, Trainer,
};
use sffn_core::training::{Batch, ForwardCtx, ModelTrace};

use crate::config::ExperimentConfig;
use crate::io::{sha256_hex, write_atomic, write_json};
use crate::version_string;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.sffn";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusInfo {
    /// File path, or `builtin-smoke` for the generated corpus.
    pub source: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Corpus bytes named by the config, else the smoke corpus.
pub fn load_text(cfg: &ExperimentConfig) -> Result<(Vec<u8>, CorpusInfo)> {
    let (bytes, source) = match &cfg.data.path {
        Some(p) => (
            load_corpus(p).with_context(|| format!("corpus {}", p.display()))?,
            p.display().to_string(),
        ),
        None => {
            let source = std::env::var(SMOKE_CORPUS_ENV).unwrap_or_else(|_| "builtin-smoke".into());
            (smoke_corpus()?, source)
        }
    };
    let info = CorpusInfo {
        source,
        bytes: bytes.len(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, info))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: String,
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub corpus: CorpusInfo,
    /// `completed` or `diverged`.
    pub status: &'static str,
    pub steps_completed: usize,
    pub final_val_ppl: Option<f64>,
    /// SHA-256 of every other file written by the run.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub manifest: Manifest,
}

fn write_tracked(dir: &Path, name: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    write_atomic(&dir.join(name), bytes)?;
    files.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn routing_trace(model: &Model, batch: &Batch, trace: &ModelTrace) -> Result<Option<RoutingTrace>> {
    if model.sparse_layer_indices().is_empty() || matches!(model.config().selector, SelectorKind::Dense {}) {
        return Ok(None);
    }
    let routes = model.sparse_routing(trace);
    Ok(Some(RoutingTrace::from_model(model, batch, &routes)?))
}

fn val_trace(model: &Model, splits: &TokenSplits, val_seqs: usize) -> Result<Option<RoutingTrace>> {
    let batch = splits.val_batch(val_seqs, model.config().seq_len)?;
    let trace = model.forward(&batch, ForwardCtx::eval(), None)?;
    routing_trace(model, &batch, &trace)
}

/// Trains and writes `config.json`, `metrics.csv`, `checkpoint.sffn`,
/// `trace.csv` (held-out routing of the final model, sparse variants only)
/// and `manifest.json` into `cfg.out_dir`. A diverged run still writes its
/// metrics and manifest, then fails.
pub fn cmd_train(cfg: &ExperimentConfig, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (text, corpus) = load_text(cfg)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), byte_tokens(&text), cfg.seed)
        .context("cannot set up training")?;
    let dir = cfg.out_dir.clone();
    let mut files = BTreeMap::new();
    write_tracked(&dir, CONFIG_FILE, format!("{}\n", serde_json::to_string_pretty(cfg)?).as_bytes(), &mut files)?;

    let result = trainer.run();
    let metrics = trainer.metrics().to_vec();
    write_tracked(&dir, METRICS_FILE, metrics_csv(&metrics).as_bytes(), &mut files)?;
    let steps_completed = metrics.last().map_or(0, |r| r.step);
    let mut manifest = Manifest {
        tool: "sffn",
        version: version_string().to_string(),
        command: "train",
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        threads,
        corpus,
        status: "completed",
        steps_completed,
        final_val_ppl: metrics.iter().rev().find_map(|r| r.val_ppl),
        files,
    };
    if let Err(e) = result {
        manifest.status = "diverged";
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        return Err(anyhow::Error::new(e).context(format!("training stopped; partial metrics in {}", dir.display())));
    }
    write_tracked(&dir, CHECKPOINT_FILE, &encode_checkpoint(&trainer.model().params), &mut manifest.files)?;
    if let Some(trace) = val_trace(trainer.model(), trainer.splits(), cfg.train.val_seqs)? {
        write_tracked(&dir, TRACE_FILE, trace.to_csv().as_bytes(), &mut manifest.files)?;
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(TrainOutcome {
        out_dir: dir,
        metrics,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub version: String,
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub val_tokens: usize,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub aux_loss: f64,
}

/// Held-out loss of a checkpoint. The model is rebuilt from the config and
/// seed (hash tables derive from the seed) and its tensors are replaced by
/// the checkpoint. Writes `eval.json` and, for sparse models, `trace.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let bytes = std::fs::read(checkpoint).with_context(|| format!("cannot read checkpoint {}", checkpoint.display()))?;
    let (text, _) = load_text(cfg)?;
    let splits = TokenSplits::new(byte_tokens(&text), cfg.train.val_fraction, cfg.model.seq_len)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model
        .params
        .load_named(decode_checkpoint(&bytes)?)
        .with_context(|| format!("checkpoint {} does not fit the config", checkpoint.display()))?;
    let batch = splits.val_batch(cfg.train.val_seqs, cfg.model.seq_len)?;
    let trace = model.forward(&batch, ForwardCtx::eval(), None)?;
    let loss = trace.loss;
    if !loss.clm_loss.is_finite() {
        bail!("non-finite held-out loss {}", loss.clm_loss);
    }
    let report = EvalReport {
        version: version_string().to_string(),
        config_sha256: cfg.sha256(),
        checkpoint_sha256: sha256_hex(&bytes),
        seed: cfg.seed,
        val_tokens: loss.tokens,
        val_loss: loss.clm_loss,
        val_ppl: loss.clm_loss.exp(),
        aux_loss: loss.aux_loss,
    };
    write_json(&cfg.out_dir.join(EVAL_FILE), &report)?;
    if let Some(t) = routing_trace(&model, &batch, &trace)? {
        write_atomic(&cfg.out_dir.join(TRACE_FILE), t.to_csv().as_bytes())?;
    }
    Ok(report)
}
