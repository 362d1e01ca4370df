//! The `cre` command line: one subcommand per pipeline stage, all driven
//! by a single run configuration file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{balance_test_set, build_dataset, parse_corpus, parse_kb, split_dataset, Dataset};
use crate::embedding::WordEmbeddingTable;
use crate::error::{CreError, Result};
use crate::evaluation::{bag_scores, confidence_bands, evaluate, pr_csv, MetricsReport, PrPoint};
use crate::model::ModelParams;
use crate::objective::top_k;
use crate::synthetic::gen_synthetic;
use crate::training::{grad_check, train};

#[derive(Debug, Parser)]
#[command(name = "cre", version, about = "Relation extraction with contextualized relation embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus, KB and word-embedding file.
    GenSynthetic,
    /// Align corpus and KB, split, and write the train and test sets.
    BuildDataset,
    /// Train a model and write the checkpoint and epoch log.
    Train,
    /// Score the test set and write the metrics report.
    Evaluate,
    /// Write the top-k relations for every bag of a dataset.
    Predict {
        /// Dataset to predict on; defaults to `paths.test_set`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a random bag.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        relations: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Export the PR curves of the metrics report as CSV, and optionally
    /// confidence bands over several metrics reports.
    ExportPr {
        /// Metrics reports of repeated runs.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Cut-off whose curves the bands are computed from.
        #[arg(long, default_value_t = 1)]
        band_k: usize,
        /// Output CSV for the bands.
        #[arg(long)]
        bands_out: Option<PathBuf>,
    },
}

/// Loads the configuration, applies overrides, validates, and logs the
/// resolved values.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    for (k, v) in cfg.entries() {
        log::info!("config {k} = {v}");
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenSynthetic => gen_synthetic_cmd(&cfg),
        Command::BuildDataset => build_dataset_cmd(&cfg),
        Command::Train => train_cmd(&cfg),
        Command::Evaluate => evaluate_cmd(&cfg),
        Command::Predict { input } => predict_cmd(&cfg, input.as_deref()),
        Command::GradCheck { relations, tolerance } => grad_check_cmd(&cfg, *relations, *tolerance),
        Command::ExportPr {
            runs,
            band_k,
            bands_out,
        } => export_pr_cmd(&cfg, runs, *band_k, bands_out.as_deref()),
    }
}

fn gen_synthetic_cmd(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    let corpus = cfg.require("paths.corpus", &p.corpus)?;
    let kb = cfg.require("paths.kb", &p.kb)?;
    let embeddings = cfg.require("paths.embeddings", &p.embeddings)?;
    let synthetic = gen_synthetic(&cfg.synthetic_spec(), cfg.data_seed)?;
    synthetic.write(corpus, kb, embeddings)?;
    log::info!(
        "wrote {} sentences, {} triples, {} word vectors",
        synthetic.corpus.len(),
        synthetic.kb.len(),
        synthetic.embeddings.len()
    );
    Ok(())
}

fn build_dataset_cmd(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    let corpus = parse_corpus(cfg.require("paths.corpus", &p.corpus)?)?;
    let kb = parse_kb(cfg.require("paths.kb", &p.kb)?)?;
    let dataset = build_dataset(&corpus, &kb, cfg.top_n)?;
    log::info!("dataset: {:?}", dataset.provenance);
    let (train, test) = split_dataset(&dataset, cfg.test_fraction, cfg.data_seed)?;
    let test = balance_test_set(&test, cfg.test_negative_target, cfg.data_seed);
    log::info!("train: {:?}", train.provenance);
    log::info!("test: {:?}", test.provenance);
    train.save_json(cfg.require("paths.train_set", &p.train_set)?)?;
    test.save_json(cfg.require("paths.test_set", &p.test_set)?)
}

fn load_words(cfg: &RunConfig) -> Result<WordEmbeddingTable> {
    let path = cfg.require("paths.embeddings", &cfg.paths.embeddings)?;
    let words = WordEmbeddingTable::load(path)?;
    let expected = cfg.model_config().word_dim;
    if words.dim() != expected {
        return Err(CreError::Dimension(format!(
            "{} has dimension {}, embedding.word_dim is {expected}",
            path.display(),
            words.dim()
        )));
    }
    Ok(words)
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    let checkpoint = cfg.require("paths.checkpoint", &p.checkpoint)?;
    let epoch_log = cfg.require("paths.epoch_log", &p.epoch_log)?;
    let dataset = Dataset::load_json(cfg.require("paths.train_set", &p.train_set)?)?;
    let words = load_words(cfg)?;
    let outcome = train(&dataset, &words, &cfg.train_config())?;
    log::info!(
        "stopped after {} epochs ({:?}); keeping epoch {}",
        outcome.logs.len(),
        outcome.stop,
        outcome.best_epoch
    );
    save_checkpoint(&outcome.params, checkpoint)?;
    let mut log_text = String::new();
    for entry in &outcome.logs {
        log_text.push_str(&serde_json::to_string(entry).expect("epoch log serializes"));
        log_text.push('\n');
    }
    crate::write_atomic(epoch_log, log_text.as_bytes())
}

fn load_model(cfg: &RunConfig, dataset: &Dataset) -> Result<ModelParams> {
    let path = cfg.require("paths.checkpoint", &cfg.paths.checkpoint)?;
    let params = load_checkpoint_for(path, &cfg.model_config())?;
    if params.relation_vocab != dataset.relation_vocab {
        return Err(CreError::Dimension(format!(
            "{} was trained on relations {:?}, dataset has {:?}",
            path.display(),
            params.relation_vocab,
            dataset.relation_vocab
        )));
    }
    Ok(params)
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    let metrics = cfg.require("paths.metrics", &p.metrics)?;
    let test = Dataset::load_json(cfg.require("paths.test_set", &p.test_set)?)?;
    let params = load_model(cfg, &test)?;
    let words = load_words(cfg)?;
    let report = evaluate(&params, &words, &test, &cfg.eval_ks, &cfg.mrr_ks)?;
    for (k, v) in &report.mrr {
        log::info!("{k} = {v:.4}");
    }
    log::info!("distinct top-1 relations: {}", report.distinct_top1_count);
    write_json(metrics, &report)
}

#[derive(Serialize)]
struct ScoredRelation<'a> {
    relation: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct BagPrediction<'a> {
    head_id: &'a str,
    tail_id: &'a str,
    predictions: Vec<ScoredRelation<'a>>,
    gold: Vec<&'a str>,
}

fn predict_cmd(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let p = &cfg.paths;
    let input = match input {
        Some(path) => path,
        None => cfg.require("paths.test_set", &p.test_set)?,
    };
    let out = cfg.require("paths.predictions", &p.predictions)?;
    let dataset = Dataset::load_json(input)?;
    let params = load_model(cfg, &dataset)?;
    let words = load_words(cfg)?;
    let mut text = String::new();
    for bag in &dataset.bags {
        let scores = bag_scores(&params, &words, bag)?;
        let predictions = top_k(&scores, scores.len())
            .into_iter()
            .filter(|&(r, _)| r != crate::data::NA_INDEX)
            .take(cfg.predict_k)
            .map(|(r, score)| ScoredRelation {
                relation: &params.relation_vocab[r],
                score,
            })
            .collect();
        let line = BagPrediction {
            head_id: &bag.head_id,
            tail_id: &bag.tail_id,
            predictions,
            gold: bag.gold_relations.iter().map(|&r| dataset.relation_vocab[r].as_str()).collect(),
        };
        text.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        text.push('\n');
    }
    crate::write_atomic(out, text.as_bytes())
}

fn grad_check_cmd(cfg: &RunConfig, relations: usize, tolerance: f64) -> Result<()> {
    let train_cfg = cfg.train_config();
    let report = grad_check(&train_cfg, relations, train_cfg.seed)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if report.max_relative_error > tolerance {
        return Err(CreError::InvalidInput(format!(
            "gradient check failed: relative error {:.3e} in {}[{}] exceeds {tolerance:e}",
            report.max_relative_error, report.worst_tensor, report.worst_index
        )));
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| CreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn export_pr_cmd(cfg: &RunConfig, runs: &[PathBuf], band_k: usize, bands_out: Option<&Path>) -> Result<()> {
    let p = &cfg.paths;
    let report = read_metrics(cfg.require("paths.metrics", &p.metrics)?)?;
    crate::write_atomic(cfg.require("paths.pr_csv", &p.pr_csv)?, pr_csv(&report).as_bytes())?;
    if runs.is_empty() {
        return Ok(());
    }
    let out = bands_out.ok_or_else(|| CreError::Config("--runs needs --bands-out".into()))?;
    let curves = runs
        .iter()
        .map(|path| {
            let report = read_metrics(path)?;
            let curve = report.pr_curves.get(&band_k.to_string()).ok_or_else(|| {
                CreError::InvalidInput(format!("{} has no PR curve for k={band_k}", path.display()))
            })?;
            Ok(curve
                .iter()
                .enumerate()
                .map(|(i, &[recall, precision])| PrPoint {
                    rank: i + 1,
                    precision,
                    recall,
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<PrPoint>>>>()?;
    let band = confidence_bands(&curves)?;
    let mut csv = String::from("recall,mean_precision,std_precision\n");
    for ((r, m), s) in band.recall.iter().zip(&band.mean_precision).zip(&band.std_precision) {
        let _ = writeln!(csv, "{r},{m},{s}");
    }
    crate::write_atomic(out, csv.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    crate::write_atomic(path, text.as_bytes())
}
