//! Relation extraction with contextualized relation embeddings.
//!
//! Each sentence mentioning an entity pair is encoded into one
//! `K`-dimensional embedding per relation. Those embeddings are scored
//! against learned head and tail entity embeddings with a knowledge-base
//! scoring function (TransE or ComplEx), aggregated over the pair's
//! sentences, normalized, and trained with a multi-relation cross-entropy
//! objective.
//!
//! Module map:
//! - [`data`]: corpus/KB ingestion, dataset construction, splits, resampling
//! - [`synthetic`]: deterministic synthetic corpora for desk-scale runs
//! - [`embedding`]: word, positional and entity embeddings
//! - [`encoder`]: CNN, LSTM and transformer sentence encoders
//! - [`scoring`]: TransE and ComplEx triple scores
//! - [`objective`]: aggregation, normalization, targets, loss, top-k
//! - [`training`]: Adam, stopping rule, gradient check
//! - [`checkpoint`]: binary checkpoint format
//! - [`evaluation`]: PR curves, MRR, top-1 histograms, confidence bands
//! - [`config`] and [`cli`]: the `cre` command-line tool

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod scoring;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{CreError, Result};

use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CreError::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| CreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CreError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CreError::io(path, e))
}
