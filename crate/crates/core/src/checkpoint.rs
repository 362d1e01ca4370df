//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "CRECKPT\0"
//! version      u32 LE    FORMAT_VERSION
//! header_len   u64 LE
//! header       JSON      { config, relation_vocab, entity_vocab, tensors: [{name, rows, cols}] }
//! tensors      f64 LE    every tensor row-major, in header order
//! crc32        u32 LE    over all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EntityEmbeddingTable, PositionalEmbeddingTable};
use crate::encoder::{EncoderParams, ProjectionHead};
use crate::error::{CreError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"CRECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    relation_vocab: Vec<String>,
    entity_vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let header = Header {
        config: params.config,
        relation_vocab: params.relation_vocab.clone(),
        entity_vocab: params.entities.ids().to_vec(),
        tensors: params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + header.len() + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn corrupt(msg: impl Into<String>) -> CreError {
    CreError::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    header.config.validate()?;

    let expected = ModelParams::expected_shapes(
        &header.config,
        header.relation_vocab.len(),
        header.entity_vocab.len(),
    );
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|(s, t)| *s != (t.rows, t.cols))
    {
        return Err(corrupt("tensor list does not match the stored configuration"));
    }
    let total: usize = expected.iter().map(|(r, c)| r * c).sum();
    if body.len() - header_end != 8 * total {
        return Err(corrupt(format!(
            "expected {} bytes of tensor data, found {}",
            8 * total,
            body.len() - header_end
        )));
    }
    let mut values = body[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors: Vec<Matrix> = expected
        .iter()
        .map(|&(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
        .collect();

    let projection_bias = tensors.pop().expect("projection bias");
    let projection_weight = tensors.pop().expect("projection weight");
    let encoder_tensors = tensors.split_off(3);
    let entity_vectors = tensors.pop().expect("entity table");
    let tail_table = tensors.pop().expect("tail positions");
    let head_table = tensors.pop().expect("head positions");
    let config = header.config;
    Ok(ModelParams {
        config,
        relation_vocab: header.relation_vocab,
        head_positions: PositionalEmbeddingTable {
            max_distance: config.max_distance,
            table: head_table,
        },
        tail_positions: PositionalEmbeddingTable {
            max_distance: config.max_distance,
            table: tail_table,
        },
        entities: EntityEmbeddingTable::new(header.entity_vocab, entity_vectors)?,
        encoder: EncoderParams {
            config: config.encoder,
            tensors: encoder_tensors,
        },
        projection: ProjectionHead {
            weight: projection_weight,
            bias: projection_bias,
        },
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    crate::write_atomic(path, &to_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| CreError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CreError::Checkpoint(m) => CreError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and checks that it was trained with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.config != *expected {
        return Err(CreError::Dimension(format!(
            "{} was trained with {:?}, run configuration is {:?}",
            path.display(),
            params.config,
            expected
        )));
    }
    Ok(params)
}
