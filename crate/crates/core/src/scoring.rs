//! Knowledge-base scoring functions for (head, relation embedding, tail) triples.
//!
//! Both scorers return strictly positive, bounded values so that per-pair
//! scores can be normalized into a distribution over relations:
//!
//! - TransE: `1 - tanh(||h + r - t||_2)`, in `(0, 1]`.
//! - ComplEx: `1 + tanh(Re<h, r, conj(t)>)`, in `(0, 2)`. Vectors of length
//!   `K` hold the real parts in the first `K/2` entries and the imaginary parts
//!   in the last `K/2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CreError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringKind {
    TransE,
    ComplEx,
}

impl FromStr for ScoringKind {
    type Err = CreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(ScoringKind::TransE),
            "complex" => Ok(ScoringKind::ComplEx),
            other => Err(CreError::Config(format!(
                "unknown kb model '{other}' (expected transe or complex)"
            ))),
        }
    }
}

impl fmt::Display for ScoringKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoringKind::TransE => write!(f, "transe"),
            ScoringKind::ComplEx => write!(f, "complex"),
        }
    }
}

/// A scoring kind bound to an embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringFunction {
    kind: ScoringKind,
    dim: usize,
}

impl ScoringFunction {
    pub fn new(kind: ScoringKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CreError::Config("kb dimension must be positive".into()));
        }
        if kind == ScoringKind::ComplEx && dim % 2 != 0 {
            return Err(CreError::Dimension(format!(
                "complex scoring needs an even dimension, got {dim}"
            )));
        }
        Ok(ScoringFunction { kind, dim })
    }

    pub fn kind(&self) -> ScoringKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn score(&self, head: &[f64], rel: &[f64], tail: &[f64]) -> Result<f64> {
        check_dims(self.dim, head, rel, tail)?;
        Ok(self.kind.score_unchecked(head, rel, tail))
    }
}

impl ScoringKind {
    pub(crate) fn score_unchecked(self, head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
        match self {
            ScoringKind::TransE => one_minus_tanh(translation_norm(head, rel, tail)),
            ScoringKind::ComplEx => one_minus_tanh(-complex_trilinear(head, rel, tail)),
        }
    }

    /// Adds `upstream * d(score)/d(input)` into the three gradient buffers.
    pub(crate) fn accumulate_grad(
        self,
        head: &[f64],
        rel: &[f64],
        tail: &[f64],
        upstream: f64,
        d_head: &mut [f64],
        d_rel: &mut [f64],
        d_tail: &mut [f64],
    ) {
        match self {
            ScoringKind::TransE => {
                let norm = translation_norm(head, rel, tail);
                // subgradient zero at the norm's singular point
                if norm == 0.0 {
                    return;
                }
                let s = one_minus_tanh(norm);
                let coeff = -upstream * s * (2.0 - s) / norm;
                for k in 0..head.len() {
                    let g = coeff * (head[k] + rel[k] - tail[k]);
                    d_head[k] += g;
                    d_rel[k] += g;
                    d_tail[k] -= g;
                }
            }
            ScoringKind::ComplEx => {
                let phi = complex_trilinear(head, rel, tail);
                let s = one_minus_tanh(-phi);
                let c = upstream * s * (2.0 - s);
                let half = head.len() / 2;
                for k in 0..half {
                    let (ah, bh) = (head[k], head[k + half]);
                    let (ar, br) = (rel[k], rel[k + half]);
                    let (at, bt) = (tail[k], tail[k + half]);
                    d_head[k] += c * (ar * at + br * bt);
                    d_head[k + half] += c * (ar * bt - br * at);
                    d_rel[k] += c * (ah * at + bh * bt);
                    d_rel[k + half] += c * (ah * bt - bh * at);
                    d_tail[k] += c * (ah * ar - bh * br);
                    d_tail[k + half] += c * (bh * ar + ah * br);
                }
            }
        }
    }
}

/// `1 - tanh(x)`, evaluated without cancellation for large positive `x`.
pub(crate) fn one_minus_tanh(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-2.0 * x).exp();
        2.0 * e / (1.0 + e)
    } else {
        1.0 - x.tanh()
    }
}

fn translation_norm(head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
    head.iter()
        .zip(rel)
        .zip(tail)
        .map(|((h, r), t)| {
            let d = h + r - t;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `Re(sum_k h_k * r_k * conj(t_k))`.
fn complex_trilinear(head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
    let half = head.len() / 2;
    (0..half)
        .map(|k| {
            let (ah, bh) = (head[k], head[k + half]);
            let (ar, br) = (rel[k], rel[k + half]);
            let (at, bt) = (tail[k], tail[k + half]);
            ah * ar * at + bh * ar * bt + ah * br * bt - bh * br * at
        })
        .sum()
}

fn check_dims(dim: usize, head: &[f64], rel: &[f64], tail: &[f64]) -> Result<()> {
    if head.len() != dim || rel.len() != dim || tail.len() != dim {
        return Err(CreError::Dimension(format!(
            "expected vectors of length {dim}, got head {}, relation {}, tail {}",
            head.len(),
            rel.len(),
            tail.len()
        )));
    }
    Ok(())
}

pub fn score_transe(head: &[f64], rel: &[f64], tail: &[f64]) -> Result<f64> {
    check_dims(head.len(), head, rel, tail)?;
    Ok(ScoringKind::TransE.score_unchecked(head, rel, tail))
}

pub fn score_complex(head: &[f64], rel: &[f64], tail: &[f64]) -> Result<f64> {
    check_dims(head.len(), head, rel, tail)?;
    if head.len() % 2 != 0 {
        return Err(CreError::Dimension(format!(
            "complex scoring needs an even dimension, got {}",
            head.len()
        )));
    }
    Ok(ScoringKind::ComplEx.score_unchecked(head, rel, tail))
}

/// Per-relation scores of one sentence for one entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScores(pub Vec<f64>);

impl SentenceScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Scores every row of a CRE matrix (one row per relation) against the pair.
pub fn score_sentence(
    head: &[f64],
    cre: &Matrix,
    tail: &[f64],
    f: &ScoringFunction,
) -> Result<SentenceScores> {
    if cre.cols() != f.dim() {
        return Err(CreError::Dimension(format!(
            "CRE rows have length {}, scoring function expects {}",
            cre.cols(),
            f.dim()
        )));
    }
    (0..cre.rows())
        .map(|r| f.score(head, cre.row(r), tail))
        .collect::<Result<Vec<_>>>()
        .map(SentenceScores)
}
