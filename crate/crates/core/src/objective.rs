//! Per-pair aggregation, normalization, targets, loss and top-k selection.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CreError, Result};
use crate::model::ModelParams;

/// Clamp applied to normalized scores before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
    Min,
    Mean,
}

impl FromStr for Aggregation {
    type Err = CreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            "min" => Ok(Aggregation::Min),
            "mean" => Ok(Aggregation::Mean),
            other => Err(CreError::Config(format!(
                "unknown aggregation '{other}' (expected sum, max, min or mean)"
            ))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
            Aggregation::Min => "min",
            Aggregation::Mean => "mean",
        };
        f.write_str(s)
    }
}

/// Componentwise reduction of per-sentence relation scores.
pub fn aggregate<S: AsRef<[f64]>>(sentence_scores: &[S], mode: Aggregation) -> Result<Vec<f64>> {
    let first = sentence_scores
        .first()
        .ok_or_else(|| CreError::InvalidInput("cannot aggregate zero sentences".into()))?
        .as_ref();
    let width = first.len();
    if sentence_scores.iter().any(|s| s.as_ref().len() != width) {
        return Err(CreError::Dimension(
            "sentence score vectors differ in length".into(),
        ));
    }
    let mut out = first.to_vec();
    for s in &sentence_scores[1..] {
        for (o, &x) in out.iter_mut().zip(s.as_ref()) {
            *o = match mode {
                Aggregation::Sum | Aggregation::Mean => *o + x,
                Aggregation::Max => o.max(x),
                Aggregation::Min => o.min(x),
            };
        }
    }
    if mode == Aggregation::Mean {
        let n = sentence_scores.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

pub fn normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(CreError::InvalidInput("cannot normalize an empty vector".into()));
    }
    if let Some((r, &s)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(CreError::InvalidInput(format!(
            "score for relation {r} is not a positive finite number: {s}"
        )));
    }
    let total: f64 = scores.iter().sum();
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Aggregated and normalized scores for one entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub aggregated: Vec<f64>,
    pub normalized: Vec<f64>,
    pub sentence_count: usize,
}

impl PairScores {
    pub fn from_sentences<S: AsRef<[f64]>>(sentence_scores: &[S], mode: Aggregation) -> Result<Self> {
        let aggregated = aggregate(sentence_scores, mode)?;
        let normalized = normalize(&aggregated)?;
        Ok(PairScores {
            aggregated,
            normalized,
            sentence_count: sentence_scores.len(),
        })
    }
}

/// Target distribution: `1/|gold|` on gold relations, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector(Vec<f64>);

impl TargetVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn gold_size(&self) -> usize {
        self.0.iter().filter(|&&m| m > 0.0).count()
    }
}

pub fn targets(gold: &BTreeSet<usize>, num_relations: usize) -> Result<TargetVector> {
    if gold.is_empty() {
        return Err(CreError::InvalidInput("gold relation set is empty".into()));
    }
    if let Some(&bad) = gold.iter().find(|&&r| r >= num_relations) {
        return Err(CreError::IndexOutOfRange(format!(
            "gold relation {bad} with only {num_relations} relations"
        )));
    }
    let w = 1.0 / gold.len() as f64;
    Ok(TargetVector(
        (0..num_relations)
            .map(|r| if gold.contains(&r) { w } else { 0.0 })
            .collect(),
    ))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// `sum_r [ -m_r log(ns_r) + (m_r - 1/|gold|) log(1 - ns_r) ]`.
pub fn pair_loss(ns: &[f64], m: &TargetVector, gold_size: usize) -> f64 {
    let inv_gold = 1.0 / gold_size as f64;
    ns.iter()
        .zip(m.as_slice())
        .map(|(&p, &mr)| {
            let p = clamp_prob(p);
            -mr * p.ln() + (mr - inv_gold) * (1.0 - p).ln()
        })
        .sum()
}

/// Derivative of [`pair_loss`] with respect to each normalized score.
/// Zero where the clamp is active.
pub(crate) fn pair_loss_grad(ns: &[f64], m: &TargetVector, gold_size: usize) -> Vec<f64> {
    let inv_gold = 1.0 / gold_size as f64;
    ns.iter()
        .zip(m.as_slice())
        .map(|(&p, &mr)| {
            if !(LOG_EPS..=1.0 - LOG_EPS).contains(&p) {
                0.0
            } else {
                -mr / p - (mr - inv_gold) / (1.0 - p)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub data: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Sums per-pair data losses and adds `lambda * sum ||w||^2` over all
/// learnable tensors of `params`.
pub fn total_loss(pair_losses: &[f64], lambda: f64, params: &ModelParams) -> LossValue {
    let data: f64 = pair_losses.iter().sum();
    let regularizer = lambda * params.squared_norm();
    LossValue {
        data,
        regularizer,
        total: data + regularizer,
    }
}

/// The `k` highest scores in descending order, ties broken by lower index.
pub fn top_k(ns: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = ns.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_aggregation() {
        let agg = aggregate(&[vec![0.3, 0.7], vec![0.5, 0.1]], Aggregation::Sum).unwrap();
        assert!((agg[0] - 0.8).abs() < 1e-15 && (agg[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_sentence_is_identity() {
        for mode in [Aggregation::Sum, Aggregation::Max, Aggregation::Min, Aggregation::Mean] {
            assert_eq!(aggregate(&[vec![0.2, 0.9]], mode).unwrap(), vec![0.2, 0.9]);
        }
    }

    #[test]
    fn other_aggregations() {
        let s = [vec![0.2, 0.9], vec![0.6, 0.1]];
        assert_eq!(aggregate(&s, Aggregation::Max).unwrap(), vec![0.6, 0.9]);
        assert_eq!(aggregate(&s, Aggregation::Min).unwrap(), vec![0.2, 0.1]);
        let mean = aggregate(&s, Aggregation::Mean).unwrap();
        assert!((mean[0] - 0.4).abs() < 1e-15 && (mean[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_aggregation_errors() {
        let empty: [Vec<f64>; 0] = [];
        assert!(aggregate(&empty, Aggregation::Sum).is_err());
    }

    #[test]
    fn normalize_example() {
        assert_eq!(normalize(&[1.0, 1.0, 2.0]).unwrap(), vec![0.25, 0.25, 0.5]);
        assert_eq!(normalize(&[3.0; 4]).unwrap(), vec![0.25; 4]);
        assert!(normalize(&[1.0, 0.0]).is_err());
        assert!(normalize(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn target_vectors() {
        let t = targets(&BTreeSet::from([0, 2]), 4).unwrap();
        assert_eq!(t.as_slice(), &[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(t.gold_size(), 2);
        assert_eq!(targets(&BTreeSet::from([1]), 3).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
        let all = targets(&BTreeSet::from([0, 1, 2, 3]), 4).unwrap();
        assert_eq!(all.as_slice(), &[0.25; 4]);
        assert!(targets(&BTreeSet::new(), 4).is_err());
        assert!(targets(&BTreeSet::from([4]), 4).is_err());
    }

    #[test]
    fn worked_loss_example() {
        let m = targets(&BTreeSet::from([0]), 2).unwrap();
        let loss = pair_loss(&[0.8, 0.2], &m, 1);
        let expected = -(0.8f64.ln()) - (0.8f64).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.446287).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_for_perfect_prediction() {
        let m = targets(&BTreeSet::from([1]), 3).unwrap();
        let loss = pair_loss(&[1e-9, 1.0 - 2e-9, 1e-9], &m, 1);
        assert!(loss < 1e-7);
    }

    #[test]
    fn loss_clamps_degenerate_probabilities() {
        let m = targets(&BTreeSet::from([0]), 2).unwrap();
        let loss = pair_loss(&[0.0, 1.0], &m, 1);
        assert!(loss.is_finite());
        assert!(pair_loss_grad(&[0.0, 1.0], &m, 1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = targets(&BTreeSet::from([0, 2]), 4).unwrap();
        let ns = [0.3, 0.1, 0.4, 0.2];
        let g = pair_loss_grad(&ns, &m, 2);
        for r in 0..4 {
            let mut p = ns;
            let mut q = ns;
            p[r] += 1e-6;
            q[r] -= 1e-6;
            let fd = (pair_loss(&p, &m, 2) - pair_loss(&q, &m, 2)) / 2e-6;
            assert!((fd - g[r]).abs() < 1e-6, "{r}: {fd} vs {}", g[r]);
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.6, 0.3], 2), vec![(1, 0.6), (2, 0.3)]);
        assert_eq!(top_k(&[0.4, 0.4, 0.2], 1), vec![(0, 0.4)]);
        assert_eq!(top_k(&[0.1, 0.6, 0.3], 10).len(), 3);
    }
}
