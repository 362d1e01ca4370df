//! Held-out evaluation: pooled precision-recall curves over per-pair top-k
//! predictions, MRR among the top k, top-1 prediction histograms and
//! multi-run confidence bands.
//!
//! N/A is never a prediction candidate and never counts as a gold fact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityPairBag, NA_INDEX};
use crate::embedding::WordEmbeddingTable;
use crate::error::{CreError, Result};
use crate::model::{prepare_bag, score_pair, ModelParams};
use crate::objective::top_k;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// 1-based position in the pooled ranking.
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Non-N/A relations ranked by normalized score, best first.
fn ranked_relations(normalized: &[f64]) -> Vec<(usize, f64)> {
    top_k(normalized, normalized.len())
        .into_iter()
        .filter(|&(r, _)| r != NA_INDEX)
        .collect()
}

/// Normalized scores of a bag under `params`.
pub fn bag_scores(params: &ModelParams, words: &WordEmbeddingTable, bag: &EntityPairBag) -> Result<Vec<f64>> {
    let prepared = prepare_bag(bag, params, words)?;
    Ok(score_pair(params, &prepared)?.1.normalized)
}

fn records_from_scores(bag: &EntityPairBag, normalized: &[f64], k: usize) -> Vec<PredictionRecord> {
    let pair_id = bag.pair_id();
    ranked_relations(normalized)
        .into_iter()
        .take(k)
        .map(|(relation, score)| PredictionRecord {
            pair_id: pair_id.clone(),
            relation,
            score,
            correct: bag.gold_relations.contains(&relation),
        })
        .collect()
}

/// The `k` best non-N/A relations for a bag.
pub fn predict(
    params: &ModelParams,
    words: &WordEmbeddingTable,
    bag: &EntityPairBag,
    k: usize,
) -> Result<Vec<PredictionRecord>> {
    let scores = bag_scores(params, words, bag)?;
    Ok(records_from_scores(bag, &scores, k))
}

/// Pools records by descending score (ties: pair id, then relation) and
/// reports precision and recall after each one.
pub fn pr_curve(records: &[PredictionRecord], total_gold_facts: usize) -> Result<Vec<PrPoint>> {
    if total_gold_facts == 0 {
        return Err(CreError::InvalidInput("need at least one gold fact".into()));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.pair_id.cmp(&b.pair_id))
            .then(a.relation.cmp(&b.relation))
    });
    let mut correct = 0usize;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            correct += usize::from(r.correct);
            PrPoint {
                rank: i + 1,
                precision: correct as f64 / (i + 1) as f64,
                recall: correct as f64 / total_gold_facts as f64,
            }
        })
        .collect())
}

/// Precision at the first point whose recall reaches `recall`.
pub fn precision_at_recall(curve: &[PrPoint], recall: f64) -> Option<f64> {
    curve.iter().find(|p| p.recall >= recall).map(|p| p.precision)
}

/// Mean over pairs with a non-N/A gold relation of the reciprocal rank of
/// the first correct prediction within the top `k` (zero if none).
pub fn mrr_at_k(
    per_pair_topk: &BTreeMap<String, Vec<usize>>,
    gold: &BTreeMap<String, BTreeSet<usize>>,
    k: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (pair, relations) in gold {
        if !relations.iter().any(|&r| r != NA_INDEX) {
            continue;
        }
        pairs += 1;
        let hit = per_pair_topk.get(pair).and_then(|ranked| {
            ranked
                .iter()
                .take(k)
                .position(|r| *r != NA_INDEX && relations.contains(r))
        });
        if let Some(pos) = hit {
            total += 1.0 / (pos + 1) as f64;
        }
    }
    if pairs == 0 {
        return Err(CreError::InvalidInput("no pairs with a positive gold relation".into()));
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top1Histogram {
    pub predicted: BTreeMap<String, usize>,
    pub gold: BTreeMap<String, usize>,
    pub distinct: usize,
}

/// Counts top-1 predictions per relation next to the gold relation counts.
pub fn top1_histogram(
    per_pair_top1: &BTreeMap<String, usize>,
    gold: &BTreeMap<String, BTreeSet<usize>>,
    relation_vocab: &[String],
) -> Top1Histogram {
    let name = |r: usize| relation_vocab.get(r).cloned().unwrap_or_else(|| r.to_string());
    let mut predicted = BTreeMap::new();
    for &r in per_pair_top1.values() {
        *predicted.entry(name(r)).or_insert(0) += 1;
    }
    let mut gold_counts = BTreeMap::new();
    for rels in gold.values() {
        for &r in rels.iter().filter(|&&r| r != NA_INDEX) {
            *gold_counts.entry(name(r)).or_insert(0) += 1;
        }
    }
    Top1Histogram {
        distinct: predicted.len(),
        predicted,
        gold: gold_counts,
    }
}

/// Mean and spread of precision across runs on a fixed recall grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBand {
    pub recall: Vec<f64>,
    pub mean_precision: Vec<f64>,
    pub std_precision: Vec<f64>,
}

pub const BAND_GRID_STEP: f64 = 0.01;

/// Right-continuous step interpolation: the precision of the last point
/// whose recall is at most `recall`, or of the first point when `recall`
/// lies below the whole curve.
pub fn step_precision(curve: &[PrPoint], recall: f64) -> Option<f64> {
    let first = curve.first()?;
    Some(
        curve
            .iter()
            .take_while(|p| p.recall <= recall)
            .last()
            .unwrap_or(first)
            .precision,
    )
}

/// Interpolates each run onto a recall grid with step 0.01 and reports the
/// mean and sample standard deviation of precision. The grid stops at the
/// lowest maximum recall among the runs.
pub fn confidence_bands(runs: &[Vec<PrPoint>]) -> Result<RunBand> {
    if runs.len() < 2 {
        return Err(CreError::InvalidInput(format!(
            "confidence bands need at least 2 runs, got {}",
            runs.len()
        )));
    }
    if runs.iter().any(|r| r.is_empty()) {
        return Err(CreError::InvalidInput("a run has an empty PR curve".into()));
    }
    let reach = runs
        .iter()
        .map(|r| r.iter().map(|p| p.recall).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    let steps = (reach / BAND_GRID_STEP + 1e-9).floor() as usize;
    let n = runs.len() as f64;
    let mut band = RunBand {
        recall: Vec::new(),
        mean_precision: Vec::new(),
        std_precision: Vec::new(),
    };
    for i in 0..=steps {
        let g = i as f64 * BAND_GRID_STEP;
        let values: Vec<f64> = runs
            .iter()
            .map(|r| step_precision(r, g + 1e-12).expect("nonempty curve"))
            .collect();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        band.recall.push(g);
        band.mean_precision.push(mean);
        band.std_precision.push(var.sqrt());
    }
    Ok(band)
}

/// Everything `evaluate` reports; serialized as the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub mrr: BTreeMap<String, f64>,
    /// Keyed by `k`; each point is `[recall, precision]`.
    pub pr_curves: BTreeMap<String, Vec<[f64; 2]>>,
    pub top1_histogram: BTreeMap<String, usize>,
    pub gold_histogram: BTreeMap<String, usize>,
    pub distinct_top1_count: usize,
    pub top1_precision_at_recall_0_5: Option<f64>,
    pub test_pairs: usize,
    pub gold_facts: usize,
}

/// Scores every bag of `test` once and derives all metrics from those scores.
pub fn evaluate(
    params: &ModelParams,
    words: &WordEmbeddingTable,
    test: &Dataset,
    pr_ks: &[usize],
    mrr_ks: &[usize],
) -> Result<MetricsReport> {
    let scores: Vec<Vec<f64>> = test
        .bags
        .par_iter()
        .map(|bag| bag_scores(params, words, bag))
        .collect::<Result<_>>()?;
    let gold_facts = test.gold_fact_count();

    let mut pr_curves = BTreeMap::new();
    let mut top1_precision = None;
    for &k in pr_ks {
        let records: Vec<PredictionRecord> = test
            .bags
            .iter()
            .zip(&scores)
            .flat_map(|(bag, s)| records_from_scores(bag, s, k))
            .collect();
        let curve = pr_curve(&records, gold_facts)?;
        if k == 1 {
            top1_precision = precision_at_recall(&curve, 0.5);
        }
        pr_curves.insert(k.to_string(), curve.iter().map(|p| [p.recall, p.precision]).collect());
    }

    let ranked: BTreeMap<String, Vec<usize>> = test
        .bags
        .iter()
        .zip(&scores)
        .map(|(bag, s)| (bag.pair_id(), ranked_relations(s).into_iter().map(|(r, _)| r).collect()))
        .collect();
    let gold: BTreeMap<String, BTreeSet<usize>> = test
        .bags
        .iter()
        .map(|b| (b.pair_id(), b.gold_relations.clone()))
        .collect();
    let mut mrr = BTreeMap::new();
    for &k in mrr_ks {
        mrr.insert(format!("mrr_top{k}"), mrr_at_k(&ranked, &gold, k)?);
    }

    let top1: BTreeMap<String, usize> = ranked
        .iter()
        .filter_map(|(pair, r)| r.first().map(|&t| (pair.clone(), t)))
        .collect();
    let hist = top1_histogram(&top1, &gold, &test.relation_vocab);

    Ok(MetricsReport {
        mrr,
        pr_curves,
        top1_histogram: hist.predicted,
        gold_histogram: hist.gold,
        distinct_top1_count: hist.distinct,
        top1_precision_at_recall_0_5: top1_precision,
        test_pairs: test.bags.len(),
        gold_facts,
    })
}

/// CSV with header `k,rank,recall,precision`.
pub fn pr_csv(report: &MetricsReport) -> String {
    let mut curves: Vec<(usize, &Vec<[f64; 2]>)> = report
        .pr_curves
        .iter()
        .filter_map(|(k, c)| k.parse().ok().map(|k| (k, c)))
        .collect();
    curves.sort_by_key(|(k, _)| *k);
    let mut out = String::from("k,rank,recall,precision\n");
    for (k, curve) in curves {
        for (i, [recall, precision]) in curve.iter().enumerate() {
            let _ = writeln!(out, "{k},{},{recall},{precision}", i + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pair: &str, relation: usize, score: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            pair_id: pair.into(),
            relation,
            score,
            correct,
        }
    }

    #[test]
    fn hand_enumerated_curve() {
        let records = [
            rec("p1", 1, 0.9, true),
            rec("p2", 2, 0.8, false),
            rec("p1", 3, 0.7, true),
        ];
        let curve = pr_curve(&records, 2).unwrap();
        let pr: Vec<(f64, f64)> = curve.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        assert_eq!(precision_at_recall(&curve, 0.5), Some(1.0));
        assert_eq!(precision_at_recall(&curve, 0.75), Some(2.0 / 3.0));
    }

    #[test]
    fn degenerate_curves() {
        let all_right: Vec<_> = (0..4).map(|i| rec("p", i, 0.1 * i as f64, true)).collect();
        assert!(pr_curve(&all_right, 4).unwrap().iter().all(|p| p.precision == 1.0));
        let all_wrong: Vec<_> = (0..4).map(|i| rec("p", i, 0.1 * i as f64, false)).collect();
        assert!(pr_curve(&all_wrong, 4).unwrap().iter().all(|p| p.recall == 0.0));
        assert!(pr_curve(&[], 3).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_pair_then_relation() {
        let records = [rec("b", 1, 0.5, false), rec("a", 2, 0.5, true), rec("a", 1, 0.5, false)];
        let curve = pr_curve(&records, 1).unwrap();
        assert_eq!(curve[0].precision, 0.0);
        assert_eq!(curve[1].precision, 0.5);
    }

    fn maps(entries: &[(&str, Vec<usize>, Vec<usize>)]) -> (BTreeMap<String, Vec<usize>>, BTreeMap<String, BTreeSet<usize>>) {
        let preds = entries.iter().map(|(p, r, _)| (p.to_string(), r.clone())).collect();
        let gold = entries
            .iter()
            .map(|(p, _, g)| (p.to_string(), g.iter().copied().collect()))
            .collect();
        (preds, gold)
    }

    #[test]
    fn mrr_examples() {
        let (p, g) = maps(&[("x", vec![1, 2, 3], vec![2])]);
        assert_eq!(mrr_at_k(&p, &g, 3).unwrap(), 0.5);
        let (p, g) = maps(&[("x", vec![1, 2, 3], vec![1]), ("y", vec![1, 2, 3], vec![2])]);
        assert_eq!(mrr_at_k(&p, &g, 3).unwrap(), 0.75);
        let (p, g) = maps(&[("x", vec![1, 2, 3, 4], vec![4]), ("n", vec![1], vec![0])]);
        assert_eq!(mrr_at_k(&p, &g, 3).unwrap(), 0.0);
        let (p, g) = maps(&[("n", vec![1], vec![0])]);
        assert!(mrr_at_k(&p, &g, 3).is_err());
    }

    #[test]
    fn histogram_counts() {
        let vocab: Vec<String> = ["N/A", "r1", "r2"].map(String::from).to_vec();
        let top1: BTreeMap<String, usize> = [("a", 1), ("b", 1), ("c", 2)]
            .iter()
            .map(|(p, r)| (p.to_string(), *r))
            .collect();
        let gold: BTreeMap<String, BTreeSet<usize>> = [("a", 1), ("b", 2), ("c", 0)]
            .iter()
            .map(|(p, r)| (p.to_string(), BTreeSet::from([*r])))
            .collect();
        let h = top1_histogram(&top1, &gold, &vocab);
        assert_eq!(h.predicted, BTreeMap::from([("r1".to_string(), 2), ("r2".to_string(), 1)]));
        assert_eq!(h.gold, BTreeMap::from([("r1".to_string(), 1), ("r2".to_string(), 1)]));
        assert_eq!(h.distinct, 2);
        assert_eq!(top1_histogram(&BTreeMap::new(), &BTreeMap::new(), &vocab).distinct, 0);
    }

    fn curve(points: &[(f64, f64)]) -> Vec<PrPoint> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(recall, precision))| PrPoint {
                rank: i + 1,
                precision,
                recall,
            })
            .collect()
    }

    #[test]
    fn bands_from_two_runs() {
        let a = curve(&[(0.5, 0.4), (1.0, 0.4)]);
        let b = curve(&[(0.5, 0.6), (1.0, 0.6)]);
        let band = confidence_bands(&[a.clone(), b]).unwrap();
        assert_eq!(band.recall.len(), 101);
        for (m, s) in band.mean_precision.iter().zip(&band.std_precision) {
            assert!((m - 0.5).abs() < 1e-12);
            assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
        }
        let same = confidence_bands(&[a.clone(), a.clone()]).unwrap();
        assert!(same.std_precision.iter().all(|&s| s == 0.0));
        assert!(confidence_bands(&[a.clone()]).is_err());
        assert!(confidence_bands(&[a, Vec::new()]).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = MetricsReport {
            mrr: BTreeMap::new(),
            pr_curves: BTreeMap::from([
                ("3".to_string(), vec![[0.5, 1.0]]),
                ("1".to_string(), vec![[0.25, 1.0], [0.5, 0.5]]),
            ]),
            top1_histogram: BTreeMap::new(),
            gold_histogram: BTreeMap::new(),
            distinct_top1_count: 0,
            top1_precision_at_recall_0_5: None,
            test_pairs: 0,
            gold_facts: 0,
        };
        assert_eq!(pr_csv(&report), "k,rank,recall,precision\n1,1,0.25,1\n1,2,0.5,0.5\n3,1,0.5,1\n");
    }
}
