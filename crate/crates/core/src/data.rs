//! Corpus and knowledge-base ingestion, dataset construction, stratified
//! splits and per-epoch negative resampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CreError, Result};

pub const NA_RELATION: &str = "N/A";
pub const NA_INDEX: usize = 0;

/// A tokenized sentence with its two entity mentions. Entity phrases are
/// single tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceExample {
    pub tokens: Vec<String>,
    pub head_index: usize,
    pub tail_index: usize,
    pub head_id: String,
    pub tail_id: String,
}

impl SentenceExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 {
            return Err(CreError::InvalidInput(format!(
                "sentence needs at least 2 tokens, got {n}"
            )));
        }
        if self.head_index >= n || self.tail_index >= n {
            return Err(CreError::IndexOutOfRange(format!(
                "head_index {} / tail_index {} with {n} tokens",
                self.head_index, self.tail_index
            )));
        }
        if self.head_index == self.tail_index {
            return Err(CreError::InvalidInput(format!(
                "head and tail share token {}",
                self.head_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head_id: String,
    pub relation: String,
    pub tail_id: String,
}

/// All sentences of one (head, tail) entity pair plus its gold relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPairBag {
    pub head_id: String,
    pub tail_id: String,
    pub sentences: Vec<SentenceExample>,
    pub gold_relations: BTreeSet<usize>,
}

impl EntityPairBag {
    pub fn is_positive(&self) -> bool {
        self.gold_relations.iter().any(|&r| r != NA_INDEX)
    }

    pub fn pair_id(&self) -> String {
        format!("{}\t{}", self.head_id, self.tail_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sentences: usize,
    pub entities: usize,
    pub pairs: usize,
    pub relations: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Index 0 is always [`NA_RELATION`].
    pub relation_vocab: Vec<String>,
    pub entity_vocab: Vec<String>,
    pub bags: Vec<EntityPairBag>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(relation_vocab: Vec<String>, entity_vocab: Vec<String>, bags: Vec<EntityPairBag>) -> Self {
        let provenance = Provenance {
            sentences: bags.iter().map(|b| b.sentences.len()).sum(),
            entities: entity_vocab.len(),
            pairs: bags.len(),
            relations: relation_vocab.len(),
            positive_pairs: bags.iter().filter(|b| b.is_positive()).count(),
            negative_pairs: bags.iter().filter(|b| !b.is_positive()).count(),
        };
        Dataset {
            relation_vocab,
            entity_vocab,
            bags,
            provenance,
        }
    }

    pub fn num_relations(&self) -> usize {
        self.relation_vocab.len()
    }

    /// A dataset with the same vocabularies holding the bags at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(
            self.relation_vocab.clone(),
            self.entity_vocab.clone(),
            indices.iter().map(|&i| self.bags[i].clone()).collect(),
        )
    }

    /// Number of gold (pair, relation) facts excluding N/A.
    pub fn gold_fact_count(&self) -> usize {
        self.bags
            .iter()
            .map(|b| b.gold_relations.iter().filter(|&&r| r != NA_INDEX).count())
            .sum()
    }

    /// Largest total sentence count over the bags of any single non-N/A
    /// relation.
    pub fn largest_relation_sentence_count(&self) -> usize {
        let mut per_relation = vec![0usize; self.num_relations()];
        for bag in &self.bags {
            for &r in &bag.gold_relations {
                per_relation[r] += bag.sentences.len();
            }
        }
        per_relation.iter().skip(1).copied().max().unwrap_or(0)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| CreError::InvalidInput(format!("serializing dataset: {e}")))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| CreError::io(path, e))?;
        let ds: Dataset = serde_json::from_str(&text).map_err(|e| CreError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ds.relation_vocab.first().map(String::as_str) != Some(NA_RELATION) {
            return Err(CreError::InvalidInput(format!(
                "{}: relation 0 must be {NA_RELATION}",
                path.display()
            )));
        }
        Ok(ds)
    }
}

/// Reads a JSON-lines corpus, one [`SentenceExample`] per line.
pub fn parse_corpus(path: &Path) -> Result<Vec<SentenceExample>> {
    let file = fs::File::open(path).map_err(|e| CreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let sentence: SentenceExample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        sentence.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(sentence);
    }
    Ok(out)
}

/// Reads a tab-separated `head\trelation\ttail` file.
pub fn parse_kb(path: &Path) -> Result<Vec<Triple>> {
    let file = fs::File::open(path).map_err(|e| CreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CreError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(CreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        out.push(Triple {
            head_id: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// `N/A` followed by relation names in first-seen order.
pub fn relation_vocab(triples: &[Triple]) -> Vec<String> {
    let mut vocab = vec![NA_RELATION.to_string()];
    let mut seen: HashSet<&str> = HashSet::from([NA_RELATION]);
    for t in triples {
        if seen.insert(t.relation.as_str()) {
            vocab.push(t.relation.clone());
        }
    }
    vocab
}

/// Aligns a corpus with a knowledge base:
///
/// 1. drop triples with an entity that never occurs in the corpus;
/// 2. keep the `top_n` entities by the number of triples they occur in
///    (ties by id) and
///    drop triples touching any other entity;
/// 3. keep sentences whose entities both survive, and triples whose pair
///    occurs in some sentence;
/// 4. group sentences into bags by (head, tail); pairs without a triple get
///    the N/A relation.
pub fn build_dataset(corpus: &[SentenceExample], kb: &[Triple], top_n: usize) -> Result<Dataset> {
    if top_n == 0 {
        return Err(CreError::Config("top_n must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(CreError::EmptyDataset("corpus is empty".into()));
    }

    let corpus_entities: HashSet<&str> = corpus
        .iter()
        .flat_map(|s| [s.head_id.as_str(), s.tail_id.as_str()])
        .collect();
    let step1: Vec<&Triple> = kb
        .iter()
        .filter(|t| corpus_entities.contains(t.head_id.as_str()) && corpus_entities.contains(t.tail_id.as_str()))
        .collect();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &step1 {
        *counts.entry(t.head_id.as_str()).or_default() += 1;
        if t.tail_id != t.head_id {
            *counts.entry(t.tail_id.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let top: HashSet<&str> = ranked.iter().take(top_n).map(|(e, _)| *e).collect();
    let step2: Vec<&Triple> = step1
        .into_iter()
        .filter(|t| top.contains(t.head_id.as_str()) && top.contains(t.tail_id.as_str()))
        .collect();

    let kb_entities: HashSet<&str> = step2
        .iter()
        .flat_map(|t| [t.head_id.as_str(), t.tail_id.as_str()])
        .collect();
    let sentences: Vec<&SentenceExample> = corpus
        .iter()
        .filter(|s| kb_entities.contains(s.head_id.as_str()) && kb_entities.contains(s.tail_id.as_str()))
        .collect();
    let sentence_pairs: HashSet<(&str, &str)> = sentences
        .iter()
        .map(|s| (s.head_id.as_str(), s.tail_id.as_str()))
        .collect();
    let triples: Vec<Triple> = step2
        .into_iter()
        .filter(|t| sentence_pairs.contains(&(t.head_id.as_str(), t.tail_id.as_str())))
        .cloned()
        .collect();

    if sentences.is_empty() || triples.is_empty() {
        return Err(CreError::EmptyDataset(format!(
            "{} sentences and {} triples survive alignment",
            sentences.len(),
            triples.len()
        )));
    }

    let relations = relation_vocab(&triples);
    let relation_index: HashMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();
    let mut gold: HashMap<(&str, &str), BTreeSet<usize>> = HashMap::new();
    for t in &triples {
        gold.entry((t.head_id.as_str(), t.tail_id.as_str()))
            .or_default()
            .insert(relation_index[t.relation.as_str()]);
    }

    let mut grouped: BTreeMap<(&str, &str), Vec<SentenceExample>> = BTreeMap::new();
    for s in sentences {
        grouped
            .entry((s.head_id.as_str(), s.tail_id.as_str()))
            .or_default()
            .push(s.clone());
    }
    let mut entities: BTreeSet<String> = BTreeSet::new();
    let bags: Vec<EntityPairBag> = grouped
        .into_iter()
        .map(|((h, t), sentences)| {
            entities.insert(h.to_string());
            entities.insert(t.to_string());
            EntityPairBag {
                head_id: h.to_string(),
                tail_id: t.to_string(),
                sentences,
                gold_relations: gold
                    .get(&(h, t))
                    .cloned()
                    .unwrap_or_else(|| BTreeSet::from([NA_INDEX])),
            }
        })
        .collect();

    Ok(Dataset::new(relations, entities.into_iter().collect(), bags))
}

fn positive_and_negative(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    (0..dataset.bags.len()).partition(|&i| dataset.bags[i].is_positive())
}

/// Splits positive and negative bags independently into train and test.
pub fn split_dataset(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CreError::Split(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let (mut pos, mut neg) = positive_and_negative(dataset);
    if pos.is_empty() || neg.is_empty() {
        return Err(CreError::Split(format!(
            "need positive and negative bags, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (group, name) in [(&pos, "positive"), (&neg, "negative")] {
        let n_test = (test_fraction * group.len() as f64).round() as usize;
        if n_test == 0 {
            return Err(CreError::Split(format!("empty test side for {name} bags")));
        }
        if n_test == group.len() {
            return Err(CreError::Split(format!("empty train side for {name} bags")));
        }
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Bag indices into a dataset; a per-epoch training view.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn bags(&self) -> impl Iterator<Item = &'a EntityPairBag> + '_ {
        self.indices.iter().map(|&i| &self.dataset.bags[i])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps every positive bag and draws negative bags without replacement
/// until their sentence total first reaches `target_sentence_count`.
/// Indices come back in ascending order.
pub fn resample_negatives(
    dataset: &Dataset,
    target_sentence_count: usize,
    seed: u64,
    epoch: u64,
) -> DatasetView<'_> {
    let (mut keep, mut neg) = positive_and_negative(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    neg.shuffle(&mut rng);
    let mut total = 0usize;
    for i in neg {
        if total >= target_sentence_count {
            break;
        }
        total += dataset.bags[i].sentences.len();
        keep.push(i);
    }
    keep.sort_unstable();
    DatasetView {
        dataset,
        indices: keep,
    }
}

/// Subsamples the negative bags of a held-out set once so their sentence
/// total roughly matches the largest positive relation (or `target`).
pub fn balance_test_set(test: &Dataset, target: Option<usize>, seed: u64) -> Dataset {
    let target = target.unwrap_or_else(|| test.largest_relation_sentence_count().max(1));
    test.subset(&resample_negatives(test, target, seed, 0).indices)
}
