//! Deterministic synthetic corpora.
//!
//! Every relation owns a pool of cue words; its templates place two cues
//! from that pool around the head and tail slots, with the remaining slots
//! filled per sentence from a shared filler pool. Negative pairs get
//! filler-only sentences, so relations are recoverable from surface words
//! alone.

use std::io::BufWriter;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SentenceExample, Triple};
use crate::embedding::{WordEmbeddingTable, UNK};
use crate::error::{CreError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub entities: usize,
    /// Relation count, excluding N/A.
    pub relations: usize,
    pub templates: usize,
    pub pairs_per_relation: usize,
    pub negatives: usize,
    pub sentences_per_pair: usize,
    /// Vocabulary size including `<UNK>`.
    pub vocab: usize,
    pub word_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 30,
            relations: 4,
            templates: 5,
            pairs_per_relation: 100,
            negatives: 400,
            sentences_per_pair: 3,
            vocab: 200,
            word_dim: 20,
        }
    }
}

const MIN_LEN: usize = 5;
const MAX_LEN: usize = 8;
const CUES_PER_TEMPLATE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Vec<SentenceExample>,
    pub kb: Vec<Triple>,
    pub embeddings: WordEmbeddingTable,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Head,
    Tail,
    Cue(usize),
    Filler,
}

pub fn entity_id(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(2);
    format!("E{i:0width$}")
}

pub fn relation_name(r: usize) -> String {
    format!("rel{r}")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CreError::Config(format!("synthetic spec: {m}")));
        if self.entities == 0 || self.relations == 0 {
            return bad("entities and relations must be positive".into());
        }
        if self.templates == 0 || self.sentences_per_pair == 0 || self.word_dim == 0 {
            return bad("templates, sentences_per_pair and word_dim must be positive".into());
        }
        let ordered_pairs = self.entities * (self.entities - 1);
        let wanted = self.relations * self.pairs_per_relation + self.negatives;
        if wanted > ordered_pairs {
            return bad(format!(
                "{wanted} distinct pairs requested but {} entities give only {ordered_pairs}",
                self.entities
            ));
        }
        let words = self.vocab.saturating_sub(1);
        if words / 2 / self.relations < CUES_PER_TEMPLATE || words - words / 2 == 0 {
            return bad(format!(
                "vocabulary of {} is too small for {} relations",
                self.vocab, self.relations
            ));
        }
        Ok(())
    }
}

fn instantiate(
    slots: &[Slot],
    words: &[String],
    filler: &[usize],
    head: &str,
    tail: &str,
    rng: &mut ChaCha8Rng,
) -> SentenceExample {
    let mut head_index = 0;
    let mut tail_index = 0;
    let tokens = slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match *slot {
            Slot::Head => {
                head_index = i;
                head.to_string()
            }
            Slot::Tail => {
                tail_index = i;
                tail.to_string()
            }
            Slot::Cue(w) => words[w].clone(),
            Slot::Filler => words[*filler.choose(rng).expect("nonempty filler pool")].clone(),
        })
        .collect();
    SentenceExample {
        tokens,
        head_index,
        tail_index,
        head_id: head.to_string(),
        tail_id: tail.to_string(),
    }
}

fn random_layout(rng: &mut ChaCha8Rng, cues: &[usize]) -> Vec<Slot> {
    let len = rng.gen_range(MIN_LEN..=MAX_LEN);
    let mut slots = vec![Slot::Filler; len];
    let picks = index::sample(rng, len, 2 + cues.len());
    slots[picks.index(0)] = Slot::Head;
    slots[picks.index(1)] = Slot::Tail;
    for (j, &c) in cues.iter().enumerate() {
        slots[picks.index(2 + j)] = Slot::Cue(c);
    }
    slots
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut words = vec![UNK.to_string()];
    words.extend((1..spec.vocab).map(|i| format!("w{:03}", i - 1)));
    let mut shuffled: Vec<usize> = (1..spec.vocab).collect();
    shuffled.shuffle(&mut rng);
    let per_relation = shuffled.len() / 2 / spec.relations;
    let cue_pools: Vec<&[usize]> = shuffled.chunks(per_relation).take(spec.relations).collect();
    let filler = &shuffled[shuffled.len() / 2..];

    let templates: Vec<Vec<Vec<Slot>>> = cue_pools
        .iter()
        .map(|pool| {
            (0..spec.templates)
                .map(|_| {
                    let cues: Vec<usize> = pool.choose_multiple(&mut rng, CUES_PER_TEMPLATE).copied().collect();
                    random_layout(&mut rng, &cues)
                })
                .collect()
        })
        .collect();

    let n = spec.entities;
    let wanted = spec.relations * spec.pairs_per_relation + spec.negatives;
    let pairs: Vec<(String, String)> = index::sample(&mut rng, n * (n - 1), wanted)
        .into_iter()
        .map(|k| {
            let h = k / (n - 1);
            let mut t = k % (n - 1);
            if t >= h {
                t += 1;
            }
            (entity_id(h, n), entity_id(t, n))
        })
        .collect();

    let mut corpus = Vec::with_capacity(wanted * spec.sentences_per_pair);
    let mut kb = Vec::with_capacity(spec.relations * spec.pairs_per_relation);
    let (positives, negatives) = pairs.split_at(spec.relations * spec.pairs_per_relation);
    for (i, (h, t)) in positives.iter().enumerate() {
        let r = i / spec.pairs_per_relation;
        kb.push(Triple {
            head_id: h.clone(),
            relation: relation_name(r),
            tail_id: t.clone(),
        });
        for _ in 0..spec.sentences_per_pair {
            let template = templates[r].choose(&mut rng).expect("templates > 0");
            corpus.push(instantiate(template, &words, filler, h, t, &mut rng));
        }
    }
    for (h, t) in negatives {
        for _ in 0..spec.sentences_per_pair {
            let layout = random_layout(&mut rng, &[]);
            corpus.push(instantiate(&layout, &words, filler, h, t, &mut rng));
        }
    }

    let mut vectors = Matrix::uniform(spec.vocab, spec.word_dim, 1.0, &mut rng);
    for i in 0..spec.vocab {
        let row = vectors.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let embeddings = WordEmbeddingTable::new(words, vectors)?;
    Ok(SyntheticCorpus { corpus, kb, embeddings })
}

impl SyntheticCorpus {
    pub fn corpus_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.corpus {
            serde_json::to_writer(&mut out, s).expect("sentence serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn kb_bytes(&self) -> Vec<u8> {
        self.kb
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head_id, t.relation, t.tail_id))
            .collect::<String>()
            .into_bytes()
    }

    pub fn embedding_bytes(&self) -> Vec<u8> {
        let mut out = BufWriter::new(Vec::new());
        self.embeddings.write_to(&mut out).expect("in-memory write");
        out.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, corpus: &Path, kb: &Path, embeddings: &Path) -> Result<()> {
        crate::write_atomic(corpus, &self.corpus_bytes())?;
        crate::write_atomic(kb, &self.kb_bytes())?;
        crate::write_atomic(embeddings, &self.embedding_bytes())
    }
}

/// Parses the three files written by [`SyntheticCorpus::write`].
pub fn read_back(corpus: &Path, kb: &Path, embeddings: &Path) -> Result<SyntheticCorpus> {
    Ok(SyntheticCorpus {
        corpus: crate::data::parse_corpus(corpus)?,
        kb: crate::data::parse_kb(kb)?,
        embeddings: WordEmbeddingTable::load(embeddings)?,
    })
}
