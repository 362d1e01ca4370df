//! Model configuration, learnable parameters and the differentiable
//! per-pair pipeline (embed, encode, score, aggregate, loss).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EntityPairBag;
use crate::embedding::{layout_sentence, EntityEmbeddingTable, PositionalEmbeddingTable, SentenceLayout, WordEmbeddingTable};
use crate::encoder::{encode_hidden, project_relations, EncoderConfig, EncoderParams, ProjectionHead};
use crate::error::{CreError, Result};
use crate::objective::{normalize, targets, Aggregation, LossValue, PairScores, TargetVector};
use crate::scoring::{ScoringFunction, ScoringKind};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Matrix;

/// Scale of the uniform initialization of positional and entity tables.
pub const TABLE_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub position_dim: usize,
    pub max_distance: usize,
    pub max_length: usize,
    pub encoder: EncoderConfig,
    pub kb: ScoringKind,
    pub kb_dim: usize,
    pub aggregation: Aggregation,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.position_dim
    }

    pub fn scoring(&self) -> Result<ScoringFunction> {
        ScoringFunction::new(self.kb, self.kb_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.position_dim == 0 {
            return Err(CreError::Config("word and position dimensions must be positive".into()));
        }
        if self.max_length < 2 {
            return Err(CreError::Config("max length must be at least 2".into()));
        }
        self.encoder.validate()?;
        self.scoring()?;
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 50,
            position_dim: 5,
            max_distance: 100,
            max_length: 120,
            encoder: EncoderConfig::new(crate::encoder::EncoderKind::Cnn),
            kb: ScoringKind::TransE,
            kb_dim: 50,
            aggregation: Aggregation::Sum,
        }
    }
}

/// Every learnable tensor plus the vocabularies they are indexed by.
/// Word vectors are not part of this: they stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub relation_vocab: Vec<String>,
    pub head_positions: PositionalEmbeddingTable,
    pub tail_positions: PositionalEmbeddingTable,
    pub entities: EntityEmbeddingTable,
    pub encoder: EncoderParams,
    pub projection: ProjectionHead,
}

const POS_HEAD: usize = 0;
const POS_TAIL: usize = 1;
const ENTITIES: usize = 2;
const ENCODER_START: usize = 3;

impl ModelParams {
    pub fn init(
        config: ModelConfig,
        relation_vocab: Vec<String>,
        entity_vocab: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if relation_vocab.is_empty() {
            return Err(CreError::Config("relation vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_positions =
            PositionalEmbeddingTable::init(config.max_distance, config.position_dim, TABLE_INIT_SCALE, &mut rng);
        let tail_positions =
            PositionalEmbeddingTable::init(config.max_distance, config.position_dim, TABLE_INIT_SCALE, &mut rng);
        let entities = EntityEmbeddingTable::init(entity_vocab, config.kb_dim, TABLE_INIT_SCALE, &mut rng);
        let encoder = EncoderParams::init(config.encoder, config.input_dim(), &mut rng)?;
        let projection =
            ProjectionHead::init(config.encoder.hidden_dim, relation_vocab.len(), config.kb_dim, &mut rng);
        Ok(ModelParams {
            config,
            relation_vocab,
            head_positions,
            tail_positions,
            entities,
            encoder,
            projection,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.relation_vocab.len()
    }

    /// All learnable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.head_positions.table,
            &self.tail_positions.table,
            &self.entities.vectors,
        ];
        out.extend(self.encoder.tensors.iter());
        out.push(&self.projection.weight);
        out.push(&self.projection.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.head_positions.table,
            &mut self.tail_positions.table,
            &mut self.entities.vectors,
        ];
        out.extend(self.encoder.tensors.iter_mut());
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![
            "positions.head".to_string(),
            "positions.tail".to_string(),
            "entities".to_string(),
        ];
        out.extend(
            self.config
                .encoder
                .tensor_shapes(self.config.input_dim())
                .into_iter()
                .map(|(n, _)| n),
        );
        out.push("projection.weight".into());
        out.push("projection.bias".into());
        out
    }

    /// Expected tensor shapes for this configuration and vocabulary sizes.
    pub fn expected_shapes(config: &ModelConfig, num_relations: usize, num_entities: usize) -> Vec<(usize, usize)> {
        let table = (2 * config.max_distance + 1, config.position_dim);
        let mut out = vec![table, table, (num_entities, config.kb_dim)];
        out.extend(config.encoder.tensor_shapes(config.input_dim()).into_iter().map(|(_, s)| s));
        out.push((config.encoder.hidden_dim, num_relations * config.kb_dim));
        out.push((1, num_relations * config.kb_dim));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `sum ||w||^2` over every learnable tensor.
    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_of_squares()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// A bag with its sentences laid out and its target built, ready for
/// repeated forward passes.
#[derive(Debug, Clone)]
pub struct PreparedBag {
    pub pair_id: String,
    pub head: usize,
    pub tail: usize,
    pub sentences: Vec<SentenceLayout>,
    pub target: TargetVector,
}

pub fn prepare_bag(bag: &EntityPairBag, params: &ModelParams, words: &WordEmbeddingTable) -> Result<PreparedBag> {
    if words.dim() != params.config.word_dim {
        return Err(CreError::Dimension(format!(
            "word vectors have dimension {}, model expects {}",
            words.dim(),
            params.config.word_dim
        )));
    }
    if bag.sentences.is_empty() {
        return Err(CreError::InvalidInput(format!("bag {} has no sentences", bag.pair_id())));
    }
    let sentences = bag
        .sentences
        .iter()
        .map(|s| layout_sentence(s, words, params.config.max_length, params.config.max_distance))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedBag {
        pair_id: bag.pair_id(),
        head: params.entities.position(&bag.head_id)?,
        tail: params.entities.position(&bag.tail_id)?,
        sentences,
        target: targets(&bag.gold_relations, params.num_relations())?,
    })
}

pub fn prepare_bags<'a>(
    bags: impl IntoIterator<Item = &'a EntityPairBag>,
    params: &ModelParams,
    words: &WordEmbeddingTable,
) -> Result<Vec<PreparedBag>> {
    bags.into_iter().map(|b| prepare_bag(b, params, words)).collect()
}

fn register_params(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
    params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t))
        .collect()
}

/// CRE matrix of one sentence on the tape.
fn record_sentence(tape: &mut Tape, params: &ModelParams, vars: &[Var], layout: &SentenceLayout) -> Var {
    let words = tape.constant(layout.words.clone());
    let head_pos = tape.gather_rows(vars[POS_HEAD], &layout.head_rows);
    let tail_pos = tape.gather_rows(vars[POS_TAIL], &layout.tail_rows);
    let input = tape.concat_cols(&[words, head_pos, tail_pos]);
    let n_enc = params.encoder.tensors.len();
    let enc_vars = &vars[ENCODER_START..ENCODER_START + n_enc];
    let hidden = encode_hidden(tape, &params.config.encoder, enc_vars, input);
    project_relations(
        tape,
        hidden,
        vars[ENCODER_START + n_enc],
        vars[ENCODER_START + n_enc + 1],
        params.num_relations(),
        params.config.kb_dim,
    )
}

/// Aggregated `1 x |R|` scores of a bag on the tape.
fn record_pair(tape: &mut Tape, params: &ModelParams, vars: &[Var], bag: &PreparedBag) -> Var {
    let head = tape.gather_rows(vars[ENTITIES], &[bag.head]);
    let tail = tape.gather_rows(vars[ENTITIES], &[bag.tail]);
    let per_sentence: Vec<Var> = bag
        .sentences
        .iter()
        .map(|layout| {
            let cre = record_sentence(tape, params, vars, layout);
            tape.triple_scores(params.config.kb, head, cre, tail)
        })
        .collect();
    tape.aggregate(&per_sentence, params.config.aggregation)
}

/// Per-sentence, aggregated and normalized scores of one bag.
pub fn score_pair(params: &ModelParams, bag: &PreparedBag) -> Result<(Vec<Vec<f64>>, PairScores)> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let head = tape.gather_rows(vars[ENTITIES], &[bag.head]);
    let tail = tape.gather_rows(vars[ENTITIES], &[bag.tail]);
    let mut sentence_scores = Vec::with_capacity(bag.sentences.len());
    let mut score_vars = Vec::with_capacity(bag.sentences.len());
    for layout in &bag.sentences {
        let cre = record_sentence(&mut tape, params, &vars, layout);
        let s = tape.triple_scores(params.config.kb, head, cre, tail);
        sentence_scores.push(tape.value(s).data().to_vec());
        score_vars.push(s);
    }
    let agg = tape.aggregate(&score_vars, params.config.aggregation);
    let aggregated = tape.value(agg).data().to_vec();
    let normalized = normalize(&aggregated)?;
    Ok((
        sentence_scores,
        PairScores {
            aggregated,
            normalized,
            sentence_count: bag.sentences.len(),
        },
    ))
}

/// Data loss of one bag; when `grads` is given, its gradient is added there.
pub fn pair_loss(params: &ModelParams, bag: &PreparedBag, grads: Option<&mut Gradients>) -> f64 {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let scores = record_pair(&mut tape, params, &vars, bag);
    let loss = tape.pair_loss(scores, bag.target.clone());
    if let Some(g) = grads {
        tape.backward(loss, g);
    }
    tape.value(loss).get(0, 0)
}

/// Total batch loss (data terms plus one L2 term) and its gradient.
/// Per-pair gradients are summed in batch order whatever `threads` is, so
/// the result is bit-identical across thread counts.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[&PreparedBag],
    lambda: f64,
    threads: usize,
) -> (LossValue, Vec<f64>, Gradients) {
    let mut grads = params.zero_gradients();
    let pair_losses: Vec<f64> = if threads <= 1 || batch.len() < 2 {
        batch
            .iter()
            .map(|bag| pair_loss(params, bag, Some(&mut grads)))
            .collect()
    } else {
        let per_pair: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|bag| {
                let mut g = params.zero_gradients();
                let l = pair_loss(params, bag, Some(&mut g));
                (l, g)
            })
            .collect();
        per_pair
            .into_iter()
            .map(|(l, g)| {
                grads.add_assign(&g);
                l
            })
            .collect()
    };
    for (g, w) in grads.0.iter_mut().zip(params.tensors()) {
        for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
            *gi += 2.0 * lambda * wi;
        }
    }
    let loss = crate::objective::total_loss(&pair_losses, lambda, params);
    (loss, pair_losses, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SentenceExample;
    use crate::embedding::UNK;
    use crate::encoder::EncoderKind;
    use std::collections::BTreeSet;

    fn tiny(kind: EncoderKind) -> ModelConfig {
        ModelConfig {
            word_dim: 6,
            position_dim: 3,
            max_distance: 5,
            max_length: 8,
            encoder: EncoderConfig {
                kind,
                hidden_dim: 6,
                window: 3,
                layers: 1,
                heads: 2,
            },
            kb: ScoringKind::TransE,
            kb_dim: 6,
            aggregation: Aggregation::Sum,
        }
    }

    fn words() -> WordEmbeddingTable {
        let names: Vec<String> = [UNK, "a", "b", "c"].map(String::from).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        WordEmbeddingTable::new(names, Matrix::uniform(4, 6, 1.0, &mut rng)).unwrap()
    }

    fn bag() -> EntityPairBag {
        let s = SentenceExample {
            tokens: ["X", "a", "b", "Y", "c"].map(String::from).to_vec(),
            head_index: 0,
            tail_index: 3,
            head_id: "X".into(),
            tail_id: "Y".into(),
        };
        EntityPairBag {
            head_id: "X".into(),
            tail_id: "Y".into(),
            sentences: vec![s.clone(), s],
            gold_relations: BTreeSet::from([2]),
        }
    }

    #[test]
    fn tensor_lists_agree() {
        for kind in [EncoderKind::Cnn, EncoderKind::Lstm, EncoderKind::Transformer] {
            let rel: Vec<String> = ["N/A", "r1", "r2", "r3"].map(String::from).to_vec();
            let p = ModelParams::init(tiny(kind), rel, vec!["X".into(), "Y".into()], 1).unwrap();
            let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape()).collect();
            assert_eq!(shapes, ModelParams::expected_shapes(&p.config, 4, 2));
            assert_eq!(p.tensor_names().len(), shapes.len());
        }
    }

    #[test]
    fn regularizer_scales_with_lambda() {
        let rel: Vec<String> = ["N/A", "r1", "r2"].map(String::from).to_vec();
        let p = ModelParams::init(tiny(EncoderKind::Cnn), rel, vec!["X".into(), "Y".into()], 1).unwrap();
        let w = words();
        let prepared = prepare_bag(&bag(), &p, &w).unwrap();
        let (l0, _, _) = batch_loss_and_grad(&p, &[&prepared], 0.0, 1);
        let (l1, _, _) = batch_loss_and_grad(&p, &[&prepared], 1e-3, 1);
        let (l2, _, _) = batch_loss_and_grad(&p, &[&prepared], 2e-3, 1);
        assert_eq!(l0.total, l0.data);
        assert!(((l2.total - l2.data) - 2.0 * (l1.total - l1.data)).abs() < 1e-15);
        assert!(l1.data >= 0.0);
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let rel: Vec<String> = ["N/A", "r1", "r2"].map(String::from).to_vec();
        let p = ModelParams::init(tiny(EncoderKind::Lstm), rel, vec!["X".into(), "Y".into()], 4).unwrap();
        let w = words();
        let prepared = prepare_bag(&bag(), &p, &w).unwrap();
        let mut other = bag();
        other.head_id = "Y".into();
        other.tail_id = "X".into();
        for s in &mut other.sentences {
            std::mem::swap(&mut s.head_id, &mut s.tail_id);
        }
        let other = prepare_bag(&other, &p, &w).unwrap();
        let batch = [&prepared, &other, &prepared];
        let (a, _, ga) = batch_loss_and_grad(&p, &batch, 1e-4, 1);
        let (b, _, gb) = batch_loss_and_grad(&p, &batch, 1e-4, 3);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn unknown_entity_rejected_at_preparation() {
        let rel: Vec<String> = ["N/A", "r1", "r2"].map(String::from).to_vec();
        let p = ModelParams::init(tiny(EncoderKind::Cnn), rel, vec!["X".into()], 1).unwrap();
        assert!(matches!(prepare_bag(&bag(), &p, &words()), Err(CreError::UnknownEntity(_))));
    }
}
