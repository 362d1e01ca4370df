//! Adam training over per-epoch resampled views, the epoch-loss stopping
//! rule, and the finite-difference gradient check.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resample_negatives, Dataset, EntityPairBag, SentenceExample};
use crate::embedding::{WordEmbeddingTable, UNK};
use crate::error::{CreError, Result};
use crate::model::{batch_loss_and_grad, prepare_bag, prepare_bags, ModelConfig, ModelParams, PreparedBag};
use crate::tape::Gradients;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Number of previous epochs the stopping rule averages over.
    pub window: usize,
    pub seed: u64,
    /// Negative sentences kept per epoch; `None` uses the largest
    /// per-relation sentence count of the training set.
    pub negative_target: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            window: 10,
            seed: 0,
            negative_target: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(CreError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CreError::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.lambda >= 0.0) {
            return Err(CreError::Config("epsilon must be positive and lambda nonnegative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.window == 0 || self.threads == 0 {
            return Err(CreError::Config(
                "batch size, max epochs, window and threads must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pairs: usize,
    pub wall_seconds: f64,
}

/// Stops once the current epoch loss is no less than the mean of the
/// previous `window` epoch losses.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: usize,
    history: Vec<f64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize) -> Self {
        ConvergenceMonitor {
            window,
            history: Vec::new(),
        }
    }

    /// Records an epoch loss; true when training should stop.
    pub fn push(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        if n <= self.window {
            return false;
        }
        let previous = &self.history[n - 1 - self.window..n - 1];
        let mean = previous.iter().sum::<f64>() / self.window as f64;
        loss >= mean
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// How an epoch loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

/// Runs `epoch_fn(epoch)` until the stopping rule fires or `max_epochs`
/// epochs have run. Returns the epoch losses and the reason.
pub fn run_epochs(
    max_epochs: usize,
    window: usize,
    mut epoch_fn: impl FnMut(usize) -> Result<f64>,
) -> Result<(Vec<f64>, StopReason)> {
    let mut monitor = ConvergenceMonitor::new(window);
    for epoch in 0..max_epochs {
        let loss = epoch_fn(epoch)?;
        if monitor.push(loss) {
            return Ok((monitor.history, StopReason::Converged));
        }
    }
    Ok((monitor.history, StopReason::MaxEpochs))
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    learning_rate: f64,
    step: i32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros = || -> Vec<Matrix> {
            params
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect()
        };
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            learning_rate: cfg.learning_rate,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((w, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the end of the lowest-loss epoch.
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

pub fn train(dataset: &Dataset, words: &WordEmbeddingTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.bags.is_empty() {
        return Err(CreError::EmptyDataset("training set has no bags".into()));
    }
    let mut params = ModelParams::init(
        cfg.model,
        dataset.relation_vocab.clone(),
        dataset.entity_vocab.clone(),
        cfg.seed,
    )?;
    let prepared = prepare_bags(&dataset.bags, &params, words)?;
    let target = cfg
        .negative_target
        .unwrap_or_else(|| dataset.largest_relation_sentence_count().max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CreError::Config(format!("thread pool: {e}")))?;

    let mut adam = Adam::new(&params, cfg);
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    let (_, stop) = run_epochs(cfg.max_epochs, cfg.window, |epoch| {
        let started = Instant::now();
        let view = resample_negatives(dataset, target, cfg.seed, epoch as u64);
        let mut order = view.indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 << 32 | epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedBag> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, _, grads) = pool.install(|| batch_loss_and_grad(&params, &batch, cfg.lambda, cfg.threads));
            if !loss.total.is_finite() {
                return Err(CreError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    pairs: batch.iter().map(|p| p.pair_id.replace('\t', "->")).collect::<Vec<_>>().join(", "),
                });
            }
            total += loss.total;
            adam.update(&mut params, &grads);
        }
        let mean_loss = total / order.len() as f64;
        logs.push(EpochLog {
            epoch,
            mean_loss,
            pairs: order.len(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: mean loss {mean_loss:.6} over {} pairs", order.len());
        if best.as_ref().is_none_or(|(l, _, _)| mean_loss < *l) {
            best = Some((mean_loss, epoch, params.clone()));
        }
        Ok(mean_loss)
    })?;

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        logs,
        best_epoch,
        stop,
    })
}

/// Denominator floor of the relative error. Central differences with step
/// `1e-5` carry about `1e-11` of absolute round-off, so smaller gradients
/// are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Random two-sentence bag over a small random vocabulary.
fn random_instance(cfg: &ModelConfig, num_relations: usize, rng: &mut ChaCha8Rng) -> (WordEmbeddingTable, EntityPairBag) {
    let mut names = vec![UNK.to_string()];
    names.extend((0..6).map(|i| format!("w{i}")));
    let vectors = Matrix::uniform(names.len(), cfg.word_dim, 1.0, rng);
    let words = WordEmbeddingTable::new(names, vectors).expect("distinct words with <UNK>");

    let sentences = (0..2)
        .map(|_| {
            let len = rng.gen_range(3..=cfg.max_length.max(3));
            let head_index = rng.gen_range(0..len);
            let tail_index = (head_index + rng.gen_range(1..len)) % len;
            let tokens = (0..len)
                .map(|k| match k {
                    _ if k == head_index => "H".to_string(),
                    _ if k == tail_index => "T".to_string(),
                    _ => format!("w{}", rng.gen_range(0..7)),
                })
                .collect();
            SentenceExample {
                tokens,
                head_index,
                tail_index,
                head_id: "H".into(),
                tail_id: "T".into(),
            }
        })
        .collect();
    let mut gold = BTreeSet::new();
    while gold.is_empty() {
        for r in 0..num_relations {
            if rng.gen_bool(0.4) {
                gold.insert(r);
            }
        }
    }
    let bag = EntityPairBag {
        head_id: "H".into(),
        tail_id: "T".into(),
        sentences,
        gold_relations: gold,
    };
    (words, bag)
}

/// Compares the analytic gradient of the regularized loss of one random
/// pair with central differences (step `1e-5`) for every learnable scalar.
pub fn grad_check(cfg: &TrainConfig, num_relations: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    if num_relations == 0 {
        return Err(CreError::Config("need at least one relation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (words, bag) = random_instance(&cfg.model, num_relations, &mut rng);
    let relations: Vec<String> = (0..num_relations).map(|r| format!("r{r}")).collect();
    let entities = vec!["H".to_string(), "O".to_string(), "T".to_string()];
    let params = ModelParams::init(cfg.model, relations, entities, rng.gen())?;
    let prepared = prepare_bag(&bag, &params, &words)?;

    let loss_of = |p: &ModelParams| batch_loss_and_grad(p, &[&prepared], cfg.lambda, 1).0.total;
    let (_, _, analytic) = batch_loss_and_grad(&params, &[&prepared], cfg.lambda, 1);

    let step = 1e-5;
    let names = params.tensor_names();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (t, name) in names.iter().enumerate() {
        for i in 0..analytic.0[t].len() {
            let original = probe.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = original + step;
            let plus = loss_of(&probe);
            probe.tensors_mut()[t].data_mut()[i] = original - step;
            let minus = loss_of(&probe);
            probe.tensors_mut()[t].data_mut()[i] = original;

            let fd = (plus - minus) / (2.0 * step);
            let a = analytic.0[t].data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
