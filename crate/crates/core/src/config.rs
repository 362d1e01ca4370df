//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are rejected. Later assignments override earlier
//! ones, so `--set` overrides are applied after the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{CreError, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train_set: Option<PathBuf>,
    pub test_set: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub epoch_log: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub pr_csv: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    /// Synthetic generator settings; the word dimension comes from
    /// `embedding.word_dim`.
    pub synthetic: SyntheticSpec,
    pub data_seed: u64,
    pub top_n: usize,
    pub test_fraction: f64,
    /// Negative sentences kept in the test set; `None` uses the largest
    /// per-relation sentence count of the test positives.
    pub test_negative_target: Option<usize>,
    pub train: TrainConfig,
    /// Unset means the default for the configured encoder kind.
    hidden_dim: Option<usize>,
    /// Cut-offs for the pooled PR curves.
    pub eval_ks: Vec<usize>,
    pub mrr_ks: Vec<usize>,
    pub predict_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            synthetic: SyntheticSpec::default(),
            data_seed: 0,
            top_n: 500_000,
            test_fraction: 0.25,
            test_negative_target: None,
            train: TrainConfig::default(),
            hidden_dim: None,
            eval_ks: vec![1, 3, 5],
            mrr_ks: vec![3, 5],
            predict_k: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CreError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    if list.is_empty() || list.contains(&0) {
        return Err(CreError::Config(format!("{key}: expected positive integers, got '{value}'")));
    }
    Ok(list)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CreError::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected 'key = value'".into(),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| CreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CreError::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim_matches('"');
        let path = || Some(PathBuf::from(value));
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "paths.corpus" => self.paths.corpus = path(),
            "paths.kb" => self.paths.kb = path(),
            "paths.embeddings" => self.paths.embeddings = path(),
            "paths.train_set" => self.paths.train_set = path(),
            "paths.test_set" => self.paths.test_set = path(),
            "paths.checkpoint" => self.paths.checkpoint = path(),
            "paths.epoch_log" => self.paths.epoch_log = path(),
            "paths.metrics" => self.paths.metrics = path(),
            "paths.pr_csv" => self.paths.pr_csv = path(),
            "paths.predictions" => self.paths.predictions = path(),
            "synthetic.entities" => self.synthetic.entities = parse(key, value)?,
            "synthetic.relations" => self.synthetic.relations = parse(key, value)?,
            "synthetic.templates" => self.synthetic.templates = parse(key, value)?,
            "synthetic.pairs_per_relation" => self.synthetic.pairs_per_relation = parse(key, value)?,
            "synthetic.negatives" => self.synthetic.negatives = parse(key, value)?,
            "synthetic.sentences_per_pair" => self.synthetic.sentences_per_pair = parse(key, value)?,
            "synthetic.vocab" => self.synthetic.vocab = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "data.top_n" => self.top_n = parse(key, value)?,
            "data.test_fraction" => self.test_fraction = parse(key, value)?,
            "data.test_negative_target" => self.test_negative_target = parse_auto(key, value)?,
            "embedding.word_dim" => m.word_dim = parse(key, value)?,
            "embedding.position_dim" => m.position_dim = parse(key, value)?,
            "embedding.max_distance" => m.max_distance = parse(key, value)?,
            "embedding.max_length" => m.max_length = parse(key, value)?,
            "encoder.kind" => m.encoder.kind = parse(key, value)?,
            "encoder.hidden_dim" => self.hidden_dim = Some(parse(key, value)?),
            "encoder.window" => m.encoder.window = parse(key, value)?,
            "encoder.layers" => m.encoder.layers = parse(key, value)?,
            "encoder.heads" => m.encoder.heads = parse(key, value)?,
            "kb.model" => m.kb = parse(key, value)?,
            "kb.dim" => m.kb_dim = parse(key, value)?,
            "objective.aggregation" => m.aggregation = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.epsilon" => t.epsilon = parse(key, value)?,
            "train.lambda" => t.lambda = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.window" => t.window = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.negative_target" => t.negative_target = parse_auto(key, value)?,
            "eval.k" => self.eval_ks = parse_list(key, value)?,
            "eval.mrr_k" => self.mrr_ks = parse_list(key, value)?,
            "predict.k" => self.predict_k = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            _ => return Err(CreError::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.train.model;
        m.encoder.hidden_dim = self
            .hidden_dim
            .unwrap_or_else(|| EncoderConfig::new(m.encoder.kind).hidden_dim);
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            ..self.train
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            word_dim: self.train.model.word_dim,
            ..self.synthetic
        }
    }

    /// Checks every setting before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.top_n == 0 {
            return Err(CreError::Config("data.top_n must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CreError::Config(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.predict_k == 0 {
            return Err(CreError::Config("predict.k must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = self.train_config();
        let m = t.model;
        let s = &self.synthetic;
        let p = &self.paths;
        vec![
            ("paths.corpus", show_path(&p.corpus)),
            ("paths.kb", show_path(&p.kb)),
            ("paths.embeddings", show_path(&p.embeddings)),
            ("paths.train_set", show_path(&p.train_set)),
            ("paths.test_set", show_path(&p.test_set)),
            ("paths.checkpoint", show_path(&p.checkpoint)),
            ("paths.epoch_log", show_path(&p.epoch_log)),
            ("paths.metrics", show_path(&p.metrics)),
            ("paths.pr_csv", show_path(&p.pr_csv)),
            ("paths.predictions", show_path(&p.predictions)),
            ("synthetic.entities", s.entities.to_string()),
            ("synthetic.relations", s.relations.to_string()),
            ("synthetic.templates", s.templates.to_string()),
            ("synthetic.pairs_per_relation", s.pairs_per_relation.to_string()),
            ("synthetic.negatives", s.negatives.to_string()),
            ("synthetic.sentences_per_pair", s.sentences_per_pair.to_string()),
            ("synthetic.vocab", s.vocab.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.top_n", self.top_n.to_string()),
            ("data.test_fraction", self.test_fraction.to_string()),
            ("data.test_negative_target", show_auto(self.test_negative_target)),
            ("embedding.word_dim", m.word_dim.to_string()),
            ("embedding.position_dim", m.position_dim.to_string()),
            ("embedding.max_distance", m.max_distance.to_string()),
            ("embedding.max_length", m.max_length.to_string()),
            ("encoder.kind", m.encoder.kind.to_string()),
            ("encoder.hidden_dim", m.encoder.hidden_dim.to_string()),
            ("encoder.window", m.encoder.window.to_string()),
            ("encoder.layers", m.encoder.layers.to_string()),
            ("encoder.heads", m.encoder.heads.to_string()),
            ("kb.model", m.kb.to_string()),
            ("kb.dim", m.kb_dim.to_string()),
            ("objective.aggregation", m.aggregation.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.epsilon", t.epsilon.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.window", t.window.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.negative_target", show_auto(t.negative_target)),
            ("eval.k", show_list(&self.eval_ks)),
            ("eval.mrr_k", show_list(&self.mrr_ks)),
            ("predict.k", self.predict_k.to_string()),
            ("threads", t.threads.to_string()),
        ]
    }

    pub fn require<'a>(&self, key: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| CreError::Config(format!("{key} is not set")))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("encoder.kind", "transformer").unwrap();
        cfg.set("paths.corpus", "out/c.jsonl").unwrap();
        cfg.set("train.negative_target", "40").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, cfg.to_string()).unwrap();
        let back = RunConfig::from_file(&file).unwrap();
        assert_eq!(back.entries(), cfg.entries());
        assert_eq!(back.model_config().encoder.hidden_dim, 100);
    }

    #[test]
    fn hidden_dim_follows_kind_unless_set() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_config().encoder.hidden_dim, 230);
        cfg.apply_override("encoder.kind=transformer").unwrap();
        assert_eq!(cfg.model_config().encoder.hidden_dim, 100);
        cfg.apply_override("encoder.hidden_dim = 32").unwrap();
        cfg.apply_override("encoder.kind=lstm").unwrap();
        assert_eq!(cfg.model_config().encoder.hidden_dim, 32);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("encoder.depth", "3").is_err());
        assert!(cfg.set("kb.model", "rotate").is_err());
        assert!(cfg.set("kb.dim", "ten").is_err());
        assert!(cfg.apply_override("threads").is_err());
        assert!(cfg.set("eval.k", "1,0").is_err());

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.cfg");
        fs::write(&file, "# ok\n\nthreads = 2\nnonsense\n").unwrap();
        let err = RunConfig::from_file(&file).unwrap_err().to_string();
        assert!(err.contains(":4:"), "{err}");
    }

    #[test]
    fn validation_catches_inconsistent_dims() {
        let mut cfg = RunConfig::default();
        cfg.set("kb.model", "complex").unwrap();
        cfg.set("kb.dim", "7").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("kb.dim", "8").unwrap();
        assert!(cfg.validate().is_ok());
        cfg.set("data.test_fraction", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
