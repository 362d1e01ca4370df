//! Sentence encoders mapping a sentence matrix to per-relation embeddings.
//!
//! Every encoder reduces the valid rows of its input to one hidden vector
//! (CNN: max-pool, LSTM: final state, transformer: mean-pool). A shared head
//! then applies `tanh` and a dense map to `|R| * K` values, read as an
//! `|R| x K` matrix whose row `r` embeds relation `r`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::SentenceMatrix;
use crate::error::{CreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Lstm,
    Transformer,
}

impl FromStr for EncoderKind {
    type Err = CreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(EncoderKind::Cnn),
            "lstm" => Ok(EncoderKind::Lstm),
            "transformer" => Ok(EncoderKind::Transformer),
            other => Err(CreError::Config(format!(
                "unknown encoder '{other}' (expected cnn, lstm or transformer)"
            ))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Lstm => "lstm",
            EncoderKind::Transformer => "transformer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    /// Convolution window (CNN only).
    pub window: usize,
    /// Encoder blocks (transformer only).
    pub layers: usize,
    /// Attention heads (transformer only).
    pub heads: usize,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind) -> Self {
        let hidden_dim = match kind {
            EncoderKind::Cnn | EncoderKind::Lstm => 230,
            EncoderKind::Transformer => 100,
        };
        EncoderConfig {
            kind,
            hidden_dim,
            window: 3,
            layers: 2,
            heads: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(CreError::Config("encoder.hidden_dim must be positive".into()));
        }
        match self.kind {
            EncoderKind::Cnn if self.window % 2 == 0 => Err(CreError::Config(format!(
                "encoder.window must be odd, got {}",
                self.window
            ))),
            EncoderKind::Transformer if self.layers == 0 || self.heads == 0 => Err(CreError::Config(
                "encoder.layers and encoder.heads must be positive".into(),
            )),
            EncoderKind::Transformer if self.hidden_dim % self.heads != 0 => Err(CreError::Config(format!(
                "encoder.hidden_dim {} is not divisible by encoder.heads {}",
                self.hidden_dim, self.heads
            ))),
            _ => Ok(()),
        }
    }

    /// Shapes of the encoder's tensors, in storage order.
    pub fn tensor_shapes(&self, input_dim: usize) -> Vec<(String, (usize, usize))> {
        let h = self.hidden_dim;
        let mut out = Vec::new();
        let mut push = |name: String, shape| out.push((name, shape));
        match self.kind {
            EncoderKind::Cnn => {
                push("cnn.weight".into(), (self.window * input_dim, h));
                push("cnn.bias".into(), (1, h));
            }
            EncoderKind::Lstm => {
                push("lstm.input_weight".into(), (input_dim, 4 * h));
                push("lstm.hidden_weight".into(), (h, 4 * h));
                push("lstm.bias".into(), (1, 4 * h));
            }
            EncoderKind::Transformer => {
                push("front.weight".into(), (input_dim, h));
                push("front.bias".into(), (1, h));
                for l in 0..self.layers {
                    for name in ["query", "key", "value", "output"] {
                        push(format!("layer{l}.{name}.weight"), (h, h));
                        push(format!("layer{l}.{name}.bias"), (1, h));
                    }
                    push(format!("layer{l}.norm1.gain"), (1, h));
                    push(format!("layer{l}.norm1.bias"), (1, h));
                    push(format!("layer{l}.ff1.weight"), (h, 4 * h));
                    push(format!("layer{l}.ff1.bias"), (1, 4 * h));
                    push(format!("layer{l}.ff2.weight"), (4 * h, h));
                    push(format!("layer{l}.ff2.bias"), (1, h));
                    push(format!("layer{l}.norm2.gain"), (1, h));
                    push(format!("layer{l}.norm2.bias"), (1, h));
                }
            }
        }
        out
    }
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub(crate) fn init_tensor<R: Rng + ?Sized>(name: &str, shape: (usize, usize), rng: &mut R) -> Matrix {
    let (rows, cols) = shape;
    if name.ends_with(".gain") {
        Matrix::from_vec(rows, cols, vec![1.0; rows * cols])
    } else if name.ends_with(".bias") {
        Matrix::zeros(rows, cols)
    } else {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::uniform(rows, cols, limit, rng)
    }
}

/// Encoder tensors in the order given by [`EncoderConfig::tensor_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: Vec<Matrix>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes(input_dim)
            .iter()
            .map(|(name, shape)| init_tensor(name, *shape, rng))
            .collect();
        Ok(EncoderParams { config, tensors })
    }
}

/// Dense `hidden -> |R| * K` map applied after `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(hidden_dim: usize, num_relations: usize, kb_dim: usize, rng: &mut R) -> Self {
        let out = num_relations * kb_dim;
        ProjectionHead {
            weight: init_tensor("projection.weight", (hidden_dim, out), rng),
            bias: Matrix::zeros(1, out),
        }
    }
}

/// One sentence's `|R| x K` contextualized relation embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CreTensor(pub Matrix);

/// Runs the encoder over `input` (the valid rows only) and returns a `1 x H`
/// hidden vector. `vars` are the encoder tensors registered on the tape.
pub(crate) fn encode_hidden(tape: &mut Tape, config: &EncoderConfig, vars: &[Var], input: Var) -> Var {
    match config.kind {
        EncoderKind::Cnn => {
            let windows = tape.unfold_rows(input, config.window);
            let conv = tape.matmul(windows, vars[0]);
            let conv = tape.add_row(conv, vars[1]);
            tape.max_rows(conv)
        }
        EncoderKind::Lstm => lstm_hidden(tape, config.hidden_dim, vars, input),
        EncoderKind::Transformer => transformer_hidden(tape, config, vars, input),
    }
}

fn lstm_hidden(tape: &mut Tape, h: usize, vars: &[Var], input: Var) -> Var {
    let steps = tape.value(input).rows();
    let projected = tape.matmul(input, vars[0]);
    let projected = tape.add_row(projected, vars[2]);
    let mut state: Option<(Var, Var)> = None;
    for t in 0..steps {
        let mut gates = tape.slice_rows(projected, t, t + 1);
        if let Some((hidden, _)) = state {
            let recurrent = tape.matmul(hidden, vars[1]);
            gates = tape.add(gates, recurrent);
        }
        let i = tape.slice_cols(gates, 0, h);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, h, 2 * h);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * h, 3 * h);
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * h, 4 * h);
        let o = tape.sigmoid(o);
        let mut cell = tape.mul(i, g);
        if let Some((_, prev_cell)) = state {
            let kept = tape.mul(f, prev_cell);
            cell = tape.add(cell, kept);
        }
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed);
        state = Some((hidden, cell));
    }
    state.expect("at least one step").0
}

fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Var {
    let y = tape.matmul(x, weight);
    tape.add_row(y, bias)
}

fn transformer_hidden(tape: &mut Tape, config: &EncoderConfig, vars: &[Var], input: Var) -> Var {
    let n = tape.value(input).rows();
    let h = config.hidden_dim;
    let head_dim = h / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let front = linear(tape, input, vars[0], vars[1]);
    let mut z = tape.tanh(front);
    for layer in 0..config.layers {
        let p = &vars[2 + layer * 16..2 + (layer + 1) * 16];
        let q = linear(tape, z, p[0], p[1]);
        let k = linear(tape, z, p[2], p[3]);
        let v = linear(tape, z, p[4], p[5]);
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let (a, b) = (hd * head_dim, (hd + 1) * head_dim);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let kt = tape.transpose(kh);
            let logits = tape.matmul(qh, kt);
            let logits = tape.scale(logits, scale);
            let weights = tape.masked_softmax_rows(logits, n);
            heads.push(tape.matmul(weights, vh));
        }
        let merged = tape.concat_cols(&heads);
        let attended = linear(tape, merged, p[6], p[7]);
        let residual = tape.add(z, attended);
        let normed = tape.layer_norm_rows(residual);
        let normed = tape.mul_row(normed, p[8]);
        z = tape.add_row(normed, p[9]);

        let inner = linear(tape, z, p[10], p[11]);
        let inner = tape.relu(inner);
        let ff = linear(tape, inner, p[12], p[13]);
        let residual = tape.add(z, ff);
        let normed = tape.layer_norm_rows(residual);
        let normed = tape.mul_row(normed, p[14]);
        z = tape.add_row(normed, p[15]);
    }
    tape.mean_rows(z)
}

/// `tanh`, dense map and reshape to `|R| x K`.
pub(crate) fn project_relations(
    tape: &mut Tape,
    hidden: Var,
    weight: Var,
    bias: Var,
    num_relations: usize,
    kb_dim: usize,
) -> Var {
    let activated = tape.tanh(hidden);
    let flat = linear(tape, activated, weight, bias);
    tape.reshape(flat, num_relations, kb_dim)
}

/// Encodes a sentence matrix with frozen parameters.
pub fn encode(
    m: &SentenceMatrix,
    encoder: &EncoderParams,
    head: &ProjectionHead,
    num_relations: usize,
    kb_dim: usize,
) -> Result<CreTensor> {
    if m.valid_length < 1 {
        return Err(CreError::InvalidInput("sentence matrix has no valid rows".into()));
    }
    let expected = encoder.config.tensor_shapes(m.matrix.cols());
    if expected.len() != encoder.tensors.len()
        || expected.iter().zip(&encoder.tensors).any(|((_, s), t)| *s != t.shape())
    {
        return Err(CreError::Dimension(format!(
            "encoder parameters do not match input width {}",
            m.matrix.cols()
        )));
    }
    if head.weight.shape() != (encoder.config.hidden_dim, num_relations * kb_dim) {
        return Err(CreError::Dimension("projection head shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = encoder
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t))
        .collect();
    let n = vars.len();
    let w = tape.param(n, &head.weight);
    let b = tape.param(n + 1, &head.bias);
    let input = tape.constant(m.valid_rows());
    let hidden = encode_hidden(&mut tape, &encoder.config, &vars, input);
    let cre = project_relations(&mut tape, hidden, w, b, num_relations, kb_dim);
    Ok(CreTensor(tape.value(cre).clone()))
}

fn encode_kind(
    kind: EncoderKind,
    m: &SentenceMatrix,
    encoder: &EncoderParams,
    head: &ProjectionHead,
    num_relations: usize,
    kb_dim: usize,
) -> Result<CreTensor> {
    if encoder.config.kind != kind {
        return Err(CreError::Config(format!(
            "parameters belong to a {} encoder, not {kind}",
            encoder.config.kind
        )));
    }
    encode(m, encoder, head, num_relations, kb_dim)
}

pub fn encode_cnn(m: &SentenceMatrix, encoder: &EncoderParams, head: &ProjectionHead, num_relations: usize, kb_dim: usize) -> Result<CreTensor> {
    encode_kind(EncoderKind::Cnn, m, encoder, head, num_relations, kb_dim)
}

pub fn encode_lstm(m: &SentenceMatrix, encoder: &EncoderParams, head: &ProjectionHead, num_relations: usize, kb_dim: usize) -> Result<CreTensor> {
    encode_kind(EncoderKind::Lstm, m, encoder, head, num_relations, kb_dim)
}

pub fn encode_transformer(m: &SentenceMatrix, encoder: &EncoderParams, head: &ProjectionHead, num_relations: usize, kb_dim: usize) -> Result<CreTensor> {
    encode_kind(EncoderKind::Transformer, m, encoder, head, num_relations, kb_dim)
}
