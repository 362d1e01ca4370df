//! Sentence-to-matrix embedding: fixed word vectors concatenated with two
//! learned positional embeddings, plus the learned entity-embedding table.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::data::SentenceExample;
use crate::error::{CreError, Result};
use crate::tensor::Matrix;

pub const UNK: &str = "<UNK>";

/// Pretrained word vectors. Never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
    unk: usize,
}

impl WordEmbeddingTable {
    pub fn new(words: Vec<String>, vectors: Matrix) -> Result<Self> {
        if words.len() != vectors.rows() {
            return Err(CreError::Dimension(format!(
                "{} words but {} vectors",
                words.len(),
                vectors.rows()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(CreError::InvalidInput(format!("duplicate word '{w}'")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| CreError::InvalidInput(format!("word embeddings lack {UNK}")))?;
        Ok(WordEmbeddingTable {
            words,
            index,
            vectors,
            unk,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_vector(&self) -> &[f64] {
        self.vectors.row(self.unk)
    }

    /// Vector for `word`, or the `<UNK>` vector for out-of-vocabulary words.
    pub fn vector(&self, word: &str) -> &[f64] {
        let i = self.index.get(word).copied().unwrap_or(self.unk);
        self.vectors.row(i)
    }

    /// Parses the text format: a `V W` header, then `V` lines of
    /// `word f_1 ... f_W`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| CreError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| CreError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| CreError::io(path, e))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
        let [vocab, dim] = dims[..] else {
            return Err(parse_err(1, "header must be 'V W'".into()));
        };
        let mut words = Vec::with_capacity(vocab);
        let mut data = Vec::with_capacity(vocab * dim);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| CreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap_or_default().to_string();
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i + 2, format!("bad float: {e}")))?;
            if values.len() != dim {
                return Err(parse_err(
                    i + 2,
                    format!("expected {dim} values, got {}", values.len()),
                ));
            }
            words.push(word);
            data.extend(values);
        }
        if words.len() != vocab {
            return Err(parse_err(1, format!("header says {vocab} words, file has {}", words.len())));
        }
        WordEmbeddingTable::new(words, Matrix::from_vec(vocab, dim, data))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (i, w) in self.words.iter().enumerate() {
            write!(out, "{w}")?;
            for v in self.vectors.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Learned vectors indexed by a clamped relative distance in `[-D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbeddingTable {
    pub max_distance: usize,
    pub table: Matrix,
}

impl PositionalEmbeddingTable {
    pub fn init<R: Rng + ?Sized>(max_distance: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        PositionalEmbeddingTable {
            max_distance,
            table: Matrix::uniform(2 * max_distance + 1, dim, scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Table row for a relative distance; clamped.
    pub fn row_index(&self, distance: i64) -> usize {
        let d = self.max_distance as i64;
        (distance.clamp(-d, d) + d) as usize
    }

    pub fn vector(&self, distance: i64) -> &[f64] {
        self.table.row(self.row_index(distance))
    }
}

/// Learned entity vectors. For ComplEx the first half of each vector holds
/// real parts and the second half imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddingTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    pub vectors: Matrix,
}

impl EntityEmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(CreError::Dimension(format!(
                "{} entities but {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        let index = ids.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        Ok(EntityEmbeddingTable { ids, index, vectors })
    }

    pub fn init<R: Rng + ?Sized>(ids: Vec<String>, dim: usize, scale: f64, rng: &mut R) -> Self {
        let vectors = Matrix::uniform(ids.len(), dim, scale, rng);
        EntityEmbeddingTable::new(ids, vectors).expect("row count matches ids")
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| CreError::UnknownEntity(id.to_string()))
    }
}

pub fn lookup_entity<'a>(id: &str, table: &'a EntityEmbeddingTable) -> Result<&'a [f64]> {
    Ok(table.vectors.row(table.position(id)?))
}

/// `clamp(word_pos - entity_pos, -D, D)`.
pub fn positional_index(word_pos: usize, entity_pos: usize, max_distance: usize) -> i64 {
    let d = max_distance as i64;
    (word_pos as i64 - entity_pos as i64).clamp(-d, d)
}

/// The pieces of a sentence matrix before positional vectors are looked up:
/// word vectors for the kept window and positional-table rows for each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceLayout {
    pub words: Matrix,
    pub head_rows: Vec<usize>,
    pub tail_rows: Vec<usize>,
}

impl SentenceLayout {
    pub fn valid_length(&self) -> usize {
        self.words.rows()
    }
}

/// First kept token when a sentence longer than `max_len` is cut to a window
/// containing both entities.
fn window_start(s: &SentenceExample, max_len: usize) -> Result<usize> {
    let len = s.tokens.len();
    if len <= max_len {
        return Ok(0);
    }
    let lo = s.head_index.min(s.tail_index);
    let hi = s.head_index.max(s.tail_index);
    if hi - lo + 1 > max_len {
        return Err(CreError::EntitiesOutsideWindow {
            len,
            head: s.head_index,
            tail: s.tail_index,
            max_len,
        });
    }
    let slack = max_len - (hi - lo + 1);
    Ok(lo.saturating_sub(slack / 2).min(len - max_len))
}

pub fn layout_sentence(
    s: &SentenceExample,
    words: &WordEmbeddingTable,
    max_len: usize,
    max_distance: usize,
) -> Result<SentenceLayout> {
    s.validate()?;
    if max_len < 2 {
        return Err(CreError::Config(format!("max length must be at least 2, got {max_len}")));
    }
    let start = window_start(s, max_len)?;
    let end = (start + max_len).min(s.tokens.len());
    let n = end - start;
    let mut word_rows = Matrix::zeros(n, words.dim());
    let d = max_distance as i64;
    let mut head_rows = Vec::with_capacity(n);
    let mut tail_rows = Vec::with_capacity(n);
    for (row, k) in (start..end).enumerate() {
        let v = if k == s.head_index || k == s.tail_index {
            words.unk_vector()
        } else {
            words.vector(&s.tokens[k])
        };
        word_rows.row_mut(row).copy_from_slice(v);
        head_rows.push((positional_index(k, s.head_index, max_distance) + d) as usize);
        tail_rows.push((positional_index(k, s.tail_index, max_distance) + d) as usize);
    }
    Ok(SentenceLayout {
        words: word_rows,
        head_rows,
        tail_rows,
    })
}

/// An `L x (W + 2P)` sentence matrix; rows past `valid_length` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceMatrix {
    pub matrix: Matrix,
    pub valid_length: usize,
}

impl SentenceMatrix {
    pub fn valid_rows(&self) -> Matrix {
        let cols = self.matrix.cols();
        Matrix::from_vec(
            self.valid_length,
            cols,
            self.matrix.data()[..self.valid_length * cols].to_vec(),
        )
    }
}

pub fn encode_sentence_matrix(
    s: &SentenceExample,
    words: &WordEmbeddingTable,
    head_positions: &PositionalEmbeddingTable,
    tail_positions: &PositionalEmbeddingTable,
    max_len: usize,
) -> Result<SentenceMatrix> {
    if head_positions.max_distance != tail_positions.max_distance || head_positions.dim() != tail_positions.dim() {
        return Err(CreError::Dimension("head and tail positional tables differ".into()));
    }
    let layout = layout_sentence(s, words, max_len, head_positions.max_distance)?;
    let (w, p) = (words.dim(), head_positions.dim());
    let mut matrix = Matrix::zeros(max_len, w + 2 * p);
    for k in 0..layout.valid_length() {
        let row = matrix.row_mut(k);
        row[..w].copy_from_slice(layout.words.row(k));
        row[w..w + p].copy_from_slice(head_positions.table.row(layout.head_rows[k]));
        row[w + p..].copy_from_slice(tail_positions.table.row(layout.tail_rows[k]));
    }
    Ok(SentenceMatrix {
        matrix,
        valid_length: layout.valid_length(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bear() -> SentenceExample {
        SentenceExample {
            tokens: ["A", "bear", "entered", "the", "fridge"].map(String::from).to_vec(),
            head_index: 1,
            tail_index: 4,
            head_id: "E1".into(),
            tail_id: "E2".into(),
        }
    }

    fn words(dim: usize) -> WordEmbeddingTable {
        let names: Vec<String> = [UNK, "A", "bear", "entered", "the", "fridge"].map(String::from).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        WordEmbeddingTable::new(names.clone(), Matrix::uniform(names.len(), dim, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn positional_indices_from_example() {
        assert_eq!(positional_index(0, 1, 100), -1);
        assert_eq!(positional_index(0, 4, 100), -4);
        assert_eq!(positional_index(2, 1, 100), 1);
        assert_eq!(positional_index(2, 4, 100), -2);
        assert_eq!(positional_index(3, 3, 100), 0);
        assert_eq!(positional_index(0, 200, 100), -100);
        assert_eq!(positional_index(300, 0, 100), 100);
    }

    #[test]
    fn sentence_matrix_shape_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = PositionalEmbeddingTable::init(100, 2, 0.1, &mut rng);
        let tail = PositionalEmbeddingTable::init(100, 2, 0.1, &mut rng);
        let w = words(4);
        let m = encode_sentence_matrix(&bear(), &w, &head, &tail, 8).unwrap();
        assert_eq!(m.matrix.shape(), (8, 8));
        assert_eq!(m.valid_length, 5);
        for r in 5..8 {
            assert!(m.matrix.row(r).iter().all(|&x| x == 0.0));
        }
        // "entered": +1 from the head, -2 from the tail
        assert_eq!(&m.matrix.row(2)[4..6], head.vector(1));
        assert_eq!(&m.matrix.row(2)[6..8], tail.vector(-2));
        assert_eq!(&m.matrix.row(2)[..4], w.vector("entered"));
    }

    #[test]
    fn entity_tokens_use_unk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = PositionalEmbeddingTable::init(10, 2, 0.1, &mut rng);
        let tail = head.clone();
        let w = words(4);
        let m = encode_sentence_matrix(&bear(), &w, &head, &tail, 8).unwrap();
        assert_eq!(&m.matrix.row(1)[..4], w.unk_vector());
        assert_eq!(&m.matrix.row(4)[..4], w.unk_vector());
        assert_ne!(w.vector("bear"), w.unk_vector());
    }

    #[test]
    fn truncation_keeps_entities() {
        let w = words(3);
        let mut s = bear();
        s.tokens = (0..10).map(|i| format!("t{i}")).collect();
        s.head_index = 1;
        s.tail_index = 9;
        assert!(matches!(
            layout_sentence(&s, &w, 8, 10),
            Err(CreError::EntitiesOutsideWindow { .. })
        ));
        s.head_index = 6;
        s.tail_index = 8;
        let layout = layout_sentence(&s, &w, 4, 10).unwrap();
        assert_eq!(layout.valid_length(), 4);
        // both anchors present: the zero-distance rows
        assert!(layout.head_rows.contains(&10));
        assert!(layout.tail_rows.contains(&10));
    }

    #[test]
    fn unknown_entity_lookup_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = EntityEmbeddingTable::init(vec!["E1".into(), "E2".into()], 3, 0.1, &mut rng);
        assert_eq!(lookup_entity("E2", &table).unwrap(), table.vectors.row(1));
        assert!(matches!(lookup_entity("E7", &table), Err(CreError::UnknownEntity(_))));
    }

    #[test]
    fn word_file_round_trip() {
        let w = words(3);
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&buf).unwrap();
        let back = WordEmbeddingTable::load(f.path()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn word_file_without_unk_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1 2\nhello 0.1 0.2").unwrap();
        assert!(WordEmbeddingTable::load(f.path()).is_err());
    }
}
