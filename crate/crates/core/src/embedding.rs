//! Vector and sequence primitives shared by every other module: video ids,
//! embeddings, the hash tokenizer and cosine similarity.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default latent dimension `m`.
pub const DEFAULT_DIM: usize = 64;
/// Default vocabulary size `V` of the hash tokenizer.
pub const DEFAULT_VOCAB: usize = 4096;

/// Numeric video identifier. Serialized as a decimal string in JSON; both
/// strings and bare integers are accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VideoId(pub u64);

impl fmt::Display for VideoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for VideoId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for VideoId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(n) => Ok(VideoId(n)),
            Raw::Str(s) => s
                .trim()
                .parse()
                .map(VideoId)
                .map_err(|_| serde::de::Error::custom(format!("video id {s:?} is not an unsigned integer"))),
        }
    }
}

/// A point in the shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    pub fn new(values: Array1<f64>) -> Self {
        Embedding(values)
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Embedding(Array1::from(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(self.0.view())
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.dot(&other.0)
    }
}

/// An ordered, non-empty list of embeddings sharing one dimension, stored
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence(Array2<f64>);

impl EmbeddingSequence {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::ShapeError("embedding sequence must have at least one row".into()));
        }
        Ok(EmbeddingSequence(rows))
    }

    pub fn from_rows(rows: &[Embedding]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::ShapeError("embedding sequence must have at least one row".into()))?;
        let dim = first.dim();
        let mut out = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.dim() != dim {
                return Err(Error::ShapeError(format!(
                    "row {i} has dimension {}, expected {dim}",
                    row.dim()
                )));
            }
            out.row_mut(i).assign(row.values());
        }
        Self::new(out)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> Embedding {
        Embedding(self.0.row(i).to_owned())
    }

    /// Unnormalized mean of the rows.
    pub fn mean(&self) -> Embedding {
        Embedding(self.0.mean_axis(Axis(0)).expect("non-empty sequence"))
    }
}

/// Token ids in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whitespace tokenizer mapping lowercased words into a fixed vocabulary by
/// 64-bit FNV-1a hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { vocab: DEFAULT_VOCAB }
    }
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab > 0 && vocab <= u32::MAX as usize, "vocabulary size out of range");
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let ids: Vec<u32> = text
            .split_whitespace()
            .map(|word| (fnv1a(word.to_lowercase().as_bytes()) % self.vocab as u64) as u32)
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(TokenSequence(ids))
    }
}

/// Tokenize with the default vocabulary size.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    Tokenizer::default().tokenize(text)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub(crate) fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeError(format!(
            "cosine of dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    normalized(v.values().view()).map(Embedding)
}

pub(crate) fn normalized(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok(v.mapv(|x| x / n))
}

/// Pairwise similarities between two sets of embeddings; `B×B` during
/// training, `B×N` for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn new(entries: Array2<f64>) -> Self {
        SimilarityMatrix(entries)
    }

    /// Dot products of the rows of `left` with the rows of `right`. Equal to
    /// cosine similarity when both sides are unit-norm.
    pub fn from_unit_rows(left: &Array2<f64>, right: &Array2<f64>) -> Result<Self> {
        if left.ncols() != right.ncols() {
            return Err(Error::ShapeError(format!(
                "similarity of dimensions {} and {}",
                left.ncols(),
                right.ncols()
            )));
        }
        Ok(SimilarityMatrix(left.dot(&right.t())))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.0.nrows() == self.0.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }
}
