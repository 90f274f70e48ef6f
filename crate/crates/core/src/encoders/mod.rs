//! The frozen visual provider `g`, the frozen text encoder `e`, the
//! trainable multi-modal encoder `f`, and the joint fusion that sums the
//! pairwise grounded embeddings.
//!
//! `e` and `f` share one architecture (self-attention, feed-forward, mean
//! pooling, projection); `f` adds a cross-attention layer to every block.
//! At initialization `e` is an exact copy of `f` minus its cross-attention,
//! and it never changes afterwards.

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    normalized, Embedding, EmbeddingSequence, TokenSequence, Tokenizer, VideoId, DEFAULT_DIM,
    DEFAULT_VOCAB,
};
use crate::error::{Error, Result};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Attention, Block, FeedForward, Tower};
use layers::TowerCache;

/// Uniform half-width for trainable weights at initialization.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Latent dimension `m`.
    pub dim: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: DEFAULT_DIM,
            hidden: 64,
            vocab: DEFAULT_VOCAB,
            heads: 4,
            blocks: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let EncoderConfig { dim, hidden, vocab, heads, blocks } = *self;
        if dim == 0 || hidden == 0 || vocab == 0 || heads == 0 || blocks == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if hidden % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden width {hidden} is not divisible by {heads} heads"
            )));
        }
        if vocab > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocabulary too large".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab)
    }
}

/// All encoder state: the frozen token table and text encoder, the
/// trainable multi-modal encoder and the raw (pre-softplus) loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `V×h`, frozen, shared by `e` and `f`.
    pub token_table: Array2<f64>,
    /// Frozen text encoder `e`.
    pub text: Tower,
    /// Trainable multi-modal encoder `f`.
    pub fusion: Tower,
    /// Raw scalars mapped through softplus to (λ, μ, δ).
    pub raw_loss_weights: [f64; 3],
}

/// Gradients for everything trainable in [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub fusion: Tower,
    pub raw_loss_weights: [f64; 3],
}

impl ParamGrads {
    pub fn zeros_for(params: &EncoderParams) -> Self {
        ParamGrads {
            fusion: params.fusion.zeros_like(),
            raw_loss_weights: [0.0; 3],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.fusion.add_assign(&other.fusion);
        for (a, b) in self.raw_loss_weights.iter_mut().zip(other.raw_loss_weights) {
            *a += b;
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-INIT_SCALE..INIT_SCALE))
}

fn fusion_tower(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Tower {
    let h = cfg.hidden;
    let attn = |rng: &mut ChaCha8Rng, src: usize| Attention {
        wq: uniform(rng, h, h),
        wk: uniform(rng, src, h),
        wv: uniform(rng, src, h),
        wo: uniform(rng, h, h),
    };
    let blocks = (0..cfg.blocks)
        .map(|_| {
            let self_attn = attn(rng, h);
            let cross_attn = Some(attn(rng, cfg.dim));
            let ffn = FeedForward {
                w1: uniform(rng, h, 4 * h),
                w2: uniform(rng, 4 * h, h),
            };
            Block { self_attn, cross_attn, ffn }
        })
        .collect();
    Tower {
        blocks,
        proj: uniform(rng, h, cfg.dim),
    }
}

/// Raw weight whose softplus is 1/3.
pub fn default_raw_loss_weight() -> f64 {
    ((1.0f64 / 3.0).exp() - 1.0).ln()
}

impl EncoderParams {
    /// Seeded initialization: unit-normalized Gaussian token rows, then
    /// uniform weights for `f`; `e` copies `f` without cross-attention.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut token_table = Array2::<f64>::zeros((config.vocab, config.hidden));
        for mut row in token_table.rows_mut() {
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let fusion = fusion_tower(&mut rng, &config);
        let mut text = fusion.clone();
        for b in &mut text.blocks {
            b.cross_attn = None;
        }
        Ok(EncoderParams {
            config,
            token_table,
            text,
            fusion,
            raw_loss_weights: [default_raw_loss_weight(); 3],
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.config.tokenizer()
    }

    /// Parameters that never change during training.
    pub fn frozen_tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.token_table];
        out.extend(self.text.tensors());
        out
    }

    /// FNV-1a checksum over the bit patterns of the frozen parameters.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.frozen_tensors() {
            for x in t.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.fusion
            .tensors()
            .into_iter()
            .chain(self.frozen_tensors())
            .all(|t| t.iter().all(|x| x.is_finite()))
            && self.raw_loss_weights.iter().all(|x| x.is_finite())
    }

    /// Applies `update(param, grad)` to every trainable scalar.
    pub fn update_with(&mut self, grads: &ParamGrads, mut update: impl FnMut(usize, &mut f64, f64)) {
        let mut idx = 0;
        for (w, g) in self.fusion.tensors_mut().into_iter().zip(grads.fusion.tensors()) {
            for (p, &d) in w.iter_mut().zip(g.iter()) {
                update(idx, p, d);
                idx += 1;
            }
        }
        for (p, &d) in self.raw_loss_weights.iter_mut().zip(&grads.raw_loss_weights) {
            update(idx, p, d);
            idx += 1;
        }
    }

    pub fn trainable_len(&self) -> usize {
        self.fusion.tensors().iter().map(|t| t.len()).sum::<usize>() + 3
    }
}

/// Frozen per-video visual context sequences (`n_v` rows of dimension `m`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisualProvider {
    entries: BTreeMap<VideoId, EmbeddingSequence>,
}

impl VisualProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: VideoId, seq: EmbeddingSequence) -> Result<()> {
        if let Some((_, first)) = self.entries.iter().next() {
            if first.dim() != seq.dim() {
                return Err(Error::ShapeError(format!(
                    "video {id} has dimension {}, store uses {}",
                    seq.dim(),
                    first.dim()
                )));
            }
        }
        self.entries.insert(id, seq);
        Ok(())
    }

    /// Random unit-norm rows for each id, deterministic in `seed`.
    pub fn synthetic(ids: &[VideoId], dim: usize, rows: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut provider = VisualProvider::new();
        for &id in ids {
            let seq: Vec<Embedding> = (0..rows)
                .map(|_| random_unit(&mut rng, dim))
                .collect();
            provider.insert(id, EmbeddingSequence::from_rows(&seq)?)?;
        }
        Ok(provider)
    }

    pub fn get(&self, id: VideoId) -> Result<&EmbeddingSequence> {
        self.entries.get(&id).ok_or(Error::MissingEmbedding(id))
    }

    pub fn contains(&self, id: VideoId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = VideoId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VideoId, &EmbeddingSequence)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|s| s.dim())
    }

    /// `l2_normalize(mean of rows)`, the pooled visual embedding.
    pub fn pooled(&self, id: VideoId) -> Result<Embedding> {
        let seq = self.get(id)?;
        Ok(Embedding::new(normalized(seq.mean().view())?))
    }
}

pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(n) = normalized(v.view()) {
            return Embedding::new(n);
        }
    }
}

pub fn encode_visual(provider: &VisualProvider, id: VideoId) -> Result<&EmbeddingSequence> {
    provider.get(id)
}

/// Output of the text encoder: per-token states projected to `m`, and the
/// normalized mean of those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub sequence: EmbeddingSequence,
    pub pooled: Embedding,
}

pub fn encode_text(params: &EncoderParams, tokens: &TokenSequence) -> Result<TextEncoding> {
    let cache = params
        .text
        .forward(&params.token_table, tokens, None, params.config.heads)?;
    let sequence = EmbeddingSequence::new(cache.states.dot(&params.text.proj))?;
    Ok(TextEncoding {
        sequence,
        pooled: Embedding::new(cache.output),
    })
}

/// `f(context, tokens)`: tokens self-attend, then cross-attend to the
/// context rows, then pass through the feed-forward; mean-pooled,
/// projected and normalized.
pub fn ground(params: &EncoderParams, context: &EmbeddingSequence, tokens: &TokenSequence) -> Result<Embedding> {
    ground_cached(params, context.matrix().view(), tokens).map(|c| Embedding::new(c.output))
}

fn ground_cached(params: &EncoderParams, context: ArrayView2<f64>, tokens: &TokenSequence) -> Result<TowerCache> {
    if params.fusion.context_dim() != Some(context.ncols()) {
        return Err(Error::ShapeError(format!(
            "context rows have dimension {}, encoder expects {}",
            context.ncols(),
            params.config.dim
        )));
    }
    params
        .fusion
        .forward(&params.token_table, tokens, Some(context), params.config.heads)
}

/// Which of the three inputs (query video, description, change text) feed
/// the joint embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputMask {
    pub video: bool,
    pub description: bool,
    pub change: bool,
}

impl InputMask {
    pub const ALL: InputMask = InputMask { video: true, description: true, change: true };
    pub const VIDEO: InputMask = InputMask { video: true, description: false, change: false };
    pub const DESCRIPTION: InputMask = InputMask { video: false, description: true, change: false };
    pub const CHANGE: InputMask = InputMask { video: false, description: false, change: true };
    pub const VIDEO_CHANGE: InputMask = InputMask { video: true, description: false, change: true };
    pub const VIDEO_DESCRIPTION: InputMask = InputMask { video: true, description: true, change: false };
    pub const DESCRIPTION_CHANGE: InputMask = InputMask { video: false, description: true, change: true };

    /// The seven non-empty masks, single inputs first.
    pub const GRID: [InputMask; 7] = [
        Self::VIDEO,
        Self::DESCRIPTION,
        Self::CHANGE,
        Self::VIDEO_DESCRIPTION,
        Self::VIDEO_CHANGE,
        Self::DESCRIPTION_CHANGE,
        Self::ALL,
    ];

    pub fn count(&self) -> usize {
        [self.video, self.description, self.change].iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Enabled grounded terms, in evaluation order `f(q,t)`, `f(q,d)`,
    /// `f(e(d),t)`. A term is present when both of its inputs are enabled.
    pub fn terms(&self) -> Vec<JointTerm> {
        let mut out = Vec::new();
        if self.video && self.change {
            out.push(JointTerm::VideoChange);
        }
        if self.video && self.description {
            out.push(JointTerm::VideoDescription);
        }
        if self.description && self.change {
            out.push(JointTerm::DescriptionChange);
        }
        out
    }
}

impl fmt::Display for InputMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.video {
            parts.push("video");
        }
        if self.description {
            parts.push("description");
        }
        if self.change {
            parts.push("change");
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for InputMask {
    type Err = Error;

    /// Parses `video,description,change` (any subset, `+` or `,`
    /// separated) or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = InputMask { video: false, description: false, change: false };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => mask = InputMask::ALL,
                "video" | "v" => mask.video = true,
                "description" | "desc" | "d" => mask.description = true,
                "change" | "text" | "t" => mask.change = true,
                other => return Err(Error::InvalidConfig(format!("unknown input {other:?}"))),
            }
        }
        if mask.is_empty() {
            return Err(Error::NoInputs);
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointTerm {
    /// `f(q, t)`
    VideoChange,
    /// `f(q, d)`
    VideoDescription,
    /// `f(e(d), t)`
    DescriptionChange,
}

/// Everything the joint embedding needs for one query. `description_context`
/// is the text encoder's token-level output for the description.
#[derive(Debug, Clone, Copy)]
pub struct JointInputs<'a> {
    pub visual: &'a EmbeddingSequence,
    pub description: &'a TokenSequence,
    pub description_context: &'a EmbeddingSequence,
    pub change: &'a TokenSequence,
}

pub fn joint_embedding(params: &EncoderParams, inputs: &JointInputs<'_>, mode: InputMask) -> Result<Embedding> {
    joint_forward(params, inputs, mode).map(|j| j.output())
}

/// Unnormalized sum of the enabled grounded terms, or of the single frozen
/// fallback embedding when only one input is enabled.
pub fn joint_sum(params: &EncoderParams, inputs: &JointInputs<'_>, mode: InputMask) -> Result<Array1<f64>> {
    joint_forward(params, inputs, mode).map(|j| j.sum)
}

pub(crate) struct JointForward {
    terms: Vec<(JointTerm, TowerCache)>,
    sum: Array1<f64>,
    norm: f64,
}

impl JointForward {
    pub(crate) fn output(&self) -> Embedding {
        Embedding::new(&self.sum / self.norm)
    }

    pub(crate) fn is_trainable(&self) -> bool {
        !self.terms.is_empty()
    }
}

pub(crate) fn joint_forward(params: &EncoderParams, inputs: &JointInputs<'_>, mode: InputMask) -> Result<JointForward> {
    if mode.is_empty() {
        return Err(Error::NoInputs);
    }
    let mut terms = Vec::new();
    let sum = if mode.count() == 1 {
        if mode.video {
            inputs.visual.mean().into_inner()
        } else if mode.description {
            inputs.description_context.mean().into_inner()
        } else {
            encode_text(params, inputs.change)?.pooled.into_inner()
        }
    } else {
        let mut sum = Array1::zeros(params.config.dim);
        for term in mode.terms() {
            let cache = match term {
                JointTerm::VideoChange => ground_cached(params, inputs.visual.matrix().view(), inputs.change)?,
                JointTerm::VideoDescription => {
                    ground_cached(params, inputs.visual.matrix().view(), inputs.description)?
                }
                JointTerm::DescriptionChange => {
                    ground_cached(params, inputs.description_context.matrix().view(), inputs.change)?
                }
            };
            sum += &cache.output;
            terms.push((term, cache));
        }
        sum
    };
    let norm = sum.dot(&sum).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok(JointForward { terms, sum, norm })
}

/// Backpropagates a gradient on the normalized joint embedding into `f`.
pub(crate) fn joint_backward(
    params: &EncoderParams,
    inputs: &JointInputs<'_>,
    fwd: &JointForward,
    d_output: &Array1<f64>,
    grads: &mut Tower,
) {
    let out = &fwd.sum / fwd.norm;
    let d_sum = (d_output - &(&out * out.dot(d_output))) / fwd.norm;
    for (term, cache) in &fwd.terms {
        let context = match term {
            JointTerm::VideoChange | JointTerm::VideoDescription => inputs.visual.matrix().view(),
            JointTerm::DescriptionChange => inputs.description_context.matrix().view(),
        };
        params
            .fusion
            .backward(cache, &d_sum, Some(context), params.config.heads, grads);
    }
}
