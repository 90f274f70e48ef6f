//! Planted synthetic triplets.
//!
//! Every word of a small vocabulary gets a direction in the embedding
//! space, random by default or partly taken from a frozen text encoder. A query video is a random unit vector `q`; its target is
//! `normalize(q + w·D + C + noise)` where `D` and `C` are the normalized sums
//! of the description and change-text word directions. Query videos use ids
//! `0..n` and the target of triplet `i` is video `n + i`.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{assign_splits, DescriptionLine, Triplet, WorkDir};
use crate::descriptions::DescriptionStatus;
use crate::embedding::{normalized, Embedding, VideoId};
use crate::encoders::{encode_text, EncoderConfig, EncoderParams, VisualProvider};
use crate::error::{Error, Result};
use crate::retrieval::{build_index, top_k};
use crate::store::{EmbeddingStore, StoreKind};
use crate::targets::Descriptions;

pub const ATTRIBUTES: [&str; 24] = [
    "dog", "cat", "horse", "bird", "child", "woman", "man", "car", "boat", "train", "tree", "flower", "beach",
    "forest", "city", "mountain", "river", "kitchen", "street", "field", "snow", "desert", "garden", "bridge",
];

pub const CHANGES: [&str; 24] = [
    "red", "blue", "green", "yellow", "bright", "dark", "foggy", "rainy", "sunny", "snowy", "older", "younger",
    "bigger", "smaller", "faster", "slower", "closer", "wider", "crowded", "empty", "noisy", "calm", "golden",
    "purple",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Number of triplets; the gallery holds `2n` videos.
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// Context rows per video.
    pub frames: usize,
    /// Weight of the description direction in the target.
    pub description_weight: f64,
    /// Standard deviation of the per-dimension target noise, relative to
    /// a unit vector.
    pub noise: f64,
    pub description_words: usize,
    pub change_words: usize,
    /// Seed of the encoder whose frozen text space the word directions are
    /// taken from, so that visual and text embeddings share one space.
    /// `None` draws independent random directions instead.
    pub encoder_seed: Option<u64>,
    /// Share of each word direction taken from the text space; the rest
    /// is an independent random direction.
    pub alignment: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 512,
            dim: 64,
            seed: 0,
            frames: 1,
            description_weight: 0.8,
            noise: 0.1,
            description_words: 3,
            change_words: 2,
            encoder_seed: None,
            alignment: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub provider: VisualProvider,
    pub descriptions: Descriptions,
    pub triplets: Vec<Triplet>,
    /// Noise-free planted combination for each triplet.
    pub planted: Vec<Embedding>,
    pub store: EmbeddingStore,
}

impl SyntheticData {
    pub fn workdir(&self) -> WorkDir {
        WorkDir {
            store: self.store.clone(),
            triplets: self.triplets.clone(),
            descriptions: self
                .descriptions
                .iter()
                .map(|(id, text)| DescriptionLine {
                    id: *id,
                    text: Some(text.clone()),
                    raw: Some(text.clone()),
                    similarity: None,
                    status: Some(DescriptionStatus::Kept),
                })
                .collect(),
        }
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        if let Ok(u) = normalized(v.view()) {
            return u;
        }
    }
}

fn direction(words: &[&str], dirs: &BTreeMap<&str, Array1<f64>>) -> Array1<f64> {
    let mut sum = Array1::zeros(dirs.values().next().map_or(0, |d| d.len()));
    for w in words {
        sum += &dirs[w];
    }
    normalized(sum.view()).expect("distinct random directions")
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], k: usize) -> Vec<&'a str> {
    let mut idx = sample(rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Rounds every value through `f32` so in-memory data matches the store.
fn round_f32(v: &Array1<f64>) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n < 4 {
        return Err(Error::TooSmall(spec.n));
    }
    if spec.dim == 0 || spec.frames == 0 {
        return Err(Error::InvalidConfig("dimension and frames must be positive".into()));
    }
    if spec.description_words == 0
        || spec.description_words > ATTRIBUTES.len()
        || spec.change_words == 0
        || spec.change_words > CHANGES.len()
    {
        return Err(Error::InvalidConfig("word counts out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let text_space = match spec.encoder_seed {
        Some(seed) => Some(EncoderParams::init(EncoderConfig { dim, ..EncoderConfig::default() }, seed)?),
        None => None,
    };
    let rho = if text_space.is_some() { spec.alignment } else { 0.0 };
    let mut dirs: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
    for &w in ATTRIBUTES.iter().chain(CHANGES.iter()) {
        let random = gaussian_unit(&mut rng, dim) * (1.0 - rho * rho).sqrt();
        let dir = match &text_space {
            Some(params) => {
                let tokens = params.tokenizer().tokenize(w)?;
                encode_text(params, &tokens)?.pooled.into_inner() * rho + &random
            }
            None => random,
        };
        dirs.insert(w, normalized(dir.view())?);
    }

    let n = spec.n;
    let mut base: Vec<Array1<f64>> = Vec::with_capacity(2 * n);
    let mut query_text = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        base.push(gaussian_unit(&mut rng, dim));
    }
    for q in base.iter().take(n) {
        let desc = pick(&mut rng, &ATTRIBUTES, spec.description_words);
        let change = pick(&mut rng, &CHANGES, spec.change_words);
        let combo = q + &(direction(&desc, &dirs) * spec.description_weight) + &direction(&change, &dirs);
        let noise = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal)) * (spec.noise / (dim as f64).sqrt());
        targets.push(normalized((&combo + &noise).view())?);
        planted.push(Embedding::new(normalized(combo.view())?));
        query_text.push((desc, change));
    }
    base.extend(targets);

    let mut records = Vec::with_capacity(2 * n * spec.frames);
    for (i, b) in base.iter().enumerate() {
        for _ in 0..spec.frames {
            let row = if spec.frames == 1 {
                b.clone()
            } else {
                b + &(Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal)) * (0.05 / (dim as f64).sqrt()))
            };
            records.push((VideoId(i as u64), round_f32(&row)));
        }
    }
    let store = EmbeddingStore { kind: StoreKind::VisualContext, dim, records };
    let provider = store.to_provider()?;

    let mut descriptions = Descriptions::new();
    let mut triplets = Vec::with_capacity(n);
    for (i, (desc, change)) in query_text.iter().enumerate() {
        let description = desc.join(" ");
        let change_text = format!("make it {}", change.join(" "));
        let target = VideoId((n + i) as u64);
        descriptions.insert(VideoId(i as u64), description.clone());
        descriptions.insert(target, format!("{description} {}", change.join(" ")));
        triplets.push(Triplet {
            query_id: VideoId(i as u64),
            description,
            change_text,
            target_id: target,
            subset: None,
            split: None,
        });
    }
    assign_splits(&mut triplets, spec.seed);
    Ok(SyntheticData { provider, descriptions, triplets, planted, store })
}

/// Fraction of triplets whose planted combination retrieves the labeled
/// target as its nearest gallery video.
pub fn construction_check(data: &SyntheticData) -> Result<f64> {
    let index = build_index(data.provider.ids().map(|id| Ok((id, data.provider.pooled(id)?))).collect::<Result<Vec<_>>>()?)?;
    let mut hits = 0;
    for (t, p) in data.triplets.iter().zip(&data.planted) {
        let r = top_k(&index, t.query_id, p, 1, None)?;
        if r.hits[0].0 == t.target_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.triplets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::embedding::Tokenizer;
    use std::collections::BTreeSet;

    fn spec(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec { n, seed, ..SyntheticSpec::default() }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(generate_synthetic(&spec(40, 3)).unwrap(), generate_synthetic(&spec(40, 3)).unwrap());
        assert_ne!(generate_synthetic(&spec(40, 3)).unwrap(), generate_synthetic(&spec(40, 4)).unwrap());
    }

    #[test]
    fn splits_are_80_10_10() {
        let d = generate_synthetic(&spec(100, 1)).unwrap();
        let count = |s| d.triplets.iter().filter(|t| t.split == Some(s)).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 10, 10));
        assert_eq!(d.provider.len(), 200);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(generate_synthetic(&spec(3, 0)), Err(Error::TooSmall(3))));
        assert!(generate_synthetic(&spec(4, 0)).is_ok());
    }

    #[test]
    fn planted_combination_retrieves_its_target() {
        // brute force over the whole gallery, independent of the index
        let d = generate_synthetic(&spec(256, 11)).unwrap();
        for (t, p) in d.triplets.iter().zip(&d.planted) {
            let best = d
                .provider
                .ids()
                .map(|id| {
                    let v = d.provider.pooled(id).unwrap();
                    (id, v.values().iter().zip(p.values()).map(|(a, b)| a * b).sum::<f64>())
                })
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            assert_eq!(best.0, t.target_id);
        }
        assert_eq!(construction_check(&d).unwrap(), 1.0);
    }

    #[test]
    fn query_change_pairs_map_to_unique_targets() {
        let d = generate_synthetic(&spec(128, 2)).unwrap();
        let keys: BTreeSet<_> = d.triplets.iter().map(|t| (t.query_id, t.change_text.clone())).collect();
        assert_eq!(keys.len(), d.triplets.len());
        let targets: BTreeSet<_> = d.triplets.iter().map(|t| t.target_id).collect();
        assert_eq!(targets.len(), d.triplets.len());
    }

    #[test]
    fn vocabulary_has_no_hash_collisions() {
        let tok = Tokenizer::new(crate::embedding::DEFAULT_VOCAB);
        let words: Vec<&str> = ATTRIBUTES
            .iter()
            .chain(CHANGES.iter())
            .chain(["a", "video", "showing", "make", "it"].iter())
            .copied()
            .collect();
        let ids: BTreeSet<u32> = words.iter().map(|w| tok.tokenize(w).unwrap().ids()[0]).collect();
        assert_eq!(ids.len(), words.len());
    }

    #[test]
    fn store_matches_provider() {
        let d = generate_synthetic(&SyntheticSpec { frames: 3, ..spec(8, 5) }).unwrap();
        assert_eq!(d.store.records.len(), 16 * 3);
        assert_eq!(d.store.to_provider().unwrap(), d.provider);
        assert_eq!(d.workdir().dataset().unwrap().triplets.len(), 8);
    }
}
