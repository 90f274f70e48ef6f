//! The three per-video target tables contrasted against during training:
//! pooled visual embeddings, frozen multi-modal embeddings of each video
//! with its own description, and text embeddings of that description.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::embedding::{Embedding, SimilarityMatrix, VideoId};
use crate::encoders::{encode_text, ground, EncoderParams, VisualProvider};
use crate::error::{Error, Result};

pub type Descriptions = BTreeMap<VideoId, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Visual,
    Multimodal,
    Text,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Visual, TargetKind::Multimodal, TargetKind::Text];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDatabases {
    pub visual: BTreeMap<VideoId, Embedding>,
    pub multimodal: BTreeMap<VideoId, Embedding>,
    pub text: BTreeMap<VideoId, Embedding>,
}

fn multimodal_entry(
    provider: &VisualProvider,
    params: &EncoderParams,
    id: VideoId,
    description: &str,
) -> Result<Embedding> {
    let tokens = params.tokenizer().tokenize(description)?;
    ground(params, provider.get(id)?, &tokens)
}

/// Builds all three tables over `ids`. Every id needs a visual entry and a
/// description.
pub fn build_target_databases(
    provider: &VisualProvider,
    descriptions: &Descriptions,
    params_snapshot: &EncoderParams,
    ids: impl IntoIterator<Item = VideoId>,
) -> Result<TargetDatabases> {
    let tokenizer = params_snapshot.tokenizer();
    let mut dbs = TargetDatabases {
        visual: BTreeMap::new(),
        multimodal: BTreeMap::new(),
        text: BTreeMap::new(),
    };
    for id in ids {
        let description = descriptions.get(&id).ok_or(Error::MissingDescription(id))?;
        let visual = provider.pooled(id)?;
        let tokens = tokenizer.tokenize(description)?;
        let multimodal = ground(params_snapshot, provider.get(id)?, &tokens)?;
        let text = encode_text(params_snapshot, &tokens)?.pooled;
        dbs.visual.insert(id, visual);
        dbs.multimodal.insert(id, multimodal);
        dbs.text.insert(id, text);
    }
    assert!(dbs.keys_congruent(), "target tables diverged");
    Ok(dbs)
}

/// [`build_target_databases`] over every id in the provider.
pub fn build_all(
    provider: &VisualProvider,
    descriptions: &Descriptions,
    params_snapshot: &EncoderParams,
) -> Result<TargetDatabases> {
    build_target_databases(provider, descriptions, params_snapshot, provider.ids())
}

impl TargetDatabases {
    pub fn table(&self, kind: TargetKind) -> &BTreeMap<VideoId, Embedding> {
        match kind {
            TargetKind::Visual => &self.visual,
            TargetKind::Multimodal => &self.multimodal,
            TargetKind::Text => &self.text,
        }
    }

    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    pub fn keys_congruent(&self) -> bool {
        self.visual.keys().eq(self.multimodal.keys()) && self.visual.keys().eq(self.text.keys())
    }

    /// Rows of one table for `ids`, in order.
    pub fn gather(&self, kind: TargetKind, ids: &[VideoId]) -> Result<Array2<f64>> {
        let table = self.table(kind);
        let dim = table
            .values()
            .next()
            .map(|e| e.dim())
            .ok_or_else(|| Error::MissingEmbedding(ids.first().copied().unwrap_or(VideoId(0))))?;
        let mut out = Array2::zeros((ids.len(), dim));
        for (row, id) in ids.iter().enumerate() {
            let e = table.get(id).ok_or(Error::MissingEmbedding(*id))?;
            out.row_mut(row).assign(e.values());
        }
        Ok(out)
    }

    /// Recomputes the multi-modal table from the current encoder.
    pub fn refresh_multimodal(
        &mut self,
        provider: &VisualProvider,
        descriptions: &Descriptions,
        params: &EncoderParams,
    ) -> Result<()> {
        let ids: Vec<VideoId> = self.multimodal.keys().copied().collect();
        self.refresh_multimodal_ids(provider, descriptions, params, &ids)
    }

    /// Recomputes the multi-modal entries of `ids` only.
    pub fn refresh_multimodal_ids(
        &mut self,
        provider: &VisualProvider,
        descriptions: &Descriptions,
        params: &EncoderParams,
        ids: &[VideoId],
    ) -> Result<()> {
        for &id in ids {
            let d = descriptions.get(&id).ok_or(Error::MissingDescription(id))?;
            let e = multimodal_entry(provider, params, id, d)?;
            self.multimodal.insert(id, e);
        }
        Ok(())
    }
}

/// `(S_ve, S_mme, S_te)`: similarities of each joint embedding (rows of
/// `joint`) against the targets of every batch member.
pub fn batch_similarities(
    joint: &Array2<f64>,
    dbs: &TargetDatabases,
    target_ids: &[VideoId],
) -> Result<[SimilarityMatrix; 3]> {
    if joint.nrows() != target_ids.len() {
        return Err(Error::ShapeError(format!(
            "{} joint embeddings for {} targets",
            joint.nrows(),
            target_ids.len()
        )));
    }
    let mut out = Vec::with_capacity(3);
    for kind in TargetKind::ALL {
        let targets = dbs.gather(kind, target_ids)?;
        out.push(SimilarityMatrix::from_unit_rows(joint, &targets)?);
    }
    Ok(out.try_into().expect("three kinds"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine_sim, EmbeddingSequence};
    use crate::encoders::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VisualProvider, Descriptions, EncoderParams) {
        let ids: Vec<VideoId> = (1..=3).map(VideoId).collect();
        let provider = VisualProvider::synthetic(&ids, 64, 2, 4).unwrap();
        let descriptions: Descriptions = ids
            .iter()
            .zip(["a cat on a sofa", "waves crash at dusk", "children play football"])
            .map(|(&id, d)| (id, d.to_string()))
            .collect();
        (provider, descriptions, EncoderParams::init(EncoderConfig::default(), 6).unwrap())
    }

    #[test]
    fn tables_share_keys_and_are_unit_norm() {
        let (provider, descriptions, params) = setup();
        let dbs = build_all(&provider, &descriptions, &params).unwrap();
        assert_eq!(dbs.len(), 3);
        assert!(dbs.keys_congruent());
        for kind in TargetKind::ALL {
            assert_eq!(dbs.table(kind).len(), 3);
            assert!(dbs.table(kind).values().all(|e| e.is_unit(1e-6) && e.dim() == 64));
        }
    }

    #[test]
    fn identical_inputs_give_identical_entries() {
        let (mut provider, mut descriptions, params) = setup();
        let seq = provider.get(VideoId(1)).unwrap().clone();
        provider.insert(VideoId(9), seq).unwrap();
        descriptions.insert(VideoId(9), descriptions[&VideoId(1)].clone());
        let dbs = build_all(&provider, &descriptions, &params).unwrap();
        for kind in TargetKind::ALL {
            assert_eq!(dbs.table(kind)[&VideoId(1)], dbs.table(kind)[&VideoId(9)]);
        }
    }

    #[test]
    fn entries_match_direct_evaluation() {
        let (provider, descriptions, params) = setup();
        let dbs = build_all(&provider, &descriptions, &params).unwrap();
        let tokens = params.tokenizer().tokenize(&descriptions[&VideoId(2)]).unwrap();
        assert_eq!(dbs.multimodal[&VideoId(2)], ground(&params, provider.get(VideoId(2)).unwrap(), &tokens).unwrap());
        assert_eq!(dbs.text[&VideoId(2)], encode_text(&params, &tokens).unwrap().pooled);
        let mean = provider.get(VideoId(2)).unwrap().mean();
        assert_eq!(dbs.visual[&VideoId(2)], crate::embedding::l2_normalize(&mean).unwrap());
    }

    #[test]
    fn rebuild_is_bitwise_identical() {
        let (provider, descriptions, params) = setup();
        assert_eq!(
            build_all(&provider, &descriptions, &params).unwrap(),
            build_all(&provider, &descriptions, &params).unwrap()
        );
    }

    #[test]
    fn missing_inputs_are_reported() {
        let (provider, mut descriptions, params) = setup();
        descriptions.remove(&VideoId(3));
        assert!(matches!(build_all(&provider, &descriptions, &params), Err(Error::MissingDescription(VideoId(3)))));
        descriptions.insert(VideoId(3), "x".into());
        let r = build_target_databases(&provider, &descriptions, &params, [VideoId(3), VideoId(4)]);
        assert!(matches!(r, Err(Error::MissingDescription(VideoId(4)))));
    }

    #[test]
    fn batch_similarities_are_entrywise_cosines() {
        let (provider, descriptions, params) = setup();
        let dbs = build_all(&provider, &descriptions, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let joint: Vec<Embedding> = (0..2)
            .map(|_| {
                let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                crate::embedding::l2_normalize(&Embedding::from_vec(v)).unwrap()
            })
            .collect();
        let j = EmbeddingSequence::from_rows(&joint).unwrap().matrix().clone();
        let ids = [VideoId(3), VideoId(1)];
        let sims = batch_similarities(&j, &dbs, &ids).unwrap();
        for (k, kind) in TargetKind::ALL.into_iter().enumerate() {
            for i in 0..2 {
                for (col, id) in ids.iter().enumerate() {
                    let oracle = cosine_sim(&joint[i], &dbs.table(kind)[id]).unwrap();
                    assert!((sims[k].get(i, col) - oracle).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(
            batch_similarities(&j, &dbs, &[VideoId(3), VideoId(77)]),
            Err(Error::MissingEmbedding(VideoId(77)))
        ));
    }

    #[test]
    fn self_target_has_unit_diagonal() {
        let (provider, descriptions, params) = setup();
        let dbs = build_all(&provider, &descriptions, &params).unwrap();
        let j = dbs.gather(TargetKind::Visual, &[VideoId(2)]).unwrap();
        let [ve, _, _] = batch_similarities(&j, &dbs, &[VideoId(2)]).unwrap();
        assert_eq!((ve.nrows(), ve.ncols()), (1, 1));
        assert!((ve.get(0, 0) - 1.0).abs() < 1e-9);
    }
}
