//! Triplet manifests, description tables and the working-directory layout.
//!
//! ```text
//! DIR/embeddings.cvre     visual context store
//! DIR/manifest.jsonl      one triplet per line
//! DIR/descriptions.jsonl  one description record per video
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptions::{clean_description, DescriptionRecord, DescriptionStatus};
use crate::embedding::VideoId;
use crate::encoders::VisualProvider;
use crate::error::{Error, Result};
use crate::store::EmbeddingStore;
use crate::targets::Descriptions;

pub const EMBEDDINGS_FILE: &str = "embeddings.cvre";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvrc";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub query_id: VideoId,
    pub description: String,
    pub change_text: String,
    pub target_id: VideoId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<VideoId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Split sizes for `n` triplets: one tenth each for validation and test
/// (at least one), the rest for training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = (n / 10).max(1);
    (n - 2 * held, held, held)
}

/// Assigns train/val/test to every triplet from a seeded permutation.
pub fn assign_splits(triplets: &mut [Triplet], seed: u64) {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_sizes(triplets.len());
    for (rank, &i) in order.iter().enumerate() {
        triplets[i].split = Some(if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
}

/// Reads a file as UTF-8 lines, reporting the first invalid line.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let text = std::str::from_utf8(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        let text = text.trim_end_matches('\r');
        if !text.trim().is_empty() {
            out.push((i + 1, text.to_string()));
        }
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text)
                .map(|v| (line, v))
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(usize, Triplet)>> {
    parse_jsonl(path)
}

pub fn write_manifest(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_jsonl(path, triplets)
}

/// One line of a descriptions file. Raw inputs need only `id` and `text`;
/// processed files also carry the raw text, similarity and status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionLine {
    pub id: VideoId,
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<DescriptionStatus>,
}

impl DescriptionLine {
    /// The original text, before any cleaning.
    pub fn original(&self) -> &str {
        self.raw.as_deref().or(self.text.as_deref()).unwrap_or("")
    }
}

impl From<&DescriptionRecord> for DescriptionLine {
    fn from(r: &DescriptionRecord) -> Self {
        DescriptionLine {
            id: r.id,
            text: r.cleaned.clone(),
            raw: Some(r.raw.clone()),
            similarity: r.similarity,
            status: Some(r.status),
        }
    }
}

/// Reads a descriptions file with the line number of each record; ids must
/// be unique.
pub fn read_descriptions(path: &Path) -> Result<Vec<(usize, DescriptionLine)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, d) in parse_jsonl::<DescriptionLine>(path)? {
        if !seen.insert(d.id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate description for id {}", d.id),
            });
        }
        out.push((line, d));
    }
    Ok(out)
}

pub fn write_descriptions(path: &Path, lines: &[DescriptionLine]) -> Result<()> {
    write_jsonl(path, lines)
}

/// Cleans raw descriptions; empty results are marked discarded.
pub fn clean_lines(lines: &[DescriptionLine]) -> Result<Vec<DescriptionLine>> {
    lines
        .iter()
        .map(|d| {
            let raw = d.original().to_string();
            let (text, status) = match clean_description(&raw) {
                Ok(c) => (Some(c), d.status.unwrap_or(DescriptionStatus::Kept)),
                Err(Error::EmptyAfterCleaning) => (None, DescriptionStatus::DiscardedEmpty),
                Err(e) => return Err(e),
            };
            Ok(DescriptionLine {
                id: d.id,
                text,
                raw: Some(raw),
                similarity: d.similarity,
                status: Some(status),
            })
        })
        .collect()
}

/// A working directory's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkDir {
    pub store: EmbeddingStore,
    pub triplets: Vec<Triplet>,
    pub descriptions: Vec<DescriptionLine>,
}

impl WorkDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let store = EmbeddingStore::load(&dir.join(EMBEDDINGS_FILE))?;
        let triplets = read_manifest(&dir.join(MANIFEST_FILE))?.into_iter().map(|(_, t)| t).collect();
        let descriptions = read_descriptions(&dir.join(DESCRIPTIONS_FILE))?.into_iter().map(|(_, d)| d).collect();
        Ok(WorkDir { store, triplets, descriptions })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(EMBEDDINGS_FILE))?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.triplets)?;
        write_descriptions(&dir.join(DESCRIPTIONS_FILE), &self.descriptions)
    }

    /// Validates cross-references and assembles the in-memory dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        let provider = self.store.to_provider()?;
        let mut descriptions = Descriptions::new();
        let mut discarded = BTreeSet::new();
        for d in &self.descriptions {
            if !provider.contains(d.id) {
                return Err(Error::MissingEmbedding(d.id));
            }
            match (&d.text, d.status.unwrap_or(DescriptionStatus::Kept)) {
                (Some(text), DescriptionStatus::Kept) => {
                    descriptions.insert(d.id, text.clone());
                }
                _ => {
                    discarded.insert(d.id);
                }
            }
        }
        let mut triplets = Vec::with_capacity(self.triplets.len());
        for t in &self.triplets {
            for id in [t.query_id, t.target_id].into_iter().chain(t.subset.iter().flatten().copied()) {
                if !provider.contains(id) {
                    return Err(Error::MissingEmbedding(id));
                }
            }
            if let Some(subset) = &t.subset {
                if !subset.contains(&t.target_id) {
                    return Err(Error::InvalidSubset(t.query_id));
                }
            }
            if t.split.is_none() {
                return Err(Error::InvalidConfig(format!("triplet for query {} has no split", t.query_id)));
            }
            if discarded.contains(&t.query_id) {
                continue;
            }
            let Ok(description) = clean_description(&t.description) else {
                continue;
            };
            let change_text = clean_description(&t.change_text)?;
            triplets.push(Triplet { description, change_text, ..t.clone() });
        }
        Ok(Dataset { provider, descriptions, triplets })
    }
}

/// Validated, cleaned data ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub provider: VisualProvider,
    /// Kept, cleaned descriptions by video.
    pub descriptions: Descriptions,
    /// Usable triplets, each with a split.
    pub triplets: Vec<Triplet>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Triplet> {
        self.triplets.iter().filter(|t| t.split == Some(split)).cloned().collect()
    }

    /// Training triplets whose target has a kept description (needed for
    /// the multi-modal and text target tables).
    pub fn training_triplets(&self) -> Vec<Triplet> {
        self.split(Split::Train)
            .into_iter()
            .filter(|t| self.descriptions.contains_key(&t.target_id))
            .collect()
    }

    pub fn ground_truth(triplets: &[Triplet]) -> BTreeMap<VideoId, VideoId> {
        triplets.iter().map(|t| (t.query_id, t.target_id)).collect()
    }
}
