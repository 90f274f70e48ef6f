//! Cleaning of generated video descriptions and the hallucination filter.
//!
//! The threshold is calibrated on reference captions: the `q`-th percentile
//! (nearest rank; `q = 0` is the minimum) of caption-to-visual cosine
//! similarity. Descriptions scoring below it are discarded; a score equal to
//! the threshold is kept.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, Embedding, VideoId};
use crate::encoders::{encode_text, EncoderParams, VisualProvider};
use crate::error::{Error, Result};

/// Anything that maps text into the shared latent space.
pub trait TextEncoder {
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

impl TextEncoder for EncoderParams {
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let tokens = self.tokenizer().tokenize(text)?;
        Ok(encode_text(self, &tokens)?.pooled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanConfig {
    /// Characters removed outright.
    pub deny_chars: Vec<char>,
    /// Literal substrings removed before character filtering.
    pub deny_tokens: Vec<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            deny_chars: vec!['{', '}', '[', ']', '<', '>', '|', '\\', '\u{FFFD}'],
            deny_tokens: ["<s>", "</s>", "<unk>", "<pad>", "<Img>", "</Img>"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

fn clean_once(raw: &str, cfg: &CleanConfig) -> String {
    let mut text = raw.to_string();
    for token in &cfg.deny_tokens {
        if !token.is_empty() {
            text = text.replace(token.as_str(), " ");
        }
    }
    let filtered: String = text
        .chars()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else if c.is_control() || cfg.deny_chars.contains(&c) {
                None
            } else {
                Some(c)
            }
        })
        .collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips control characters, denylisted tokens and characters, and
/// collapses whitespace. Repeats until the text stops changing, so the
/// result is a fixed point.
pub fn clean_description_with(raw: &str, cfg: &CleanConfig) -> Result<String> {
    let mut current = clean_once(raw, cfg);
    loop {
        let next = clean_once(&current, cfg);
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Err(Error::EmptyAfterCleaning);
    }
    Ok(current)
}

pub fn clean_description(raw: &str) -> Result<String> {
    clean_description_with(raw, &CleanConfig::default())
}

/// Reference captions paired with the video they describe.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    pub pairs: Vec<(String, VideoId)>,
}

/// Caption-to-visual similarities of a calibration set, in input order.
pub fn calibration_similarities(
    cal: &CalibrationSet,
    encoder: &impl TextEncoder,
    provider: &VisualProvider,
) -> Result<Vec<f64>> {
    cal.pairs
        .iter()
        .map(|(caption, id)| {
            let visual = provider.pooled(*id)?;
            cosine_sim(&encoder.embed_text(caption)?, &visual)
        })
        .collect()
}

/// Nearest-rank percentile: `q = 0` is the minimum, otherwise the value at
/// rank `ceil(q/100 · n)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

pub fn calibrate_threshold(
    cal: &CalibrationSet,
    encoder: &impl TextEncoder,
    provider: &VisualProvider,
    q: f64,
) -> Result<f64> {
    if cal.pairs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    percentile(&calibration_similarities(cal, encoder, provider)?, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptionStatus {
    Kept,
    DiscardedHallucination,
    DiscardedEmpty,
}

impl DescriptionStatus {
    pub fn is_kept(self) -> bool {
        self == DescriptionStatus::Kept
    }
}

impl fmt::Display for DescriptionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DescriptionStatus::Kept => "kept",
            DescriptionStatus::DiscardedHallucination => "discarded-hallucination",
            DescriptionStatus::DiscardedEmpty => "discarded-empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionRecord {
    pub id: VideoId,
    pub raw: String,
    /// `None` when nothing survived cleaning.
    pub cleaned: Option<String>,
    pub similarity: Option<f64>,
    pub status: DescriptionStatus,
}

/// Scores each record against its video and applies the threshold.
/// Output order follows input order.
pub fn filter_descriptions(
    records: &[(VideoId, String)],
    threshold: f64,
    encoder: &impl TextEncoder,
    provider: &VisualProvider,
    clean: &CleanConfig,
) -> Result<Vec<DescriptionRecord>> {
    if !threshold.is_finite() {
        return Err(Error::InvalidConfig("threshold must be finite".into()));
    }
    records
        .iter()
        .map(|(id, raw)| {
            let visual = provider.pooled(*id)?;
            let cleaned = match clean_description_with(raw, clean) {
                Ok(c) => c,
                Err(Error::EmptyAfterCleaning) => {
                    return Ok(DescriptionRecord {
                        id: *id,
                        raw: raw.clone(),
                        cleaned: None,
                        similarity: None,
                        status: DescriptionStatus::DiscardedEmpty,
                    })
                }
                Err(e) => return Err(e),
            };
            let similarity = cosine_sim(&encoder.embed_text(&cleaned)?, &visual)?;
            let status = if similarity >= threshold {
                DescriptionStatus::Kept
            } else {
                DescriptionStatus::DiscardedHallucination
            };
            Ok(DescriptionRecord {
                id: *id,
                raw: raw.clone(),
                cleaned: Some(cleaned),
                similarity: Some(similarity),
                status,
            })
        })
        .collect()
}
