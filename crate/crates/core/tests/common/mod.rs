#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covr_core::dataset::{assign_splits, DescriptionLine, Triplet, WorkDir};
use covr_core::descriptions::{CalibrationSet, TextEncoder};
use covr_core::embedding::{l2_normalize, Embedding, VideoId};
use covr_core::encoders::{EncoderConfig, EncoderParams};
use covr_core::store::{EmbeddingStore, StoreKind};
use covr_core::synthetic::ATTRIBUTES;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn covr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covr"))
        .args(args)
        .env_remove("COVR_DIR")
        .output()
        .expect("spawn covr")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Encoder the CLI builds when no checkpoint is given.
pub fn default_encoder() -> EncoderParams {
    EncoderParams::init(EncoderConfig::default(), 0).unwrap()
}

/// Videos whose embedding sits close to the frozen text embedding of their
/// description, except `planted`, whose embeddings are unrelated.
pub struct FilterFixture {
    pub work: WorkDir,
    pub calibration: CalibrationSet,
    pub planted: Vec<VideoId>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&Embedding::from_vec(v)).unwrap()
}

pub fn filter_fixture(n: usize, planted: &[u64], seed: u64) -> FilterFixture {
    let encoder = default_encoder();
    let dim = encoder.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts: Vec<String> = Vec::new();
    while texts.len() < n {
        let words: Vec<&str> = ATTRIBUTES.choose_multiple(&mut rng, 3).copied().collect();
        let text = words.join(" ");
        if !texts.contains(&text) {
            texts.push(text);
        }
    }
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let id = VideoId(i as u64);
        let visual = if planted.contains(&(i as u64)) {
            random_unit(&mut rng, dim)
        } else {
            let e = encoder.embed_text(text).unwrap();
            let noise = random_unit(&mut rng, dim);
            l2_normalize(&Embedding::new(e.values() + &(noise.values() * 0.3))).unwrap()
        };
        records.push((id, visual.values().iter().map(|&x| x as f32).collect()));
        if !planted.contains(&(i as u64)) {
            pairs.push((text.clone(), id));
        }
    }
    let mut triplets: Vec<Triplet> = (0..n.min(10))
        .map(|i| Triplet {
            query_id: VideoId(i as u64),
            description: texts[i].clone(),
            change_text: "make it brighter".into(),
            target_id: VideoId(((i + 1) % n) as u64),
            subset: None,
            split: None,
        })
        .collect();
    assign_splits(&mut triplets, seed);
    let descriptions = texts
        .iter()
        .enumerate()
        .map(|(i, t)| DescriptionLine { id: VideoId(i as u64), text: Some(t.clone()), raw: None, similarity: None, status: None })
        .collect();
    FilterFixture {
        work: WorkDir { store: EmbeddingStore { kind: StoreKind::VisualContext, dim, records }, triplets, descriptions },
        calibration: CalibrationSet { pairs },
        planted: planted.iter().map(|&i| VideoId(i)).collect(),
    }
}

pub struct RawInputs {
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
    pub descriptions: PathBuf,
    pub captions: PathBuf,
}

/// Writes the fixture as raw ingest inputs: no splits, bare `{"id", "text"}`
/// descriptions.
pub fn write_raw(fx: &FilterFixture, dir: &Path) -> RawInputs {
    std::fs::create_dir_all(dir).unwrap();
    let raw = RawInputs {
        embeddings: dir.join("videos.cvre"),
        manifest: dir.join("triplets.jsonl"),
        descriptions: dir.join("generated.jsonl"),
        captions: dir.join("captions.jsonl"),
    };
    fx.work.store.save(&raw.embeddings).unwrap();
    let mut manifest = String::new();
    for t in &fx.work.triplets {
        let t = Triplet { split: None, ..t.clone() };
        manifest.push_str(&serde_json::to_string(&t).unwrap());
        manifest.push('\n');
    }
    std::fs::write(&raw.manifest, manifest).unwrap();
    let mut descs = String::new();
    for d in &fx.work.descriptions {
        descs.push_str(&json!({ "id": d.id.0, "text": d.text }).to_string());
        descs.push('\n');
    }
    std::fs::write(&raw.descriptions, descs).unwrap();
    let mut caps = String::new();
    for (text, id) in &fx.calibration.pairs {
        caps.push_str(&json!({ "id": id.0, "text": text }).to_string());
        caps.push('\n');
    }
    std::fs::write(&raw.captions, caps).unwrap();
    raw
}
