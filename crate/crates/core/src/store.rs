//! Binary embedding store.
//!
//! ```text
//! magic    4 bytes "CVRE"
//! version  u32
//! dim      u32
//! count    u64
//! kind     u8
//! records  count × (id: u64, values: dim × f32)
//! ```
//!
//! Little-endian throughout. A visual-context store may repeat an id on
//! consecutive records; those rows form that video's context sequence.
//! Target stores hold one record per id.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::embedding::{Embedding, EmbeddingSequence, VideoId};
use crate::encoders::VisualProvider;
use crate::error::{Error, Result};
use crate::targets::{TargetDatabases, TargetKind};

pub const STORE_MAGIC: &[u8; 4] = b"CVRE";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StoreKind {
    VisualContext = 0,
    TargetVisual = 1,
    TargetMultimodal = 2,
    TargetText = 3,
}

impl StoreKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => StoreKind::VisualContext,
            1 => StoreKind::TargetVisual,
            2 => StoreKind::TargetMultimodal,
            3 => StoreKind::TargetText,
            _ => return None,
        })
    }

    pub fn for_target(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Visual => StoreKind::TargetVisual,
            TargetKind::Multimodal => StoreKind::TargetMultimodal,
            TargetKind::Text => StoreKind::TargetText,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub kind: StoreKind,
    pub dim: usize,
    pub records: Vec<(VideoId, Vec<f32>)>,
}

impl EmbeddingStore {
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(STORE_MAGIC)?;
        out.write_all(&STORE_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.records.len() as u64).to_le_bytes())?;
        out.write_all(&[self.kind as u8])?;
        for (id, values) in &self.records {
            out.write_all(&id.0.to_le_bytes())?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    /// Parses and validates a store; error messages name the offending
    /// record.
    pub fn read_from<R: Read>(mut input: R) -> std::result::Result<Self, String> {
        let mut header = [0u8; 21];
        input
            .read_exact(&mut header)
            .map_err(|_| "truncated header (expected 21 bytes)".to_string())?;
        if &header[..4] != STORE_MAGIC {
            return Err(format!("bad magic {:?}, expected \"CVRE\"", &header[..4]));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(format!("unsupported store version {version}"));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err("dimension is zero".into());
        }
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let kind = StoreKind::from_tag(header[20]).ok_or_else(|| format!("unknown kind tag {}", header[20]))?;
        let mut rest = Vec::new();
        input.read_to_end(&mut rest).map_err(|e| e.to_string())?;
        let record_len = 8 + 4 * dim;
        let expected = (count as u128) * record_len as u128;
        if rest.len() as u128 != expected {
            return Err(format!(
                "header declares {count} records of {record_len} bytes but body has {} bytes",
                rest.len()
            ));
        }
        let mut records = Vec::with_capacity(count as usize);
        for (i, chunk) in rest.chunks_exact(record_len).enumerate() {
            let id = VideoId(u64::from_le_bytes(chunk[..8].try_into().unwrap()));
            let values: Vec<f32> = chunk[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(format!("record {i} (id {id}) has non-finite values"));
            }
            records.push((id, values));
        }
        let store = EmbeddingStore { kind, dim, records };
        store.check_ids()?;
        Ok(store)
    }

    fn check_ids(&self) -> std::result::Result<(), String> {
        let mut seen = BTreeMap::new();
        for (i, (id, _)) in self.records.iter().enumerate() {
            if let Some(&prev) = seen.get(id) {
                let contiguous = self.kind == StoreKind::VisualContext && self.records[i - 1].0 == *id;
                if !contiguous {
                    return Err(format!("record {i}: id {id} already appeared at record {prev}"));
                }
            }
            seen.insert(*id, i);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice()).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_provider(provider: &VisualProvider) -> Self {
        let dim = provider.dim().unwrap_or(0);
        let mut records = Vec::new();
        for (id, seq) in provider.iter() {
            for row in seq.matrix().rows() {
                records.push((id, row.iter().map(|&x| x as f32).collect()));
            }
        }
        EmbeddingStore { kind: StoreKind::VisualContext, dim, records }
    }

    pub fn to_provider(&self) -> Result<VisualProvider> {
        let mut grouped: Vec<(VideoId, Vec<&Vec<f32>>)> = Vec::new();
        for (id, values) in &self.records {
            match grouped.last_mut() {
                Some((last, rows)) if last == id => rows.push(values),
                _ => grouped.push((*id, vec![values])),
            }
        }
        let mut provider = VisualProvider::new();
        for (id, rows) in grouped {
            let m = Array2::from_shape_fn((rows.len(), self.dim), |(r, c)| f64::from(rows[r][c]));
            provider.insert(id, EmbeddingSequence::new(m)?)?;
        }
        Ok(provider)
    }

    pub fn from_table(kind: StoreKind, table: &BTreeMap<VideoId, Embedding>) -> Self {
        let dim = table.values().next().map(|e| e.dim()).unwrap_or(0);
        let records = table
            .iter()
            .map(|(id, e)| (*id, e.values().iter().map(|&x| x as f32).collect()))
            .collect();
        EmbeddingStore { kind, dim, records }
    }

    pub fn to_table(&self) -> BTreeMap<VideoId, Embedding> {
        self.records
            .iter()
            .map(|(id, v)| (*id, Embedding::from_vec(v.iter().map(|&x| f64::from(x)).collect())))
            .collect()
    }
}

/// Writes the three target tables as `targets_{visual,multimodal,text}.cvre`.
pub fn save_target_databases(dbs: &TargetDatabases, dir: &Path) -> Result<()> {
    for kind in TargetKind::ALL {
        let name = match kind {
            TargetKind::Visual => "targets_visual.cvre",
            TargetKind::Multimodal => "targets_multimodal.cvre",
            TargetKind::Text => "targets_text.cvre",
        };
        EmbeddingStore::from_table(StoreKind::for_target(kind), dbs.table(kind)).save(&dir.join(name))?;
    }
    Ok(())
}
