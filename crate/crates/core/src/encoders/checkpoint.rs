//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "CVRC"
//! version    u32
//! m h V heads L       u32 each
//! tensors    f64 × n  token table, text encoder, multi-modal encoder
//! raw weights f64 × 3 λ̂ μ̂ δ̂
//! ```
//!
//! All integers and floats little-endian. Tensors are written row-major in
//! the order given by [`Tower::tensors`].

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVRC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut out: W) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let c = &params.config;
    for d in [c.dim, c.hidden, c.vocab, c.heads, c.blocks] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let tensors = std::iter::once(&params.token_table)
        .chain(params.text.tensors())
        .chain(params.fusion.tensors());
    for t in tensors {
        for x in t.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    for x in params.raw_loss_weights {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R) -> io::Result<EncoderParams> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u32(&mut input)? as usize;
    }
    let [dim, hidden, vocab, heads, blocks] = dims;
    let config = EncoderConfig { dim, hidden, vocab, heads, blocks };
    config.validate().map_err(|e| bad(e.to_string()))?;

    // Shapes come from a seeded skeleton; values are then overwritten.
    let mut params = EncoderParams::init(config, 0).map_err(|e| bad(e.to_string()))?;
    let mut buf = [0u8; 8];
    {
        let tensors = std::iter::once(&mut params.token_table)
            .chain(params.text.tensors_mut())
            .chain(params.fusion.tensors_mut());
        for t in tensors {
            for x in t.iter_mut() {
                input.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
    }
    for x in &mut params.raw_loss_weights {
        input.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl EncoderParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(self, &mut bytes).expect("writing to memory");
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(bytes.as_slice()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
