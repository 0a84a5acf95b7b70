//! `MELS` container: magic, u32 LE n_mels, u32 LE n_frames, then f32 LE
//! values in mel-bin-major order.

use std::path::Path;

use ndarray::Array2;

use super::MelSpectrogram;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MELS";
const HEADER_LEN: usize = 12;

pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let (rows, cols) = mel.values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    // iter() walks in logical row-major order regardless of memory layout
    for v in mel.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("mel file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header {rows}x{cols} needs {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(MelSpectrogram::new(values))
}

pub fn save_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, encode_mel(mel)).map_err(|e| Error::io(path, e))
}

pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mel(&bytes)
}
