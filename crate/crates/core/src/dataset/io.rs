use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Category, Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};

pub const FRAME_MAGIC: [u8; 4] = *b"PCF1";

/// Little-endian frame encoding: magic, `u32` count, `count × 3` f32
/// coordinates, then the box as 7 f32 `(x, y, z, w, l, h, θ)`.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let n = frame.cloud.len();
    let mut out = Vec::with_capacity(8 + 12 * n + 28);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for p in &frame.cloud.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let b = &frame.gt;
    for v in b.center.iter().chain(&b.size).chain(std::iter::once(&b.heading)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 4 || bytes[..4] != FRAME_MAGIC {
        return Err(Error::BadMagic { expected: FRAME_MAGIC, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing point count".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 12 * n + 28;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("{} bytes for {n} points, need {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Truncated(format!("{} trailing bytes after frame", bytes.len() - expected)));
    }
    let floats: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = floats.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("value {} at float offset {i}", floats[i])));
    }
    let points = floats[..3 * n].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let g = &floats[3 * n..];
    let gt = Box3D::new([g[0], g[1], g[2]], [g[3], g[4], g[5]], g[6])?;
    Ok(Frame { cloud: PointCloud::new(points), gt })
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    Ok(fs::write(path, encode_frame(frame))?)
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    decode_frame(&fs::read(path)?)
}

/// Sequence manifest; frame paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub category: Category,
    pub frames: Vec<String>,
}

/// Writes `<dir>/<id>.json` plus `<dir>/<id>/NNNN.pcf`.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf> {
    fs::create_dir_all(dir.join(&seq.id))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let rel = format!("{}/{i:04}.pcf", seq.id);
        write_frame(&dir.join(&rel), f)?;
        frames.push(rel);
    }
    let manifest = Manifest { id: seq.id.clone(), category: seq.category, frames };
    let path = dir.join(format!("{}.json", seq.id));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn load_sequence(manifest_path: &Path) -> Result<Sequence> {
    let m: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let frames = m.frames.iter().map(|f| read_frame(&base.join(f))).collect::<Result<Vec<_>>>()?;
    let seq = Sequence { id: m.id, category: m.category, frames };
    seq.validate()?;
    Ok(seq)
}

pub fn save_dataset(dir: &Path, seqs: &[Sequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in seqs {
        save_sequence(dir, s)?;
    }
    Ok(())
}

/// Every `*.json` manifest directly under `dir`, ordered by sequence id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    let mut seqs = paths.iter().map(|p| load_sequence(p)).collect::<Result<Vec<_>>>()?;
    seqs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(seqs)
}
