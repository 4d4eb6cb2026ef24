//! Local-descriptor sets: the variable-length inputs to the encoders, their
//! binary file format, and multi-skip pooling across playback speeds.

use crate::model::{write_atomic, VideoId};
use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

const DSC_MAGIC: &[u8; 9] = b"CBVR-DSC1";

/// A video's local descriptors plus their normalized space-time locations.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    /// Row-major `m × d_loc` descriptor values.
    pub descriptors: Vec<f32>,
    /// Row-major `m × 3` (x, y, t) locations, each in [0, 1].
    pub coords: Vec<f32>,
    pub d_loc: usize,
    pub video_id: VideoId,
}

impl DescriptorSet {
    pub fn new(
        video_id: VideoId,
        descriptors: Vec<f32>,
        coords: Vec<f32>,
        d_loc: usize,
    ) -> Result<Self> {
        if d_loc == 0 {
            return Err(Error::Data("descriptor dimension must be positive".into()));
        }
        if descriptors.len() % d_loc != 0 {
            return Err(Error::Data("descriptor buffer not a multiple of d_loc".into()));
        }
        let m = descriptors.len() / d_loc;
        if coords.len() != m * 3 {
            return Err(Error::Data(format!(
                "expected {m}×3 coords, got {} values",
                coords.len()
            )));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("descriptors contain NaN/Inf".into()));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Data("coords outside [0,1]".into()));
        }
        Ok(DescriptorSet { descriptors, coords, d_loc, video_id })
    }

    /// Number of descriptors.
    pub fn m(&self) -> usize {
        if self.d_loc == 0 { 0 } else { self.descriptors.len() / self.d_loc }
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.d_loc..(i + 1) * self.d_loc]
    }

    pub fn coord(&self, i: usize) -> &[f32] {
        &self.coords[i * 3..(i + 1) * 3]
    }
}

/// Multi-skip pooling configuration: which frame-skip levels contribute
/// descriptors. Levels must be distinct and sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MifsConfig {
    pub skip_levels: Vec<u32>,
}

impl Default for MifsConfig {
    fn default() -> Self {
        MifsConfig { skip_levels: vec![0, 2, 5] }
    }
}

impl MifsConfig {
    pub fn new(skip_levels: Vec<u32>) -> Result<Self> {
        if skip_levels.is_empty() {
            return Err(Error::Config("at least one skip level required".into()));
        }
        if skip_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("skip levels must be distinct and sorted".into()));
        }
        Ok(MifsConfig { skip_levels })
    }
}

/// Pools one descriptor set per skip level into a single set by row-wise
/// concatenation (descriptors and coords alike), so one encoding pass sees
/// the video at every configured playback speed.
pub fn mifs_pool(sets: &[DescriptorSet], config: &MifsConfig) -> Result<DescriptorSet> {
    if sets.len() != config.skip_levels.len() {
        return Err(Error::Data(format!(
            "expected one descriptor set per skip level ({}), got {}",
            config.skip_levels.len(),
            sets.len()
        )));
    }
    let d_loc = sets[0].d_loc;
    let video_id = sets[0].video_id.clone();
    let mut descriptors = Vec::new();
    let mut coords = Vec::new();
    for set in sets {
        if set.d_loc != d_loc {
            return Err(Error::Data(format!(
                "skip-level descriptor dimension mismatch: {} vs {d_loc}",
                set.d_loc
            )));
        }
        descriptors.extend_from_slice(&set.descriptors);
        coords.extend_from_slice(&set.coords);
    }
    DescriptorSet::new(video_id, descriptors, coords, d_loc)
}

/// Writes a descriptor set in the binary interchange format: magic
/// `CBVR-DSC1`, u32-LE m and d_loc, `m·d_loc` f32-LE descriptor values,
/// `m·3` f32-LE coords, then the video id (u16-LE length + UTF-8).
pub fn write_descriptor_file(path: &Path, set: &DescriptorSet) -> Result<()> {
    let mut out = Vec::with_capacity(17 + 4 * (set.descriptors.len() + set.coords.len()));
    out.extend_from_slice(DSC_MAGIC);
    out.extend_from_slice(&(set.m() as u32).to_le_bytes());
    out.extend_from_slice(&(set.d_loc as u32).to_le_bytes());
    for v in &set.descriptors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &set.coords {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let id = set.video_id.as_str().as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    write_atomic(path, &out)
}

/// Reads a descriptor file written by [`write_descriptor_file`].
pub fn read_descriptor_file(path: &Path) -> Result<DescriptorSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < DSC_MAGIC.len() + 8 {
        return Err(fail("truncated descriptor file"));
    }
    if &bytes[..9] != DSC_MAGIC {
        return Err(fail("bad magic (not a descriptor file)"));
    }
    let m = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let d_loc = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let mut off = 17usize;
    let take_f32s = |count: usize, off: &mut usize| -> Result<Vec<f32>> {
        let end = *off + 4 * count;
        if bytes.len() < end {
            return Err(fail("truncated descriptor file"));
        }
        let vals = bytes[*off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off = end;
        Ok(vals)
    };
    let descriptors = take_f32s(m * d_loc, &mut off)?;
    let coords = take_f32s(m * 3, &mut off)?;
    if bytes.len() < off + 2 {
        return Err(fail("truncated descriptor file"));
    }
    let id_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
    off += 2;
    if bytes.len() < off + id_len {
        return Err(fail("truncated descriptor file"));
    }
    let id = std::str::from_utf8(&bytes[off..off + id_len])
        .map_err(|_| fail("video id is not UTF-8"))?;
    DescriptorSet::new(VideoId::new(id)?, descriptors, coords, d_loc)
}
