//! Binary patch container.
//!
//! Little-endian layout: 4-byte magic (`DFPK` for feature patches, `DCPK`
//! for cost patches), then u32 version (1), u32 frame_id, u32 camera_id,
//! u32 D, u32 count, followed by `count` records of u32 keypoint_index,
//! i32 origin_u, i32 origin_v and 16*16*D f32 samples (v outer, u inner,
//! channel innermost). Cost patch files always have D = 3.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{
    CostPatch, CostStore, FeatureError, FeaturePatch, FeatureStore, PatchKey, COST_CHANNELS,
    PATCH_SIZE,
};
use crate::model::{CameraId, FrameId};
use crate::scalar::Real;

pub const FEATURE_MAGIC: &[u8; 4] = b"DFPK";
pub const COST_MAGIC: &[u8; 4] = b"DCPK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchFileKind {
    Features,
    Costs,
}

impl PatchFileKind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            PatchFileKind::Features => FEATURE_MAGIC,
            PatchFileKind::Costs => COST_MAGIC,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            PatchFileKind::Features => "dfpk",
            PatchFileKind::Costs => "dcpk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPatch {
    pub keypoint_index: u32,
    pub origin: [i32; 2],
    pub data: Vec<f32>,
}

/// Decoded content of one patch file.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFile {
    pub kind: PatchFileKind,
    pub frame_id: FrameId,
    pub camera_id: CameraId,
    pub dim: u32,
    pub patches: Vec<RawPatch>,
}

pub fn encode_patch_file(file: &PatchFile) -> Vec<u8> {
    let per_patch = 12 + PATCH_SIZE * PATCH_SIZE * file.dim as usize * 4;
    let mut out = Vec::with_capacity(HEADER_LEN + per_patch * file.patches.len());
    out.extend_from_slice(file.kind.magic());
    for v in [
        FORMAT_VERSION,
        file.frame_id,
        file.camera_id,
        file.dim,
        file.patches.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &file.patches {
        out.extend_from_slice(&p.keypoint_index.to_le_bytes());
        out.extend_from_slice(&p.origin[0].to_le_bytes());
        out.extend_from_slice(&p.origin[1].to_le_bytes());
        for x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes a patch file. Every malformed input yields an error, never a panic.
pub fn decode_patch_file(bytes: &[u8], source_name: &str) -> Result<PatchFile, FeatureError> {
    let malformed = |reason: &str| FeatureError::MalformedHeader {
        source_name: source_name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::TruncatedFile {
            source_name: source_name.to_string(),
            offset: bytes.len(),
        });
    }
    let kind = match &bytes[0..4] {
        m if m == FEATURE_MAGIC => PatchFileKind::Features,
        m if m == COST_MAGIC => PatchFileKind::Costs,
        _ => return Err(malformed("unknown magic")),
    };
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(malformed(&format!("unsupported version {version}")));
    }
    let frame_id = read_u32(bytes, 8);
    let camera_id = read_u32(bytes, 12);
    let dim = read_u32(bytes, 16);
    let count = read_u32(bytes, 20) as usize;
    if dim == 0 {
        return Err(malformed("zero channel count"));
    }
    if kind == PatchFileKind::Costs && dim as usize != COST_CHANNELS {
        return Err(malformed(&format!("cost patches need 3 channels, found {dim}")));
    }
    let samples = (PATCH_SIZE * PATCH_SIZE)
        .checked_mul(dim as usize)
        .ok_or_else(|| malformed("channel count overflow"))?;
    let per_patch = samples
        .checked_mul(4)
        .and_then(|b| b.checked_add(12))
        .ok_or_else(|| malformed("channel count overflow"))?;
    let payload = bytes.len() - HEADER_LEN;
    let complete = payload / per_patch;
    if complete < count {
        return Err(FeatureError::TruncatedFile {
            source_name: source_name.to_string(),
            offset: HEADER_LEN + complete * per_patch,
        });
    }
    if payload != count * per_patch {
        return Err(malformed("trailing bytes after last patch"));
    }
    let mut patches = Vec::with_capacity(count);
    let mut at = HEADER_LEN;
    for _ in 0..count {
        let keypoint_index = read_u32(bytes, at);
        let origin = [read_u32(bytes, at + 4) as i32, read_u32(bytes, at + 8) as i32];
        at += 12;
        let data: Vec<f32> = bytes[at..at + samples * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(malformed(&format!(
                "non-finite sample in patch for keypoint {keypoint_index}"
            )));
        }
        at += samples * 4;
        patches.push(RawPatch {
            keypoint_index,
            origin,
            data,
        });
    }
    Ok(PatchFile {
        kind,
        frame_id,
        camera_id,
        dim,
        patches,
    })
}

/// Content of a patch directory.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedPatches {
    Features(FeatureStore<f32>),
    Costs(CostStore<f32>),
}

fn io_err(path: &Path, e: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>, FeatureError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every patch file in `dir`. All files must share one kind.
pub fn load_patch_dir(dir: &Path) -> Result<LoadedPatches, FeatureError> {
    let mut features = FeatureStore::new();
    let mut costs = CostStore::new();
    for path in read_dir_sorted(dir)? {
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let name = path.display().to_string();
        let file = decode_patch_file(&bytes, &name)?;
        for raw in file.patches {
            let key = PatchKey::new(file.frame_id, file.camera_id, raw.keypoint_index);
            let duplicate = match file.kind {
                PatchFileKind::Features => {
                    let patch = FeaturePatch::new(key, raw.origin, file.dim as usize, raw.data)?;
                    features.insert(key, patch).is_some()
                }
                PatchFileKind::Costs => {
                    let patch = CostPatch::new(key, raw.origin, raw.data)?;
                    costs.insert(key, Arc::new(patch)).is_some()
                }
            };
            if duplicate {
                return Err(FeatureError::DuplicateKey(key));
            }
        }
    }
    match (features.is_empty(), costs.is_empty()) {
        (_, true) => Ok(LoadedPatches::Features(features)),
        (true, false) => Ok(LoadedPatches::Costs(costs)),
        (false, false) => Err(FeatureError::MalformedHeader {
            source_name: dir.display().to_string(),
            reason: "directory mixes feature and cost patch files".into(),
        }),
    }
}

pub fn load_feature_patches(dir: &Path) -> Result<FeatureStore<f32>, FeatureError> {
    match load_patch_dir(dir)? {
        LoadedPatches::Features(s) => Ok(s),
        LoadedPatches::Costs(_) => Err(FeatureError::MalformedHeader {
            source_name: dir.display().to_string(),
            reason: "expected feature patches, found cost patches".into(),
        }),
    }
}

pub fn load_cost_patches(dir: &Path) -> Result<CostStore<f32>, FeatureError> {
    match load_patch_dir(dir)? {
        LoadedPatches::Costs(s) => Ok(s),
        LoadedPatches::Features(s) if s.is_empty() => Ok(CostStore::new()),
        LoadedPatches::Features(_) => Err(FeatureError::MalformedHeader {
            source_name: dir.display().to_string(),
            reason: "expected cost patches, found feature patches".into(),
        }),
    }
}

fn write_grouped(
    dir: &Path,
    kind: PatchFileKind,
    dim: u32,
    groups: BTreeMap<(FrameId, CameraId), Vec<RawPatch>>,
) -> Result<(), FeatureError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for ((frame_id, camera_id), patches) in groups {
        let file = PatchFile {
            kind,
            frame_id,
            camera_id,
            dim,
            patches,
        };
        let path = dir.join(format!(
            "frame{frame_id:04}_cam{camera_id:04}.{}",
            kind.extension()
        ));
        fs::write(&path, encode_patch_file(&file)).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Writes one file per (frame, camera). Patches are narrowed to f32.
pub fn write_feature_store<T: Real>(dir: &Path, store: &FeatureStore<T>) -> Result<(), FeatureError> {
    let mut dim = None;
    let mut groups: BTreeMap<_, Vec<RawPatch>> = BTreeMap::new();
    for (key, patch) in store {
        if *dim.get_or_insert(patch.dim) != patch.dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim.unwrap(),
                found: patch.dim,
            });
        }
        groups
            .entry((key.frame_id, key.camera_id))
            .or_default()
            .push(RawPatch {
                keypoint_index: key.keypoint_index,
                origin: patch.origin,
                data: patch.data.iter().map(|x| x.to_f64_lossy() as f32).collect(),
            });
    }
    write_grouped(dir, PatchFileKind::Features, dim.unwrap_or(1) as u32, groups)
}

pub fn write_cost_store<T: Real>(dir: &Path, store: &CostStore<T>) -> Result<(), FeatureError> {
    let mut groups: BTreeMap<_, Vec<RawPatch>> = BTreeMap::new();
    for (key, patch) in store {
        groups
            .entry((key.frame_id, key.camera_id))
            .or_default()
            .push(RawPatch {
                keypoint_index: key.keypoint_index,
                origin: patch.origin,
                data: patch.data.iter().map(|x| x.to_f64_lossy() as f32).collect(),
            });
    }
    write_grouped(dir, PatchFileKind::Costs, COST_CHANNELS as u32, groups)
}
