//! Bit-exact file formats: PMAP probability maps, PGM masks, and the JSON
//! manifest/config/report schemas.
//!
//! PMAP is a purpose-built little-endian container so upstream model code in
//! any language can emit it with a dozen lines and no dependencies:
//!
//! ```text
//! magic "PMAP" (4 bytes) | version u16 = 1 | num_classes u16 |
//! height u32 | width u32 | payload: height*width*num_classes f32,
//! row-major, class-fastest
//! ```
//!
//! Masks travel as binary PGM (P5, maxval 255; bytes > 127 read as label 1).
//! Every writer goes through a temp-file-plus-rename so readers never see a
//! half-written file, and serialization is deterministic: identical values
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClassLabel, CoreError, HcrfWeights, LabelMask, PipelineConfig, ProbMap};

const PMAP_MAGIC: [u8; 4] = *b"PMAP";
const PMAP_VERSION: u16 = 1;
const PMAP_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: not a PMAP file (magic {found:?})", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: unsupported PMAP version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error(
        "{}: truncated at byte {offset}: expected {expected} bytes, found {actual}",
        path.display()
    )]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error(
        "{}: dimensions {height}x{width}x{num_classes} overflow the addressable payload",
        path.display()
    )]
    DimensionOverflow {
        path: PathBuf,
        height: u64,
        width: u64,
        num_classes: u64,
    },
    #[error("{}: {source}", path.display())]
    InvalidData {
        path: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(
        "{}: image '{image_id}' references missing file {}",
        manifest.display(),
        path.display()
    )]
    DanglingPath {
        manifest: PathBuf,
        image_id: String,
        path: PathBuf,
    },
    #[error(
        "{}: image '{image_id}' must list exactly 3 patch maps, found {found}",
        path.display()
    )]
    BadPatchMapCount {
        path: PathBuf,
        image_id: String,
        found: usize,
    },
}

impl IoError {
    /// Whether this error means an input file was absent (as opposed to
    /// present but malformed). The CLI maps missing inputs to usage errors.
    pub fn is_missing_input(&self) -> bool {
        match self {
            IoError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            IoError::DanglingPath { .. } => true,
            _ => false,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then
/// rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let tmp = parent.join(format!(
        ".{file_name}.{}.{}.tmp",
        process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

// ---------------------------------------------------------------------------
// PMAP

/// Serialize a probability map into the PMAP byte layout.
pub fn pmap_bytes(map: &ProbMap) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(PMAP_HEADER_LEN + 4 * map.data().len());
    bytes.extend_from_slice(&PMAP_MAGIC);
    bytes.extend_from_slice(&PMAP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(map.num_classes() as u16).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &value in map.data() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    bytes
}

pub fn write_pmap(map: &ProbMap, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &pmap_bytes(map))
}

pub fn read_pmap(path: &Path) -> Result<ProbMap, IoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < PMAP_HEADER_LEN {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: PMAP_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != PMAP_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PMAP_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let num_classes = u64::from(u16::from_le_bytes([bytes[6], bytes[7]]));
    let height = u64::from(u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]));
    let width = u64::from(u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]));
    let payload_len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(num_classes))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(PMAP_HEADER_LEN as u64))
        .filter(|&n| n <= usize::MAX as u64)
        .ok_or(IoError::DimensionOverflow {
            path: path.to_path_buf(),
            height,
            width,
            num_classes,
        })? as usize;
    if bytes.len() < payload_len {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: payload_len,
            actual: bytes.len(),
        });
    }
    if bytes.len() > payload_len {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes after the payload", bytes.len() - payload_len),
        });
    }
    let data = bytes[PMAP_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ProbMap::new(height as usize, width as usize, num_classes as usize, data).map_err(|source| {
        IoError::InvalidData {
            path: path.to_path_buf(),
            source,
        }
    })
}

// ---------------------------------------------------------------------------
// PGM masks

/// Serialize a binary mask as PGM P5, labels 0/1 mapped to bytes 0/255.
pub fn mask_bytes(mask: &LabelMask) -> Result<Vec<u8>, CoreError> {
    mask.validate_classes(2)?;
    let header = format!("P5\n{} {}\n255\n", mask.width(), mask.height());
    let mut bytes = Vec::with_capacity(header.len() + mask.labels().len());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend(mask.labels().iter().map(|&l| if l == 1 { 255u8 } else { 0 }));
    Ok(bytes)
}

pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<(), IoError> {
    let bytes = mask_bytes(mask).map_err(|source| IoError::InvalidData {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, &bytes)
}

/// Skip whitespace and `#`-to-end-of-line comments, then return the next
/// ASCII token.
fn next_pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

pub fn read_mask(path: &Path) -> Result<LabelMask, IoError> {
    let format_err = |message: String| IoError::Format {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let magic = next_pgm_token(&bytes, &mut pos)
        .ok_or_else(|| format_err("empty file".to_string()))?;
    if magic != b"P5" {
        return Err(format_err(format!(
            "not a binary PGM (type {:?}, expected \"P5\")",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut dims = [0usize; 3];
    for (what, slot) in ["width", "height", "maxval"].iter().zip(&mut dims) {
        let token = next_pgm_token(&bytes, &mut pos)
            .ok_or_else(|| format_err(format!("missing {what}")))?;
        *slot = std::str::from_utf8(token)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                format_err(format!("bad {what} token {:?}", String::from_utf8_lossy(token)))
            })?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(format_err(format!("unexpected maxval {maxval} (expected 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing separator after maxval".to_string()));
    }
    pos += 1;
    let expected = pos + height * width;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(format_err(format!(
            "{} trailing bytes after the payload",
            bytes.len() - expected
        )));
    }
    let labels = bytes[pos..].iter().map(|&b| u8::from(b > 127)).collect();
    LabelMask::new(height, width, labels).map_err(|source| IoError::InvalidData {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// JSON

/// Read and deserialize a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Serialize to pretty JSON (plus trailing newline) and write atomically.
/// Serialization order is deterministic, so equal values give equal bytes.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_weights(path: &Path) -> Result<HcrfWeights, IoError> {
    let weights: HcrfWeights = read_json(path)?;
    weights.validate().map_err(|source| IoError::InvalidData {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(weights)
}

pub fn write_weights(weights: &HcrfWeights, path: &Path) -> Result<(), IoError> {
    write_json(weights, path)
}

pub fn read_config(path: &Path) -> Result<PipelineConfig, IoError> {
    let config: PipelineConfig = read_json(path)?;
    config.validate().map_err(|source| IoError::InvalidData {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(config)
}

pub fn write_config(config: &PipelineConfig, path: &Path) -> Result<(), IoError> {
    write_json(config, path)
}

// ---------------------------------------------------------------------------
// Manifests

/// One dataset image: its id, whole-image label, and the files carrying its
/// probability maps and optional ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub label: ClassLabel,
    pub pixel_pmap: PathBuf,
    /// Exactly three backbone patch-level maps.
    pub patch_pmaps: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
}

/// A dataset listing. Paths are stored as written (synthetic trees use
/// relative names so whole trees are byte-comparable); [`read_manifest`]
/// resolves them against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

/// Read a manifest, resolve every path relative to the manifest's directory,
/// and verify the referenced files exist.
pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let mut manifest: Manifest = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut manifest.images {
        if entry.patch_pmaps.len() != 3 {
            return Err(IoError::BadPatchMapCount {
                path: path.to_path_buf(),
                image_id: entry.image_id.clone(),
                found: entry.patch_pmaps.len(),
            });
        }
        let image_id = entry.image_id.clone();
        let resolve = |p: &mut PathBuf| -> Result<(), IoError> {
            if p.is_relative() {
                *p = base.join(&p);
            }
            if !p.exists() {
                return Err(IoError::DanglingPath {
                    manifest: path.to_path_buf(),
                    image_id: image_id.clone(),
                    path: p.clone(),
                });
            }
            Ok(())
        };
        resolve(&mut entry.pixel_pmap)?;
        for patch in &mut entry.patch_pmaps {
            resolve(patch)?;
        }
        if let Some(gt) = &mut entry.gt_mask {
            resolve(gt)?;
        }
    }
    Ok(manifest)
}

/// Write a manifest exactly as stored (no path rewriting).
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), IoError> {
    write_json(manifest, path)
}
