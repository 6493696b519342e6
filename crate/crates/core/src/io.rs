//! On-disk formats: the `VADF` feature container and the JSON-lines
//! annotation sidecar.
//!
//! Container layout (little-endian):
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `"VADF"`              |
//! | 4      | 4    | version `u32` = 1           |
//! | 8      | 4    | rows `n` (`u32`)            |
//! | 12     | 4    | columns `d` (`u32`)         |
//! | 16     | 1    | dtype `u8` = 1 (float32)    |
//! | 17     | 3    | reserved, zero              |
//! | 20     | 4nd  | row-major `f32` payload     |

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::{Dataset, FeatureSequence, Video, VideoAnnotation};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VADF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 20;

/// File name of the annotation sidecar inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Serializes a matrix into container bytes. Rejects non-finite entries.
pub fn encode_matrix(m: &Array2<f32>) -> Result<Vec<u8>> {
    if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    let (n, d) = m.dim();
    let to_u32 = |x: usize| {
        u32::try_from(x).map_err(|_| Error::InvalidSequence(format!("dimension {x} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(n)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&[0u8; 3]);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses container bytes back into a matrix.
pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n = word(8) as usize;
    let d = word(12) as usize;
    if bytes[16] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[16]));
    }
    let expected = HEADER_LEN + 4 * n * d;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::InvalidSequence(e.to_string()))?;
    if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

/// Writes a feature sequence. The video id is not part of the container;
/// readers take it from the file stem.
pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    write_matrix(path, seq.features())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, m)
}

pub fn write_annotations(path: impl AsRef<Path>, anns: &[VideoAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ann in anns {
        let line = serde_json::to_string(ann).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<VideoAnnotation>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: VideoAnnotation = serde_json::from_str(&line)
            .map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        ann.validate(None)?;
        out.push(ann);
    }
    Ok(out)
}

fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.vadf"))
}

/// Writes `<dir>/annotations.jsonl` plus one `<video_id>.vadf` per video.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in &ds.videos {
        write_feature_file(feature_path(dir, v.features.video_id()), &v.features)?;
    }
    let anns: Vec<_> = ds.videos.iter().map(|v| v.annotation.clone()).collect();
    write_annotations(dir.join(ANNOTATIONS_FILE), &anns)
}

/// Loads a dataset directory written by [`save_dataset`] (or by any external
/// producer following the same layout).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let anns = read_annotations(dir.join(ANNOTATIONS_FILE))?;
    let videos = anns
        .into_iter()
        .map(|annotation| {
            let features = read_feature_file(feature_path(dir, &annotation.video_id))?;
            Ok(Video {
                features,
                annotation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(videos)
}
