//! Coarse frame scores from either branch and fine-grained segment
//! extraction from the alignment map.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{DetectionSegment, LabelVocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelOutput, VadClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferencePath {
    #[serde(rename = "c-branch")]
    CBranch,
    #[serde(rename = "a-branch")]
    ABranch,
}

impl InferencePath {
    pub const ALL: [InferencePath; 2] = [InferencePath::CBranch, InferencePath::ABranch];

    pub fn as_str(self) -> &'static str {
        match self {
            InferencePath::CBranch => "c-branch",
            InferencePath::ABranch => "a-branch",
        }
    }
}

impl fmt::Display for InferencePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferencePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c-branch" => Ok(InferencePath::CBranch),
            "a-branch" => Ok(InferencePath::ABranch),
            other => Err(Error::UnknownPath(other.to_string())),
        }
    }
}

/// Cosine similarity mapped to `[0, 1]`.
pub fn cosine_to_unit(s: f64) -> f64 {
    (s + 1.0) / 2.0
}

/// Inverse of [`cosine_to_unit`].
pub fn unit_to_cosine(p: f64) -> f64 {
    2.0 * p - 1.0
}

/// Per-frame outputs needed for scoring, possibly stitched from chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    /// Anomaly confidence per frame.
    pub anomaly: Vec<f64>,
    /// Alignment map, `n x m`.
    pub alignment: Array2<f64>,
}

impl From<&ModelOutput> for FrameOutput {
    fn from(out: &ModelOutput) -> Self {
        Self {
            anomaly: out.anomaly_scores(),
            alignment: out.alignment.clone(),
        }
    }
}

/// Frame-level anomaly scores in `[0, 1]`. The A-branch score is one minus
/// the mapped similarity to the normal class.
pub fn coarse_scores(out: &FrameOutput, normal_index: usize, path: InferencePath) -> Vec<f64> {
    match path {
        InferencePath::CBranch => out.anomaly.clone(),
        InferencePath::ABranch => out
            .alignment
            .column(normal_index)
            .iter()
            .map(|&s| 1.0 - cosine_to_unit(s))
            .collect(),
    }
}

/// Maximal runs of `M(i, j) >= threshold` for every abnormal class `j`.
/// `threshold` is on the raw cosine scale; confidence is the mean mapped
/// similarity over the run.
pub fn extract_segments(
    alignment: &Array2<f64>,
    vocab: &LabelVocabulary,
    threshold: f64,
    min_length: usize,
) -> Vec<DetectionSegment> {
    let mut out = Vec::new();
    let n = alignment.nrows();
    for j in vocab.abnormal_indices() {
        let col = alignment.column(j);
        let mut i = 0;
        while i < n {
            if col[i] < threshold {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && col[i] >= threshold {
                i += 1;
            }
            if i - start >= min_length.max(1) {
                let mean = col.slice(ndarray::s![start..i]).mean().unwrap_or(0.0);
                out.push(DetectionSegment {
                    class: vocab.labels()[j].clone(),
                    start,
                    end: i,
                    confidence: cosine_to_unit(mean),
                });
            }
        }
    }
    out
}

/// Runs the model over consecutive chunks of at most `chunk` frames and
/// stitches the per-frame outputs back together.
pub fn predict_frames(model: &VadClip, t_out: &Array2<f64>, x: &Array2<f64>, chunk: usize) -> Result<FrameOutput> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidSequence("no frames".into()));
    }
    let chunk = chunk.max(1);
    let mut anomaly = Vec::with_capacity(n);
    let mut maps = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let out = model.forward_with_classes(&x.slice(ndarray::s![start..end, ..]).to_owned(), t_out)?;
        anomaly.extend(out.anomaly_scores());
        maps.push(out.alignment);
        start = end;
    }
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    let alignment = concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(FrameOutput { anomaly, alignment })
}
