//! Core data containers shared by every stage of the pipeline.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Per-video matrix of snippet features, one row per snippet.
///
/// Stored as `f32` so that the on-disk container round-trips bit-exactly;
/// model code widens to `f64` on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    video_id: String,
    features: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Array2<f32>) -> Result<Self> {
        let video_id = video_id.into();
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidSequence(format!(
                "{video_id}: shape {n}x{d} has an empty axis"
            )));
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self { video_id, features })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

/// Ground-truth event: half-open frame interval `[start, end)` with its class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct GtSegment {
    pub start: usize,
    pub end: usize,
    pub class: String,
}

impl From<(usize, usize, String)> for GtSegment {
    fn from((start, end, class): (usize, usize, String)) -> Self {
        Self { start, end, class }
    }
}

impl From<GtSegment> for (usize, usize, String) {
    fn from(s: GtSegment) -> Self {
        (s.start, s.end, s.class)
    }
}

/// Video-level label plus optional frame-level events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub label: u8,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub segments: Vec<GtSegment>,
}

impl VideoAnnotation {
    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }

    /// Checks the label/class consistency and, when `n` is given, that every
    /// segment lies inside `[0, n)`.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let fail = |reason: String| Error::InvalidAnnotation {
            video_id: self.video_id.clone(),
            reason,
        };
        match self.label {
            0 if !self.classes.is_empty() => {
                return Err(fail("normal video lists anomaly classes".into()))
            }
            1 if self.classes.is_empty() => {
                return Err(fail("abnormal video has no classes".into()))
            }
            0 | 1 => {}
            other => return Err(fail(format!("label {other} is not binary"))),
        }
        for seg in &self.segments {
            if seg.start >= seg.end {
                return Err(fail(format!("segment [{}, {}) is empty", seg.start, seg.end)));
            }
            if let Some(n) = n {
                if seg.end > n {
                    return Err(fail(format!(
                        "segment [{}, {}) exceeds {n} frames",
                        seg.start, seg.end
                    )));
                }
            }
            if !self.classes.contains(&seg.class) {
                return Err(fail(format!("segment class {:?} not among video classes", seg.class)));
            }
        }
        Ok(())
    }

    /// Binary frame labels derived from the segments.
    pub fn frame_labels(&self, n: usize) -> Vec<bool> {
        let mut labels = vec![false; n];
        for seg in &self.segments {
            for l in &mut labels[seg.start.min(n)..seg.end.min(n)] {
                *l = true;
            }
        }
        labels
    }
}

/// Ordered class labels with the normal class at a known index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    normal_index: usize,
    token_ids: Vec<Vec<u32>>,
}

impl LabelVocabulary {
    pub fn new(labels: Vec<String>, normal_index: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        if normal_index >= labels.len() {
            return Err(Error::InvalidVocabulary(format!(
                "normal index {normal_index} out of range"
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidVocabulary("duplicate labels".into()));
        }
        let token_ids = labels.iter().map(|l| tokenize(l)).collect::<Result<_>>()?;
        Ok(Self {
            labels,
            normal_index,
            token_ids,
        })
    }

    /// Builds a vocabulary with `normal` first followed by `anomalies`.
    pub fn with_normal_first(normal: &str, anomalies: &[String]) -> Result<Self> {
        let mut labels = vec![normal.to_string()];
        labels.extend(anomalies.iter().cloned());
        Self::new(labels, 0)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn normal_index(&self) -> usize {
        self.normal_index
    }

    pub fn normal_label(&self) -> &str {
        &self.labels[self.normal_index]
    }

    pub fn token_ids(&self, index: usize) -> &[u32] {
        &self.token_ids[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Indices of every non-normal label, in vocabulary order.
    pub fn abnormal_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(move |&i| i != self.normal_index)
    }

    /// Target class indices for the alignment loss: the normal class for
    /// normal videos, otherwise every listed class.
    pub fn targets_for(&self, ann: &VideoAnnotation) -> Result<Vec<usize>> {
        if !ann.is_abnormal() {
            return Ok(vec![self.normal_index]);
        }
        ann.classes
            .iter()
            .map(|c| {
                self.index_of(c).ok_or_else(|| Error::InvalidAnnotation {
                    video_id: ann.video_id.clone(),
                    reason: format!("class {c:?} not in vocabulary"),
                })
            })
            .collect()
    }
}

/// One fine-grained detection: a class-labelled half-open frame interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSegment {
    pub class: String,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// A feature sequence together with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub annotation: VideoAnnotation,
}

/// A split of annotated videos sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        if let Some(first) = videos.first() {
            let d = first.features.dim();
            for v in &videos {
                if v.features.dim() != d {
                    return Err(Error::ShapeMismatch(format!(
                        "video {} has dimension {}, dataset uses {d}",
                        v.features.video_id(),
                        v.features.dim()
                    )));
                }
                if v.features.video_id() != v.annotation.video_id {
                    return Err(Error::InvalidAnnotation {
                        video_id: v.annotation.video_id.clone(),
                        reason: format!("paired with features of {}", v.features.video_id()),
                    });
                }
                v.annotation.validate(Some(v.features.len()))?;
            }
        }
        Ok(Self { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite_features() {
        let err = FeatureSequence::new("v", array![[1.0f32, f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1 }));
    }

    #[test]
    fn rejects_empty_sequence() {
        assert!(FeatureSequence::new("v", Array2::zeros((0, 4))).is_err());
    }

    #[test]
    fn annotation_label_must_match_classes() {
        let ann = VideoAnnotation {
            video_id: "a".into(),
            label: 1,
            classes: vec![],
            segments: vec![],
        };
        assert!(ann.validate(None).is_err());
        let ann = VideoAnnotation {
            video_id: "a".into(),
            label: 0,
            classes: vec!["riot".into()],
            segments: vec![],
        };
        assert!(ann.validate(None).is_err());
    }

    #[test]
    fn annotation_segments_bounded() {
        let ann = VideoAnnotation {
            video_id: "a".into(),
            label: 1,
            classes: vec!["riot".into()],
            segments: vec![GtSegment { start: 2, end: 9, class: "riot".into() }],
        };
        assert!(ann.validate(Some(9)).is_ok());
        assert!(ann.validate(Some(8)).is_err());
        assert_eq!(
            ann.frame_labels(10),
            vec![false, false, true, true, true, true, true, true, true, false]
        );
    }

    #[test]
    fn vocabulary_requires_unique_labels() {
        assert!(LabelVocabulary::new(vec!["normal".into()], 0).is_err());
        assert!(LabelVocabulary::new(vec!["a".into(), "a".into()], 0).is_err());
        let v = LabelVocabulary::new(vec!["riot".into(), "normal".into()], 1).unwrap();
        assert_eq!(v.normal_label(), "normal");
        assert_eq!(v.abnormal_indices().collect::<Vec<_>>(), vec![0]);
    }
}
