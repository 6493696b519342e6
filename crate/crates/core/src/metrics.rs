//! Frame-level AP / AUC and segment-level mAP@IoU.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{DetectionSegment, GtSegment};
use crate::error::{Error, Result};

/// IoU thresholds 0.1, 0.2, ..., 0.5.
pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn score_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score threshold, descending.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::MetricUndefined("precision-recall needs a positive frame".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    Ok(score_groups(scores)
        .into_iter()
        .map(|group| {
            seen += group.len();
            tp += group.iter().filter(|&&i| labels[i]).count();
            PrPoint {
                threshold: scores[group[0]],
                precision: tp as f64 / seen as f64,
                recall: tp as f64 / positives as f64,
            }
        })
        .collect())
}

/// Step-wise area under the precision-recall curve; tied scores enter the
/// curve together.
pub fn frame_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in pr_curve(scores, labels)? {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// ROC AUC via the Mann-Whitney rank statistic with mid-ranks for ties.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined("AUC needs both classes".into()));
    }
    let mut groups = score_groups(scores);
    groups.reverse();
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for group in groups {
        let size = group.len() as f64;
        let mid = next_rank + (size - 1.0) / 2.0;
        rank_sum += mid * group.iter().filter(|&&i| labels[i]).count() as f64;
        next_rank += size;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Frame scores and labels of one video.
#[derive(Debug, Clone, Copy)]
pub struct VideoFrames<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
    pub abnormal: bool,
}

/// AUC over the frames of abnormal videos only.
pub fn ano_auc(videos: &[VideoFrames<'_>]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for v in videos.iter().filter(|v| v.abnormal) {
        check_lengths(v.scores, v.labels)?;
        scores.extend_from_slice(v.scores);
        labels.extend_from_slice(v.labels);
    }
    if scores.is_empty() {
        return Err(Error::MetricUndefined("no abnormal videos".into()));
    }
    frame_auc(&scores, &labels)
}

/// IoU of half-open intervals.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    /// mAP per threshold, aligned with `thresholds`.
    pub map: Vec<f64>,
    /// Per-class AP per threshold.
    pub per_class: BTreeMap<String, Vec<f64>>,
    pub average: f64,
}

/// Greedy detection matching and AP for one class at one threshold.
/// `preds` and `gts` are `(video, start, end)` / `(video, start, end, confidence)`.
fn class_ap(preds: &[(usize, usize, usize, f64)], gts: &[(usize, usize, usize)], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].3.total_cmp(&preds[a].3));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut ap) = (0usize, 0.0);
    for (rank, &pi) in order.iter().enumerate() {
        let (pv, ps, pe, _) = preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gv, gs, ge)) in gts.iter().enumerate() {
            if matched[gi] || gv != pv {
                continue;
            }
            let o = iou((ps, pe), (gs, ge));
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / gts.len() as f64
}

/// Segment-level mAP. `preds[v]` and `gts[v]` belong to the same video `v`;
/// matches never cross videos. Classes are those present in the ground truth.
pub fn map_at_iou(
    preds: &[Vec<DetectionSegment>],
    gts: &[Vec<GtSegment>],
    thresholds: &[f64],
) -> Result<MapResult> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "predictions for {} videos, ground truth for {}",
            preds.len(),
            gts.len()
        )));
    }
    let classes: BTreeSet<&str> = gts.iter().flatten().map(|g| g.class.as_str()).collect();
    if classes.is_empty() {
        return Err(Error::MetricUndefined("no ground-truth segments".into()));
    }
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let p: Vec<_> = preds
            .iter()
            .enumerate()
            .flat_map(|(v, segs)| {
                segs.iter()
                    .filter(|s| s.class == class)
                    .map(move |s| (v, s.start, s.end, s.confidence))
            })
            .collect();
        let g: Vec<_> = gts
            .iter()
            .enumerate()
            .flat_map(|(v, segs)| segs.iter().filter(|s| s.class == class).map(move |s| (v, s.start, s.end)))
            .collect();
        let aps = thresholds.iter().map(|&t| class_ap(&p, &g, t)).collect();
        per_class.insert(class.to_string(), aps);
    }
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| per_class.values().map(|aps: &Vec<f64>| aps[t]).sum::<f64>() / classes.len() as f64)
        .collect();
    let average = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    Ok(MapResult {
        thresholds: thresholds.to_vec(),
        map,
        per_class,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_worked_example() {
        let auc = frame_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn perfect_ranking() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        assert_eq!(frame_ap(&s, &l).unwrap(), 1.0);
        assert_eq!(frame_auc(&s, &l).unwrap(), 1.0);
    }

    #[test]
    fn ap_from_explicit_curve() {
        // Curve: t=0.8 (P=1, R=1/2), t=0.5 (P=1, R=1), t=0.1 (P=2/3, R=1).
        let ap = frame_ap(&[0.8, 0.1, 0.5], &[true, false, true]).unwrap();
        assert_eq!(ap, 1.0);
        // t=0.8 (P=1, R=1/2), t=0.5 (P=1/2, R=1/2), t=0.1 (P=2/3, R=1).
        let ap = frame_ap(&[0.8, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn tied_scores_form_one_step() {
        let ap = frame_ap(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(ap, 0.5);
        assert_eq!(frame_auc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn undefined_cases() {
        assert!(frame_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(frame_ap(&[0.1, 0.2], &[false, false]).is_err());
        assert!(frame_ap(&[0.1], &[false, true]).is_err());
        assert!(ano_auc(&[VideoFrames { scores: &[0.1], labels: &[false], abnormal: false }]).is_err());
    }

    #[test]
    fn ano_auc_restricts_to_abnormal_videos() {
        let normal = VideoFrames { scores: &[0.9, 0.95], labels: &[false, false], abnormal: false };
        let ab = VideoFrames { scores: &[0.2, 0.7, 0.6], labels: &[false, true, true], abnormal: true };
        assert_eq!(ano_auc(&[normal, ab]).unwrap(), 1.0);
        let flat = VideoFrames { scores: &[0.3; 4], labels: &[false, true, true, false], abnormal: true };
        assert_eq!(ano_auc(&[flat]).unwrap(), 0.5);
    }

    #[test]
    fn iou_interval_arithmetic() {
        assert_eq!(iou((0, 10), (5, 15)), 1.0 / 3.0);
        assert_eq!(iou((0, 5), (5, 10)), 0.0);
        assert_eq!(iou((2, 4), (2, 4)), 1.0);
    }

    fn det(class: &str, start: usize, end: usize, confidence: f64) -> DetectionSegment {
        DetectionSegment { class: class.into(), start, end, confidence }
    }

    fn gt(class: &str, start: usize, end: usize) -> GtSegment {
        GtSegment { start, end, class: class.into() }
    }

    #[test]
    fn one_third_overlap_by_threshold() {
        let r = map_at_iou(&[vec![det("a", 0, 10, 0.9)]], &[vec![gt("a", 5, 15)]], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert_eq!(r.map, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!((r.average - 0.6).abs() < 1e-15);
    }

    #[test]
    fn exact_match_and_empty_predictions() {
        let r = map_at_iou(&[vec![det("a", 3, 8, 0.4)]], &[vec![gt("a", 3, 8)]], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0));
        let r = map_at_iou(&[vec![]], &[vec![gt("a", 3, 8)]], &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert!(r.map.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn matches_stay_within_video() {
        let preds = vec![vec![], vec![det("a", 0, 4, 0.9)]];
        let gts = vec![vec![gt("a", 0, 4)], vec![]];
        let r = map_at_iou(&preds, &gts, &[0.5]).unwrap();
        assert_eq!(r.map, vec![0.0]);
    }
}
