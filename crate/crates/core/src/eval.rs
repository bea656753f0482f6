//! Per-frame labeling mAP and temporal localization mAP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CdcError, Result};
use crate::localize::Detection;
use crate::ops::softmax::ScoreMatrix;

/// An annotated action instance; frames `start..=end`, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video: String,
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl GroundTruthInstance {
    pub fn new(video: impl Into<String>, start: usize, end: usize, label: usize) -> Result<Self> {
        let g = GroundTruthInstance {
            video: video.into(),
            start,
            end,
            label,
        };
        if start > end {
            return Err(CdcError::InvalidArgument(format!(
                "instance {} has start {start} after end {end}",
                g.video
            )));
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// IoU of two inclusive frame intervals, counted over frame sets.
pub fn segment_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let (a0, a1) = (a.0.min(a.1), a.0.max(a.1));
    let (b0, b1) = (b.0.min(b.1), b.0.max(b.1));
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = ((a1 - a0 + 1) + (b1 - b0 + 1)) as f64 - inter;
    inter / union
}

/// Non-interpolated AP: mean precision at each relevant hit, ranking by
/// descending score with ties kept in input order. 0 when nothing is relevant.
pub fn average_precision(ranked: &[(f64, bool)], total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&i, &j| ranked[j].0.total_cmp(&ranked[i].0));
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// "per-frame" or "localization".
    pub metric: String,
    pub iou_threshold: Option<f64>,
    pub per_class_ap: Vec<f64>,
    /// Classes without any ground truth; their AP is 0 and still averaged.
    pub empty_classes: Vec<usize>,
    pub map: f64,
}

impl EvalReport {
    fn new(
        metric: &str,
        iou_threshold: Option<f64>,
        per_class_ap: Vec<f64>,
        empty_classes: Vec<usize>,
    ) -> Self {
        let map = if per_class_ap.is_empty() {
            0.0
        } else {
            per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64
        };
        EvalReport {
            metric: metric.to_string(),
            iou_threshold,
            per_class_ap,
            empty_classes,
            map,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per class, then the mean.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        match self.iou_threshold {
            Some(t) => writeln!(s, "{} mAP @ IoU > {t:.2}", self.metric),
            None => writeln!(s, "{} mAP", self.metric),
        }
        .expect("write to string");
        writeln!(s, "{:<8} {:>8}", "class", "AP").expect("write to string");
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            let flag = if self.empty_classes.contains(&c) {
                "  (no ground truth)"
            } else {
                ""
            };
            writeln!(s, "{c:<8} {:>8.4}{flag}", ap).expect("write to string");
        }
        writeln!(s, "{:<8} {:>8.4}", "mAP", self.map).expect("write to string");
        s
    }
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(CdcError::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

/// Rank every frame of every video by each action class's score; a frame is
/// relevant when it lies inside an instance of that class. Background is not
/// part of the class mean.
pub fn per_frame_map(
    scores: &BTreeMap<String, ScoreMatrix>,
    gt: &[GroundTruthInstance],
    k: usize,
) -> Result<EvalReport> {
    for g in gt {
        check_label(g.label, k)?;
        let p = scores
            .get(&g.video)
            .ok_or_else(|| CdcError::Missing(format!("no scores for video {}", g.video)))?;
        if g.end >= p.frames() {
            return Err(CdcError::Missing(format!(
                "scores for {} cover {} frames, instance ends at {}",
                g.video,
                p.frames(),
                g.end
            )));
        }
    }
    for (v, p) in scores {
        if p.classes() != k + 1 {
            return Err(CdcError::ShapeMismatch(format!(
                "scores for {v} have {} columns, expected {}",
                p.classes(),
                k + 1
            )));
        }
    }
    let mut aps = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for c in 0..k {
        let mut ranked = Vec::new();
        let mut relevant_total = 0usize;
        for (v, p) in scores {
            let mut relevant = vec![false; p.frames()];
            for g in gt.iter().filter(|g| g.label == c && &g.video == v) {
                relevant[g.start..=g.end].iter_mut().for_each(|r| *r = true);
            }
            relevant_total += relevant.iter().filter(|&&r| r).count();
            for (t, rel) in relevant.into_iter().enumerate() {
                ranked.push((p.get(t, c) as f64, rel));
            }
        }
        if relevant_total == 0 {
            empty.push(c);
        }
        aps.push(average_precision(&ranked, relevant_total));
    }
    Ok(EvalReport::new("per-frame", None, aps, empty))
}

/// Detection mAP: a detection is correct when it matches a not yet matched
/// instance of its class and video with IoU strictly above `iou_threshold`.
pub fn localization_map(
    detections: &[Detection],
    gt: &[GroundTruthInstance],
    iou_threshold: f64,
    k: usize,
) -> Result<EvalReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(CdcError::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    for g in gt {
        check_label(g.label, k)?;
    }
    for d in detections {
        check_label(d.label, k)?;
    }
    let mut aps = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for c in 0..k {
        let instances: Vec<&GroundTruthInstance> = gt.iter().filter(|g| g.label == c).collect();
        if instances.is_empty() {
            empty.push(c);
        }
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.label == c).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut matched = vec![false; instances.len()];
        let mut ranked = Vec::with_capacity(dets.len());
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in instances.iter().enumerate() {
                if matched[i] || g.video != d.video {
                    continue;
                }
                let iou = segment_iou((d.start, d.end), (g.start, g.end));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            let hit = match best {
                Some((i, iou)) if iou > iou_threshold => {
                    matched[i] = true;
                    true
                }
                _ => false,
            };
            ranked.push((d.score, hit));
        }
        aps.push(average_precision(&ranked, instances.len()));
    }
    Ok(EvalReport::new(
        "localization",
        Some(iou_threshold),
        aps,
        empty,
    ))
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn average_map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Localization mAP averaged over [`average_map_thresholds`].
pub fn average_map(
    detections: &[Detection],
    gt: &[GroundTruthInstance],
    k: usize,
) -> Result<(f64, Vec<EvalReport>)> {
    let reports = average_map_thresholds()
        .into_iter()
        .map(|t| localization_map(detections, gt, t, k))
        .collect::<Result<Vec<_>>>()?;
    let mean = reports.iter().map(|r| r.map).sum::<f64>() / reports.len() as f64;
    Ok((mean, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, start: usize, end: usize, label: usize, score: f64) -> Detection {
        Detection {
            video: video.into(),
            start,
            end,
            label,
            score,
        }
    }

    fn gt(video: &str, start: usize, end: usize, label: usize) -> GroundTruthInstance {
        GroundTruthInstance::new(video, start, end, label).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(segment_iou((3, 7), (3, 7)), 1.0);
        assert_eq!(segment_iou((0, 4), (5, 9)), 0.0);
        assert!((segment_iou((0, 9), (5, 14)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let r = [
            (0.9, true),
            (0.5, false),
            (0.4, false),
            (0.3, false),
            (0.1, false),
        ];
        assert_eq!(average_precision(&r, 1), 1.0);
        assert_eq!(average_precision(&[(0.3, false)], 0), 0.0);
        let r = [(0.9, true), (0.8, false), (0.7, true)];
        assert!((average_precision(&r, 2) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_input_order() {
        let r = [(0.5, false), (0.5, true)];
        assert_eq!(average_precision(&r, 1), 0.5);
        let r = [(0.5, true), (0.5, false)];
        assert_eq!(average_precision(&r, 1), 1.0);
    }

    #[test]
    fn perfect_frame_scores() {
        // 2 actions + background, 6 frames; class 0 on [1,2], class 1 on [4,5].
        let labels = [2, 0, 0, 2, 1, 1];
        let mut data = Vec::new();
        for &l in &labels {
            let mut row = vec![0.0f32; 3];
            row[l] = 1.0;
            data.extend(row);
        }
        let mut scores = BTreeMap::new();
        scores.insert("v".to_string(), ScoreMatrix::new(6, 3, data).unwrap());
        let gts = vec![gt("v", 1, 2, 0), gt("v", 4, 5, 1)];
        let r = per_frame_map(&scores, &gts, 2).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.empty_classes.is_empty());
    }

    #[test]
    fn empty_class_reported() {
        let data = vec![0.5f32; 8];
        let mut scores = BTreeMap::new();
        scores.insert(
            "v".to_string(),
            ScoreMatrix::new(4, 2, data.clone()).unwrap(),
        );
        let r = per_frame_map(&scores, &[], 1).unwrap();
        assert_eq!(r.per_class_ap, vec![0.0]);
        assert_eq!(r.empty_classes, vec![0]);
        assert!(per_frame_map(&scores, &[gt("w", 0, 1, 0)], 1).is_err());
    }

    #[test]
    fn exact_detections_score_one() {
        let gts = vec![gt("a", 0, 9, 0), gt("a", 20, 29, 1), gt("b", 5, 8, 0)];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video, g.start, g.end, g.label, 0.7))
            .collect();
        for t in [0.1, 0.5, 0.95] {
            assert_eq!(localization_map(&dets, &gts, t, 2).unwrap().map, 1.0);
        }
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![gt("a", 0, 9, 0)];
        let dets = vec![det("a", 0, 9, 0, 0.9), det("a", 0, 8, 0, 0.8)];
        let r = localization_map(&dets, &gts, 0.5, 1).unwrap();
        assert_eq!(r.map, 1.0);
        let dets = vec![
            det("a", 0, 8, 0, 0.8),
            det("a", 0, 9, 0, 0.9),
            det("a", 30, 40, 0, 0.95),
        ];
        let r = localization_map(&dets, &gts, 0.5, 1).unwrap();
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_fixture() {
        // Instances A=[0,9], B=[20,29], C=[40,49].
        // d1 (0.9) [0,9]   -> A, IoU 1, hit
        // d2 (0.8) [22,31] -> B, IoU 8/12, hit at 0.5
        // d3 (0.7) [2,11]  -> A taken, best unmatched is none overlapping -> miss
        // d4 (0.6) [44,53] -> C, IoU 6/14 = 0.43, miss at 0.5
        let gts = vec![gt("v", 0, 9, 0), gt("v", 20, 29, 0), gt("v", 40, 49, 0)];
        let dets = vec![
            det("v", 0, 9, 0, 0.9),
            det("v", 22, 31, 0, 0.8),
            det("v", 2, 11, 0, 0.7),
            det("v", 44, 53, 0, 0.6),
        ];
        let r = localization_map(&dets, &gts, 0.5, 1).unwrap();
        assert!((r.map - 2.0 / 3.0).abs() < 1e-12);
        let r = localization_map(&dets, &gts, 0.4, 1).unwrap();
        assert!((r.map - (1.0 + 1.0 + 3.0 / 4.0) / 3.0).abs() < 1e-12);
        assert!(localization_map(&dets, &gts, 0.0, 1).is_err());
    }

    #[test]
    fn average_over_thresholds() {
        let th = average_map_thresholds();
        assert_eq!(th.len(), 10);
        assert!((th[9] - 0.95).abs() < 1e-12);
        let gts = vec![gt("v", 0, 9, 0)];
        let (m, reports) = average_map(&[det("v", 0, 9, 0, 0.5)], &gts, 1).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(reports.len(), 10);
    }

    #[test]
    fn report_renders() {
        let r = EvalReport::new("per-frame", None, vec![0.5, 1.0], vec![]);
        assert_eq!(r.map, 0.75);
        assert!(r.to_table().contains("0.7500"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
