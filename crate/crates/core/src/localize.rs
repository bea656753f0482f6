//! Temporal boundary refinement of proposal segments from dense per-frame
//! scores, and per-class NMS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CdcError, Result};
use crate::eval::segment_iou;
use crate::exec::Exec;
use crate::ops::softmax::ScoreMatrix;

pub const DEFAULT_ALPHA: f64 = 0.125;
pub const DEFAULT_NMS_IOU: f64 = 0.4;

/// A candidate interval `start..=end` (0-based frames) from an external
/// proposal method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSegment {
    pub video: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub start: usize,
    pub end: usize,
    /// Action class, never background.
    pub label: usize,
    pub score: f64,
}

/// Which length divides the summed class score of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreDenominator {
    /// Mean over the refined frames.
    #[default]
    Refined,
    /// Divide by the original proposal length instead.
    Algorithm1,
}

impl std::str::FromStr for ScoreDenominator {
    type Err = CdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refined" => Ok(ScoreDenominator::Refined),
            "algorithm1" => Ok(ScoreDenominator::Algorithm1),
            other => Err(CdcError::InvalidArgument(format!(
                "score denominator must be refined or algorithm1, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub alpha: f64,
    /// First and last frame of the video.
    pub video_start: usize,
    pub video_end: usize,
    pub denominator: ScoreDenominator,
}

impl RefineParams {
    pub fn for_video(frames: usize, alpha: f64) -> Self {
        RefineParams {
            alpha,
            video_start: 0,
            video_end: frames.saturating_sub(1),
            denominator: ScoreDenominator::Refined,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CdcError::InvalidArgument(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        if self.video_start > self.video_end {
            return Err(CdcError::InvalidArgument("video bounds inverted".into()));
        }
        Ok(())
    }
}

/// Grow `start..=end` by `round(alpha * len)` frames on both sides (half
/// rounds up), clamped to the video bounds.
pub fn extend_proposal(start: usize, end: usize, params: &RefineParams) -> (usize, usize) {
    let len = (end - start + 1) as f64;
    let grow = (params.alpha * len + 0.5).floor() as usize;
    (
        start.saturating_sub(grow).max(params.video_start),
        end.saturating_add(grow).min(params.video_end),
    )
}

/// Column-mean argmax over `rows` of `p`. Background wins ties against any
/// action; among actions the lower index wins.
pub fn classify_segment(p: &ScoreMatrix, start: usize, end: usize) -> usize {
    let classes = p.classes();
    let mut sums = vec![0.0f64; classes];
    for t in start..=end {
        for (s, &v) in sums.iter_mut().zip(p.row(t)) {
            *s += v as f64;
        }
    }
    let n = (end - start + 1) as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let bg = classes - 1;
    let mut best = bg;
    for c in 0..bg {
        if means[c] > means[best] {
            best = c;
        }
    }
    best
}

/// Moments of a Gaussian KDE fitted to a score sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeThreshold {
    pub mu: f64,
    pub sigma: f64,
    pub beta: f64,
    pub bandwidth: f64,
}

/// Gaussian KDE with Silverman bandwidth `h = 1.06 * sd * n^(-1/5)` (sd with
/// n - 1). The KDE mean is the sample mean and its variance is the
/// population variance plus `h^2`; the threshold is `mu - sigma`.
pub fn kde_threshold(scores: &[f32]) -> Result<KdeThreshold> {
    if scores.is_empty() {
        return Err(CdcError::InvalidArgument(
            "KDE needs at least one score".into(),
        ));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().map(|&v| v as f64).sum::<f64>() / n;
    let ss: f64 = scores.iter().map(|&v| (v as f64 - mu).powi(2)).sum();
    let sd = if scores.len() > 1 {
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let bandwidth = 1.06 * sd * n.powf(-0.2);
    let sigma = (ss / n + bandwidth * bandwidth).sqrt();
    Ok(KdeThreshold {
        mu,
        sigma,
        beta: mu - sigma,
        bandwidth,
    })
}

/// First and last positions whose score reaches `beta`, or `None` when no
/// score does.
pub fn shrink_to_threshold(scores: &[f32], beta: f64) -> Option<(usize, usize)> {
    let first = scores.iter().position(|&v| v as f64 >= beta)?;
    let last = scores.iter().rposition(|&v| v as f64 >= beta)?;
    Some((first, last))
}

/// Refine one proposal against the full-video score matrix. Returns `None`
/// when the extended segment is classified as background or no frame
/// reaches the threshold.
pub fn refine_boundaries(
    proposal: &ProposalSegment,
    scores: &ScoreMatrix,
    params: &RefineParams,
) -> Result<Option<Detection>> {
    params.validate()?;
    if proposal.start > proposal.end
        || proposal.start < params.video_start
        || proposal.end > params.video_end
    {
        return Err(CdcError::InvalidArgument(format!(
            "proposal [{}, {}] outside video [{}, {}]",
            proposal.start, proposal.end, params.video_start, params.video_end
        )));
    }
    let (ext_start, ext_end) = extend_proposal(proposal.start, proposal.end, params);
    if ext_end >= scores.frames() {
        return Err(CdcError::Missing(format!(
            "scores cover {} frames, extended proposal ends at {ext_end}",
            scores.frames()
        )));
    }
    let c = classify_segment(scores, ext_start, ext_end);
    if c == scores.background() {
        return Ok(None);
    }
    let column: Vec<f32> = (ext_start..=ext_end).map(|t| scores.get(t, c)).collect();
    let kde = kde_threshold(&column)?;
    let Some((i_s, i_e)) = shrink_to_threshold(&column, kde.beta) else {
        return Ok(None);
    };
    let sum: f64 = column[i_s..=i_e].iter().map(|&v| v as f64).sum();
    let denom = match params.denominator {
        ScoreDenominator::Refined => i_e - i_s + 1,
        ScoreDenominator::Algorithm1 => proposal.end - proposal.start + 1,
    };
    Ok(Some(Detection {
        video: proposal.video.clone(),
        start: ext_start + i_s,
        end: ext_start + i_e,
        label: c,
        score: sum / denom as f64,
    }))
}

/// Total order used by NMS: score descending, then start, label and end
/// ascending.
fn nms_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.label.cmp(&b.label))
        .then(a.end.cmp(&b.end))
        .then(a.video.cmp(&b.video))
}

/// Greedy per-class suppression: a detection is dropped when its IoU with
/// an already kept detection of the same class and video exceeds
/// `iou_threshold`. Output is in NMS order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            k.label == d.label
                && k.video == d.video
                && segment_iou((k.start, k.end), (d.start, d.end)) > iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// `|P[t+1, c] - P[t, c]|` for every consecutive frame pair.
pub fn frame_score_differences(p: &ScoreMatrix, class: usize) -> Result<Vec<f32>> {
    if p.frames() < 2 {
        return Err(CdcError::InvalidArgument(
            "score differences need at least 2 frames".into(),
        ));
    }
    if class >= p.classes() {
        return Err(CdcError::LabelOutOfRange {
            label: class,
            classes: p.classes(),
        });
    }
    Ok((0..p.frames() - 1)
        .map(|t| (p.get(t + 1, class) - p.get(t, class)).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizeOptions {
    pub alpha: f64,
    /// `None` skips NMS.
    pub nms_iou: Option<f64>,
    pub denominator: ScoreDenominator,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            alpha: DEFAULT_ALPHA,
            nms_iou: Some(DEFAULT_NMS_IOU),
            denominator: ScoreDenominator::Refined,
        }
    }
}

/// Refine every proposal (concurrently under `exec`), then run NMS per
/// video. Output is grouped by video id, in NMS order within a video.
pub fn localize(
    proposals: &[ProposalSegment],
    scores: &BTreeMap<String, ScoreMatrix>,
    opts: &LocalizeOptions,
    exec: Exec,
) -> Result<Vec<Detection>> {
    let refined = exec.map(proposals, |p| {
        let s = scores
            .get(&p.video)
            .ok_or_else(|| CdcError::Missing(format!("no scores for video {}", p.video)))?;
        let params = RefineParams {
            denominator: opts.denominator,
            ..RefineParams::for_video(s.frames(), opts.alpha)
        };
        refine_boundaries(p, s, &params)
    });
    let mut per_video: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in refined {
        if let Some(d) = d? {
            per_video
                .entry(scores.get_key_value(&d.video).expect("scored").0)
                .or_default()
                .push(d);
        }
    }
    let mut out = Vec::new();
    for (_, dets) in per_video {
        match opts.nms_iou {
            Some(t) => out.extend(nms(&dets, t)),
            None => out.extend(dets),
        }
    }
    Ok(out)
}

/// Classify each proposal over its own interval without refining the
/// boundaries. Score is the mean class score over the proposal.
pub fn classify_proposals(
    proposals: &[ProposalSegment],
    scores: &BTreeMap<String, ScoreMatrix>,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for p in proposals {
        let s = scores
            .get(&p.video)
            .ok_or_else(|| CdcError::Missing(format!("no scores for video {}", p.video)))?;
        if p.start > p.end || p.end >= s.frames() {
            return Err(CdcError::InvalidArgument(format!(
                "proposal [{}, {}] outside {} scored frames",
                p.start,
                p.end,
                s.frames()
            )));
        }
        let c = classify_segment(s, p.start, p.end);
        if c == s.background() {
            continue;
        }
        let sum: f64 = (p.start..=p.end).map(|t| s.get(t, c) as f64).sum();
        out.push(Detection {
            video: p.video.clone(),
            start: p.start,
            end: p.end,
            label: c,
            score: sum / (p.end - p.start + 1) as f64,
        });
    }
    Ok(out)
}
