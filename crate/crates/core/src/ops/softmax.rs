//! Frame-wise softmax, the per-frame classification loss and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{CdcError, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

/// Per-frame class confidences, `frames x classes`, row-major. The last
/// class column is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    frames: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ScoreMatrix {
    /// Validates shape and that each row is a distribution (sum 1 within 1e-4).
    pub fn new(frames: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if classes < 2 {
            return Err(CdcError::InvalidShape(format!(
                "score matrix needs at least 2 classes, got {classes}"
            )));
        }
        if data.len() != frames * classes {
            return Err(CdcError::ShapeMismatch(format!(
                "{frames} x {classes} score matrix given {} values",
                data.len()
            )));
        }
        for (t, row) in data.chunks(classes).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(CdcError::InvalidArgument(format!(
                    "frame {t} has a score outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(CdcError::InvalidArgument(format!(
                    "frame {t} scores sum to {sum}"
                )));
            }
        }
        Ok(ScoreMatrix {
            frames,
            classes,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of columns, K + 1.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn background(&self) -> usize {
        self.classes - 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.data[t * self.classes + c]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.frames).map(|t| self.get(t, c)).collect()
    }

    /// Rows `start..=end` as a new matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<ScoreMatrix> {
        if start > end || end >= self.frames {
            return Err(CdcError::Missing(format!(
                "rows {start}..={end} of a {}-frame score matrix",
                self.frames
            )));
        }
        Ok(ScoreMatrix {
            frames: end - start + 1,
            classes: self.classes,
            data: self.data[start * self.classes..(end + 1) * self.classes].to_vec(),
        })
    }

    pub fn concat(parts: &[ScoreMatrix]) -> Result<ScoreMatrix> {
        let Some(first) = parts.first() else {
            return Err(CdcError::Missing("no score matrices to concatenate".into()));
        };
        let classes = first.classes;
        if parts.iter().any(|p| p.classes != classes) {
            return Err(CdcError::ShapeMismatch("class counts differ".into()));
        }
        let data: Vec<f32> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(ScoreMatrix {
            frames: data.len() / classes,
            classes,
            data,
        })
    }

    /// Channel-major `(K+1, L)` tensor, the on-disk score layout.
    pub fn to_tensor(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.frames {
            for c in 0..self.classes {
                out[c * self.frames + t] = self.get(t, c);
            }
        }
        Tensor::from_vec(&[self.classes, self.frames], out).expect("dims match data")
    }

    pub fn from_tensor(t: &Tensor) -> Result<ScoreMatrix> {
        let d = t.dims();
        if d.len() != 2 {
            return Err(CdcError::ShapeMismatch(format!(
                "score tensor must be (K+1, L), got {d:?}"
            )));
        }
        let (classes, frames) = (d[0], d[1]);
        let mut data = vec![0.0; t.len()];
        for c in 0..classes {
            for f in 0..frames {
                data[f * classes + c] = t.data()[c * frames + f];
            }
        }
        ScoreMatrix::new(frames, classes, data)
    }

    /// Index of the largest score per frame, lowest index on ties.
    pub fn argmax_per_frame(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Per-frame class labels for one window; index K is background. Frames
/// flagged as padding contribute neither loss nor gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub labels: Vec<usize>,
    pub pad: Vec<bool>,
}

impl FrameLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        let pad = vec![false; labels.len()];
        FrameLabels { labels, pad }
    }

    pub fn with_padding(labels: Vec<usize>, pad: Vec<bool>) -> Result<Self> {
        if labels.len() != pad.len() {
            return Err(CdcError::ShapeMismatch(
                "labels and pad flags differ in length".into(),
            ));
        }
        Ok(FrameLabels { labels, pad })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn logits_layout(logits: &Tensor) -> Result<(usize, usize)> {
    let d = logits.dims();
    match d {
        [c, l] | [c, l, 1, 1] => Ok((*c, *l)),
        _ => Err(CdcError::ShapeMismatch(format!(
            "logits must be (K+1, L) or (K+1, L, 1, 1), got {d:?}"
        ))),
    }
}

/// Softmax over the class axis independently at every time step.
pub fn framewise_softmax(logits: &Tensor) -> Result<ScoreMatrix> {
    let (classes, frames) = logits_layout(logits)?;
    logits.ensure_finite("logits")?;
    let o = logits.data();
    let mut data = vec![0.0f32; classes * frames];
    let mut exps = vec![0.0f64; classes];
    for t in 0..frames {
        let max = (0..classes)
            .map(|c| o[c * frames + t])
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for c in 0..classes {
            exps[c] = (o[c * frames + t] as f64 - max).exp();
            sum += exps[c];
        }
        for c in 0..classes {
            data[t * classes + c] = (exps[c] / sum) as f32;
        }
    }
    Ok(ScoreMatrix {
        frames,
        classes,
        data,
    })
}

fn check_batch(scores: &[ScoreMatrix], labels: &[FrameLabels]) -> Result<()> {
    if scores.is_empty() {
        return Err(CdcError::InvalidArgument("empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(CdcError::ShapeMismatch(format!(
            "{} score matrices but {} label sequences",
            scores.len(),
            labels.len()
        )));
    }
    for (p, z) in scores.iter().zip(labels) {
        if p.frames() != z.len() {
            return Err(CdcError::ShapeMismatch(format!(
                "{} frames scored but {} labels",
                p.frames(),
                z.len()
            )));
        }
        if let Some(&bad) = z.labels.iter().find(|&&l| l >= p.classes()) {
            return Err(CdcError::LabelOutOfRange {
                label: bad,
                classes: p.classes(),
            });
        }
    }
    Ok(())
}

/// `(1/N) * sum_n sum_t -ln P_n[t, z_n[t]]`, summed (not averaged) over frames.
pub fn softmax_loss(scores: &[ScoreMatrix], labels: &[FrameLabels]) -> Result<f64> {
    check_batch(scores, labels)?;
    let n = scores.len() as f64;
    let mut total = 0.0f64;
    for (p, z) in scores.iter().zip(labels) {
        for (t, (&label, &pad)) in z.labels.iter().zip(&z.pad).enumerate() {
            if pad {
                continue;
            }
            let prob = (p.get(t, label) as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= prob.ln();
        }
    }
    Ok(total / n)
}

/// Gradient of [`softmax_loss`] with respect to the logits of each window,
/// `(1/N) * (P - onehot(z))`, shaped `(K+1, L)`.
pub fn softmax_loss_grad(scores: &[ScoreMatrix], labels: &[FrameLabels]) -> Result<Vec<Tensor>> {
    check_batch(scores, labels)?;
    let inv_n = 1.0 / scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(p, z)| {
            let (classes, frames) = (p.classes(), p.frames());
            let mut g = vec![0.0f32; classes * frames];
            for t in 0..frames {
                if z.pad[t] {
                    continue;
                }
                for c in 0..classes {
                    let target = if c == z.labels[t] { 1.0 } else { 0.0 };
                    g[c * frames + t] = ((p.get(t, c) as f64 - target) * inv_n) as f32;
                }
            }
            Tensor::from_vec(&[classes, frames], g)
        })
        .collect()
}
