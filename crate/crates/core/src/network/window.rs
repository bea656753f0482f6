//! Fixed-length non-overlapping windows over a video.

use crate::data::Video;
use crate::error::{CdcError, Result};
use crate::eval::GroundTruthInstance;
use crate::exec::Exec;
use crate::network::model::{ForwardMode, Network};
use crate::ops::softmax::{FrameLabels, ScoreMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoWindow {
    pub video: String,
    /// First frame of the window in the source video.
    pub start: usize,
    /// `(3, L, H, W)`; frames past the video end repeat its last frame.
    pub frames: Tensor,
    /// Present for training windows; pad frames are flagged.
    pub labels: Option<FrameLabels>,
    /// Number of real (non-pad) frames.
    pub valid: usize,
}

fn cut(video: &Video, start: usize, l: usize) -> Result<(Tensor, usize)> {
    let d = video.frames.dims();
    let (t_len, plane) = (d[1], d[2] * d[3]);
    let valid = l.min(t_len - start);
    let src = video.frames.data();
    let mut data = Vec::with_capacity(3 * l * plane);
    for ch in 0..3 {
        for i in 0..l {
            let t = (start + i).min(t_len - 1);
            let at = (ch * t_len + t) * plane;
            data.extend_from_slice(&src[at..at + plane]);
        }
    }
    Ok((Tensor::from_vec(&[3, l, d[2], d[3]], data)?, valid))
}

/// All windows at offsets 0, L, 2L, ... without labels.
pub fn slice_video(video: &Video, l: usize) -> Result<Vec<VideoWindow>> {
    if l == 0 {
        return Err(CdcError::InvalidArgument(
            "window length must be >= 1".into(),
        ));
    }
    if video.frames.dims()[1] == 0 {
        return Err(CdcError::InvalidArgument(format!(
            "video {} is empty",
            video.id
        )));
    }
    (0..video.len().div_ceil(l))
        .map(|w| {
            let start = w * l;
            let (frames, valid) = cut(video, start, l)?;
            Ok(VideoWindow {
                video: video.id.clone(),
                start,
                frames,
                labels: None,
                valid,
            })
        })
        .collect()
}

/// Labeled windows, keeping only those with at least one action frame.
pub fn slice_training_windows(
    video: &Video,
    gt: &[GroundTruthInstance],
    k: usize,
    l: usize,
) -> Result<Vec<VideoWindow>> {
    let labels = video.frame_labels(gt, k);
    let mut out = Vec::new();
    for mut w in slice_video(video, l)? {
        let mut lab = Vec::with_capacity(l);
        let mut pad = Vec::with_capacity(l);
        for i in 0..l {
            let real = i < w.valid;
            lab.push(if real { labels[w.start + i] } else { k });
            pad.push(!real);
        }
        if !lab.iter().zip(&pad).any(|(&z, &p)| !p && z != k) {
            continue;
        }
        w.labels = Some(FrameLabels::with_padding(lab, pad)?);
        out.push(w);
    }
    Ok(out)
}

/// Eval-mode scores for every frame of the video, windows run under `exec`.
pub fn predict_video(net: &Network, video: &Video, exec: Exec) -> Result<ScoreMatrix> {
    let windows = slice_video(video, net.config().window_length())?;
    let parts = exec.map(&windows, |w| {
        let (p, _) = net.forward(&w.frames, ForwardMode::Eval)?;
        p.rows(0, w.valid - 1)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    ScoreMatrix::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{NetworkConfig, ToyOptions};
    use crate::network::model::{build_network, Init};
    use crate::tensor::FillRule;

    fn video(frames: usize) -> Video {
        let t = Tensor::filled(
            &[3, frames, 2, 2],
            FillRule::SeededUniform {
                lo: 0.0,
                hi: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        Video::new("v", t).unwrap()
    }

    fn gt(start: usize, end: usize) -> Vec<GroundTruthInstance> {
        vec![GroundTruthInstance::new("v", start, end, 0).unwrap()]
    }

    #[test]
    fn keep_rule() {
        assert_eq!(
            slice_training_windows(&video(64), &gt(10, 40), 1, 32)
                .unwrap()
                .len(),
            2
        );
        let w = slice_training_windows(&video(64), &gt(0, 5), 1, 32).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start, 0);
    }

    #[test]
    fn tail_is_padded() {
        let v = video(70);
        let w = slice_training_windows(&v, &gt(65, 69), 1, 32).unwrap();
        assert_eq!(w.len(), 1);
        let last = &w[0];
        assert_eq!((last.start, last.valid), (64, 6));
        let labels = last.labels.as_ref().unwrap();
        assert_eq!(labels.pad.iter().filter(|&&p| p).count(), 26);
        // pad frames repeat frame 69
        let f = &last.frames;
        assert_eq!(
            f.get(&[1, 31, 1, 0]).unwrap(),
            v.frames.get(&[1, 69, 1, 0]).unwrap()
        );
        let all = slice_video(&v, 32).unwrap();
        assert_eq!(
            all.iter().map(|w| w.start).collect::<Vec<_>>(),
            vec![0, 32, 64]
        );
        assert!(slice_video(&v, 0).is_err());
    }

    #[test]
    fn prediction_covers_every_frame() {
        let cfg = NetworkConfig::toy(&ToyOptions {
            num_classes: 2,
            window_length: 16,
            input_size: 8,
            widths: [2, 2, 2],
            cdc_width: 4,
            dropout: 0.5,
            granularity: 8,
        })
        .unwrap();
        let net = build_network(cfg, Init::Seeded(1)).unwrap();
        for (frames, rows) in [(16, 16), (32, 32), (35, 35)] {
            let t = Tensor::filled(&[3, frames, 8, 8], FillRule::Constant(0.5)).unwrap();
            let v = Video::new("v", t).unwrap();
            let p = predict_video(&net, &v, Exec::Sequential).unwrap();
            assert_eq!(p.frames(), rows);
            assert_eq!(p, predict_video(&net, &v, Exec::Parallel).unwrap());
        }
    }
}
