//! Synthetic untrimmed videos: drifting sinusoidal gratings over noise.
//!
//! Classes come in pairs that share spatial frequency and orientation and
//! differ only in drift direction, so a single frame cannot tell the two
//! members of a pair apart; motion has to be read across frames.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split, Video};
use crate::error::{CdcError, Result};
use crate::eval::GroundTruthInstance;
use crate::localize::ProposalSegment;
use crate::seed::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    /// Cycles per pixel.
    pub frequency: f32,
    /// Grating orientation in radians.
    pub orientation: f32,
    /// Phase advance per frame in radians; the sign is the drift direction.
    pub velocity: f32,
}

impl ClassSignature {
    /// Signature of class `c`: pair `c / 2` fixes frequency and orientation,
    /// parity fixes the drift direction.
    pub fn for_class(c: usize) -> Self {
        let pair = (c / 2) as f32;
        ClassSignature {
            frequency: 0.125 + 0.0625 * pair,
            orientation: pair * PI / 3.0,
            velocity: if c.is_multiple_of(2) { PI / 4.0 } else { -PI / 4.0 },
        }
    }

    pub fn value(&self, y: usize, x: usize, t: usize, phase: f32) -> f32 {
        let (s, c) = self.orientation.sin_cos();
        let u = x as f32 * c + y as f32 * s;
        (2.0 * PI * self.frequency * u + self.velocity * t as f32 + phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub split: Split,
    pub num_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of instance lengths in frames.
    pub instance_length: (usize, usize),
    /// Inclusive range; video `v` gets `min + v % (max - min + 1)` instances.
    pub instances_per_video: (usize, usize),
    /// Minimum background gap between neighbouring instances.
    pub min_gap: usize,
    /// Standard deviation of the background noise, relative to `amplitude`.
    pub noise: f32,
    /// Peak value of a signature.
    pub amplitude: f32,
}

impl SyntheticConfig {
    pub fn train() -> Self {
        SyntheticConfig {
            split: Split::Train,
            num_videos: 8,
            frames: 256,
            height: 16,
            width: 16,
            num_classes: 3,
            instance_length: (20, 56),
            instances_per_video: (2, 4),
            min_gap: 8,
            noise: 0.1,
            amplitude: 64.0,
        }
    }

    pub fn test() -> Self {
        SyntheticConfig {
            split: Split::Test,
            num_videos: 4,
            ..Self::train()
        }
    }

    pub fn signatures(&self) -> Vec<ClassSignature> {
        (0..self.num_classes)
            .map(ClassSignature::for_class)
            .collect()
    }

    fn instance_counts(&self) -> Vec<usize> {
        let (lo, hi) = self.instances_per_video;
        (0..self.num_videos)
            .map(|v| lo + v % (hi - lo + 1))
            .collect()
    }

    /// Expected fraction of all frames carrying each action class.
    pub fn class_prior_targets(&self) -> Vec<f64> {
        let instances: usize = self.instance_counts().iter().sum();
        let mean_len = (self.instance_length.0 + self.instance_length.1) as f64 / 2.0;
        let total = (self.num_videos * self.frames) as f64;
        let per_class = instances as f64 / self.num_classes as f64 * mean_len / total;
        vec![per_class; self.num_classes]
    }

    fn validate(&self) -> Result<()> {
        let (lmin, lmax) = self.instance_length;
        let (imin, imax) = self.instances_per_video;
        if self.num_videos == 0
            || self.frames == 0
            || self.height == 0
            || self.width == 0
            || self.num_classes == 0
        {
            return Err(CdcError::InvalidArgument(
                "synthetic config has a zero extent".into(),
            ));
        }
        if lmin == 0 || lmin > lmax || imin > imax {
            return Err(CdcError::InvalidArgument(
                "synthetic ranges must satisfy 1 <= min <= max".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.amplitude.is_finite()) {
            return Err(CdcError::InvalidArgument(
                "noise must be >= 0 and amplitude finite".into(),
            ));
        }
        let worst = imax * lmax + imax.saturating_sub(1) * self.min_gap;
        if worst > self.frames {
            return Err(CdcError::InvalidArgument(format!(
                "{imax} instances of up to {lmax} frames (gap {}) exceed a {}-frame video",
                self.min_gap, self.frames
            )));
        }
        Ok(())
    }
}

/// Evenly spaced lengths over the inclusive range, one per instance.
fn length_grid(n: usize, (lo, hi): (usize, usize)) -> Vec<usize> {
    (0..n)
        .map(|j| lo + (((hi - lo) as f64) * (j as f64 + 0.5) / n as f64).round() as usize)
        .collect()
}

/// Split `slack` frames into `parts` random non-negative pieces.
fn split_slack(slack: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let w: Vec<f64> = (0..parts).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = w.iter().sum();
    let mut out: Vec<usize> = w
        .iter()
        .map(|x| (x / sum * slack as f64).floor() as usize)
        .collect();
    let used: usize = out.iter().sum();
    out[parts - 1] += slack - used;
    out
}

/// Render a dataset. Classes are assigned round-robin over all instances
/// and every class receives the same multiset of lengths, so class frame
/// priors match [`SyntheticConfig::class_prior_targets`] closely.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let k = config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = config.instance_counts();
    let total: usize = counts.iter().sum();
    let mut per_class_lengths: Vec<Vec<usize>> = (0..k)
        .map(|c| {
            let n = (total + k - 1 - c) / k;
            let mut g = length_grid(n, config.instance_length);
            g.shuffle(&mut rng);
            g
        })
        .collect();
    let sigs = config.signatures();
    let mut videos = Vec::with_capacity(config.num_videos);
    let mut annotations = Vec::new();
    let mut g = 0usize;
    for (v, &n) in counts.iter().enumerate() {
        let id = format!("{}_{v:03}", config.split.as_str());
        let mut inst: Vec<(usize, usize)> = (0..n)
            .map(|i| {
                let c = (g + i) % k;
                (
                    c,
                    per_class_lengths[c]
                        .pop()
                        .expect("grid sized to class count"),
                )
            })
            .collect();
        g += n;
        inst.shuffle(&mut rng);
        let used: usize =
            inst.iter().map(|i| i.1).sum::<usize>() + n.saturating_sub(1) * config.min_gap;
        let gaps = split_slack(config.frames - used, n + 1, &mut rng);
        let mut t = gaps[0];
        let mut spans = Vec::with_capacity(n);
        for (i, &(c, len)) in inst.iter().enumerate() {
            spans.push((t, t + len - 1, c, rng.random_range(0.0..2.0 * PI)));
            annotations.push(GroundTruthInstance::new(&id, t, t + len - 1, c)?);
            t += len + config.min_gap + gaps[i + 1];
        }
        let frames = render(config, &sigs, &spans, mix_seed(seed, v as u64))?;
        videos.push(Video::new(id, frames)?);
    }
    let ds = Dataset {
        split: config.split,
        num_classes: k,
        videos,
        annotations,
    };
    ds.validate()?;
    Ok(ds)
}

fn render(
    config: &SyntheticConfig,
    sigs: &[ClassSignature],
    spans: &[(usize, usize, usize, f32)],
    seed: u64,
) -> Result<Tensor> {
    let (t_len, h, w) = (config.frames, config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = config.noise * config.amplitude * 3f32.sqrt();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * t_len * plane];
    if spread > 0.0 {
        for v in data.iter_mut() {
            *v = rng.random_range(-spread..=spread);
        }
    }
    for &(start, end, c, phase) in spans {
        let sig = &sigs[c];
        for t in start..=end {
            for y in 0..h {
                for x in 0..w {
                    let s = config.amplitude * sig.value(y, x, t - start, phase);
                    for ch in 0..3 {
                        data[(ch * t_len + t) * plane + y * w + x] += s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[3, t_len, h, w], data)
}

/// One proposal per instance with each boundary moved by up to
/// `jitter * len` frames in either direction, clamped to the video.
pub fn jittered_proposals(
    gt: &[GroundTruthInstance],
    video_frames: impl Fn(&str) -> usize,
    jitter: f64,
    seed: u64,
) -> Vec<ProposalSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gt.iter()
        .map(|g| {
            let len = g.len() as f64;
            let last = video_frames(&g.video).saturating_sub(1) as i64;
            let mut shift = || (rng.random_range(-jitter..=jitter) * len).round() as i64;
            let s = (g.start as i64 + shift()).clamp(0, last);
            let e = (g.end as i64 + shift()).clamp(0, last);
            let (s, e) = if s <= e { (s, e) } else { (e, s) };
            ProposalSegment {
                video: g.video.clone(),
                start: s as usize,
                end: e as usize,
                score: None,
            }
        })
        .collect()
}
