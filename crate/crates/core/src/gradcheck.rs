//! Central finite-difference checks for every differentiable op.
//!
//! Each check draws a random small instance, reduces the op output to a
//! scalar through a fixed random projection, and compares the analytic
//! gradient of every input and parameter entry against
//! `(f(x + h) - f(x - h)) / ((x + h) - (x - h))` evaluated in `f32`.
//!
//! The error metric is `|a - n| / max(|a|, |n|, 1)`: relative for entries of
//! magnitude one or more, absolute below that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cdc::{cdc_backward, cdc_forward, CdcLayerSpec, CdcWeights};
use crate::error::Result;
use crate::ops::activation::{
    apply_mask, dropout, dropout_backward, relu, relu_backward, DropoutMode,
};
use crate::ops::conv3d::{conv3d_backward, conv3d_forward, Conv3dSpec};
use crate::ops::pool::{maxpool3d_backward, maxpool3d_forward};
use crate::ops::softmax::{framewise_softmax, softmax_loss, softmax_loss_grad, FrameLabels};
use crate::tensor::{FillRule, Tensor};

pub const FD_STEP: f32 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient<F>(x: &Tensor, step: f32, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let up = orig + step;
        let down = orig - step;
        probe.data_mut()[i] = up;
        let fu = f(&probe)?;
        probe.data_mut()[i] = down;
        let fd = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fu - fd) / (up as f64 - down as f64));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a as f64, n))
        .fold(0.0, f64::max)
}

/// `sum_i r_i * y_i` in f64.
pub fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform(dims: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::filled(
        dims,
        FillRule::SeededUniform {
            lo,
            hi,
            seed: rng.random(),
        },
    )
}

fn max_of(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

pub fn check_conv3d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = loop {
        let spec = Conv3dSpec {
            in_channels: rng.random_range(1..=3),
            out_channels: rng.random_range(1..=3),
            kernel: [
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            ],
            stride: [
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                rng.random_range(1..=2),
            ],
            padding: [
                rng.random_range(0..=1),
                rng.random_range(0..=1),
                rng.random_range(0..=1),
            ],
        };
        if spec.padding.iter().zip(&spec.kernel).all(|(p, k)| p < k) {
            break spec;
        }
    };
    let dims = [
        spec.in_channels,
        rng.random_range(spec.kernel[0].max(2)..=5),
        rng.random_range(spec.kernel[1].max(2)..=5),
        rng.random_range(spec.kernel[2].max(2)..=5),
    ];
    let x = uniform(&dims, -1.0, 1.0, &mut rng)?;
    let w = uniform(&spec.weight_dims(), -1.0, 1.0, &mut rng)?;
    let b = uniform(&[spec.out_channels], -1.0, 1.0, &mut rng)?;
    let y = conv3d_forward(&x, &w, &b, &spec)?;
    let r = uniform(y.dims(), -1.0, 1.0, &mut rng)?;
    let grads = conv3d_backward(&r, &x, &w, &spec)?;
    let nx = numeric_gradient(&x, FD_STEP, |x| {
        Ok(project(&conv3d_forward(x, &w, &b, &spec)?, &r))
    })?;
    let nw = numeric_gradient(&w, FD_STEP, |w| {
        Ok(project(&conv3d_forward(&x, w, &b, &spec)?, &r))
    })?;
    let nb = numeric_gradient(&b, FD_STEP, |b| {
        Ok(project(&conv3d_forward(&x, &w, b, &spec)?, &r))
    })?;
    Ok(max_of([
        max_relative_error(grads.input.data(), &nx),
        max_relative_error(grads.weights.data(), &nw),
        max_relative_error(grads.bias.data(), &nb),
    ]))
}

/// Inputs are a shuffled grid of distinct values 0.01 apart so that no
/// finite-difference probe can flip a window's winner.
pub fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = if rng.random_bool(0.5) {
        [1, 2, 2]
    } else {
        [2, 2, 2]
    };
    let dims = [
        rng.random_range(1..=3),
        window[0] * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
    ];
    let n: usize = dims.iter().product();
    let mut values: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
    let x = Tensor::from_vec(&dims, values)?;
    let (y, rec) = maxpool3d_forward(&x, window)?;
    let r = uniform(y.dims(), -1.0, 1.0, &mut rng)?;
    let gx = maxpool3d_backward(&r, &rec)?;
    let nx = numeric_gradient(&x, FD_STEP, |x| {
        Ok(project(&maxpool3d_forward(x, window)?.0, &r))
    })?;
    Ok(max_relative_error(gx.data(), &nx))
}

/// Inputs keep at least 1e-2 away from the kink at zero.
pub fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=40);
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.01f32..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let x = Tensor::from_vec(&[n], data)?;
    let r = uniform(&[n], -1.0, 1.0, &mut rng)?;
    let gx = relu_backward(&r, &x)?;
    let nx = numeric_gradient(&x, FD_STEP, |x| Ok(project(&relu(x), &r)))?;
    Ok(max_relative_error(gx.data(), &nx))
}

/// Training-mode dropout with its mask held fixed.
pub fn check_dropout(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=60);
    let ratio = rng.random_range(0.0f32..0.8);
    let x = uniform(&[n], -1.0, 1.0, &mut rng)?;
    let (_, mask) = dropout(&x, ratio, DropoutMode::Train { seed: rng.random() })?;
    let mask = mask.expect("train mode yields a mask");
    let r = uniform(&[n], -1.0, 1.0, &mut rng)?;
    let gx = dropout_backward(&r, &mask)?;
    let nx = numeric_gradient(&x, FD_STEP, |x| Ok(project(&apply_mask(x, &mask)?, &r)))?;
    Ok(max_relative_error(gx.data(), &nx))
}

pub fn check_cdc(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = rng.random_range(1..=2);
    let kl = rng.random_range(stride..=4);
    let padding = rng.random_range(0..=(kl - 1) / 2);
    let spec = CdcLayerSpec::new(
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        [kl, rng.random_range(1..=4), rng.random_range(1..=4)],
        stride,
        padding,
    );
    let lin = rng.random_range(1..=4);
    if spec.output_length(lin).is_err() {
        return check_cdc(seed.wrapping_add(0x9e37_79b9));
    }
    let x = uniform(
        &[spec.in_channels, lin, spec.kernel[1], spec.kernel[2]],
        -1.0,
        1.0,
        &mut rng,
    )?;
    check_cdc_instance(&spec, &x, &mut rng)
}

/// The fixed instance (C_in=2, C_out=3, k_l=4, s=2, p=1, L=3, 4x4 space).
pub fn check_cdc_reference(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CdcLayerSpec::new(2, 3, [4, 4, 4], 2, 1);
    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng)?;
    check_cdc_instance(&spec, &x, &mut rng)
}

fn check_cdc_instance(spec: &CdcLayerSpec, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
    let weights = CdcWeights {
        filters: uniform(&spec.filter_dims(), -1.0, 1.0, rng)?,
        bias: uniform(&[spec.out_channels], -1.0, 1.0, rng)?,
    };
    let y = cdc_forward(x, &weights, spec)?;
    let r = uniform(y.dims(), -1.0, 1.0, rng)?;
    let grads = cdc_backward(&r, x, &weights, spec)?;
    let nx = numeric_gradient(x, FD_STEP, |x| {
        Ok(project(&cdc_forward(x, &weights, spec)?, &r))
    })?;
    let nf = numeric_gradient(&weights.filters, FD_STEP, |f| {
        let w = CdcWeights {
            filters: f.clone(),
            bias: weights.bias.clone(),
        };
        Ok(project(&cdc_forward(x, &w, spec)?, &r))
    })?;
    let nb = numeric_gradient(&weights.bias, FD_STEP, |b| {
        let w = CdcWeights {
            filters: weights.filters.clone(),
            bias: b.clone(),
        };
        Ok(project(&cdc_forward(x, &w, spec)?, &r))
    })?;
    Ok(max_of([
        max_relative_error(grads.input.data(), &nx),
        max_relative_error(grads.filters.data(), &nf),
        max_relative_error(grads.bias.data(), &nb),
    ]))
}

/// Frame-wise softmax composed with the loss, differentiated w.r.t. logits.
pub fn check_softmax_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=5);
    let frames = rng.random_range(1..=6);
    let windows = rng.random_range(1..=3);
    let logits: Vec<Tensor> = (0..windows)
        .map(|_| uniform(&[classes, frames], -2.0, 2.0, &mut rng))
        .collect::<Result<_>>()?;
    let labels: Vec<FrameLabels> = (0..windows)
        .map(|_| FrameLabels::new((0..frames).map(|_| rng.random_range(0..classes)).collect()))
        .collect();
    let loss_of = |logits: &[Tensor]| -> Result<f64> {
        let scores = logits
            .iter()
            .map(framewise_softmax)
            .collect::<Result<Vec<_>>>()?;
        softmax_loss(&scores, &labels)
    };
    let scores = logits
        .iter()
        .map(framewise_softmax)
        .collect::<Result<Vec<_>>>()?;
    let analytic = softmax_loss_grad(&scores, &labels)?;
    let mut worst = 0.0f64;
    for n in 0..windows {
        let numeric = numeric_gradient(&logits[n], FD_STEP, |o| {
            let mut probe = logits.clone();
            probe[n] = o.clone();
            loss_of(&probe)
        })?;
        worst = worst.max(max_relative_error(analytic[n].data(), &numeric));
    }
    Ok(worst)
}

type Check = fn(u64) -> Result<f64>;

pub const OP_CHECKS: [(&str, Check); 6] = [
    ("conv3d", check_conv3d),
    ("maxpool", check_maxpool),
    ("relu", check_relu),
    ("dropout", check_dropout),
    ("cdc", check_cdc),
    ("softmax_loss", check_softmax_loss),
];

/// Run every op check on `instances` random instances each.
pub fn run_op_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    OP_CHECKS
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let s = seed
                    .wrapping_mul(0x100_0000_01b3)
                    .wrapping_add((k * 10_007 + i) as u64);
                worst = worst.max(check(s)?);
            }
            Ok(GradCheckRow {
                op: name.to_string(),
                instances,
                max_rel_error: worst,
                tolerance: OP_TOLERANCE,
                passed: worst < OP_TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = numeric_gradient(&x, FD_STEP, |t| {
            Ok(t.data().iter().map(|&v| (v as f64).powi(2)).sum())
        })
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-3);
        assert!((g[1] + 4.0).abs() < 1e-3);
    }

    #[test]
    fn error_metric_floors_small_magnitudes() {
        assert_eq!(relative_error(2.0, 2.0), 0.0);
        assert!((relative_error(10.0, 11.0) - 1.0 / 11.0).abs() < 1e-12);
        assert!((relative_error(1e-6, 2e-6) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn cdc_reference_instance_passes() {
        assert!(check_cdc_reference(1).unwrap() < OP_TOLERANCE);
    }
}
