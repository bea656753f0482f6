//! The convolutional-de-convolutional (CDC) filter.
//!
//! A CDC layer collapses a full `k_h x k_w` spatial receptive field to a
//! single point while expanding every input time step into `k_l` output
//! time slots, one independent spatial filter per slot. Neighbouring input
//! steps whose slots land on the same output position are summed
//! (transposed-convolution overlap-add) and slots that fall into the
//! temporal padding at either end are dropped.
//!
//! For output channel `o`, input time step `t` and temporal tap `j`:
//!
//! ```text
//! Y[o, t*s + j - p] += sum_{i, a, b} F[o, i, j, a, b] * X[i, t, a, b]
//! ```
//!
//! and the bias is added once per output element after the overlap sum.

use crate::error::{CdcError, Result};
use crate::ops::conv3d::gemm;
use crate::tensor::{FillRule, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdcLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k_l, k_h, k_w); `k_h x k_w` must equal the input's spatial extent.
    pub kernel: [usize; 3],
    pub temporal_stride: usize,
    pub temporal_padding: usize,
}

impl CdcLayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: usize,
        padding: usize,
    ) -> Self {
        CdcLayerSpec {
            in_channels,
            out_channels,
            kernel,
            temporal_stride: stride,
            temporal_padding: padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CdcError::InvalidSpec("CDC channel count is zero".into()));
        }
        if self.kernel.contains(&0) {
            return Err(CdcError::InvalidSpec(format!(
                "CDC kernel {:?}",
                self.kernel
            )));
        }
        if self.temporal_stride == 0 {
            return Err(CdcError::InvalidSpec("CDC temporal stride is zero".into()));
        }
        if self.kernel[0] < self.temporal_stride {
            return Err(CdcError::InvalidSpec(format!(
                "CDC temporal kernel {} is shorter than stride {}; outputs would be gapped",
                self.kernel[0], self.temporal_stride
            )));
        }
        Ok(())
    }

    pub fn output_length(&self, input_length: usize) -> Result<usize> {
        cdc_output_length(input_length, self)
    }

    pub fn filter_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Weights per (input, output) channel pair: `k_l * k_h * k_w`.
    pub fn pair_params(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Parameters of a separate spatial conv (`k_h * k_w`) followed by a
    /// temporal deconv (`k_l`), per channel pair.
    pub fn separate_pair_params(&self) -> usize {
        self.kernel[1] * self.kernel[2] + self.kernel[0]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.pair_params() + 1)
    }
}

/// Transposed-convolution length rule `(L_in - 1) * s - 2p + k_l`.
pub fn cdc_output_length(input_length: usize, spec: &CdcLayerSpec) -> Result<usize> {
    spec.validate()?;
    if input_length == 0 {
        return Err(CdcError::InvalidArgument("CDC input length is zero".into()));
    }
    let len = (input_length as i64 - 1) * spec.temporal_stride as i64
        - 2 * spec.temporal_padding as i64
        + spec.kernel[0] as i64;
    if len < 1 {
        return Err(CdcError::InvalidSpec(format!(
            "CDC output length {len} for input length {input_length} and spec {spec:?}"
        )));
    }
    Ok(len as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdcWeights {
    /// (C_out, C_in, k_l, k_h, k_w)
    pub filters: Tensor,
    /// (C_out)
    pub bias: Tensor,
}

impl CdcWeights {
    pub fn zeros(spec: &CdcLayerSpec) -> Result<Self> {
        Ok(CdcWeights {
            filters: Tensor::zeros(&spec.filter_dims())?,
            bias: Tensor::zeros(&[spec.out_channels])?,
        })
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(spec: &CdcLayerSpec, seed: u64) -> Result<Self> {
        let vol = spec.pair_params();
        let bound = (6.0 / ((spec.in_channels + spec.out_channels) * vol) as f64).sqrt() as f32;
        Ok(CdcWeights {
            filters: Tensor::filled(
                &spec.filter_dims(),
                FillRule::SeededUniform {
                    lo: -bound,
                    hi: bound,
                    seed,
                },
            )?,
            bias: Tensor::zeros(&[spec.out_channels])?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.filters.len() + self.bias.len()
    }

    pub fn check(&self, spec: &CdcLayerSpec) -> Result<()> {
        spec.validate()?;
        self.filters
            .ensure_dims(&spec.filter_dims(), "CDC filters")?;
        self.bias.ensure_dims(&[spec.out_channels], "CDC bias")
    }
}

#[derive(Debug, Clone)]
pub struct CdcGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

struct Layout {
    cin: usize,
    cout: usize,
    kl: usize,
    lin: usize,
    lout: usize,
    /// C_in * k_h * k_w, the length of one spatial filter.
    depth: usize,
}

fn layout(x: &Tensor, weights: &CdcWeights, spec: &CdcLayerSpec) -> Result<Layout> {
    weights.check(spec)?;
    let d = x.dims();
    if d.len() != 4 {
        return Err(CdcError::ShapeMismatch(format!(
            "CDC input must be (C, L, H, W), got {d:?}"
        )));
    }
    if d[0] != spec.in_channels {
        return Err(CdcError::ShapeMismatch(format!(
            "CDC input has {} channels, spec expects {}",
            d[0], spec.in_channels
        )));
    }
    if d[2] != spec.kernel[1] || d[3] != spec.kernel[2] {
        return Err(CdcError::ShapeMismatch(format!(
            "CDC input spatial extent {}x{} differs from kernel {}x{}",
            d[2], d[3], spec.kernel[1], spec.kernel[2]
        )));
    }
    Ok(Layout {
        cin: d[0],
        cout: spec.out_channels,
        kl: spec.kernel[0],
        lin: d[1],
        lout: cdc_output_length(d[1], spec)?,
        depth: d[0] * spec.kernel[1] * spec.kernel[2],
    })
}

/// `X (C_in, L, kh, kw)` as `L x depth` rows.
fn time_major(x: &[f32], lay: &Layout) -> Vec<f64> {
    let plane = lay.depth / lay.cin;
    let mut out = vec![0.0; lay.lin * lay.depth];
    for ci in 0..lay.cin {
        for t in 0..lay.lin {
            let src = &x[(ci * lay.lin + t) * plane..][..plane];
            let dst = &mut out[t * lay.depth + ci * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s as f64;
            }
        }
    }
    out
}

/// Filters `(C_out, C_in, k_l, kh, kw)` as `(C_out * k_l) x depth` rows.
fn tap_major(f: &[f32], lay: &Layout) -> Vec<f64> {
    let plane = lay.depth / lay.cin;
    let mut out = vec![0.0; lay.cout * lay.kl * lay.depth];
    for co in 0..lay.cout {
        for ci in 0..lay.cin {
            for j in 0..lay.kl {
                let src = &f[((co * lay.cin + ci) * lay.kl + j) * plane..][..plane];
                let dst = &mut out[(co * lay.kl + j) * lay.depth + ci * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s as f64;
                }
            }
        }
    }
    out
}

/// Output slot of input step `t`, tap `j`, or `None` when it lands in padding.
#[inline]
fn slot(t: usize, j: usize, spec: &CdcLayerSpec, lout: usize) -> Option<usize> {
    let pos = (t * spec.temporal_stride + j).checked_sub(spec.temporal_padding)?;
    (pos < lout).then_some(pos)
}

pub fn cdc_forward(x: &Tensor, weights: &CdcWeights, spec: &CdcLayerSpec) -> Result<Tensor> {
    let lay = layout(x, weights, spec)?;
    let xt = time_major(x.data(), &lay);
    let fr = tap_major(weights.filters.data(), &lay);
    let rows = lay.cout * lay.kl;
    // taps[(co, j), t] = <F[co, :, j], X[:, t]>
    let mut taps = vec![0.0f64; rows * lay.lin];
    gemm(
        rows,
        lay.depth,
        lay.lin,
        &fr,
        (lay.depth as isize, 1),
        &xt,
        (1, lay.depth as isize),
        &mut taps,
        false,
    );
    let mut y = vec![0.0f64; lay.cout * lay.lout];
    for co in 0..lay.cout {
        let out = &mut y[co * lay.lout..(co + 1) * lay.lout];
        for j in 0..lay.kl {
            let tap = &taps[(co * lay.kl + j) * lay.lin..][..lay.lin];
            for (t, &v) in tap.iter().enumerate() {
                if let Some(s) = slot(t, j, spec, lay.lout) {
                    out[s] += v;
                }
            }
        }
        let b = weights.bias.data()[co] as f64;
        out.iter_mut().for_each(|v| *v += b);
    }
    Tensor::from_vec(
        &[lay.cout, lay.lout, 1, 1],
        y.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn cdc_backward(
    grad_y: &Tensor,
    x: &Tensor,
    weights: &CdcWeights,
    spec: &CdcLayerSpec,
) -> Result<CdcGrads> {
    let lay = layout(x, weights, spec)?;
    let gy = grad_y.data();
    if grad_y.len() != lay.cout * lay.lout
        || !matches!(grad_y.dims(), [_, _, 1, 1] | [_, _])
        || grad_y.dims()[0] != lay.cout
    {
        return Err(CdcError::ShapeMismatch(format!(
            "CDC grad_y {:?}, expected ({}, {}, 1, 1)",
            grad_y.dims(),
            lay.cout,
            lay.lout
        )));
    }
    let rows = lay.cout * lay.kl;
    // Gather the output gradient back onto each (co, j, t) tap.
    let mut gtaps = vec![0.0f64; rows * lay.lin];
    for co in 0..lay.cout {
        for j in 0..lay.kl {
            for t in 0..lay.lin {
                if let Some(s) = slot(t, j, spec, lay.lout) {
                    gtaps[(co * lay.kl + j) * lay.lin + t] = gy[co * lay.lout + s] as f64;
                }
            }
        }
    }
    let xt = time_major(x.data(), &lay);
    let fr = tap_major(weights.filters.data(), &lay);

    // d taps / d F: (rows x L) * (L x depth)
    let mut gfr = vec![0.0f64; rows * lay.depth];
    gemm(
        rows,
        lay.lin,
        lay.depth,
        &gtaps,
        (lay.lin as isize, 1),
        &xt,
        (lay.depth as isize, 1),
        &mut gfr,
        false,
    );
    // d taps / d X: (L x rows) * (rows x depth)
    let mut gxt = vec![0.0f64; lay.lin * lay.depth];
    gemm(
        lay.lin,
        rows,
        lay.depth,
        &gtaps,
        (1, lay.lin as isize),
        &fr,
        (lay.depth as isize, 1),
        &mut gxt,
        false,
    );

    let plane = lay.depth / lay.cin;
    let mut gx = vec![0.0f32; x.len()];
    for ci in 0..lay.cin {
        for t in 0..lay.lin {
            let src = &gxt[t * lay.depth + ci * plane..][..plane];
            let dst = &mut gx[(ci * lay.lin + t) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s as f32;
            }
        }
    }
    let mut gf = vec![0.0f32; weights.filters.len()];
    for co in 0..lay.cout {
        for ci in 0..lay.cin {
            for j in 0..lay.kl {
                let src = &gfr[(co * lay.kl + j) * lay.depth + ci * plane..][..plane];
                let dst = &mut gf[((co * lay.cin + ci) * lay.kl + j) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s as f32;
                }
            }
        }
    }
    let gb: Vec<f32> = gy
        .chunks(lay.lout)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    Ok(CdcGrads {
        input: Tensor::from_vec(x.dims(), gx)?,
        filters: Tensor::from_vec(weights.filters.dims(), gf)?,
        bias: Tensor::from_vec(&[lay.cout], gb)?,
    })
}

/// Build CDC weights from a fully connected layer over a `(C_in, k_h, k_w)`
/// receptive field: every one of the `k_l` temporal taps starts as a copy
/// of the corresponding FC filter.
pub fn init_cdc_from_fc(
    fc_weights: &Tensor,
    fc_bias: Option<&Tensor>,
    k_l: usize,
    layout: (usize, usize, usize),
) -> Result<CdcWeights> {
    let (cin, kh, kw) = layout;
    let d = fc_weights.dims();
    if d.len() != 2 {
        return Err(CdcError::ShapeMismatch(format!(
            "FC weights must be (C_out, C_in*k_h*k_w), got {d:?}"
        )));
    }
    let plane = cin * kh * kw;
    if plane == 0 || k_l == 0 || d[1] != plane {
        return Err(CdcError::ShapeMismatch(format!(
            "FC width {} does not factor as {cin} x {kh} x {kw}",
            d[1]
        )));
    }
    let cout = d[0];
    let bias = match fc_bias {
        Some(b) => {
            b.ensure_dims(&[cout], "FC bias")?;
            b.clone()
        }
        None => Tensor::zeros(&[cout])?,
    };
    let spatial = kh * kw;
    let w = fc_weights.data();
    let mut filters = Vec::with_capacity(cout * cin * k_l * spatial);
    for co in 0..cout {
        for ci in 0..cin {
            let src = &w[co * plane + ci * spatial..][..spatial];
            for _ in 0..k_l {
                filters.extend_from_slice(src);
            }
        }
    }
    Ok(CdcWeights {
        filters: Tensor::from_vec(&[cout, cin, k_l, kh, kw], filters)?,
        bias,
    })
}
