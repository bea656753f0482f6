//! 3D cross-correlation over (channels, length, height, width) volumes.
//!
//! Two interchangeable kernels are provided: a direct loop nest and an
//! im2col + GEMM path. Both accumulate in `f64`.

use crate::error::{CdcError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k_l, k_h, k_w)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Kernel `k` on every axis, unit stride, "same" padding for odd `k`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [1; 3],
            padding: [k / 2; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CdcError::InvalidSpec("conv3d channel count is zero".into()));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(CdcError::InvalidSpec(format!(
                "conv3d kernel {:?} / stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Output extents for an input of spatial-temporal extents `input`.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(CdcError::ShapeMismatch(format!(
                    "conv3d axis {axis}: input {} with padding {} is smaller than kernel {}",
                    input[axis], self.padding[axis], self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel_volume() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvKernel {
    Direct,
    #[default]
    Im2col,
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
}

fn check_shapes(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &Conv3dSpec,
) -> Result<Geometry> {
    spec.validate()?;
    let d = input.dims();
    if d.len() != 4 {
        return Err(CdcError::ShapeMismatch(format!(
            "conv3d input must be (C, L, H, W), got {d:?}"
        )));
    }
    if d[0] != spec.in_channels {
        return Err(CdcError::ShapeMismatch(format!(
            "conv3d input has {} channels, spec expects {}",
            d[0], spec.in_channels
        )));
    }
    weights.ensure_dims(&spec.weight_dims(), "conv3d weights")?;
    if let Some(b) = bias {
        b.ensure_dims(&[spec.out_channels], "conv3d bias")?;
    }
    let input_ext = [d[1], d[2], d[3]];
    let output = spec.output_extents(input_ext)?;
    Ok(Geometry {
        cin: d[0],
        cout: spec.out_channels,
        input: input_ext,
        output,
    })
}

pub fn conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv3dSpec,
) -> Result<Tensor> {
    conv3d_forward_with(ConvKernel::default(), input, weights, bias, spec)
}

pub fn conv3d_forward_with(
    kernel: ConvKernel,
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv3dSpec,
) -> Result<Tensor> {
    let g = check_shapes(input, weights, Some(bias), spec)?;
    let acc = match kernel {
        ConvKernel::Direct => direct_forward(&g, input.data(), weights.data(), bias.data(), spec),
        ConvKernel::Im2col => im2col_forward(&g, input.data(), weights.data(), bias.data(), spec),
    };
    Tensor::from_vec(
        &[g.cout, g.output[0], g.output[1], g.output[2]],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn conv3d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv3dSpec,
) -> Result<Conv3dGrads> {
    conv3d_backward_with(ConvKernel::default(), grad_out, input, weights, spec)
}

pub fn conv3d_backward_with(
    kernel: ConvKernel,
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv3dSpec,
) -> Result<Conv3dGrads> {
    let (gi, weights, bias) = backward_impl(kernel, grad_out, input, weights, spec, true)?;
    Ok(Conv3dGrads {
        input: gi.expect("input gradient requested"),
        weights,
        bias,
    })
}

/// Weight and bias gradients only; skips the input gradient, which the
/// first layer of a network never needs.
pub fn conv3d_param_grads_with(
    kernel: ConvKernel,
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv3dSpec,
) -> Result<(Tensor, Tensor)> {
    let (_, w, b) = backward_impl(kernel, grad_out, input, weights, spec, false)?;
    Ok((w, b))
}

fn backward_impl(
    kernel: ConvKernel,
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv3dSpec,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = check_shapes(input, weights, None, spec)?;
    grad_out.ensure_dims(
        &[g.cout, g.output[0], g.output[1], g.output[2]],
        "conv3d grad_out",
    )?;
    let (gi, gw) = match kernel {
        ConvKernel::Direct => {
            let (gi, gw) = direct_backward(&g, grad_out.data(), input.data(), weights.data(), spec);
            (Some(gi), gw)
        }
        ConvKernel::Im2col => im2col_backward(
            &g,
            grad_out.data(),
            input.data(),
            weights.data(),
            spec,
            need_input,
        ),
    };
    let plane = g.output.iter().product::<usize>();
    let gb: Vec<f32> = grad_out
        .data()
        .chunks(plane)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let gi = match gi.filter(|_| need_input) {
        Some(gi) => Some(Tensor::from_vec(
            input.dims(),
            gi.into_iter().map(|v| v as f32).collect(),
        )?),
        None => None,
    };
    Ok((
        gi,
        Tensor::from_vec(weights.dims(), gw.into_iter().map(|v| v as f32).collect())?,
        Tensor::from_vec(&[g.cout], gb)?,
    ))
}

/// Input coordinate for output position `o` and kernel offset `k` on one axis.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

fn direct_forward(g: &Geometry, x: &[f32], w: &[f32], b: &[f32], spec: &Conv3dSpec) -> Vec<f64> {
    let [il, ih, iw] = g.input;
    let [ol, oh, ow] = g.output;
    let [kl, kh, kw] = spec.kernel;
    let [sl, sh, sw] = spec.stride;
    let [pl, ph, pw] = spec.padding;
    let mut out = vec![0.0f64; g.cout * ol * oh * ow];
    let mut idx = 0;
    for co in 0..g.cout {
        for lo in 0..ol {
            for ho in 0..oh {
                for wo in 0..ow {
                    let mut acc = b[co] as f64;
                    for ci in 0..g.cin {
                        for a in 0..kl {
                            let Some(li) = source(lo, a, sl, pl, il) else {
                                continue;
                            };
                            for bb in 0..kh {
                                let Some(hi) = source(ho, bb, sh, ph, ih) else {
                                    continue;
                                };
                                for c in 0..kw {
                                    let Some(wi) = source(wo, c, sw, pw, iw) else {
                                        continue;
                                    };
                                    let wv = w[(((co * g.cin + ci) * kl + a) * kh + bb) * kw + c];
                                    let xv = x[((ci * il + li) * ih + hi) * iw + wi];
                                    acc += wv as f64 * xv as f64;
                                }
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

fn direct_backward(
    g: &Geometry,
    gy: &[f32],
    x: &[f32],
    w: &[f32],
    spec: &Conv3dSpec,
) -> (Vec<f64>, Vec<f64>) {
    let [il, ih, iw] = g.input;
    let [ol, oh, ow] = g.output;
    let [kl, kh, kw] = spec.kernel;
    let [sl, sh, sw] = spec.stride;
    let [pl, ph, pw] = spec.padding;
    let mut gi = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; w.len()];
    let mut idx = 0;
    for co in 0..g.cout {
        for lo in 0..ol {
            for ho in 0..oh {
                for wo in 0..ow {
                    let gv = gy[idx] as f64;
                    idx += 1;
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..g.cin {
                        for a in 0..kl {
                            let Some(li) = source(lo, a, sl, pl, il) else {
                                continue;
                            };
                            for bb in 0..kh {
                                let Some(hi) = source(ho, bb, sh, ph, ih) else {
                                    continue;
                                };
                                for c in 0..kw {
                                    let Some(wi) = source(wo, c, sw, pw, iw) else {
                                        continue;
                                    };
                                    let wj = (((co * g.cin + ci) * kl + a) * kh + bb) * kw + c;
                                    let xj = ((ci * il + li) * ih + hi) * iw + wi;
                                    gi[xj] += w[wj] as f64 * gv;
                                    gw[wj] += x[xj] as f64 * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw)
}

/// Unfold the padded input into a (C_in * k_vol) x (output positions) matrix.
fn im2col(g: &Geometry, x: &[f32], spec: &Conv3dSpec) -> Vec<f64> {
    let [il, ih, iw] = g.input;
    let [ol, oh, ow] = g.output;
    let [kl, kh, kw] = spec.kernel;
    let [sl, sh, sw] = spec.stride;
    let [pl, ph, pw] = spec.padding;
    let positions = ol * oh * ow;
    let rows = g.cin * kl * kh * kw;
    let mut cols = vec![0.0f64; rows * positions];
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kl {
            for bb in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for lo in 0..ol {
                        let Some(li) = source(lo, a, sl, pl, il) else {
                            continue;
                        };
                        for ho in 0..oh {
                            let Some(hi) = source(ho, bb, sh, ph, ih) else {
                                continue;
                            };
                            let src = &x[((ci * il + li) * ih + hi) * iw..][..iw];
                            let out_row = &mut dst[(lo * oh + ho) * ow..][..ow];
                            for (wo, slot) in out_row.iter_mut().enumerate() {
                                if let Some(wi) = source(wo, c, sw, pw, iw) {
                                    *slot = src[wi] as f64;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto the input volume.
fn col2im(g: &Geometry, cols: &[f64], spec: &Conv3dSpec) -> Vec<f64> {
    let [il, ih, iw] = g.input;
    let [ol, oh, ow] = g.output;
    let [kl, kh, kw] = spec.kernel;
    let [sl, sh, sw] = spec.stride;
    let [pl, ph, pw] = spec.padding;
    let positions = ol * oh * ow;
    let mut gi = vec![0.0f64; g.cin * il * ih * iw];
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kl {
            for bb in 0..kh {
                for c in 0..kw {
                    let srcm = &cols[row * positions..(row + 1) * positions];
                    for lo in 0..ol {
                        let Some(li) = source(lo, a, sl, pl, il) else {
                            continue;
                        };
                        for ho in 0..oh {
                            let Some(hi) = source(ho, bb, sh, ph, ih) else {
                                continue;
                            };
                            let base = ((ci * il + li) * ih + hi) * iw;
                            let col_row = &srcm[(lo * oh + ho) * ow..][..ow];
                            for (wo, &v) in col_row.iter().enumerate() {
                                if let Some(wi) = source(wo, c, sw, pw, iw) {
                                    gi[base + wi] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    gi
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass buffers sized for the given extents and strides;
    // `c` is a dense row-major m x n block that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col_forward(g: &Geometry, x: &[f32], w: &[f32], b: &[f32], spec: &Conv3dSpec) -> Vec<f64> {
    let positions: usize = g.output.iter().product();
    let rows = g.cin * spec.kernel_volume();
    let cols = im2col(g, x, spec);
    let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; g.cout * positions];
    for (co, chunk) in out.chunks_mut(positions).enumerate() {
        chunk.fill(b[co] as f64);
    }
    gemm(
        g.cout,
        rows,
        positions,
        &wf,
        (rows as isize, 1),
        &cols,
        (positions as isize, 1),
        &mut out,
        true,
    );
    out
}

fn im2col_backward(
    g: &Geometry,
    gy: &[f32],
    x: &[f32],
    w: &[f32],
    spec: &Conv3dSpec,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let positions: usize = g.output.iter().product();
    let rows = g.cin * spec.kernel_volume();
    let cols = im2col(g, x, spec);
    let gyf: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
    let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    // grad_w = gy (cout x P) * cols^T (P x rows)
    let mut gw = vec![0.0f64; g.cout * rows];
    gemm(
        g.cout,
        positions,
        rows,
        &gyf,
        (positions as isize, 1),
        &cols,
        (1, positions as isize),
        &mut gw,
        false,
    );
    if !need_input {
        return (None, gw);
    }
    // grad_cols = w^T (rows x cout) * gy (cout x P)
    let mut gcols = vec![0.0f64; rows * positions];
    gemm(
        rows,
        g.cout,
        positions,
        &wf,
        (1, rows as isize),
        &gyf,
        (positions as isize, 1),
        &mut gcols,
        false,
    );
    (Some(col2im(g, &gcols, spec)), gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FillRule;

    fn rand(dims: &[usize], seed: u64) -> Tensor {
        Tensor::filled(
            dims,
            FillRule::SeededUniform {
                lo: -1.0,
                hi: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let spec = Conv3dSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        };
        let x = rand(&[1, 3, 4, 5], 1);
        let w = Tensor::filled(&[1, 1, 1, 1, 1], FillRule::Constant(1.0)).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        for k in [ConvKernel::Direct, ConvKernel::Im2col] {
            let y = conv3d_forward_with(k, &x, &w, &b, &spec).unwrap();
            assert_eq!(y, x);
            let g = rand(&[1, 3, 4, 5], 2);
            let grads = conv3d_backward_with(k, &g, &x, &w, &spec).unwrap();
            assert_eq!(grads.input, g);
        }
    }

    #[test]
    fn kernels_agree_with_stride_and_padding() {
        let spec = Conv3dSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: [2, 3, 2],
            stride: [2, 1, 2],
            padding: [1, 1, 0],
        };
        let x = rand(&[2, 5, 4, 6], 3);
        let w = rand(&spec.weight_dims(), 4);
        let b = rand(&[3], 5);
        let yd = conv3d_forward_with(ConvKernel::Direct, &x, &w, &b, &spec).unwrap();
        let yi = conv3d_forward_with(ConvKernel::Im2col, &x, &w, &b, &spec).unwrap();
        assert_eq!(yd.dims(), &[3, 3, 4, 3]);
        assert!(yd.max_abs_diff(&yi) < 1e-5);
        let g = rand(yd.dims(), 6);
        let gd = conv3d_backward_with(ConvKernel::Direct, &g, &x, &w, &spec).unwrap();
        let gi = conv3d_backward_with(ConvKernel::Im2col, &g, &x, &w, &spec).unwrap();
        assert!(gd.input.max_abs_diff(&gi.input) < 1e-5);
        assert!(gd.weights.max_abs_diff(&gi.weights) < 1e-5);
        assert_eq!(gd.bias, gi.bias);
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let spec = Conv3dSpec::same(2, 2, 3);
        let x = rand(&[2, 3, 3, 3], 9);
        let w = rand(&spec.weight_dims(), 10);
        let g = Tensor::zeros(&[2, 3, 3, 3]).unwrap();
        let grads = conv3d_backward(&g, &x, &w, &spec).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let spec = Conv3dSpec::same(2, 2, 3);
        let w = rand(&spec.weight_dims(), 1);
        let b = Tensor::zeros(&[2]).unwrap();
        let wrong_channels = rand(&[3, 4, 4, 4], 2);
        assert!(conv3d_forward(&wrong_channels, &w, &b, &spec).is_err());
        let too_small = Conv3dSpec {
            padding: [0; 3],
            ..spec
        };
        let x = rand(&[2, 2, 4, 4], 3);
        assert!(conv3d_forward(&x, &w, &b, &too_small).is_err());
        let bad_bias = Tensor::zeros(&[3]).unwrap();
        assert!(conv3d_forward(&rand(&[2, 4, 4, 4], 4), &w, &bad_bias, &spec).is_err());
    }
}
