//! Nearest-neighbour temporal upsampling, used when the CDC stack upsamples
//! by less than the trunk downsampled (coarse-granularity variants).

use crate::error::{CdcError, Result};
use crate::tensor::Tensor;

/// Repeat every time step `factor` times: `(C, L, H, W) -> (C, L*factor, H, W)`.
pub fn temporal_repeat(input: &Tensor, factor: usize) -> Result<Tensor> {
    let d = input.dims();
    if d.len() != 4 || factor == 0 {
        return Err(CdcError::ShapeMismatch(format!(
            "temporal repeat of {d:?} by {factor}"
        )));
    }
    let plane = d[2] * d[3];
    let mut out = Vec::with_capacity(input.len() * factor);
    for step in input.data().chunks(plane) {
        for _ in 0..factor {
            out.extend_from_slice(step);
        }
    }
    Tensor::from_vec(&[d[0], d[1] * factor, d[2], d[3]], out)
}

/// Adjoint of [`temporal_repeat`]: sums each group of `factor` steps.
pub fn temporal_repeat_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let d = grad_out.dims();
    if d.len() != 4 || factor == 0 || !d[1].is_multiple_of(factor) {
        return Err(CdcError::ShapeMismatch(format!(
            "temporal repeat backward of {d:?} by {factor}"
        )));
    }
    let plane = d[2] * d[3];
    let mut out = vec![0.0f32; grad_out.len() / factor];
    for (i, group) in grad_out.data().chunks(plane * factor).enumerate() {
        let dst = &mut out[i * plane..(i + 1) * plane];
        for step in group.chunks(plane) {
            for (o, &g) in dst.iter_mut().zip(step) {
                *o += g;
            }
        }
    }
    Tensor::from_vec(&[d[0], d[1] / factor, d[2], d[3]], out)
}
