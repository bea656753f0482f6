//! Non-overlapping max pooling (window == stride, no padding).

use crate::error::{CdcError, Result};
use crate::tensor::Tensor;

/// Window extents (length, height, width) of the spatial-only pool.
pub const SPATIAL_POOL: [usize; 3] = [1, 2, 2];

/// Winner locations recorded by a forward pass, as flat input offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolRecord {
    pub input_dims: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Output dims for non-overlapping pooling. With `ceil`, a trailing partial
/// window is kept; otherwise every extent must divide evenly.
pub fn pool_output_dims(input: &[usize], window: [usize; 3], ceil: bool) -> Result<[usize; 4]> {
    if input.len() != 4 {
        return Err(CdcError::ShapeMismatch(format!(
            "max pool input must be (C, L, H, W), got {input:?}"
        )));
    }
    if window.contains(&0) {
        return Err(CdcError::InvalidSpec(format!("pool window {window:?}")));
    }
    let mut out = [input[0], 0, 0, 0];
    for axis in 0..3 {
        let extent = input[axis + 1];
        if ceil {
            out[axis + 1] = extent.div_ceil(window[axis]);
            continue;
        }
        if !extent.is_multiple_of(window[axis]) {
            return Err(CdcError::ShapeMismatch(format!(
                "max pool axis {} extent {extent} is not divisible by window {}",
                axis + 1,
                window[axis]
            )));
        }
        out[axis + 1] = extent / window[axis];
    }
    Ok(out)
}

/// 1x2x2 max pooling with stride (1, 2, 2); temporal length is kept.
pub fn maxpool_spatial_forward(input: &Tensor) -> Result<(Tensor, PoolRecord)> {
    maxpool3d_forward(input, SPATIAL_POOL)
}

/// Max pooling over `window` = stride. Ties go to the first element in
/// row-major scan order within the window.
pub fn maxpool3d_forward(input: &Tensor, window: [usize; 3]) -> Result<(Tensor, PoolRecord)> {
    maxpool3d_forward_ext(input, window, false)
}

pub fn maxpool_spatial_backward(grad_out: &Tensor, record: &PoolRecord) -> Result<Tensor> {
    maxpool3d_backward(grad_out, record)
}

/// As [`maxpool3d_forward`]; `ceil` keeps partial windows at the far edges.
pub fn maxpool3d_forward_ext(
    input: &Tensor,
    window: [usize; 3],
    ceil: bool,
) -> Result<(Tensor, PoolRecord)> {
    let out_dims = pool_output_dims(input.dims(), window, ceil)?;
    let d = input.dims();
    let (il, ih, iw) = (d[1], d[2], d[3]);
    let [c, ol, oh, ow] = out_dims;
    let [kl, kh, kw] = window;
    let x = input.data();
    let mut out = Vec::with_capacity(c * ol * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for lo in 0..ol {
            for ho in 0..oh {
                for wo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for a in 0..kl.min(il - lo * kl) {
                        for b in 0..kh.min(ih - ho * kh) {
                            let row = ((ch * il + lo * kl + a) * ih + ho * kh + b) * iw + wo * kw;
                            let width = kw.min(iw - wo * kw);
                            for (j, &v) in x[row..row + width].iter().enumerate() {
                                if best_at == usize::MAX || v > best {
                                    best = v;
                                    best_at = row + j;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&out_dims, out)?,
        PoolRecord {
            input_dims: d.to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool3d_backward(grad_out: &Tensor, record: &PoolRecord) -> Result<Tensor> {
    if grad_out.len() != record.argmax.len() {
        return Err(CdcError::ShapeMismatch(format!(
            "pool grad has {} elements, record has {}",
            grad_out.len(),
            record.argmax.len()
        )));
    }
    let mut grad_in = Tensor::zeros(&record.input_dims)?;
    let gi = grad_in.data_mut();
    for (&g, &at) in grad_out.data().iter().zip(&record.argmax) {
        if at >= gi.len() {
            return Err(CdcError::ShapeMismatch(format!(
                "pool record offset {at} outside input of {} elements",
                gi.len()
            )));
        }
        gi[at] += g;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FillRule;

    #[test]
    fn constant_input_quarters_space() {
        let x = Tensor::filled(&[2, 3, 4, 6], FillRule::Constant(1.5)).unwrap();
        let (y, _) = maxpool_spatial_forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool5_shape() {
        let x = Tensor::zeros(&[512, 4, 8, 8]).unwrap();
        let (y, _) = maxpool_spatial_forward(&x).unwrap();
        assert_eq!(y.dims(), &[512, 4, 4, 4]);
    }

    #[test]
    fn picks_the_large_value_in_each_cell() {
        // 1 x 1 x 4 x 4, one large value per 2x2 cell at varying positions.
        #[rustfmt::skip]
        let data = vec![
            9.0, 0.0,   0.0, 0.0,
            0.0, 0.0,   0.0, 7.0,
            0.0, 0.0,   0.0, 0.0,
            0.0, 5.0,   3.0, 0.0,
        ];
        let x = Tensor::from_vec(&[1, 1, 4, 4], data).unwrap();
        let (y, rec) = maxpool_spatial_forward(&x).unwrap();
        assert_eq!(y.data(), &[9.0, 7.0, 5.0, 3.0]);
        assert_eq!(rec.argmax, vec![0, 7, 13, 14]);

        let g = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gi = maxpool_spatial_backward(&g, &rec).unwrap();
        assert_eq!(gi.data().iter().filter(|&&v| v != 0.0).count(), 4);
        assert_eq!(gi.data()[13], 3.0);
    }

    #[test]
    fn ties_resolve_to_first_in_scan_order() {
        let x = Tensor::filled(&[1, 1, 2, 2], FillRule::Constant(2.0)).unwrap();
        let (_, rec) = maxpool_spatial_forward(&x).unwrap();
        assert_eq!(rec.argmax, vec![0]);
    }

    #[test]
    fn odd_extents_rejected() {
        let x = Tensor::zeros(&[1, 2, 3, 4]).unwrap();
        assert!(maxpool_spatial_forward(&x).is_err());
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        assert!(maxpool3d_forward(&x, [2, 2, 2]).is_err());
    }

    #[test]
    fn ceil_mode_keeps_partial_windows() {
        let x = Tensor::filled(
            &[1, 1, 7, 7],
            FillRule::SeededUniform {
                lo: 0.0,
                hi: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        let (y, rec) = maxpool3d_forward_ext(&x, SPATIAL_POOL, true).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[15], x.data()[48]);
        assert_eq!(rec.argmax[15], 48);
    }

    #[test]
    fn zero_grad_routes_to_zero() {
        let x = Tensor::filled(
            &[2, 2, 4, 4],
            FillRule::SeededUniform {
                lo: -1.0,
                hi: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        let (y, rec) = maxpool3d_forward(&x, [2, 2, 2]).unwrap();
        let gi = maxpool3d_backward(&Tensor::zeros(y.dims()).unwrap(), &rec).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        let wrong = Tensor::zeros(&[3]).unwrap();
        assert!(maxpool3d_backward(&wrong, &rec).is_err());
    }
}
