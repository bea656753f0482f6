use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CdcError, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Passes gradient where `input > 0`. Works equally with the pre- or
/// post-activation tensor since both share the positive set.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != input.dims() {
        return Err(CdcError::ShapeMismatch(format!(
            "relu grad {:?} vs input {:?}",
            grad_out.dims(),
            input.dims()
        )));
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train { seed: u64 },
    Eval,
}

/// Per-element multipliers applied by a training-mode dropout pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub scale: Vec<f32>,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - ratio)` so that eval
/// mode is the identity. Returns no mask in eval mode.
pub fn dropout(
    input: &Tensor,
    ratio: f32,
    mode: DropoutMode,
) -> Result<(Tensor, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CdcError::InvalidArgument(format!(
            "dropout ratio {ratio} outside [0, 1)"
        )));
    }
    let seed = match mode {
        DropoutMode::Eval => return Ok((input.clone(), None)),
        DropoutMode::Train { seed } => seed,
    };
    let keep = 1.0 / (1.0 - ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f32> = (0..input.len())
        .map(|_| {
            if rng.random::<f32>() < ratio {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = DropoutMask { scale };
    let out = apply_mask(input, &mask)?;
    Ok((out, Some(mask)))
}

pub fn apply_mask(input: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    if mask.scale.len() != input.len() {
        return Err(CdcError::ShapeMismatch(format!(
            "dropout mask has {} entries, tensor has {}",
            mask.scale.len(),
            input.len()
        )));
    }
    let mut out = input.clone();
    for (v, &s) in out.data_mut().iter_mut().zip(&mask.scale) {
        *v *= s;
    }
    Ok(out)
}

pub fn dropout_backward(grad_out: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    apply_mask(grad_out, mask)
}
