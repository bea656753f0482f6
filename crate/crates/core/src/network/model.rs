use crate::cdc::{cdc_backward, cdc_forward, init_cdc_from_fc, CdcWeights};
use crate::error::{CdcError, Result};
use crate::network::config::{LayerKind, NetworkConfig};
use crate::ops::activation::{
    dropout, dropout_backward, relu_backward, relu_in_place, DropoutMask, DropoutMode,
};
use crate::ops::conv3d::{
    conv3d_backward_with, conv3d_forward_with, conv3d_param_grads_with, Conv3dSpec, ConvKernel,
};
use crate::ops::pool::{maxpool3d_backward, maxpool3d_forward_ext, PoolRecord, SPATIAL_POOL};
use crate::ops::softmax::{framewise_softmax, ScoreMatrix};
use crate::ops::upsample::{temporal_repeat, temporal_repeat_backward};
use crate::seed::mix_seed;
use crate::tensor::{FillRule, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv { weights: Tensor, bias: Tensor },
    Cdc(CdcWeights),
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weights, bias } => vec![weights, bias],
            LayerParams::Cdc(w) => vec![&w.filters, &w.bias],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weights, bias } => vec![weights, bias],
            LayerParams::Cdc(w) => vec![&mut w.filters, &mut w.bias],
        }
    }
}

/// Fully connected weights to transplant into a CDC layer.
#[derive(Debug, Clone)]
pub struct FcWeights {
    /// Name of the receiving CDC layer.
    pub layer: String,
    /// (C_out, C_in * k_h * k_w)
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum Init {
    Seeded(u64),
    /// Listed CDC layers start from FC weights; every other layer is seeded.
    Transplant {
        seed: u64,
        fc: Vec<FcWeights>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone)]
enum Trace {
    Conv {
        input: Tensor,
        output: Tensor,
    },
    Pool(PoolRecord),
    Cdc {
        input: Tensor,
        output: Tensor,
        mask: Option<DropoutMask>,
    },
    CdcFinal {
        input: Tensor,
    },
    Repeat(usize),
    Softmax,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    traces: Vec<Trace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<LayerParams>,
    kernel: ConvKernel,
}

fn conv_glorot(spec: &Conv3dSpec, seed: u64) -> Result<LayerParams> {
    let vol = spec.kernel_volume();
    let bound = (6.0 / ((spec.in_channels + spec.out_channels) * vol) as f64).sqrt() as f32;
    Ok(LayerParams::Conv {
        weights: Tensor::filled(
            &spec.weight_dims(),
            FillRule::SeededUniform {
                lo: -bound,
                hi: bound,
                seed,
            },
        )?,
        bias: Tensor::zeros(&[spec.out_channels])?,
    })
}

pub fn build_network(config: NetworkConfig, init: Init) -> Result<Network> {
    config.infer_shapes()?;
    let (seed, fc) = match init {
        Init::Seeded(seed) => (seed, Vec::new()),
        Init::Transplant { seed, fc } => (seed, fc),
    };
    for f in &fc {
        match config.layers.iter().find(|l| l.name == f.layer) {
            Some(l) if l.kind.cdc_spec().is_some() => {}
            _ => {
                return Err(CdcError::InvalidArgument(format!(
                    "transplant target {} is not a CDC layer",
                    f.layer
                )))
            }
        }
    }
    let mut params = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        let layer_seed = mix_seed(seed, i as u64);
        let p = match &layer.kind {
            LayerKind::Conv3dRelu(spec) => conv_glorot(spec, layer_seed)?,
            LayerKind::CdcReluDropout { spec, .. } | LayerKind::CdcFinal(spec) => {
                match fc.iter().find(|f| f.layer == layer.name) {
                    Some(f) => {
                        let w = init_cdc_from_fc(
                            &f.weights,
                            f.bias.as_ref(),
                            spec.kernel[0],
                            (spec.in_channels, spec.kernel[1], spec.kernel[2]),
                        )?;
                        w.check(spec)?;
                        LayerParams::Cdc(w)
                    }
                    None => LayerParams::Cdc(CdcWeights::glorot(spec, layer_seed)?),
                }
            }
            _ => LayerParams::None,
        };
        params.push(p);
    }
    Ok(Network {
        config,
        params,
        kernel: ConvKernel::default(),
    })
}

impl Network {
    /// Assemble a network from explicit parameters (e.g. a loaded checkpoint).
    pub fn from_parts(config: NetworkConfig, params: Vec<LayerParams>) -> Result<Network> {
        config.infer_shapes()?;
        if params.len() != config.layers.len() {
            return Err(CdcError::ShapeMismatch(format!(
                "{} parameter entries for {} layers",
                params.len(),
                config.layers.len()
            )));
        }
        for (layer, p) in config.layers.iter().zip(&params) {
            match (&layer.kind, p) {
                (LayerKind::Conv3dRelu(spec), LayerParams::Conv { weights, bias }) => {
                    weights.ensure_dims(&spec.weight_dims(), &layer.name)?;
                    bias.ensure_dims(&[spec.out_channels], &layer.name)?;
                }
                (
                    LayerKind::CdcReluDropout { spec, .. } | LayerKind::CdcFinal(spec),
                    LayerParams::Cdc(w),
                ) => w.check(spec)?,
                (kind, LayerParams::None) if !kind.has_params() => {}
                _ => {
                    return Err(CdcError::ShapeMismatch(format!(
                        "parameters do not fit layer {}",
                        layer.name
                    )))
                }
            }
        }
        Ok(Network {
            config,
            params,
            kernel: ConvKernel::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn with_kernel(mut self, kernel: ConvKernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Parameter tensors in a fixed order, named `<layer>.weight` / `<layer>.bias`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (layer, p) in self.config.layers.iter().zip(&self.params) {
            for (t, suffix) in p.tensors().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{}.{suffix}", layer.name), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flat_map(|p| p.tensors_mut())
            .collect()
    }

    /// Whether each parameter tensor (in [`Network::named_params`] order)
    /// belongs to the final CDC layer.
    pub fn final_layer_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for (layer, p) in self.config.layers.iter().zip(&self.params) {
            let is_final = matches!(layer.kind, LayerKind::CdcFinal(_));
            out.extend(std::iter::repeat_n(is_final, p.tensors().len()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Dense per-frame scores for one window `(3, L, H, W)`. Train mode
    /// samples dropout from `seed` and returns the activation cache.
    pub fn forward(
        &self,
        frames: &Tensor,
        mode: ForwardMode,
    ) -> Result<(ScoreMatrix, Option<ForwardCache>)> {
        frames.ensure_dims(&self.config.input, "window frames")?;
        let train = matches!(mode, ForwardMode::Train { .. });
        let mut traces = Vec::with_capacity(if train { self.config.layers.len() } else { 0 });
        let mut x = frames.clone();
        let mut scores = None;
        for (i, (layer, p)) in self.config.layers.iter().zip(&self.params).enumerate() {
            let (next, trace) = match (&layer.kind, p) {
                (LayerKind::Conv3dRelu(spec), LayerParams::Conv { weights, bias }) => {
                    let mut y = conv3d_forward_with(self.kernel, &x, weights, bias, spec)?;
                    relu_in_place(&mut y);
                    let trace = train.then(|| Trace::Conv {
                        input: x,
                        output: y.clone(),
                    });
                    (y, trace)
                }
                (LayerKind::MaxPoolSpatial { ceil }, _) => {
                    let (y, rec) = maxpool3d_forward_ext(&x, SPATIAL_POOL, *ceil)?;
                    (y, train.then_some(Trace::Pool(rec)))
                }
                (LayerKind::MaxPoolSpatiotemporal { window }, _) => {
                    let (y, rec) = maxpool3d_forward_ext(&x, *window, false)?;
                    (y, train.then_some(Trace::Pool(rec)))
                }
                (
                    LayerKind::CdcReluDropout {
                        spec,
                        dropout: ratio,
                    },
                    LayerParams::Cdc(w),
                ) => {
                    let mut y = cdc_forward(&x, w, spec)?;
                    relu_in_place(&mut y);
                    let dmode = match mode {
                        ForwardMode::Train { seed } => DropoutMode::Train {
                            seed: mix_seed(seed, i as u64),
                        },
                        ForwardMode::Eval => DropoutMode::Eval,
                    };
                    let (dropped, mask) = dropout(&y, *ratio, dmode)?;
                    let trace = train.then_some(Trace::Cdc {
                        input: x,
                        output: y,
                        mask,
                    });
                    (dropped, trace)
                }
                (LayerKind::CdcFinal(spec), LayerParams::Cdc(w)) => {
                    let y = cdc_forward(&x, w, spec)?;
                    (y, train.then_some(Trace::CdcFinal { input: x }))
                }
                (LayerKind::TemporalRepeat { factor }, _) => (
                    temporal_repeat(&x, *factor)?,
                    train.then_some(Trace::Repeat(*factor)),
                ),
                (LayerKind::FramewiseSoftmax, _) => {
                    scores = Some(framewise_softmax(&x)?);
                    (x, train.then_some(Trace::Softmax))
                }
                _ => {
                    return Err(CdcError::ShapeMismatch(format!(
                        "layer {} has mismatched parameters",
                        layer.name
                    )))
                }
            };
            x = next;
            if let Some(t) = trace {
                traces.push(t);
            }
        }
        let scores =
            scores.ok_or_else(|| CdcError::InvalidSpec("network has no softmax".into()))?;
        Ok((scores, train.then_some(ForwardCache { traces })))
    }

    /// Parameter gradients (in [`Network::named_params`] order) given the
    /// gradient of the loss with respect to the softmax input `(K+1, L)`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        if cache.traces.len() != self.config.layers.len() {
            return Err(CdcError::ShapeMismatch(
                "cache does not belong to this network".into(),
            ));
        }
        let [k1, l, _, _] = self.config.output_dims()?;
        let mut g = grad_logits.clone().reshape(&[k1, l, 1, 1])?;
        let first_param = self
            .params
            .iter()
            .position(|p| !matches!(p, LayerParams::None));
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.params.len()];
        for (i, (trace, p)) in cache.traces.iter().zip(&self.params).enumerate().rev() {
            let need_input = first_param.is_some_and(|f| i > f);
            match (trace, p, &self.config.layers[i].kind) {
                (Trace::Softmax, _, _) => {}
                (Trace::Repeat(f), _, _) => g = temporal_repeat_backward(&g, *f)?,
                (Trace::Pool(rec), _, _) => g = maxpool3d_backward(&g, rec)?,
                (Trace::CdcFinal { input }, LayerParams::Cdc(w), LayerKind::CdcFinal(spec)) => {
                    let cg = cdc_backward(&g, input, w, spec)?;
                    grads[i] = vec![cg.filters, cg.bias];
                    g = cg.input;
                }
                (
                    Trace::Cdc {
                        input,
                        output,
                        mask,
                    },
                    LayerParams::Cdc(w),
                    LayerKind::CdcReluDropout { spec, .. },
                ) => {
                    if let Some(m) = mask {
                        g = dropout_backward(&g, m)?;
                    }
                    g = relu_backward(&g, output)?;
                    let cg = cdc_backward(&g, input, w, spec)?;
                    grads[i] = vec![cg.filters, cg.bias];
                    g = cg.input;
                }
                (
                    Trace::Conv { input, output },
                    LayerParams::Conv { weights, .. },
                    LayerKind::Conv3dRelu(spec),
                ) => {
                    g = relu_backward(&g, output)?;
                    if need_input {
                        let cg = conv3d_backward_with(self.kernel, &g, input, weights, spec)?;
                        grads[i] = vec![cg.weights, cg.bias];
                        g = cg.input;
                    } else {
                        let (gw, gb) =
                            conv3d_param_grads_with(self.kernel, &g, input, weights, spec)?;
                        grads[i] = vec![gw, gb];
                    }
                }
                _ => {
                    return Err(CdcError::ShapeMismatch(
                        "cache does not belong to this network".into(),
                    ))
                }
            }
            if first_param == Some(i) {
                break;
            }
        }
        Ok(grads.into_iter().flatten().collect())
    }
}
