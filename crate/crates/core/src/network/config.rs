//! Layer lists and static shape inference.

use crate::cdc::CdcLayerSpec;
use crate::error::{CdcError, Result};
use crate::ops::conv3d::Conv3dSpec;
use crate::ops::pool::{pool_output_dims, SPATIAL_POOL};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// 3D convolution followed by relu.
    Conv3dRelu(Conv3dSpec),
    /// 1x2x2 pooling that keeps the temporal length. `ceil` keeps a partial
    /// trailing window (needed for odd spatial extents such as 7x7).
    MaxPoolSpatial {
        ceil: bool,
    },
    MaxPoolSpatiotemporal {
        window: [usize; 3],
    },
    /// CDC layer followed by relu and dropout.
    CdcReluDropout {
        spec: CdcLayerSpec,
        dropout: f32,
    },
    /// Last CDC layer; one output channel per class, background last.
    CdcFinal(CdcLayerSpec),
    /// Nearest-neighbour temporal upsampling by an integer factor.
    TemporalRepeat {
        factor: usize,
    },
    FramewiseSoftmax,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv3dRelu(_) | LayerKind::CdcReluDropout { .. } | LayerKind::CdcFinal(_)
        )
    }

    pub fn cdc_spec(&self) -> Option<&CdcLayerSpec> {
        match self {
            LayerKind::CdcReluDropout { spec, .. } | LayerKind::CdcFinal(spec) => Some(spec),
            _ => None,
        }
    }

    /// Output dims for input dims `(C, L, H, W)`.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        match self {
            LayerKind::Conv3dRelu(spec) => {
                spec.validate()?;
                if input[0] != spec.in_channels {
                    return Err(CdcError::ShapeMismatch(format!(
                        "conv expects {} channels, receives {}",
                        spec.in_channels, input[0]
                    )));
                }
                let [l, h, w] = spec.output_extents([input[1], input[2], input[3]])?;
                Ok([spec.out_channels, l, h, w])
            }
            LayerKind::MaxPoolSpatial { ceil } => pool_output_dims(&input, SPATIAL_POOL, *ceil),
            LayerKind::MaxPoolSpatiotemporal { window } => pool_output_dims(&input, *window, false),
            LayerKind::CdcReluDropout { spec, .. } | LayerKind::CdcFinal(spec) => {
                if input[0] != spec.in_channels
                    || input[2] != spec.kernel[1]
                    || input[3] != spec.kernel[2]
                {
                    return Err(CdcError::ShapeMismatch(format!(
                        "CDC layer {spec:?} cannot consume {input:?}"
                    )));
                }
                Ok([spec.out_channels, spec.output_length(input[1])?, 1, 1])
            }
            LayerKind::TemporalRepeat { factor } => {
                if *factor == 0 {
                    return Err(CdcError::InvalidSpec("repeat factor 0".into()));
                }
                Ok([input[0], input[1] * factor, input[2], input[3]])
            }
            LayerKind::FramewiseSoftmax => Ok(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input dims (channels, window length, height, width).
    pub input: [usize; 4],
    /// Number of action classes K; the network predicts K + 1 columns.
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Knobs of the desk-scale network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub num_classes: usize,
    pub window_length: usize,
    pub input_size: usize,
    /// Channel widths of the three conv stages.
    pub widths: [usize; 3],
    /// Channel width of the two hidden CDC layers.
    pub cdc_width: usize,
    pub dropout: f32,
    /// Total temporal upsampling of the CDC stack: 1, 2, 4 or 8.
    pub granularity: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            num_classes: 3,
            window_length: 32,
            input_size: 16,
            widths: [8, 16, 32],
            cdc_width: 64,
            dropout: 0.5,
            granularity: 8,
        }
    }
}

/// CDC temporal (kernel, stride, padding): `(4, 2, 1)` doubles the length,
/// `(3, 1, 1)` preserves it.
fn cdc_temporal(upsample: bool) -> (usize, usize, usize) {
    if upsample {
        (4, 2, 1)
    } else {
        (3, 1, 1)
    }
}

fn cdc_stack(
    layers: &mut Vec<Layer>,
    in_channels: usize,
    spatial: usize,
    hidden: usize,
    num_classes: usize,
    dropout: f32,
    granularity: usize,
) -> Result<()> {
    let doublings = match granularity {
        1 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        g => {
            return Err(CdcError::InvalidArgument(format!(
                "granularity must be 1, 2, 4 or 8, got {g}"
            )))
        }
    };
    let names = ["cdc6", "cdc7", "cdc8"];
    let mut cin = in_channels;
    for (i, name) in names.iter().enumerate() {
        let (kl, stride, pad) = cdc_temporal(i < doublings);
        let sp = if i == 0 { spatial } else { 1 };
        if i < 2 {
            let spec = CdcLayerSpec::new(cin, hidden, [kl, sp, sp], stride, pad);
            layers.push(Layer::new(
                *name,
                LayerKind::CdcReluDropout { spec, dropout },
            ));
            cin = hidden;
        } else {
            let spec = CdcLayerSpec::new(cin, num_classes + 1, [kl, sp, sp], stride, pad);
            layers.push(Layer::new(*name, LayerKind::CdcFinal(spec)));
        }
    }
    if granularity < 8 {
        layers.push(Layer::new(
            "upsample",
            LayerKind::TemporalRepeat {
                factor: 8 / granularity,
            },
        ));
    }
    layers.push(Layer::new("prob", LayerKind::FramewiseSoftmax));
    Ok(())
}

impl NetworkConfig {
    /// Desk-scale network: three conv stages that divide time by 8 and space
    /// by 4, then CDC6/CDC7/CDC8 restoring the frame rate.
    pub fn toy(opts: &ToyOptions) -> Result<Self> {
        let [w0, w1, w2] = opts.widths;
        if !opts.input_size.is_multiple_of(4) || !opts.window_length.is_multiple_of(8) {
            return Err(CdcError::InvalidArgument(format!(
                "toy network needs input size divisible by 4 and window length divisible by 8, got {} and {}",
                opts.input_size, opts.window_length
            )));
        }
        let mut layers = vec![
            Layer::new("conv1a", LayerKind::Conv3dRelu(Conv3dSpec::same(3, w0, 3))),
            Layer::new(
                "pool1",
                LayerKind::MaxPoolSpatiotemporal { window: [2, 2, 2] },
            ),
            Layer::new("conv2a", LayerKind::Conv3dRelu(Conv3dSpec::same(w0, w1, 3))),
            Layer::new(
                "pool2",
                LayerKind::MaxPoolSpatiotemporal { window: [2, 1, 1] },
            ),
            Layer::new("conv3a", LayerKind::Conv3dRelu(Conv3dSpec::same(w1, w2, 3))),
            Layer::new(
                "pool3",
                LayerKind::MaxPoolSpatiotemporal { window: [2, 1, 1] },
            ),
            Layer::new("pool5", LayerKind::MaxPoolSpatial { ceil: false }),
        ];
        cdc_stack(
            &mut layers,
            w2,
            opts.input_size / 4,
            opts.cdc_width,
            opts.num_classes,
            opts.dropout,
            opts.granularity,
        )?;
        let config = NetworkConfig {
            input: [3, opts.window_length, opts.input_size, opts.input_size],
            num_classes: opts.num_classes,
            layers,
        };
        config.infer_shapes()?;
        Ok(config)
    }

    /// Full-size layout: the C3D conv1a..conv5b trunk on 112x112 input,
    /// spatial-only pool5, and 4096-wide CDC6/CDC7.
    pub fn c3d(num_classes: usize, window_length: usize) -> Result<Self> {
        let conv = |name: &str, cin, cout| {
            Layer::new(name, LayerKind::Conv3dRelu(Conv3dSpec::same(cin, cout, 3)))
        };
        let st =
            |name: &str| Layer::new(name, LayerKind::MaxPoolSpatiotemporal { window: [2, 2, 2] });
        let mut layers = vec![
            conv("conv1a", 3, 64),
            Layer::new("pool1", LayerKind::MaxPoolSpatial { ceil: false }),
            conv("conv2a", 64, 128),
            st("pool2"),
            conv("conv3a", 128, 256),
            conv("conv3b", 256, 256),
            st("pool3"),
            conv("conv4a", 256, 512),
            conv("conv4b", 512, 512),
            st("pool4"),
            conv("conv5a", 512, 512),
            conv("conv5b", 512, 512),
            Layer::new("pool5", LayerKind::MaxPoolSpatial { ceil: true }),
        ];
        cdc_stack(&mut layers, 512, 4, 4096, num_classes, 0.5, 8)?;
        let config = NetworkConfig {
            input: [3, window_length, 112, 112],
            num_classes,
            layers,
        };
        config.infer_shapes()?;
        Ok(config)
    }

    pub fn window_length(&self) -> usize {
        self.input[1]
    }

    /// Output dims of every layer, checking the contract
    /// `(3, L, H, W) -> (K+1, L, 1, 1)` with a trailing softmax.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 4]>> {
        if self.num_classes == 0 {
            return Err(CdcError::InvalidSpec(
                "network needs at least one action class".into(),
            ));
        }
        let mut dims = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            dims = layer
                .kind
                .output_dims(dims)
                .map_err(|e| CdcError::InvalidSpec(format!("layer {}: {e}", layer.name)))?;
            out.push(dims);
        }
        match self.layers.last() {
            Some(Layer {
                kind: LayerKind::FramewiseSoftmax,
                ..
            }) => {}
            _ => {
                return Err(CdcError::InvalidSpec(
                    "network must end in a frame-wise softmax".into(),
                ))
            }
        }
        let finals = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::CdcFinal(_)))
            .count();
        if finals != 1 {
            return Err(CdcError::InvalidSpec(format!(
                "network needs exactly one final CDC layer, found {finals}"
            )));
        }
        let expected = [self.num_classes + 1, self.window_length(), 1, 1];
        if dims != expected {
            return Err(CdcError::InvalidSpec(format!(
                "network output {dims:?}, expected {expected:?}"
            )));
        }
        Ok(out)
    }

    pub fn output_dims(&self) -> Result<[usize; 4]> {
        Ok(*self.infer_shapes()?.last().expect("non-empty"))
    }

    /// Temporal length at the input of the first CDC layer.
    pub fn trunk_output_length(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        let first_cdc = self
            .layers
            .iter()
            .position(|l| l.kind.cdc_spec().is_some())
            .ok_or_else(|| CdcError::InvalidSpec("no CDC layer".into()))?;
        Ok(if first_cdc == 0 {
            self.input[1]
        } else {
            shapes[first_cdc - 1][1]
        })
    }

    /// Combined temporal upsampling of the CDC layers (the x1/x2/x4/x8
    /// prediction granularity relative to the trunk output).
    pub fn cdc_upsampling(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        let trunk = self.trunk_output_length()?;
        let last_cdc = self
            .layers
            .iter()
            .rposition(|l| l.kind.cdc_spec().is_some())
            .expect("checked by trunk_output_length");
        Ok(shapes[last_cdc][1] / trunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let cfg = NetworkConfig::toy(&ToyOptions::default()).unwrap();
        let shapes = cfg.infer_shapes().unwrap();
        let pool5 = cfg.layers.iter().position(|l| l.name == "pool5").unwrap();
        assert_eq!(shapes[pool5], [32, 4, 4, 4]);
        assert_eq!(cfg.output_dims().unwrap(), [4, 32, 1, 1]);
        assert_eq!(cfg.cdc_upsampling().unwrap(), 8);
        assert_eq!(cfg.trunk_output_length().unwrap(), 4);
    }

    #[test]
    fn granularity_variants_keep_the_output_length() {
        for g in [1, 2, 4, 8] {
            let cfg = NetworkConfig::toy(&ToyOptions {
                granularity: g,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(cfg.output_dims().unwrap(), [4, 32, 1, 1]);
            assert_eq!(cfg.cdc_upsampling().unwrap(), g);
            let repeat = cfg
                .layers
                .iter()
                .find_map(|l| match l.kind {
                    LayerKind::TemporalRepeat { factor } => Some(factor),
                    _ => None,
                })
                .unwrap_or(1);
            assert_eq!(g * repeat, 8);
        }
        assert!(NetworkConfig::toy(&ToyOptions {
            granularity: 3,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn full_c3d_layout() {
        let cfg = NetworkConfig::c3d(20, 32).unwrap();
        let shapes = cfg.infer_shapes().unwrap();
        let at = |name: &str| shapes[cfg.layers.iter().position(|l| l.name == name).unwrap()];
        assert_eq!(at("pool5"), [512, 4, 4, 4]);
        assert_eq!(at("cdc6"), [4096, 8, 1, 1]);
        assert_eq!(at("cdc7"), [4096, 16, 1, 1]);
        assert_eq!(at("cdc8"), [21, 32, 1, 1]);
    }

    #[test]
    fn broken_configs_rejected() {
        let mut cfg = NetworkConfig::toy(&ToyOptions::default()).unwrap();
        cfg.layers.pop();
        assert!(cfg.infer_shapes().is_err());
        let mut cfg = NetworkConfig::toy(&ToyOptions::default()).unwrap();
        cfg.input[1] = 20;
        assert!(cfg.infer_shapes().is_err());
    }
}
