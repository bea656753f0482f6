//! Checkpoint directories: `manifest.txt` plus one tensor file per
//! parameter. The manifest has one record per line:
//!
//! ```text
//! input 3,32,16,16
//! classes 3
//! layer conv1a conv3d in=3 out=8 kernel=3,3,3 stride=1,1,1 pad=1,1,1
//! layer cdc6 cdc in=32 out=64 kernel=4,4,4 stride=2 pad=1 dropout=0.5
//! param conv1a.weight conv1a.weight.cdct
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cdc::{CdcLayerSpec, CdcWeights};
use crate::data::tensor_io::{read_tensor, write_tensor};
use crate::error::{CdcError, Result};
use crate::network::config::{Layer, LayerKind, NetworkConfig};
use crate::network::model::{LayerParams, Network};
use crate::ops::conv3d::Conv3dSpec;

const MANIFEST: &str = "manifest.txt";

fn triple(v: [usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn layer_record(layer: &Layer) -> String {
    let body = match &layer.kind {
        LayerKind::Conv3dRelu(s) => format!(
            "conv3d in={} out={} kernel={} stride={} pad={}",
            s.in_channels,
            s.out_channels,
            triple(s.kernel),
            triple(s.stride),
            triple(s.padding)
        ),
        LayerKind::MaxPoolSpatial { ceil } => format!("maxpool-spatial ceil={}", u8::from(*ceil)),
        LayerKind::MaxPoolSpatiotemporal { window } => {
            format!("maxpool-spatiotemporal window={}", triple(*window))
        }
        LayerKind::CdcReluDropout { spec, dropout } => {
            format!("{} dropout={dropout}", cdc_fields("cdc", spec))
        }
        LayerKind::CdcFinal(spec) => cdc_fields("cdc-final", spec),
        LayerKind::TemporalRepeat { factor } => format!("repeat factor={factor}"),
        LayerKind::FramewiseSoftmax => "softmax".to_string(),
    };
    format!("layer {} {body}", layer.name)
}

fn cdc_fields(tag: &str, s: &CdcLayerSpec) -> String {
    format!(
        "{tag} in={} out={} kernel={} stride={} pad={}",
        s.in_channels,
        s.out_channels,
        triple(s.kernel),
        s.temporal_stride,
        s.temporal_padding
    )
}

/// Text form of a network config (the non-parameter part of a manifest).
pub fn config_manifest(config: &NetworkConfig) -> String {
    let mut s = String::new();
    let i = config.input;
    writeln!(s, "input {},{},{},{}", i[0], i[1], i[2], i[3]).expect("write to string");
    writeln!(s, "classes {}", config.num_classes).expect("write to string");
    for layer in &config.layers {
        writeln!(s, "{}", layer_record(layer)).expect("write to string");
    }
    s
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn parse_triple(v: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(v)?
        .try_into()
        .map_err(|_| format!("expected three values, got {v:?}"))
}

fn parse_layer(tokens: &[&str]) -> std::result::Result<Layer, String> {
    let (name, tag, rest) = match tokens {
        [name, tag, rest @ ..] => (*name, *tag, rest),
        _ => return Err("layer record needs a name and a type".into()),
    };
    let mut fields = BTreeMap::new();
    for t in rest {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {t:?}"))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| format!("layer {name} lacks {k}"))
    };
    let num = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|e| format!("{k}: {e}"))
    };
    let cdc = || -> std::result::Result<CdcLayerSpec, String> {
        Ok(CdcLayerSpec::new(
            num("in")?,
            num("out")?,
            parse_triple(get("kernel")?)?,
            num("stride")?,
            num("pad")?,
        ))
    };
    let kind = match tag {
        "conv3d" => LayerKind::Conv3dRelu(Conv3dSpec {
            in_channels: num("in")?,
            out_channels: num("out")?,
            kernel: parse_triple(get("kernel")?)?,
            stride: parse_triple(get("stride")?)?,
            padding: parse_triple(get("pad")?)?,
        }),
        "maxpool-spatial" => LayerKind::MaxPoolSpatial {
            ceil: num("ceil")? != 0,
        },
        "maxpool-spatiotemporal" => LayerKind::MaxPoolSpatiotemporal {
            window: parse_triple(get("window")?)?,
        },
        "cdc" => LayerKind::CdcReluDropout {
            spec: cdc()?,
            dropout: get("dropout")?
                .parse()
                .map_err(|e| format!("dropout: {e}"))?,
        },
        "cdc-final" => LayerKind::CdcFinal(cdc()?),
        "repeat" => LayerKind::TemporalRepeat {
            factor: num("factor")?,
        },
        "softmax" => LayerKind::FramewiseSoftmax,
        other => return Err(format!("unknown layer type {other}")),
    };
    Ok(Layer::new(name, kind))
}

struct Manifest {
    config: NetworkConfig,
    params: Vec<(String, String)>,
}

fn parse_manifest(text: &str, origin: &str) -> Result<Manifest> {
    let mut input = None;
    let mut classes = None;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let located = |message: String| CdcError::Record {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["input", v] => {
                let dims = parse_list(v).map_err(located)?;
                input = Some(
                    <[usize; 4]>::try_from(dims)
                        .map_err(|_| located("input needs 4 dims".into()))?,
                );
            }
            ["classes", v] => {
                classes = Some(v.parse::<usize>().map_err(|e| located(e.to_string()))?)
            }
            ["layer", rest @ ..] => layers.push(parse_layer(rest).map_err(located)?),
            ["param", name, file] => params.push((name.to_string(), file.to_string())),
            _ => return Err(located(format!("unrecognised record {line:?}"))),
        }
    }
    let missing = |what: &str| CdcError::Missing(format!("{origin} has no {what} record"));
    let config = NetworkConfig {
        input: input.ok_or_else(|| missing("input"))?,
        num_classes: classes.ok_or_else(|| missing("classes"))?,
        layers,
    };
    config.infer_shapes()?;
    Ok(Manifest { config, params })
}

/// Parse the config records of a manifest (param records are ignored).
pub fn parse_config_manifest(text: &str) -> Result<NetworkConfig> {
    Ok(parse_manifest(text, "<manifest>")?.config)
}

pub fn save_checkpoint(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CdcError::io(dir, e))?;
    let mut manifest = config_manifest(net.config());
    for (name, t) in net.named_params() {
        let file = format!("{name}.cdct");
        write_tensor(dir.join(&file), t)?;
        writeln!(manifest, "param {name} {file}").expect("write to string");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| CdcError::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CdcError::io(&path, e))?;
    let manifest = parse_manifest(&text, &path.display().to_string())?;
    let files: BTreeMap<&str, &str> = manifest
        .params
        .iter()
        .map(|(n, f)| (n.as_str(), f.as_str()))
        .collect();
    let load = |layer: &str, suffix: &str| {
        let key = format!("{layer}.{suffix}");
        let file = files
            .get(key.as_str())
            .ok_or_else(|| CdcError::Missing(format!("checkpoint has no tensor {key}")))?;
        read_tensor(dir.join(file))
    };
    let params = manifest
        .config
        .layers
        .iter()
        .map(|layer| {
            Ok(match &layer.kind {
                LayerKind::Conv3dRelu(_) => LayerParams::Conv {
                    weights: load(&layer.name, "weight")?,
                    bias: load(&layer.name, "bias")?,
                },
                LayerKind::CdcReluDropout { .. } | LayerKind::CdcFinal(_) => {
                    LayerParams::Cdc(CdcWeights {
                        filters: load(&layer.name, "weight")?,
                        bias: load(&layer.name, "bias")?,
                    })
                }
                _ => LayerParams::None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::ToyOptions;
    use crate::network::model::{build_network, Init};

    #[test]
    fn round_trip() {
        for g in [2, 8] {
            let cfg = NetworkConfig::toy(&ToyOptions {
                granularity: g,
                dropout: 0.3,
                ..Default::default()
            })
            .unwrap();
            let net = build_network(cfg, Init::Seeded(5)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(&net, dir.path()).unwrap();
            assert_eq!(load_checkpoint(dir.path()).unwrap(), net);
        }
        let full = NetworkConfig::c3d(5, 16).unwrap();
        assert_eq!(
            parse_config_manifest(&config_manifest(&full)).unwrap(),
            full
        );
    }

    #[test]
    fn bad_manifests() {
        assert!(parse_config_manifest("classes 3\n").is_err());
        let mut text = config_manifest(&NetworkConfig::toy(&ToyOptions::default()).unwrap());
        text.push_str("layer extra bogus\n");
        assert!(matches!(
            parse_config_manifest(&text),
            Err(CdcError::Record { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(MANIFEST),
            config_manifest(&NetworkConfig::toy(&ToyOptions::default()).unwrap()),
        )
        .unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
