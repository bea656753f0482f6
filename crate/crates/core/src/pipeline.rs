//! Dataset-level glue between the network, localization and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::cdc::{cdc_backward, cdc_forward, CdcLayerSpec, CdcWeights};
use crate::data::Dataset;
use crate::error::{CdcError, Result};
use crate::exec::Exec;
use crate::network::{
    predict_video, slice_training_windows, ForwardMode, Network, NetworkConfig, ToyOptions,
    VideoWindow,
};
use crate::ops::conv3d::{conv3d_backward_with, conv3d_forward_with, Conv3dSpec, ConvKernel};
use crate::ops::softmax::ScoreMatrix;
use crate::tensor::{FillRule, Tensor};

/// Training windows of every video in the dataset, in video order.
pub fn dataset_windows(ds: &Dataset, l: usize) -> Result<Vec<VideoWindow>> {
    let mut out = Vec::new();
    for v in &ds.videos {
        out.extend(slice_training_windows(
            v,
            &ds.annotations,
            ds.num_classes,
            l,
        )?);
    }
    if out.is_empty() {
        return Err(CdcError::Missing(
            "dataset has no window containing an action".into(),
        ));
    }
    Ok(out)
}

/// Frame scores for every video, keyed by video id.
pub fn predict_dataset(
    net: &Network,
    ds: &Dataset,
    exec: Exec,
) -> Result<BTreeMap<String, ScoreMatrix>> {
    ds.videos
        .iter()
        .map(|v| Ok((v.id.clone(), predict_video(net, v, exec)?)))
        .collect()
}

/// Toy network sized for the dataset's frames (square frames required).
pub fn toy_config_for(ds: &Dataset, opts: ToyOptions) -> Result<NetworkConfig> {
    let v = ds
        .videos
        .first()
        .ok_or_else(|| CdcError::Missing("dataset has no videos".into()))?;
    let d = v.frames.dims();
    if d[2] != d[3] {
        return Err(CdcError::ShapeMismatch(format!(
            "frames must be square, got {}x{}",
            d[2], d[3]
        )));
    }
    NetworkConfig::toy(&ToyOptions {
        num_classes: ds.num_classes,
        input_size: d[2],
        ..opts
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputRow {
    pub name: String,
    pub windows_per_s: f64,
    pub frames_per_s: f64,
}

fn time_it<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let t0 = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(reps as f64 / t0.elapsed().as_secs_f64().max(1e-9))
}

/// Windows/s and frames/s of the kernels at toy-network shapes, plus
/// whole-network eval over a batch of `batch` windows under `exec`.
pub fn throughput(
    net: &Network,
    batch: usize,
    reps: usize,
    exec: Exec,
) -> Result<Vec<ThroughputRow>> {
    let cfg = net.config();
    let l = cfg.window_length();
    let rand = |dims: &[usize], seed| {
        Tensor::filled(
            dims,
            FillRule::SeededUniform {
                lo: -1.0,
                hi: 1.0,
                seed,
            },
        )
    };
    let mut rows = Vec::new();
    let mut push = |name: &str, per_s: f64| {
        rows.push(ThroughputRow {
            name: name.to_string(),
            windows_per_s: per_s,
            frames_per_s: per_s * l as f64,
        })
    };

    let conv = Conv3dSpec::same(3, 8, 3);
    let x = rand(&[3, l, cfg.input[2], cfg.input[3]], 1)?;
    let w = rand(&conv.weight_dims(), 2)?;
    let b = Tensor::zeros(&[8])?;
    let y = conv3d_forward_with(ConvKernel::Im2col, &x, &w, &b, &conv)?;
    for (kernel, tag) in [
        (ConvKernel::Direct, "direct"),
        (ConvKernel::Im2col, "im2col"),
    ] {
        push(
            &format!("conv3d_forward/{tag}"),
            time_it(reps, || {
                conv3d_forward_with(kernel, &x, &w, &b, &conv).map(drop)
            })?,
        );
        push(
            &format!("conv3d_backward/{tag}"),
            time_it(reps, || {
                conv3d_backward_with(kernel, &y, &x, &w, &conv).map(drop)
            })?,
        );
    }

    let spec = CdcLayerSpec::new(32, 64, [4, 4, 4], 2, 1);
    let cx = rand(&[32, l / 8, 4, 4], 3)?;
    let cw = CdcWeights::glorot(&spec, 4)?;
    let cy = cdc_forward(&cx, &cw, &spec)?;
    push(
        "cdc_forward",
        time_it(reps, || cdc_forward(&cx, &cw, &spec).map(drop))?,
    );
    push(
        "cdc_backward",
        time_it(reps, || cdc_backward(&cy, &cx, &cw, &spec).map(drop))?,
    );

    let windows: Vec<Tensor> = (0..batch)
        .map(|i| rand(&cfg.input, 10 + i as u64))
        .collect::<Result<_>>()?;
    let batches_per_s = time_it(reps, || {
        for r in exec.map(&windows, |w| net.forward(w, ForwardMode::Eval).map(drop)) {
            r?;
        }
        Ok(())
    })?;
    push(
        &format!(
            "network_eval/{}",
            if exec.is_parallel() {
                "parallel"
            } else {
                "sequential"
            }
        ),
        batches_per_s * batch as f64,
    );
    Ok(rows)
}

pub fn throughput_table(rows: &[ThroughputRow]) -> String {
    let mut s = format!("{:<28} {:>12} {:>12}\n", "kernel", "windows/s", "frames/s");
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>12.1} {:>12.1}\n",
            r.name, r.windows_per_s, r.frames_per_s
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::network::{build_network, Init};

    #[test]
    fn windows_and_predictions_cover_dataset() {
        let cfg = SyntheticConfig {
            num_videos: 2,
            frames: 100,
            height: 8,
            width: 8,
            instances_per_video: (1, 2),
            instance_length: (10, 20),
            ..SyntheticConfig::test()
        };
        let ds = generate_synthetic(&cfg, 1).unwrap();
        let ncfg = toy_config_for(
            &ds,
            ToyOptions {
                window_length: 16,
                widths: [2, 2, 2],
                cdc_width: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ncfg.input, [3, 16, 8, 8]);
        let net = build_network(ncfg, Init::Seeded(1)).unwrap();
        assert!(!dataset_windows(&ds, 16).unwrap().is_empty());
        let scores = predict_dataset(&net, &ds, Exec::Sequential).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.values().all(|s| s.frames() == 100));
        let rows = throughput(&net, 2, 1, Exec::Sequential).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(throughput_table(&rows).contains("cdc_forward"));
    }
}
