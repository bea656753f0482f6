use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cdc_core::data::{
    generate_synthetic, jittered_proposals, load_annotations, load_detections, load_proposals,
    load_scores, save_detections, save_proposals, save_scores, Dataset, KvConfig, SyntheticConfig,
};
use cdc_core::eval::{average_map, localization_map, per_frame_map};
use cdc_core::exec::{with_workers, Exec};
use cdc_core::gradcheck::run_op_suite;
use cdc_core::localize::{frame_score_differences, localize, LocalizeOptions, ScoreDenominator};
use cdc_core::network::{
    build_network, frame_accuracy, load_checkpoint, save_checkpoint, train, Init, SgdConfig,
    ToyOptions, TrainOptions,
};
use cdc_core::pipeline::{
    dataset_windows, predict_dataset, throughput, throughput_table, toy_config_for,
};
use cdc_core::seed::mix_seed;

const DEFAULT_SEED: u64 = 7;

/// Dense per-frame action scoring and temporal action localization on
/// synthetic untrimmed video.
#[derive(Parser, Debug)]
#[command(name = "cdc", version)]
struct Cli {
    /// Worker threads for per-window and per-proposal work (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// key=value file supplying defaults; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/test splits and jittered test proposals.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_videos: Option<usize>,
        #[arg(long)]
        test_videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Frame height and width.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Background noise std relative to the signature amplitude.
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        amplitude: Option<f32>,
        /// Maximum proposal boundary shift as a fraction of instance length.
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Train a toy network on a dataset split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// Learning rate of the final CDC layer.
        #[arg(long)]
        final_lr: Option<f32>,
        #[arg(long)]
        momentum: Option<f32>,
        #[arg(long)]
        weight_decay: Option<f32>,
        /// Total CDC temporal upsampling: 1, 2, 4 or 8.
        #[arg(long)]
        granularity: Option<usize>,
        /// Conv stage widths, e.g. 8,16,32.
        #[arg(long)]
        widths: Option<String>,
        #[arg(long)]
        cdc_width: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        dropout: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV of (step, loss); defaults to <out>/loss.csv.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Score every frame of every video in a dataset split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for per-video (K+1, L) score tensors.
        #[arg(long)]
        out: PathBuf,
        /// Fail unless the checkpoint has this granularity.
        #[arg(long)]
        granularity: Option<usize>,
        /// Also write absolute frame-to-frame score differences as CSV.
        #[arg(long)]
        diffs: Option<PathBuf>,
    },
    /// Refine proposal boundaries into detections.
    Refine {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        nms_iou: Option<f64>,
        /// refined | algorithm1
        #[arg(long)]
        score_denominator: Option<String>,
    },
    /// Per-frame labeling mAP.
    EvalFrame {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Number of action classes; inferred from the scores when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// JSON report path; a .txt table is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal localization mAP.
    EvalLoc {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        iou: Option<f64>,
        /// Average over IoU thresholds 0.5:0.05:0.95 instead.
        #[arg(long)]
        average: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Kernel and network throughput at toy shapes.
    Bench {
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        granularity: Option<usize>,
    },
}

/// Flag value, else config-file value, else `default`.
fn pick<T: FromStr>(flag: Option<T>, file: &KvConfig, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get(key)?.unwrap_or(default))
}

fn parse_widths(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("widths {s:?}"))?;
    v.try_into()
        .map_err(|_| anyhow::anyhow!("widths need three values, got {s:?}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(out: Option<&Path>, json: &str, table: &str) -> Result<()> {
    print!("{table}");
    if let Some(p) = out {
        write_file(p, json)?;
        write_file(&p.with_extension("txt"), table)?;
    }
    Ok(())
}

fn run(cli: Cli, exec: Exec) -> Result<()> {
    let file = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    match cli.command {
        Command::GenData {
            out,
            seed,
            train_videos,
            test_videos,
            frames,
            size,
            classes,
            noise,
            amplitude,
            jitter,
        } => {
            let seed = pick(seed, &file, "seed", DEFAULT_SEED)?;
            let base = SyntheticConfig::train();
            let size = pick(size, &file, "size", base.height)?;
            let train_cfg = SyntheticConfig {
                num_videos: pick(train_videos, &file, "train_videos", base.num_videos)?,
                frames: pick(frames, &file, "frames", base.frames)?,
                height: size,
                width: size,
                num_classes: pick(classes, &file, "classes", base.num_classes)?,
                noise: pick(noise, &file, "noise", base.noise)?,
                amplitude: pick(amplitude, &file, "amplitude", base.amplitude)?,
                ..base
            };
            let test_cfg = SyntheticConfig {
                split: cdc_core::data::Split::Test,
                num_videos: pick(
                    test_videos,
                    &file,
                    "test_videos",
                    SyntheticConfig::test().num_videos,
                )?,
                ..train_cfg.clone()
            };
            let jitter = pick(jitter, &file, "jitter", 0.25)?;
            let train_ds = generate_synthetic(&train_cfg, mix_seed(seed, 0))?;
            let test_ds = generate_synthetic(&test_cfg, mix_seed(seed, 1))?;
            train_ds.save(out.join("train"))?;
            test_ds.save(out.join("test"))?;
            let frames_of = |id: &str| test_ds.video(id).map_or(0, |v| v.len());
            let proposals =
                jittered_proposals(&test_ds.annotations, frames_of, jitter, mix_seed(seed, 2));
            save_proposals(out.join("test").join("proposals.jsonl"), &proposals)?;
            println!(
                "wrote {} train and {} test videos ({} test proposals) to {}",
                train_ds.videos.len(),
                test_ds.videos.len(),
                proposals.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            steps,
            batch,
            lr,
            final_lr,
            momentum,
            weight_decay,
            granularity,
            widths,
            cdc_width,
            window,
            dropout,
            seed,
            loss_log,
        } => {
            let ds = Dataset::load(&data)?;
            let defaults = ToyOptions::default();
            let sgd_defaults = SgdConfig::default();
            let widths = match pick(widths, &file, "widths", String::new())? {
                s if s.is_empty() => defaults.widths,
                s => parse_widths(&s)?,
            };
            let toy = ToyOptions {
                window_length: pick(window, &file, "window", defaults.window_length)?,
                widths,
                cdc_width: pick(cdc_width, &file, "cdc_width", defaults.cdc_width)?,
                dropout: pick(dropout, &file, "dropout", defaults.dropout)?,
                granularity: pick(granularity, &file, "granularity", defaults.granularity)?,
                ..defaults
            };
            let config = toy_config_for(&ds, toy)?;
            let seed = pick(seed, &file, "seed", DEFAULT_SEED)?;
            let opts = TrainOptions {
                steps: pick(steps, &file, "steps", 2000)?,
                batch_size: pick(batch, &file, "batch", 8)?,
                seed,
                sgd: SgdConfig {
                    learning_rate: pick(lr, &file, "lr", sgd_defaults.learning_rate)?,
                    final_learning_rate: pick(
                        final_lr,
                        &file,
                        "final_lr",
                        sgd_defaults.final_learning_rate,
                    )?,
                    momentum: pick(momentum, &file, "momentum", sgd_defaults.momentum)?,
                    weight_decay: pick(
                        weight_decay,
                        &file,
                        "weight_decay",
                        sgd_defaults.weight_decay,
                    )?,
                },
            };
            let windows = dataset_windows(&ds, config.window_length())?;
            let mut net = build_network(config, Init::Seeded(seed))?;
            let mut log = String::from("step,loss\n");
            train(&mut net, &windows, &opts, exec, |step, loss| {
                writeln!(log, "{step},{loss}").expect("write to string");
            })?;
            save_checkpoint(&net, &out)?;
            write_file(&loss_log.unwrap_or_else(|| out.join("loss.csv")), &log)?;
            let acc = frame_accuracy(&net, &windows, exec)?;
            println!(
                "trained {} steps on {} windows; training frame accuracy {acc:.4}; checkpoint {}",
                opts.steps,
                windows.len(),
                out.display()
            );
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            granularity,
            diffs,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            if let Some(g) = granularity {
                let have = net.config().cdc_upsampling()?;
                if have != g {
                    bail!("checkpoint has granularity x{have}, --granularity asks for x{g}");
                }
            }
            let ds = Dataset::load(&data)?;
            let scores = predict_dataset(&net, &ds, exec)?;
            let mut csv = String::from("video,class,frame,diff\n");
            for (id, s) in &scores {
                save_scores(&out, id, s)?;
                if diffs.is_some() {
                    for c in 0..s.classes() {
                        for (t, d) in frame_score_differences(s, c)?.iter().enumerate() {
                            writeln!(csv, "{id},{c},{t},{d}").expect("write to string");
                        }
                    }
                }
            }
            if let Some(p) = diffs {
                write_file(&p, &csv)?;
            }
            println!("scored {} videos into {}", scores.len(), out.display());
        }
        Command::Refine {
            scores,
            proposals,
            out,
            alpha,
            nms_iou,
            score_denominator,
        } => {
            let defaults = LocalizeOptions::default();
            let opts = LocalizeOptions {
                alpha: pick(alpha, &file, "alpha", defaults.alpha)?,
                nms_iou: Some(pick(
                    nms_iou,
                    &file,
                    "nms_iou",
                    defaults.nms_iou.unwrap_or(0.4),
                )?),
                denominator: pick(
                    score_denominator
                        .map(|s| s.parse::<ScoreDenominator>())
                        .transpose()?,
                    &file,
                    "score_denominator",
                    ScoreDenominator::Refined,
                )?,
            };
            let scores = load_scores(&scores)?;
            let proposals = load_proposals(&proposals)?;
            let dets = localize(&proposals, &scores, &opts, exec)?;
            save_detections(&out, &dets)?;
            println!(
                "{} proposals -> {} detections in {}",
                proposals.len(),
                dets.len(),
                out.display()
            );
        }
        Command::EvalFrame {
            scores,
            annotations,
            classes,
            out,
        } => {
            let scores = load_scores(&scores)?;
            let k = match classes {
                Some(k) => k,
                None => match scores.values().next() {
                    Some(s) => s.classes() - 1,
                    None => bail!("no score files found"),
                },
            };
            let gt = load_annotations(&annotations, Some(k))?;
            let report = per_frame_map(&scores, &gt, k)?;
            write_report(out.as_deref(), &report.to_json(), &report.to_table())?;
        }
        Command::EvalLoc {
            detections,
            annotations,
            classes,
            iou,
            average,
            out,
        } => {
            let gt = load_annotations(&annotations, Some(classes))?;
            let dets = load_detections(&detections, Some(classes))?;
            if average {
                let (mean, reports) = average_map(&dets, &gt, classes)?;
                let mut table = String::new();
                for r in &reports {
                    writeln!(
                        table,
                        "mAP@{:.2} {:.4}",
                        r.iou_threshold.unwrap_or(0.0),
                        r.map
                    )
                    .expect("write to string");
                }
                writeln!(table, "average mAP {mean:.4}").expect("write to string");
                let body = format!(
                    "{{\n  \"average_map\": {mean},\n  \"reports\": [{}]\n}}\n",
                    reports
                        .iter()
                        .map(|r| r.to_json())
                        .collect::<Vec<_>>()
                        .join(",\n")
                );
                write_report(out.as_deref(), &body, &table)?;
            } else {
                let thr = pick(iou, &file, "iou", 0.5)?;
                let report = localization_map(&dets, &gt, thr, classes)?;
                write_report(out.as_deref(), &report.to_json(), &report.to_table())?;
            }
        }
        Command::Gradcheck { instances, seed } => {
            let rows = run_op_suite(
                pick(instances, &file, "instances", 20)?,
                pick(seed, &file, "seed", DEFAULT_SEED)?,
            )?;
            println!(
                "{:<14} {:>9} {:>14} {:>10}  result",
                "op", "instances", "max rel error", "tolerance"
            );
            for r in &rows {
                println!(
                    "{:<14} {:>9} {:>14.3e} {:>10.0e}  {}",
                    r.op,
                    r.instances,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            if rows.iter().any(|r| !r.passed) {
                bail!("gradient check failed");
            }
        }
        Command::Bench {
            batch,
            reps,
            granularity,
        } => {
            let cfg = cdc_core::network::NetworkConfig::toy(&ToyOptions {
                granularity: pick(granularity, &file, "granularity", 8)?,
                ..Default::default()
            })?;
            let net = build_network(cfg, Init::Seeded(DEFAULT_SEED))?;
            let rows = throughput(
                &net,
                pick(batch, &file, "batch", 8)?,
                pick(reps, &file, "reps", 5)?,
                exec,
            )?;
            print!("{}", throughput_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers;
    match with_workers(workers, |exec| run(cli, exec)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
