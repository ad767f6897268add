//! Command-line interface: static analysis, the scaling study, the
//! gradient-check suite, inference, the synthetic overfit trainer and a
//! forward-pass benchmark.

use crate::analyzer::{analyze, scaling_study};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::kitti::read_kitti_bin;
use crate::model::{infer, ModelParams};
use crate::pillars::pillarize;
use crate::runconfig::{load_run_config, RunConfig};
use crate::synth::synth_scene;
use crate::tape::Tape;
use crate::train::{train_toy, TrainSettings};
use crate::weights::{load_model, save_model};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::time::Instant;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "stripdet", version, about = "Lightweight strip-attention 3D detector tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer parameter and MAC counts for a configuration.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// BEV rows to analyze at (defaults to the grid height).
        #[arg(long)]
        bev_h: Option<usize>,
        /// BEV columns to analyze at (defaults to the grid width).
        #[arg(long)]
        bev_w: Option<usize>,
    },
    /// Compare the strip pair against a full KxK depthwise across kernel sizes.
    Scaling {
        /// Comma-separated odd kernel sizes, at least three.
        #[arg(long, value_delimiter = ',', default_value = "3,7,11,21")]
        k: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient certification suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Detect objects in a KITTI velodyne .bin file.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overfit the detector on a synthetic scene and report recovery.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Save the trained weights here.
        #[arg(long)]
        out_weights: Option<PathBuf>,
    },
    /// Time forward passes on a synthetic scene.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        iters: usize,
    },
}

/// Format with six significant digits, plain notation.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn resolved(path: &Option<PathBuf>, base: ModelConfig) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let rc = load_run_config(p, &base)?;
            for n in &rc.notices {
                eprintln!("note: {n}");
            }
            Ok(rc)
        }
        None => Ok(RunConfig {
            config: base,
            seed: 0,
            points: None,
            weights: None,
            output: None,
            notices: Vec::new(),
        }),
    }
}

pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze { config, bev_h, bev_w } => cmd_analyze(config, bev_h, bev_w),
        Command::Scaling { k, config } => cmd_scaling(k, config),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Infer {
            config,
            weights,
            points,
            out,
        } => cmd_infer(config, weights, points, out),
        Command::TrainToy {
            config,
            seed,
            steps,
            out_weights,
        } => cmd_train_toy(config, seed, steps, out_weights),
        Command::Bench { config, iters } => cmd_bench(config, iters),
    }
}

fn cmd_analyze(config: Option<PathBuf>, bev_h: Option<usize>, bev_w: Option<usize>) -> Result<()> {
    let rc = resolved(&config, ModelConfig::reference())?;
    let cfg = rc.config;
    let h = match bev_h {
        Some(v) => v,
        None => cfg.grid.height()?,
    };
    let w = match bev_w {
        Some(v) => v,
        None => cfg.grid.width()?,
    };
    let report = analyze(&cfg, h, w)?;

    let name_w = report.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
    println!("{:<name_w$}  {:>12}  {:>16}", "layer", "params", "macs");
    for l in &report.layers {
        println!("{:<name_w$}  {:>12}  {:>16}", l.name, l.params, l.macs);
    }
    let params = report.total_params();
    let macs = report.total_macs();
    println!(
        "{:<name_w$}  {:>12}  {:>16}",
        "total", params, macs
    );
    println!();
    println!("resolution: {h}x{w} BEV cells");
    println!("total params: {} ({} M)", params, fmt_sig(params as f64 / 1e6));
    println!(
        "headline (convention: MACs): {} GMACs; as 2*MACs: {} GFLOPs",
        fmt_sig(macs as f64 / 1e9),
        fmt_sig(report.total_flops() as f64 / 1e9)
    );
    println!(
        "minor elementwise ops (excluded from headline): {} GFLOPs",
        fmt_sig(report.minor_flops as f64 / 1e9)
    );
    Ok(())
}

fn cmd_scaling(k: Vec<usize>, config: Option<PathBuf>) -> Result<()> {
    let rc = resolved(&config, ModelConfig::reference())?;
    let report = scaling_study(&rc.config, &k)?;
    println!(
        "strip pair vs full KxK depthwise at C={} channels, {} output px",
        report.channels, report.px
    );
    println!(
        "{:>4}  {:>12} {:>12}  {:>16} {:>16}",
        "K", "strip params", "full params", "strip macs", "full macs"
    );
    for (i, &k) in report.k_values.iter().enumerate() {
        println!(
            "{:>4}  {:>12} {:>12}  {:>16} {:>16}",
            k, report.strip_params[i], report.full_params[i], report.strip_macs[i], report.full_macs[i]
        );
    }
    println!(
        "fitted param growth: strip ~ K^{}, full ~ K^{}",
        fmt_sig(report.strip_param_exponent),
        fmt_sig(report.full_param_exponent)
    );
    println!(
        "fitted mac growth:   strip ~ K^{}, full ~ K^{}",
        fmt_sig(report.strip_mac_exponent),
        fmt_sig(report.full_mac_exponent)
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = run_suite(seed)?;
    let mut failures = 0;
    for (name, err) in &results {
        let ok = *err <= GRADCHECK_TOLERANCE;
        if !ok {
            failures += 1;
        }
        println!(
            "{:<20} {:>12.3e}  {}",
            name,
            err,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("{} cases, {} failures (tolerance {GRADCHECK_TOLERANCE:.0e})", results.len(), failures);
    if failures > 0 {
        return Err(Error::Format(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn cmd_infer(
    config: Option<PathBuf>,
    weights: Option<PathBuf>,
    points: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let rc = resolved(&config, ModelConfig::reference())?;
    let weights = weights
        .or(rc.weights)
        .ok_or_else(|| Error::Config("a weights path is required (--weights or [paths])".into()))?;
    let points = points
        .or(rc.points)
        .ok_or_else(|| Error::Config("a points path is required (--points or [paths])".into()))?;
    let out = out
        .or(rc.output)
        .ok_or_else(|| Error::Config("an output path is required (--out or [paths])".into()))?;

    let cfg = rc.config;
    let params: ModelParams<f32> = load_model(&cfg, &weights)?;
    let cloud = read_kitti_bin(&points)?;
    let (dets, stats) = infer(&cfg, &params, &cloud)?;

    let mut text = String::new();
    for d in &dets {
        let b = &d.box3d;
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            cfg.anchors[d.class_id].class,
            fmt_sig(d.score),
            fmt_sig(b.x),
            fmt_sig(b.y),
            fmt_sig(b.z),
            fmt_sig(b.w),
            fmt_sig(b.l),
            fmt_sig(b.h),
            fmt_sig(b.yaw),
        ));
    }
    std::fs::write(&out, text)?;
    println!(
        "{} points -> {} pillars -> {} candidates -> {} detections ({} dropped non-finite)",
        cloud.len(),
        stats.pillars,
        stats.above_threshold,
        dets.len(),
        stats.dropped_non_finite
    );
    Ok(())
}

fn cmd_train_toy(
    config: Option<PathBuf>,
    seed: u64,
    steps: usize,
    out_weights: Option<PathBuf>,
) -> Result<()> {
    let rc = resolved(&config, ModelConfig::toy())?;
    let cfg = rc.config;
    let settings = TrainSettings {
        steps,
        ..TrainSettings::default()
    };
    let result = train_toy(&cfg, seed, &settings, |step, loss| {
        if step % 25 == 0 || step + 1 == steps {
            println!(
                "step {:>4}  total {:>10.6}  cls {:>10.6}  bbox {:>10.6}  dir {:>10.6}  lr {:.2e}",
                step, loss.total, loss.cls, loss.bbox, loss.dir, loss.lr
            );
        }
    })?;

    let first = result.losses.first().map(|l| l.total).unwrap_or(0.0);
    let last = result.losses.last().map(|l| l.total).unwrap_or(0.0);
    println!(
        "loss: {} -> {} ({}% of step 1)",
        fmt_sig(first),
        fmt_sig(last),
        fmt_sig(100.0 * last / first.max(1e-12))
    );
    println!("{} detections for {} ground-truth boxes", result.detections.len(), result.gt_boxes.len());
    for (i, gt) in result.gt_boxes.iter().enumerate() {
        let best = result
            .detections
            .iter()
            .map(|d| crate::boxes::rotated_iou_bev(&d.box3d, gt))
            .fold(0.0f64, f64::max);
        println!("gt {i}: best IoU {}", fmt_sig(best));
    }
    if let Some(path) = out_weights {
        save_model(&result.params, &path)?;
        println!("weights saved to {}", path.display());
    }
    Ok(())
}

fn cmd_bench(config: Option<PathBuf>, iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let rc = resolved(&config, ModelConfig::reference())?;
    let cfg = rc.config;
    let params = ModelParams::<f32>::random(&cfg, rc.seed)?;
    let (cloud, _) = synth_scene(&cfg.grid, crate::seed::STREAM_BENCH, 5);
    let batch = pillarize::<f32>(&cloud, &cfg.grid)?;

    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let model = params.lift(&mut tape, false);
        let out = crate::model::forward_points(&mut tape, &cfg, &model, &batch)?;
        std::hint::black_box(tape.value(out.cls).data().first());
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    println!(
        "forward pass over {} pillars on a {}x{} grid: mean {} ms, sigma {} ms ({} iters)",
        batch.num_pillars(),
        cfg.grid.height()?,
        cfg.grid.width()?,
        fmt_sig(mean),
        fmt_sig(var.sqrt()),
        iters
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_six_digits() {
        assert_eq!(fmt_sig(12.3456789), "12.3457");
        assert_eq!(fmt_sig(0.00123456789), "0.00123457");
        assert_eq!(fmt_sig(123456789.0), "123456789");
        assert_eq!(fmt_sig(-1.5), "-1.50000");
        assert_eq!(fmt_sig(0.0), "0");
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        let code = cli_main(vec!["stripdet".into(), "frobnicate".into()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_flag_exits_2() {
        let code = cli_main(vec!["stripdet".into(), "analyze".into(), "--bogus".into()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_operational_input_exits_1() {
        let code = cli_main(vec!["stripdet".into(), "infer".into()]);
        assert_eq!(code, 1);
    }
}
