use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use roiterp::checkpoint::Archive;
use roiterp::config::{apply_overrides, load_toml, RunConfig};
use roiterp::data::{load_image, save_image, write_synthetic, SyntheticConfig};
use roiterp::evaluator::{evaluate, EvalRequest};
use roiterp::trainer::{load_generator, train};
use roiterp::Error;

/// Video frame interpolation with RoI-zoomed adversarial training.
#[derive(Parser)]
#[command(name = "roiterp", version)]
struct Cli {
    /// Log debug messages.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Synthesize the middle frame between two frames.
    Interpolate(InterpolateArgs),
    /// Score predicted frames against ground truth.
    Evaluate(EvaluateArgs),
    /// Write a synthetic moving-shapes dataset.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, dotted (`train.mode=gan`) or bare (`mode=gan`).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    frame2: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the warped frame, the mask and an archive with both flows.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Object masks named like the ground-truth frames; nonzero = object.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    trimap_widths: Vec<usize>,
    /// Restrict the full-image row to the masks.
    #[arg(long)]
    motion_mask: bool,
    /// Table output path; defaults to `<pred>/metrics.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit status 1 for configuration problems, 2 for everything else.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(e: Error) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&a.overrides).map_err(config_error)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    cfg.validate().map_err(config_error)?;
    let out = train(&cfg)?;
    if let Some(last) = out.records.last() {
        println!(
            "trained {} steps; last total {:.6} (ph {:.6}, d {:.6}, g {:.6})",
            out.state.step, last.loss.total, last.loss.ph, last.loss.d, last.loss.g
        );
    }
    for c in &out.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<(), Failure> {
    let (generator, _) = load_generator(&a.checkpoint)?;
    let i1 = load_image(&a.frame1)?;
    let i2 = load_image(&a.frame2)?;
    if i1.shape() != i2.shape() {
        return Err(Error::Shape(format!(
            "frames differ in size: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        ))
        .into());
    }
    let start = Instant::now();
    let r = generator.interpolate(&i1, &i2)?;
    let elapsed = start.elapsed();
    save_image(&a.out, &r.refined)?;
    if let Some(d) = &a.dump_dir {
        save_image(&d.join("warped.png"), &r.warped.clamp(0.0, 1.0))?;
        let mask = roiterp::Tensor::stack(&[r.mask.clone(), r.mask.clone(), r.mask.clone()])?
            .reshape(&[1, 3, r.mask.shape()[2], r.mask.shape()[3]])?;
        save_image(&d.join("mask.png"), &mask)?;
        Archive {
            meta: serde_json::json!({"kind": "flows"}),
            tensors: vec![("flow_1t".into(), r.flow_1t), ("flow_2t".into(), r.flow_2t)],
        }
        .save(&d.join("flows.ckpt"))?;
    }
    println!(
        "wrote {} in {:.3} s",
        a.out.display(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let req = EvalRequest {
        pred_dir: a.pred.clone(),
        gt_dir: a.gt,
        masks_dir: a.masks,
        trimap_widths: a.trimap_widths,
        motion_mask: a.motion_mask,
    };
    let report = evaluate(&req)?;
    let out = a.out.unwrap_or_else(|| a.pred.join("metrics.csv"));
    std::fs::write(&out, report.to_csv()).map_err(|e| {
        Failure::from(Error::Io {
            path: out.clone(),
            source: e,
        })
    })?;
    print!("{}", report.summary());
    if !report.missing.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!(
                "{} ground-truth frames have no prediction",
                report.missing.len()
            ),
        });
    }
    Ok(())
}

fn cmd_make_synthetic(a: SyntheticArgs) -> Result<(), Failure> {
    let base: SyntheticConfig = match &a.config {
        Some(p) => load_toml(p).map_err(config_error)?,
        None => SyntheticConfig::default(),
    };
    let mut cfg = apply_overrides(&base, &a.overrides).map_err(config_error)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_error)?;
    log::info!(
        "synthetic config:\n{}",
        toml::to_string(&cfg).expect("serializable")
    );
    let root = write_synthetic(&cfg, &a.out)?;
    println!("wrote {} triplets under {}", cfg.count, root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
