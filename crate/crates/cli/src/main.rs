use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use emotalk_core::harness::{
    infer, train_stage1, train_stage2, Checkpoint, LandmarkModel, Stage, Stage1Data, Stage2Data, TrainConfig,
};
use emotalk_core::metrics::evaluate_run;
use emotalk_core::synthdata::{generate_corpus, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "emotalk", version, about = "Emotional talking-head generation from speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth.
    SynthData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// JSON file with TrainConfig keys; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Landmark checkpoint, needed to train the render stage without teacher forcing.
        #[arg(long)]
        landmark_ckpt: Option<PathBuf>,
        /// Continue from a checkpoint of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the per-step loss curve (JSON).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Render a video from audio and a reference face.
    Infer {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        ref_image: PathBuf,
        #[arg(long)]
        ref_landmarks: PathBuf,
        #[arg(long)]
        ckpt_lm: PathBuf,
        #[arg(long)]
        ckpt_render: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted videos against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: emotalk_core::Error| e.to_string())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(
    stage: Stage,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    landmark_ckpt: Option<&Path>,
    resume: Option<&Path>,
    curve_path: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::for_stage(stage),
    }
    .with_env_seed()?;
    cfg.stage = stage;
    cfg.validate()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let (checkpoint, curve) = match stage {
        Stage::Landmarks => {
            let data = Stage1Data::load(data, &cfg)?;
            let outcome = train_stage1(&cfg, &data, resume.as_ref())?;
            println!("train emotion accuracy: {:.4}", outcome.train_accuracy);
            (outcome.checkpoint, outcome.curve)
        }
        Stage::Render => {
            let lm = landmark_ckpt
                .map(|p| load_checkpoint(p).and_then(|c| Ok(LandmarkModel::from_checkpoint(&c)?)))
                .transpose()?;
            if !cfg.teacher_forcing && lm.is_none() {
                bail!("--landmark-ckpt is required when teacher_forcing is false");
            }
            let data = Stage2Data::load(data, &cfg, lm.as_ref())?;
            let outcome = train_stage2(&cfg, &data, resume.as_ref())?;
            (outcome.checkpoint, outcome.curve)
        }
    };
    checkpoint.save(out)?;
    if let Some(p) = curve_path {
        curve.write_json(p)?;
    }
    match (curve.first_total(), curve.last_total()) {
        (Some(a), Some(b)) => println!("loss {a:.6} -> {b:.6} over {} steps", curve.steps.len()),
        _ => println!("no steps taken"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).context("parsing synthetic corpus spec")?;
            let manifest = generate_corpus(&spec, &out)?;
            println!("wrote {} videos to {}", manifest.videos.len(), out.display());
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            landmark_ckpt,
            resume,
            curve,
        } => train(
            stage,
            config.as_deref(),
            &data,
            &out,
            landmark_ckpt.as_deref(),
            resume.as_deref(),
            curve.as_deref(),
        )?,
        Command::Infer {
            audio,
            ref_image,
            ref_landmarks,
            ckpt_lm,
            ckpt_render,
            out,
        } => {
            let lm = load_checkpoint(&ckpt_lm)?;
            let render = load_checkpoint(&ckpt_render)?;
            let index = infer(&audio, &ref_image, &ref_landmarks, &lm, &render, &out)?;
            println!("wrote {} frames to {}", index.n_frames, out.display());
        }
        Command::Eval { pred, gt, report } => {
            let r = evaluate_run(&pred, &gt)?;
            r.write_json(&report)?;
            let a = &r.aggregate;
            let ssim = a.ssim.map_or("-".to_string(), |s| format!("{s:.2}"));
            let psnr = a.psnr.map_or("-".to_string(), |p| p.to_string());
            println!(
                "videos {}  F-LMD {:.2}  M-LMD {:.2}  SSIM {ssim}  PSNR {psnr}",
                r.per_video.len(),
                a.f_lmd,
                a.m_lmd
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
