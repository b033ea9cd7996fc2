use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kpanim_core::checkpoint::Checkpoint;
use kpanim_core::error::io_err;
use kpanim_core::eval::evaluate;
use kpanim_core::inference::{animate, detect_keypoints, reconstruct_video, TransferMode};
use kpanim_core::keypoints::write_tracks;
use kpanim_core::repro::{run_all_checks, train_and_evaluate, write_report, CheckOptions};
use kpanim_core::synth::{Dataset, Split, SynthSpec};
use kpanim_core::trainer::{model_from_checkpoint, run_training, RunOptions, TrainConfig, CHECKPOINT_FILE};
use kpanim_core::video::{hstack, load_png, save_png, VideoClip};
use kpanim_core::viz::draw_keypoints;
use kpanim_core::{Error, Result};

const GIF_DELAY_MS: u32 = 100;

#[derive(Parser)]
#[command(name = "kpanim", version, about = "Keypoint-driven image animation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic moving-shapes dataset.
    MakeDataset(MakeDataset),
    /// Train a model on a dataset directory.
    Train(Train),
    /// Rebuild a clip from its first frame and its own keypoints.
    Reconstruct(Reconstruct),
    /// Animate a source image with the motion of a driving clip.
    Animate(Animate),
    /// Held-out L1 and AKD on a dataset's test split.
    Evaluate(Evaluate),
    /// Draw detected keypoints and covariance ellipses on each frame.
    ShowKeypoints(ShowKeypoints),
    /// Train and evaluate one model per keypoint count.
    KpSweep(KpSweep),
    /// Run the acceptance criteria and write a report.
    Check(Check),
}

#[derive(Args)]
struct MakeDataset {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    videos: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Plain-text `key = value` config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// One of no_flow, no_coarse, no_residual, fixed_sigma, no_appearance.
    #[arg(long)]
    ablation: Vec<String>,
    /// Extra config override, `key=value`.
    #[arg(long = "set")]
    sets: Vec<String>,
}

impl TrainFlags {
    fn config(&self, k: Option<usize>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for s in &self.sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            cfg.set(key, value)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(k) = k {
            cfg.k = k;
        }
        for a in &self.ablation {
            cfg.set("ablation", a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    /// Dataset directory written by make-dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct Reconstruct {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory of PNG frames.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Animate {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source image (PNG).
    #[arg(long)]
    source: PathBuf,
    /// Driving clip directory of PNG frames.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "relative", value_parser = ["relative", "absolute"])]
    mode: String,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-video metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShowKeypoints {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KpSweep {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated keypoint counts.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    k: Vec<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct Check {
    /// Report and run directory.
    #[arg(long, default_value = "check_report")]
    out: PathBuf,
    /// Comma-separated criteria; all when omitted.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u32>,
    /// Scale analytic gradients by (1 + x) to force a gradient-check failure.
    #[arg(long, default_value_t = 0.0)]
    corrupt_gradients: f64,
}

fn load_model(path: &Path) -> Result<(TrainConfig, kpanim_core::Model, kpanim_core::Params)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn make_dataset(a: MakeDataset) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        num_videos: a.videos,
        frames_per_video: a.frames,
        size: a.size,
        ..SynthSpec::default()
    };
    let entries = Dataset::generate(&spec)?.write(&a.out)?;
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    eprintln!("wrote {} videos ({} held out) to {}", entries.len(), test, a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let cfg = a.flags.config(a.k)?;
    let data = Dataset::load(&a.data)?;
    let resume = if a.resume {
        Some(Checkpoint::load(&a.out.join(CHECKPOINT_FILE))?)
    } else {
        None
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume,
        stop_after_epoch: None,
        verbose: true,
    };
    let out = run_training(cfg, &data.clips(Split::Train), &opts)?;
    eprintln!(
        "finished epoch {} step {}; checkpoint {}",
        out.trainer.epoch,
        out.trainer.step,
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    clip.save_pngs(dir)?;
    clip.save_gif(&dir.join("clip.gif"), GIF_DELAY_MS)
}

fn reconstruct(a: Reconstruct) -> Result<()> {
    let (_, model, params) = load_model(&a.checkpoint)?;
    let clip = VideoClip::load(&a.data)?;
    let rec = reconstruct_video(&model, &params, &clip)?;
    save_clip(&rec, &a.out)?;
    let l1 = kpanim_core::metrics::metric_l1(&rec, &clip)?;
    println!("l1 {l1:.6}");
    Ok(())
}

fn animate_cmd(a: Animate) -> Result<()> {
    let (_, model, params) = load_model(&a.checkpoint)?;
    let source = load_png(&a.source)?;
    let driving = VideoClip::load(&a.data)?;
    let mode: TransferMode = a.mode.parse()?;
    let anim = animate(&model, &params, &source, &driving, mode)?;
    for w in &anim.warnings {
        eprintln!("warning: {w}");
    }
    save_clip(&anim.clip, &a.out)?;
    write_tracks(&a.out.join("keypoints.csv"), &anim.tracks)?;
    let sheet = anim
        .clip
        .frames()
        .iter()
        .zip(driving.frames())
        .map(|(g, d)| hstack(&[&source, d, g], 2))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(sheet)?.save_gif(&a.out.join("side_by_side.gif"), GIF_DELAY_MS)
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let (_, model, params) = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let test: Vec<_> = data.split(Split::Test).collect();
    let e = evaluate(&model, &params, &test)?;
    println!("videos {} l1 {:.6} akd {:.4}", test.len(), e.mean.l1, e.mean.akd);
    if let Some(p) = a.out {
        let mut s = String::from("video,l1,akd\n");
        for (id, r) in &e.per_video {
            s.push_str(&format!("{id},{},{}\n", r.l1, r.akd));
        }
        s.push_str(&format!("mean,{},{}\n", e.mean.l1, e.mean.akd));
        write_text(&p, &s)?;
    }
    Ok(())
}

fn show_keypoints(a: ShowKeypoints) -> Result<()> {
    let (_, model, params) = load_model(&a.checkpoint)?;
    let clip = VideoClip::load(&a.data)?;
    let kps = detect_keypoints(&model, &params, clip.frames())?;
    let frames = clip
        .frames()
        .iter()
        .zip(&kps)
        .map(|(f, kp)| draw_keypoints(f, kp))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    for (t, f) in frames.iter().enumerate() {
        save_png(&a.out.join(kpanim_core::video::frame_name(t)), f)?;
    }
    write_tracks(&a.out.join("keypoints.csv"), &kps)?;
    Ok(())
}

fn kp_sweep(a: KpSweep) -> Result<()> {
    if a.k.is_empty() {
        return Err(Error::Config("--k needs at least one value".into()));
    }
    let data = Dataset::load(&a.data)?;
    create_dir(&a.out)?;
    let mut csv = String::from("k,l1,akd,l1_init\n");
    for &k in &a.k {
        let cfg = a.flags.config(Some(k))?;
        let run = train_and_evaluate(&format!("k{k}"), &data, cfg, Some(a.out.join(format!("k{k}"))), true)?;
        csv.push_str(&format!("{k},{},{},{}\n", run.trained.l1, run.trained.akd, run.initial.l1));
        write_text(&a.out.join("kp_sweep.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn check(a: Check) -> Result<bool> {
    let mut opts = CheckOptions::new(a.out.clone());
    opts.only = a.only;
    opts.corrupt = a.corrupt_gradients;
    opts.verbose = true;
    let results = run_all_checks(&opts);
    write_report(&a.out, &results)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{} ({})", r.id, r.name)).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeDataset(a) => make_dataset(a)?,
        Command::Train(a) => train(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Animate(a) => animate_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::ShowKeypoints(a) => show_keypoints(a)?,
        Command::KpSweep(a) => kp_sweep(a)?,
        Command::Check(a) => return check(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
