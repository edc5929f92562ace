use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use specular::checkpoint::Checkpoint;
use specular::hfe::binarize_mask;
use specular::image::{load_image, save_image};
use specular::synth::{write_synthetic_dataset, Dataset, Split};
use specular::train::{evaluate, evaluate_predictions, train_with, write_history, TrainConfig, TrainOptions};
use specular::Error;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Dimension(_) => 2,
            Error::Io { .. } | Error::Sample { .. } => 3,
            Error::Checkpoint(_) | Error::Format(_) => 4,
            Error::NonFinite { .. } | Error::DegenerateSplit { .. } => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "specular", version, about = "Specular highlight detection and removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the highlight feature map and its binarized mask.
    Detect(DetectArgs),
    /// Write the coarse or refined highlight-free image.
    Remove(RemoveArgs),
    /// Run removal on every PNG frame of a directory.
    Video(VideoArgs),
    /// Train a model on a quadruple directory.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predictions.
    Eval(EvalArgs),
    /// Generate a synthetic quadruple directory.
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Detect(_) => "detect",
            Command::Remove(_) => "remove",
            Command::Video(_) => "video",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Highlight map PNG; the mask goes next to it as `<stem>.mask.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Coarse,
    Refine,
}

#[derive(Args, Debug)]
pub struct RemoveArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Refine)]
    stage: Stage,
}

#[derive(Args, Debug)]
pub struct VideoArgs {
    #[arg(long)]
    frames_dir: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Quadruple directory with a manifest; only the train split is used.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and history.csv.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    halve_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Comma-separated generator widths, e.g. `32,64`.
    #[arg(long)]
    gen_widths: Option<String>,
    #[arg(long)]
    hfe_widths: Option<String>,
    #[arg(long)]
    disc_widths: Option<String>,
    #[arg(long)]
    no_hfe: bool,
    #[arg(long)]
    no_cha: bool,
    #[arg(long)]
    no_ha: bool,
    #[arg(long)]
    no_ba: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to run on the composites.
    #[arg(long, conflicts_with = "pred_dir", required_unless_present = "pred_dir")]
    ckpt: Option<PathBuf>,
    /// Score existing predictions `<pred-dir>/<id><pred-suffix>.png` instead.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pred_suffix: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of training samples.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

fn print_settings(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k}={v}");
    }
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError {
        code: 4,
        message: format!("cannot load checkpoint {}: {e}", path.display()),
    })
}

fn check_tau(tau: f64) -> CliResult<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::usage(format!("--tau {tau} must lie in [0, 1]")));
    }
    Ok(())
}

/// `x/hf.png` -> `x/hf.mask.png`.
pub fn mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.mask.png"))
}

pub fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::Detect(a) => detect(a),
        Command::Remove(a) => remove(a),
        Command::Video(a) => video(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    }
}

fn detect(a: DetectArgs) -> CliResult<Value> {
    print_settings(&[
        ("input", shown(&a.input)),
        ("ckpt", shown(&a.ckpt)),
        ("out", shown(&a.out)),
        ("tau", a.tau.to_string()),
    ]);
    check_tau(a.tau)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let img = load_image(&a.input)?;
    let pred = ck.model().predict(&img)?;
    let mask = binarize_mask(&pred.hf, a.tau);
    let mpath = mask_path(&a.out);
    save_image(pred.hf.image(), &a.out)?;
    save_image(&mask.to_image(), &mpath)?;
    Ok(json!({"hf": shown(&a.out), "mask": shown(&mpath), "mask_coverage": mask.coverage()}))
}

fn remove(a: RemoveArgs) -> CliResult<Value> {
    let stage = if a.stage == Stage::Coarse { "coarse" } else { "refine" };
    print_settings(&[
        ("input", shown(&a.input)),
        ("ckpt", shown(&a.ckpt)),
        ("out", shown(&a.out)),
        ("stage", stage.into()),
    ]);
    let ck = load_checkpoint(&a.ckpt)?;
    let img = load_image(&a.input)?;
    let pred = ck.model().predict(&img)?;
    let out = if a.stage == Stage::Coarse { &pred.d1 } else { &pred.d2 };
    save_image(out, &a.out)?;
    Ok(json!({"out": shown(&a.out), "stage": stage, "height": out.height(), "width": out.width()}))
}

/// Sort key: the first run of digits in the stem, then the full name.
fn frame_key(name: &str) -> (u64, String) {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let digits: String = stem
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    (digits.parse().unwrap_or(u64::MAX), name.to_string())
}

/// PNG frame names of `dir` in numeric order; other files are reported and skipped.
pub fn ordered_frames(dir: &Path) -> Result<Vec<String>, Error> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut frames = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.path().is_file() {
            continue;
        }
        if name.to_ascii_lowercase().ends_with(".png") {
            frames.push(name);
        } else {
            eprintln!("warning: skipping non-PNG file {name}");
        }
    }
    frames.sort_by_key(|n| frame_key(n));
    Ok(frames)
}

fn video(a: VideoArgs) -> CliResult<Value> {
    print_settings(&[
        ("frames_dir", shown(&a.frames_dir)),
        ("ckpt", shown(&a.ckpt)),
        ("out_dir", shown(&a.out_dir)),
    ]);
    if !a.frames_dir.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", a.frames_dir.display())));
    }
    let frames = ordered_frames(&a.frames_dir)?;
    if frames.is_empty() {
        return Err(CliError::usage(format!("no PNG frames in {}", a.frames_dir.display())));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    for name in &frames {
        let img = load_image(a.frames_dir.join(name))?;
        save_image(&ck.model().predict(&img)?.d2, a.out_dir.join(name))?;
        println!("frame {name}");
    }
    Ok(json!({"frames": frames.len(), "out_dir": shown(&a.out_dir)}))
}

fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        c.apply_text(&text)?;
    }
    let mut set = |k: &str, v: Option<String>| -> CliResult<()> {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
        Ok(())
    };
    set("epochs", a.epochs.map(|v| v.to_string()))?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("max_steps", a.max_steps.map(|v| v.to_string()))?;
    set("base_lr", a.lr.map(|v| v.to_string()))?;
    set("halve_every", a.halve_every.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("image_size", a.image_size.map(|v| v.to_string()))?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    set("gen_widths", a.gen_widths.clone())?;
    set("hfe_widths", a.hfe_widths.clone())?;
    set("disc_widths", a.disc_widths.clone())?;
    for (flag, key) in [(a.no_hfe, "use_hfe"), (a.no_cha, "use_cha"), (a.no_ha, "use_ha"), (a.no_ba, "use_ba")] {
        if flag {
            set(key, Some("false".into()))?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> CliResult<Value> {
    let config = resolve_train_config(&a)?;
    print_settings(&[("data", shown(&a.data)), ("out", shown(&a.out))]);
    print!("{}", config.to_text());
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let samples = Dataset::open(&a.data)?.split(Split::Train).load_all()?;
    let opts = TrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        resume,
    };
    let outcome = train_with(&config, &samples, opts, |r| {
        let l = r.losses;
        println!(
            "epoch {} step {} lr {:e} L_d {:.5} L_g {:.5} L_content {:.5} L_per {:.5} L_rem {:.5}",
            r.epoch, r.step, r.lr, l.d, l.g, l.content, l.per, l.total
        );
    })?;
    let history = a.out.join("history.csv");
    write_history(&history, &outcome.history)?;
    let last = outcome.history.last().map(|r| r.losses.total);
    Ok(json!({
        "checkpoint": shown(&a.out.join("final.ckpt")),
        "history": shown(&history),
        "steps": outcome.checkpoint.state.step,
        "epochs": outcome.checkpoint.state.epoch,
        "final_loss": last,
    }))
}

fn write_report(out: Option<&Path>, csv: &str) -> CliResult<()> {
    if let Some(path) = out {
        fs::write(path, csv).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<Value> {
    let split = match a.split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    };
    print_settings(&[
        ("data", shown(&a.data)),
        ("ckpt", a.ckpt.as_deref().map(shown).unwrap_or_default()),
        ("pred_dir", a.pred_dir.as_deref().map(shown).unwrap_or_default()),
        ("pred_suffix", a.pred_suffix.clone()),
        ("split", split.into()),
        ("tau", a.tau.to_string()),
    ]);
    check_tau(a.tau)?;
    let all = Dataset::open(&a.data)?;
    let data = match a.split {
        SplitArg::Train => all.split(Split::Train),
        SplitArg::Test => all.split(Split::Test),
        SplitArg::All => all,
    };
    if let Some(pred_dir) = &a.pred_dir {
        let report = evaluate_predictions(&data, pred_dir, &a.pred_suffix)?;
        write_report(a.out.as_deref(), &report.to_csv())?;
        println!("samples {} mean PSNR {:.3} dB mean SSIM {:.4}", report.rows.len(), report.mean.psnr_db, report.mean.ssim);
        return Ok(json!({
            "samples": report.rows.len(),
            "psnr": report.mean.psnr_db,
            "ssim": report.mean.ssim,
        }));
    }
    let ckpt = a.ckpt.as_deref().expect("clap requires --ckpt without --pred-dir");
    let ck = load_checkpoint(ckpt)?;
    let samples = data
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((e.id.clone(), data.get(i)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let report = evaluate(&ck, &samples, a.tau)?;
    write_report(a.out.as_deref(), &report.to_csv())?;
    for (label, m) in [("input", report.mean_input), ("coarse", report.mean_d1), ("refined", report.mean_d2)] {
        println!("{label:8} PSNR {:.3} dB SSIM {:.4}", m.psnr_db, m.ssim);
    }
    println!("mask IoU {:.4}", report.mean_iou);
    Ok(json!({
        "samples": report.rows.len(),
        "psnr_input": report.mean_input.psnr_db,
        "psnr_d1": report.mean_d1.psnr_db,
        "psnr_d2": report.mean_d2.psnr_db,
        "ssim_d2": report.mean_d2.ssim,
        "mask_iou": report.mean_iou,
    }))
}

fn synth(a: SynthArgs) -> CliResult<Value> {
    print_settings(&[
        ("out", shown(&a.out)),
        ("count", a.count.to_string()),
        ("test_count", a.test_count.to_string()),
        ("seed", a.seed.to_string()),
        ("size", a.size.to_string()),
    ]);
    let manifest = write_synthetic_dataset(&a.out, a.count, a.test_count, a.seed, a.size)?;
    Ok(json!({"out": shown(&a.out), "samples": manifest.entries.len()}))
}
