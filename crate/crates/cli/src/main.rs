use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use specdiff::evalkit::{self, Readout};
use specdiff::image::{self, read_image};
use specdiff::pipeline::{self, TrainConfig, Trainer};
use specdiff::registration;
use specdiff::simgen::{self, GenConfig};
use specdiff::Error;

const SEED_ENV: &str = "SPECDIFF_SEED";

#[derive(Parser)]
#[command(name = "specdiff", version, about = "Template-based small defect segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the networks.
    Train(TrainArgs),
    /// Run a trained model on one template/source pair.
    Infer(InferArgs),
    /// Score a trained model on a dataset.
    Eval(EvalArgs),
    /// Estimate the pose of a source image relative to a template.
    Register(RegisterArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side; the translation range is rescaled with it.
    #[arg(long)]
    size: Option<usize>,
    /// Generator settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for log, checkpoints and model.
    #[arg(long)]
    out: PathBuf,
    /// Training settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint with its stored settings.
    #[arg(long, conflicts_with_all = ["config", "dataset", "batch_size", "learning_rate", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Model or checkpoint file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write O_t and O_s.
    #[arg(long)]
    intermediates: bool,
    /// Also write the prediction over the source.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report file; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = evalkit::DEFAULT_THRESHOLDS)]
    thresholds: usize,
    /// Directory for per-pair overlay PNGs.
    #[arg(long)]
    overlays: Option<PathBuf>,
    /// Score max(O_t, O_s) instead of the masking head output.
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Write the pose here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            Error::Numerical(_) | Error::NonFinite(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} is not an unsigned integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    match flag {
        Some(s) => Ok(Some(s)),
        None => env_seed(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => GenConfig::from_toml(&read_text(p)?)?,
        None => GenConfig::default(),
    };
    if let Some(s) = seed_or_env(a.seed)? {
        cfg.seed = s;
    }
    if let Some(size) = a.size {
        let k = size as f64 / cfg.image_size as f64;
        cfg.translation_px = cfg.translation_px.map(|t| t * k);
        cfg.image_size = size;
    }
    cfg.validate()?;
    let pairs = simgen::gen_dataset(&cfg, a.count)?;
    let manifest = simgen::write_dataset(&pairs, &cfg, &a.out)?;
    println!("wrote {} pairs to {}", manifest.count, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut trainer = if let Some(ckpt) = &a.resume {
        let mut t = Trainer::resume(ckpt)?;
        t.override_limits(a.epochs, a.max_steps, a.checkpoint_every)?;
        t
    } else {
        let mut cfg: TrainConfig = match &a.config {
            Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(d) = a.dataset {
            cfg.dataset = Some(d);
        }
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(s) = seed_or_env(a.seed)? {
            cfg.seed = s;
        }
        cfg.validate()?;
        Trainer::new(cfg)?
    };
    trainer.set_output_dir(&a.out)?;
    eprintln!(
        "training from step {} to {} ({} per epoch)",
        trainer.step_count(),
        trainer.total_steps(),
        trainer.steps_per_epoch()
    );
    let summary = trainer.run()?;
    for e in &summary.epochs {
        eprintln!("epoch {:>3}  loss {:.6}  irr {:.6}  def {:.6}", e.epoch + 1, e.loss, e.irr, e.def);
    }
    println!("model written to {}", a.out.join("model.bin").display());
    Ok(())
}

fn pose_json(p: &registration::PoseSim2) -> serde_json::Value {
    json!({"theta_deg": p.theta_deg(), "scale": p.scale, "tx": p.tx, "ty": p.ty})
}

fn infer(a: InferArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::Usage(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let params = pipeline::load_params(&a.model)?;
    let size = pipeline::trained_size(&a.model)?;
    let template = read_image(&a.template)?;
    let source = read_image(&a.source)?;
    let out = pipeline::infer(&params, &template, &source, size)?;
    if out.resampled {
        eprintln!("warning: inputs resampled to the trained size {:?}", size.unwrap_or_default());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    image::write_png_gray(&a.out.join("o.png"), &out.o)?;
    let mask = out.o.map(|v| if v >= a.threshold { 1.0 } else { 0.0 });
    image::write_png_gray(&a.out.join("mask.png"), &mask)?;
    if a.intermediates {
        image::write_png_gray(&a.out.join("o_t.png"), &out.o_t)?;
        image::write_png_gray(&a.out.join("o_s.png"), &out.o_s)?;
    }
    if a.overlays {
        evalkit::write_overlay(&a.out.join("overlay.png"), &source, &out.o)?;
    }
    let pose = pose_json(&out.pose);
    let pose_path = a.out.join("pose.json");
    std::fs::write(&pose_path, format!("{pose:#}\n")).map_err(|e| Failure::Data(format!("{}: {e}", pose_path.display())))?;
    println!("defect pixels at {}: {}", a.threshold, mask.sum() as usize);
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let params = pipeline::load_params(&a.model)?;
    let readout = if a.no_mask { Readout::Unmasked } else { Readout::Masked };
    if let Some(dir) = &a.overlays {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    let report = evalkit::evaluate_dataset_with(&a.dataset, a.thresholds, readout, |pair| {
        let pred = evalkit::predict(&params, &pair.template, &pair.source, readout)?;
        if let Some(dir) = &a.overlays {
            evalkit::write_overlay(&dir.join(format!("{}_overlay.png", pair.id)), &pair.source, &pred)?;
        }
        Ok(pred)
    })?;
    report.write(&a.out)?;
    report.write_json(&a.out.with_extension("json"))?;
    if report.skipped > 0 {
        eprintln!("warning: {} pairs skipped", report.skipped);
    }
    println!("pairs {}  AP {:.4}  MaxF1 {:.4}", report.pairs.len(), report.ap, report.max_f1);
    Ok(())
}

fn register(a: RegisterArgs) -> CmdResult {
    let template = read_image(&a.template)?;
    let source = read_image(&a.source)?;
    let res = registration::register(&template, &source)?;
    let text = format!("{:#}\n", pose_json(&res.pose));
    match &a.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
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
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Register(a) => register(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
