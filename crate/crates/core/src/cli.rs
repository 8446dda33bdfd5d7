//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{self, DEFAULT_DECODE_STEPS};
use crate::checkpoint::Checkpoint;
use crate::decoder::{self, DecodeMode};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::image::RgbImage;
use crate::model::{Model, ModelConfig};
use crate::parallel::Exec;
use crate::rectifier;
use crate::synthgen::{self, GenSpec};
use crate::tfe;
use crate::training::{self, TrainConfig, BEST_CHECKPOINT};

/// Worst relative error accepted by `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "trig", version, about = "Scene-text recognition with a 1-D split transformer")]
pub struct Cli {
    /// Seed for every random stream; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration (training config, or model config for `analyze`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from `--config`.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequence accuracy on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        search: Search,
    },
    /// Recognize images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Directory for per-image decoder attention CSVs.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// MACs and parameter counts.
    Analyze {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = DEFAULT_DECODE_STEPS)]
        decode_steps: usize,
    },
    /// Export attention rollout maps for one image.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on the tiny configuration.
    GradCheck,
}

#[derive(Debug, Args)]
pub struct Search {
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    #[arg(long)]
    greedy: bool,
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.kind().as_str().unwrap_or("invalid arguments");
            eprintln!("error: kind=usage msg={}", json!(msg));
            eprint!("{}", e.render());
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), json!(e.to_string()));
            e.exit_code()
        }
    }
}

fn exec(cli: &Cli) -> Exec {
    if cli.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn announce(command: &str, config: &impl Serialize) -> Result<()> {
    eprintln!("{}", json!({ "command": command, "config": serde_json::to_value(config)? }));
    Ok(())
}

fn emit(value: &serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
}

/// Accepts a checkpoint file or a training output directory.
fn load_model(path: &Path) -> Result<Model<f32>> {
    let file = if path.is_dir() { path.join(BEST_CHECKPOINT) } else { path.to_owned() };
    Checkpoint::load(file)?.into_model()
}

fn load_image(path: &Path, cfg: &ModelConfig) -> Result<RgbImage> {
    let img = RgbImage::load_ppm(path)?;
    if img.height() != cfg.input_h || img.width() != cfg.input_w {
        return Err(Error::Data(format!(
            "{} is {}x{}, model expects {}x{}",
            path.display(),
            img.height(),
            img.width(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    Ok(img)
}

fn mode(beam: Option<usize>) -> DecodeMode {
    beam.map_or(DecodeMode::Greedy, DecodeMode::Beam)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData { spec, out } => {
            let mut spec: GenSpec = read_json(spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            announce("gen-data", &spec)?;
            let manifest = synthgen::generate_dataset(&spec, out, exec(cli))?;
            emit(&json!({ "written": manifest.entries.len(), "root": manifest.root }));
        }
        Command::Train { resume, out } => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("train needs --config".into()))?;
            let mut cfg: TrainConfig = read_json(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            announce("train", &cfg)?;
            let resume = resume.as_ref().map(Checkpoint::load).transpose()?;
            let mut progress = |m: &training::MetricsLine| emit(&json!(m));
            let outcome = training::train(&cfg, out, resume, exec(cli), Some(&mut progress))?;
            emit(&json!({ "best_val_acc": outcome.best_val_acc, "steps": outcome.final_checkpoint.step }));
        }
        Command::Eval { ckpt, data, search } => {
            let model = load_model(ckpt)?;
            let beam = if search.greedy { None } else { search.beam };
            announce("eval", &json!({ "ckpt": ckpt, "data": data, "beam": beam, "model": model.config }))?;
            let examples = training::load_examples(data, &model.config)?;
            let (report, _) = training::evaluate(&model, &examples, mode(beam), exec(cli))?;
            emit(&json!(report));
        }
        Command::Infer {
            ckpt,
            image,
            beam,
            dump_attention,
        } => {
            let model = load_model(ckpt)?;
            announce("infer", &json!({ "ckpt": ckpt, "beam": beam, "model": model.config }))?;
            if let Some(dir) = dump_attention {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            for path in image {
                let img = load_image(path, &model.config)?;
                let r = decoder::recognize(&model, &img.to_tensor(), mode(*beam))?;
                emit(&json!({ "image": path, "text": r.text, "score": r.score, "steps": r.tokens.len() }));
                if let Some(dir) = dump_attention {
                    let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy());
                    let csv_path = dir.join(format!("{stem}.csv"));
                    fs::write(&csv_path, attention_csv(&r)).map_err(|e| Error::io(&csv_path, e))?;
                }
            }
        }
        Command::Analyze { preset, decode_steps } => {
            let cfg = match (preset, &cli.config) {
                (Some(_), Some(_)) => return Err(Error::Config("--preset and --config are exclusive".into())),
                (Some(p), None) => ModelConfig::preset(p)?,
                (None, Some(path)) => model_config_from(path)?,
                (None, None) => return Err(Error::Config("analyze needs --preset or --config".into())),
            };
            announce("analyze", &cfg)?;
            let report = analysis::count_macs(&cfg, *decode_steps)?;
            print!("{}", analysis::format_report(&report));
            emit(&json!(report));
        }
        Command::Rollout { ckpt, image, out } => {
            let model = load_model(ckpt)?;
            announce("rollout", &json!({ "ckpt": ckpt, "image": image, "model": model.config }))?;
            let img = load_image(image, &model.config)?;
            let rect = rectifier::rectify(&model, &img.to_tensor())?;
            let enc = tfe::encode(&model, &rect)?;
            let map = analysis::attention_rollout(&enc.record)?;
            let cfg = &model.config;
            let paths = analysis::export_maps(&map, &RgbImage::from_tensor(&rect)?, cfg.patch_h, cfg.patch_w, out)?;
            let center = analysis::mass_center(&map.rows[0], cfg.rect_h / cfg.patch_h, cfg.rect_w / cfg.patch_w);
            emit(&json!({ "files": paths, "init_center": [center.0, center.1] }));
        }
        Command::GradCheck => {
            let seed = cli.seed.unwrap_or(0);
            announce("grad-check", &json!({ "seed": seed, "step": gradcheck::STEP, "tolerance": GRAD_CHECK_TOLERANCE }))?;
            let reports = gradcheck::grad_check(seed)?;
            let mut worst: f64 = 0.0;
            for r in &reports {
                worst = worst.max(r.worst);
                emit(&json!({ "variant": r.variant, "loss": r.loss, "worst": r.worst, "worst_group": r.worst_group }));
            }
            if !(worst < GRAD_CHECK_TOLERANCE) {
                return Err(Error::Numeric(format!("worst relative error {worst:e} exceeds {GRAD_CHECK_TOLERANCE:e}")));
            }
        }
    }
    Ok(0)
}

/// A model config file, or the `model` field of a training config.
fn model_config_from(path: &Path) -> Result<ModelConfig> {
    let value: serde_json::Value = read_json(path)?;
    let inner = value.get("model").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn attention_csv(r: &decoder::Recognition) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("step,token");
    if let Some(first) = r.alphas.first() {
        for j in 0..first.len() {
            let _ = write!(s, ",a{j}");
        }
    }
    s.push('\n');
    for (t, (alpha, &tok)) in r.alphas.iter().zip(&r.tokens).enumerate() {
        let _ = write!(s, "{t},{tok}");
        for a in alpha {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
    }
    s
}
