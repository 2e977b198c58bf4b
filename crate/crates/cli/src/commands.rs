//! Subcommands and their exit codes.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use eyewear_core::backbones::Backbones;
use eyewear_core::checkpoint::load_checkpoint;
use eyewear_core::config::Config;
use eyewear_core::data::{prepare_data, write_toy_corpus, Dataset, PrepareOptions};
use eyewear_core::image::ImageRgb;
use eyewear_core::inference::Editor;
use eyewear_core::losses::Stage;
use eyewear_core::mask::MaskImage;
use eyewear_core::model::GlassModel;
use eyewear_core::modulation::FusionWeight;
use eyewear_core::report::{evaluate, Scored};
use eyewear_core::training::{run_stage, RunOptions};
use eyewear_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "eyewear", version, about = "Mask- and text-conditioned eyeglasses editing")]
pub struct Cli {
    /// Log filter, overridden by RUST_LOG.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "stage1-mask")]
    Stage1Mask,
    #[value(name = "stage1-text")]
    Stage1Text,
    #[value(name = "stage2")]
    Stage2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Stage1Mask => Stage::MaskPhase,
            StageArg::Stage1Text => Stage::TextPhase,
            StageArg::Stage2 => Stage::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoredArg {
    Edit,
    Decoupled,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a starting config file.
    InitConfig {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic face corpus with an annotated index.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract masks and pair faces into a training manifest.
    PrepareData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of the previous stage, or of this stage to continue.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "decoupled")]
        scored: ScoredArg,
    },
    /// Edit one image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Output directory for edit.png and decoupled.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, conflicts_with = "decoupled_only")]
        edit_only: bool,
        #[arg(long)]
        decoupled_only: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

/// Maps a failure to the documented exit codes: 2 usage, 3 missing artifact,
/// 4 runtime failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                Error::StageOrder { .. }
                | Error::CorruptCheckpoint { .. }
                | Error::BackboneUnavailable(_)
                | Error::CorruptWeights { .. } => EXIT_MISSING,
                Error::Config(_)
                | Error::UnknownStage(_)
                | Error::InvalidRequest(_)
                | Error::ConfigHashMismatch { .. }
                | Error::ResumeStageMismatch { .. }
                | Error::InvalidFusionWeight(_)
                | Error::UnexpectedWeight { .. }
                | Error::MissingTerm { .. }
                | Error::NonBinaryMask(_)
                | Error::MaskResolution { .. }
                | Error::Decode(_)
                | Error::Image(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_RUNTIME
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::toy()),
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        ))
        .into());
    }
    Ok(())
}

fn prepare_options(cfg: &Config) -> PrepareOptions {
    PrepareOptions {
        pose_threshold_deg: cfg.data.pose_threshold_deg,
        seed: cfg.data.seed,
        vocabulary: cfg.data.vocabulary.clone(),
    }
}

/// Training pairs with the held-out tail removed.
fn training_data(cfg: &Config, backbones: &Backbones, device: &Device) -> anyhow::Result<Dataset> {
    let dtype = cfg.backbones.precision.dtype();
    let data = match &cfg.data.manifest {
        Some(m) => Dataset::from_manifest(m, dtype, device).with_context(|| format!("reading manifest {}", m.display()))?,
        None => Dataset::toy(
            cfg.data.toy_samples,
            cfg.data.seed,
            &*backbones.parser,
            &prepare_options(cfg),
            dtype,
            device,
        )?,
    };
    let (train, held) = data.split_off(cfg.data.held_out);
    tracing::info!(train = train.len(), held_out = held.len(), "dataset ready");
    if train.is_empty() {
        bail!(Error::Config("no training pairs left after the held-out split".into()));
    }
    Ok(train)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::InitConfig { preset, out } => {
            let cfg = match preset {
                Preset::Toy => Config::toy(),
                Preset::Paper => Config::default(),
            };
            std::fs::write(&out, cfg.to_toml_string()?).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", out.display());
        }
        Command::ToyCorpus { out, count, seed } => {
            let entries = write_toy_corpus(&out, count, seed)?;
            println!("wrote {} faces to {}", entries.len(), out.display());
        }
        Command::PrepareData { corpus, out, config } => {
            let cfg = load_config(config.as_deref())?;
            require_file(&corpus)?;
            let backbones = Backbones::from_config(&cfg.backbones, &device)?;
            let summary = prepare_data(&corpus, &out, &*backbones.parser, &prepare_options(&cfg))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train {
            stage,
            config,
            resume,
            out,
            max_steps,
            checkpoint_every,
        } => {
            let stage = Stage::from(stage);
            let cfg = load_config(config.as_deref())?;
            let backbones = Backbones::from_config(&cfg.backbones, &device)?;
            let model = GlassModel::new(&cfg.model, cfg.backbones.precision.dtype(), &device)?;
            let prior = match &resume {
                Some(dir) => Some(load_checkpoint(dir, &model).with_context(|| format!("resuming from {}", dir.display()))?),
                None => None,
            };
            if prior.is_none() {
                if let Some(required) = stage.prerequisite() {
                    bail!(Error::StageOrder {
                        stage: stage.to_string(),
                        required: required.to_string(),
                    });
                }
            }
            let data = training_data(&cfg, &backbones, &device)?;
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                checkpoint_every,
                dump_dir: Some(out.join("dumps")),
                max_steps,
            };
            let report = run_stage(stage, &cfg, &model, &backbones, &data, prior.as_ref(), &opts)?;
            if let Some(last) = report.history.last() {
                tracing::info!(iteration = last.iteration, total = last.total, "finished");
            }
            println!("{} at iteration {} -> {}", stage, report.final_iteration, out.display());
        }
        Command::Eval {
            checkpoint,
            testset,
            json,
            scored,
        } => {
            require_file(&testset)?;
            let editor = Editor::load(&checkpoint, &device)?;
            let data = Dataset::from_manifest(&testset, editor.dtype(), &device)?;
            let scored = match scored {
                ScoredArg::Edit => Scored::Edit,
                ScoredArg::Decoupled => Scored::Decoupled,
            };
            let report = evaluate(&editor, &data.samples, &editor.config.data.vocabulary, scored)?;
            if let Some(path) = json {
                std::fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{}", report.table());
        }
        Command::Edit {
            checkpoint,
            image,
            mask,
            prompt,
            out,
            gamma,
            edit_only,
            decoupled_only,
        } => {
            require_file(&image)?;
            require_file(&mask)?;
            let editor = Editor::load(&checkpoint, &device)?;
            let img = ImageRgb::load_png(&image, editor.dtype(), &device)?;
            let m = MaskImage::load_png(&mask)?;
            let gamma = gamma.map(FusionWeight::new).transpose()?;
            let result = editor.edit(&img, &m, &prompt, gamma)?;
            std::fs::create_dir_all(&out)?;
            if !decoupled_only {
                let p = out.join("edit.png");
                result.edit.save_png(&p)?;
                println!("{}", p.display());
            }
            if !edit_only {
                let p = out.join("decoupled.png");
                result.decoupled.save_png(&p)?;
                println!("{}", p.display());
            }
        }
        Command::Serve { checkpoint, port, host } => {
            let editor = Arc::new(Editor::load(&checkpoint, &device)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime
                .block_on(crate::server::serve(editor, SocketAddr::new(host, port)))
                .with_context(|| format!("serving on {host}:{port}"))?;
        }
    }
    Ok(())
}
