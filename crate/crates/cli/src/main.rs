use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use copa::checkpoint::{import_backbone_file, Checkpoint};
use copa::config::{DataSource, TrainConfig};
use copa::data::{self, load_image, write_dataset, Dataset, Sample, Split};
use copa::error::{CopaError, Result};
use copa::harness::gradcheck::{gradcheck_tiny, DEFAULT_EPSILON};
use copa::harness::{ablate, evaluate, export_explanation, train_model, train_seeds};
use copa::intervention::{intervention_sweep, EditMode, Renormalization};
use copa::model::{AblationFlags, CopaModel};
use copa::service::{serve, AppState, ServiceConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "copa", version, about = "Concept-grounded explainable diagnosis")]
struct Cli {
    /// Print results as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Config override, `key.path=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Train once per seed and report mean ± std instead of saving a checkpoint.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// JSON backbone weights to import before training.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Dataset config; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and test every row of the component ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Test-time concept intervention sweep.
    Intervene {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: EditMode,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long, value_enum, default_value_t = Renorm::Softmax)]
        renorm: Renorm,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export heatmaps and concept scores for one image.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "sample_id", required_unless_present = "sample_id")]
        image: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the synthetic dataset to PNGs plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check the backbone by unfreezing it.
        #[arg(long)]
        unfrozen: bool,
    },
    /// Serve the /v1 HTTP interface.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        cors_origin: Option<String>,
        /// Register the checkpoint's dataset so requests can use `sample_id`.
        #[arg(long)]
        with_samples: bool,
        #[arg(long, default_value_t = 30)]
        session_ttl_minutes: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Renorm {
    Softmax,
    Proportional,
}

fn parse_mode(s: &str) -> std::result::Result<EditMode, String> {
    s.parse().map_err(|e: CopaError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({ "error": { "code": e.code(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn emit<T: serde::Serialize + std::fmt::Display>(json: bool, value: &T) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        println!("{value}");
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CopaError::invalid(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CopaError::io(path, e))
}

fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Split)> {
    let dataset = cfg.data.load(cfg.model.backbone.image_size)?;
    let split = data::split(&dataset, cfg.split, cfg.split_seed)?;
    Ok((dataset, split))
}

/// The run config that describes the checkpoint's data: an explicit config
/// file, else the one stored at training time.
fn data_config(ckpt: &Checkpoint, config: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let cfg = match config {
        Some(path) => TrainConfig::load_with_overrides(path, overrides)?,
        None => ckpt
            .train
            .clone()
            .ok_or_else(|| CopaError::invalid("config", "checkpoint stores no run config; pass --config"))?
            .with_overrides(overrides)?,
    };
    Ok(TrainConfig {
        model: ckpt.model.clone(),
        ..cfg
    })
}

fn select(dataset: &Dataset, split: &Split, name: SplitName) -> Vec<Sample> {
    let idx: &[usize] = match name {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
        SplitName::All => return dataset.samples.clone(),
    };
    dataset.subset(idx).samples
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            seeds,
            backbone,
        } => {
            let cfg = TrainConfig::load_with_overrides(&config, &overrides)?;
            let (dataset, split) = load_data(&cfg)?;
            log::info!(
                "{} samples: {} train, {} val, {} test",
                dataset.len(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            std::fs::create_dir_all(&out).map_err(|e| CopaError::io(&out, e))?;
            if !seeds.is_empty() {
                let summary = train_seeds(&cfg, &dataset, &split, &seeds)?;
                write_json(&out.join("seeds.json"), &summary)?;
                emit(cli.json, &summary);
                return Ok(());
            }
            let mut model = CopaModel::new(cfg.model.clone(), dataset.schema.clone(), cfg.seed)?;
            if let Some(path) = &backbone {
                let n = import_backbone_file(&mut model, path)?;
                log::info!("imported {n} backbone tensors");
            }
            let train_set: Vec<&Sample> = split.train.iter().map(|&i| &dataset.samples[i]).collect();
            let val_set = dataset.subset(&split.val).samples;
            let outcome = train_model(model, &cfg, &train_set, &val_set)?;
            let test = dataset.subset(&split.test);
            let report = evaluate(&outcome.model, &test.samples)?;
            Checkpoint::from_model(&outcome.model, Some(&cfg), Some(&outcome.history)).save(out.join("model.json"))?;
            write_json(&out.join("history.json"), &outcome.history)?;
            write_json(&out.join("test_metrics.json"), &report)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| CopaError::io(&out, e))?;
            log::info!("best epoch {}; checkpoint in {}", outcome.history.best_epoch, out.display());
            emit(cli.json, &report);
        }
        Command::Eval {
            ckpt,
            split,
            config,
            overrides,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = data_config(&ckpt, config.as_deref(), &overrides)?;
            let model = ckpt.into_model()?;
            let (dataset, sp) = load_data(&cfg)?;
            let report = evaluate(&model, &select(&dataset, &sp, split))?;
            emit(cli.json, &report);
        }
        Command::Ablate { config, overrides } => {
            let cfg = TrainConfig::load_with_overrides(&config, &overrides)?;
            let (dataset, split) = load_data(&cfg)?;
            let table = ablate(&cfg, &dataset, &split)?;
            emit(cli.json, &table);
        }
        Command::Intervene {
            ckpt,
            mode,
            n,
            split,
            renorm,
            config,
            overrides,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = data_config(&ckpt, config.as_deref(), &overrides)?;
            let model = ckpt.into_model()?;
            let (dataset, sp) = load_data(&cfg)?;
            let renorm = match renorm {
                Renorm::Softmax => Renormalization::Softmax,
                Renorm::Proportional => Renormalization::Proportional,
            };
            let report = intervention_sweep(&model, &select(&dataset, &sp, split), n, mode, renorm)?;
            emit(cli.json, &report);
        }
        Command::Explain {
            ckpt,
            image,
            sample_id,
            out,
            config,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let size = ckpt.model.backbone.image_size;
            let img = match (image, sample_id) {
                (Some(path), _) => load_image(&path, size)?,
                (None, Some(id)) => {
                    let cfg = data_config(&ckpt, config.as_deref(), &[])?;
                    let dataset = cfg.data.load(size)?;
                    dataset
                        .samples
                        .into_iter()
                        .find(|s| s.id == id)
                        .map(|s| s.image)
                        .ok_or_else(|| CopaError::invalid("sample_id", format!("no sample {id:?}")))?
                }
                (None, None) => return Err(CopaError::invalid("image", "pass --image or --sample-id")),
            };
            let model = ckpt.into_model()?;
            let bundle = export_explanation(&model, &img, &out)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&bundle).expect("serializable"));
            } else {
                println!(
                    "{} ({:.3}); wrote {}",
                    bundle.diagnosis.class,
                    bundle.diagnosis.confidence,
                    out.join("explanation.json").display()
                );
                for c in &bundle.concepts {
                    println!(
                        "  {:<12} {:<12} p={:.3} alpha={:.3}",
                        c.title, c.candidates[c.predicted], c.confidence, c.alpha
                    );
                }
            }
        }
        Command::GenData { config, overrides, out } => {
            let cfg = TrainConfig::load_with_overrides(&config, &overrides)?;
            let DataSource::Synthetic(syn) = &cfg.data else {
                return Err(CopaError::invalid("data.kind", "gen-data needs a synthetic data source"));
            };
            let dataset = data::generate_synthetic(syn)?;
            let manifest = write_dataset(&dataset, &out)?;
            println!("wrote {} samples; manifest {}", dataset.len(), manifest.display());
        }
        Command::Gradcheck { eps, seed, unfrozen } => {
            let flags = AblationFlags {
                fvb: !unfrozen,
                ..AblationFlags::default()
            };
            let report = gradcheck_tiny(flags, eps, seed)?;
            emit(cli.json, &report);
            if report.max_relative_error >= 1e-4 {
                return Err(CopaError::invalid(
                    "gradcheck",
                    format!("max relative error {:.3e} exceeds 1e-4", report.max_relative_error),
                ));
            }
        }
        Command::Serve {
            ckpt,
            port,
            host,
            cors_origin,
            with_samples,
            session_ttl_minutes,
        } => {
            let config = ServiceConfig {
                cors_origin,
                session_ttl: std::time::Duration::from_secs(session_ttl_minutes * 60),
                ..ServiceConfig::default()
            };
            let mut samples = Vec::new();
            let model = match ckpt {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if with_samples {
                        let cfg = data_config(&ckpt, None, &[])?;
                        samples = cfg.data.load(cfg.model.backbone.image_size)?.samples;
                    }
                    Some(ckpt.into_model()?)
                }
                None => {
                    log::warn!("no checkpoint given; model endpoints will answer 503");
                    None
                }
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CopaError::invalid("host", format!("{e}")))?;
            let state = AppState::new(model, config).with_samples(samples);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CopaError::io("runtime", e))?;
            rt.block_on(serve(state, addr))?;
        }
    }
    Ok(())
}
