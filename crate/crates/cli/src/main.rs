use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nvcim_tsb::config::RunConfig;
use nvcim_tsb::crossbar::{count_write_verify, tile_weights};
use nvcim_tsb::eval::{self, emit_report, emit_table, AblationKind, Format, ABLATION_HEADER};
use nvcim_tsb::nn::{Model, RetrainScope};
use nvcim_tsb::pipeline::{PipelineState, TrainLog};
use nvcim_tsb::runner::{self, *};

#[derive(Parser)]
#[command(
    name = "nvcim",
    version,
    about = "TSB deployment simulator for NVCIM accelerators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file, or `default` for the built-in LeNet-3 / MNIST run.
    #[arg(long, default_value = "default")]
    config: String,
    /// Overrides the training, snapshot and Monte Carlo seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Input {
    /// Checkpoint to start from; defaults to the previous stage's file in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    LastLayer,
    LastLayers,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    TsbChannels,
    InsertionCount,
    TsbDepth,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Noise-injection training of the backbone.
    TrainBackbone(Common),
    /// Program the backbone and capture its noise snapshot.
    Deploy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
    },
    /// Train the shared block against the frozen snapshot.
    TrainTsb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
    },
    /// Program the block with write-verify.
    DeployTsb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
    },
    /// Monte Carlo accuracy of a deployed checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value = "json")]
        format: OutFormat,
    },
    /// Retrain the last layer(s) of a deployed backbone.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum)]
        scope: Option<Scope>,
    },
    /// Sweep block channels, insertion count or depth.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
    },
    /// Crossbar allocation and cost estimates for the Common and Separate designs.
    Overhead {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
    },
    /// Every stage end to end.
    FullRun(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = if common.config == "default" {
        RunConfig::default()
    } else {
        RunConfig::load(Path::new(&common.config))?
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_state(cfg: &RunConfig, input: &Input, default: &str) -> Result<PipelineState> {
    let path = input.checkpoint.clone().unwrap_or_else(|| out_path(cfg, default));
    Ok(runner::load(cfg, &path)?)
}

fn write_log(cfg: &RunConfig, log: &TrainLog, name: &str) -> Result<()> {
    log.write_csv(&out_path(cfg, name))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(cfg: &RunConfig, value: &T, name: &str) -> Result<PathBuf> {
    let path = out_path(cfg, name);
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    std::fs::write(&path, eval::to_json_bytes(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn scope_of(scope: Option<Scope>, cfg: &RunConfig) -> RetrainScope {
    match scope {
        Some(Scope::LastLayer) => RetrainScope::LastLayer,
        Some(Scope::LastLayers) => RetrainScope::LastLayers,
        None => cfg.baseline_scope,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBackbone(common) => {
            let cfg = load_config(&common)?;
            let data = cfg.load_data()?;
            let (state, log) = stage_train_backbone(&cfg, &data)?;
            write_log(&cfg, &log, "train_backbone.csv")?;
            let p = save(&cfg, &state, BACKBONE_CKPT)?;
            println!("{}", p.display());
        }
        Command::Deploy { common, input } => {
            let cfg = load_config(&common)?;
            let state = stage_deploy(&cfg, input_state(&cfg, &input, BACKBONE_CKPT)?)?;
            println!("{}", save(&cfg, &state, DEPLOYED_CKPT)?.display());
        }
        Command::TrainTsb { common, input } => {
            let cfg = load_config(&common)?;
            let state = input_state(&cfg, &input, DEPLOYED_CKPT)?;
            let data = cfg.load_data()?;
            let (state, log) = stage_train_tsb(&cfg, state, &data)?;
            write_log(&cfg, &log, "train_tsb.csv")?;
            println!("{}", save(&cfg, &state, TSB_TRAINED_CKPT)?.display());
        }
        Command::DeployTsb { common, input } => {
            let cfg = load_config(&common)?;
            let (state, summary) = stage_deploy_tsb(&cfg, input_state(&cfg, &input, TSB_TRAINED_CKPT)?)?;
            write_json(&cfg, &summary, "write_verify.json")?;
            println!("{}", save(&cfg, &state, TSB_DEPLOYED_CKPT)?.display());
        }
        Command::Evaluate {
            common,
            input,
            format,
        } => {
            let cfg = load_config(&common)?;
            let state = input_state(&cfg, &input, TSB_DEPLOYED_CKPT)?;
            // fail on the stage before paying for data loading
            state.evaluation_inputs(&cfg.variation)?;
            let data = cfg.load_data()?;
            let method = method_name(&state, cfg.baseline_scope);
            let report = stage_evaluate(&cfg, &state, &data.test, method)?;
            let (fmt, ext) = match format {
                OutFormat::Json => (Format::Json, "json"),
                OutFormat::Csv => (Format::Csv, "csv"),
            };
            let path = out_path(&cfg, &format!("eval_{method}.{ext}"));
            emit_report(&report, &path, fmt)?;
            println!(
                "{method}: mean {:.4} ± {:.4} (ideal {:.4}, distance {:.4}) -> {}",
                report.mean,
                report.ci_half_width,
                report.ideal,
                report.distance.absolute,
                path.display()
            );
        }
        Command::Baseline { common, input, scope } => {
            let cfg = load_config(&common)?;
            let scope = scope_of(scope, &cfg);
            let state = input_state(&cfg, &input, DEPLOYED_CKPT)?;
            let data = cfg.load_data()?;
            let (state, log) = stage_baseline(&cfg, state, &data, scope)?;
            write_log(&cfg, &log, "train_baseline.csv")?;
            println!("{}", save(&cfg, &state, baseline_ckpt(scope))?.display());
        }
        Command::Ablate {
            common,
            input,
            kind,
            grid,
        } => {
            let cfg = load_config(&common)?;
            let kind = match kind {
                Some(Kind::TsbChannels) => AblationKind::TsbChannels,
                Some(Kind::InsertionCount) => AblationKind::InsertionCount,
                Some(Kind::TsbDepth) => AblationKind::TsbDepth,
                None => cfg.ablation.kind,
            };
            let grid = match (grid.is_empty(), cfg.ablation.grid.is_empty()) {
                (false, _) => grid,
                (true, false) => cfg.ablation.grid.clone(),
                (true, true) => default_grid(&cfg, kind),
            };
            let state = input_state(&cfg, &input, DEPLOYED_CKPT)?;
            let data = cfg.load_data()?;
            let reference = backbone_epoch_seconds(&cfg);
            let rows = ablation_sweep(&cfg, &state, &data, kind, &grid, reference)?;
            let name = serde_json::to_value(kind)?;
            let path = out_path(
                &cfg,
                &format!("ablation_{}.csv", name.as_str().unwrap_or("sweep")),
            );
            emit_table(&rows, &ABLATION_HEADER, &path, Format::Csv)?;
            println!("{}", path.display());
        }
        Command::Overhead { common, input } => {
            let cfg = load_config(&common)?;
            let model = match &input.checkpoint {
                Some(p) => runner::load(&cfg, p)?.model,
                None => Model::new(cfg.architecture(), cfg.seed)?,
            };
            let rows = overhead(&cfg, &model)?;
            let mut with_tsb = model.clone();
            if with_tsb.tsb().is_none() {
                nvcim_tsb::pipeline::attach_identity_tsb(
                    &mut with_tsb,
                    cfg.tsb_channels(),
                    cfg.tsb.depth,
                    cfg.insertion_plan(),
                )?;
            }
            let alloc = tile_weights(&with_tsb, &cfg.quant, &cfg.crossbar)?;
            let wv = count_write_verify(&alloc, &cfg.cost);
            write_json(
                &cfg,
                &serde_json::json!({ "designs": rows, "write_verify": wv }),
                "overhead.json",
            )?;
            emit_table(
                &rows,
                &OVERHEAD_HEADER,
                &out_path(&cfg, "overhead.csv"),
                Format::Csv,
            )?;
            for r in &rows {
                println!(
                    "{:<9} crossbars {:>4}  energy {:>12.3}  latency {:>12.1}  edp {:>14.1}",
                    r.design, r.crossbars, r.energy, r.latency, r.edp
                );
            }
        }
        Command::FullRun(common) => {
            let cfg = load_config(&common)?;
            let s = full_run(&cfg)?;
            println!(
                "noise-injection only {:.4}, tsb {:.4} ± {:.4}, ideal {:.4}; write-verified weights {} ({:.3}%)",
                s.noise_injection_only.mean,
                s.tsb.mean,
                s.tsb.ci_half_width,
                s.tsb.ideal,
                s.write_verify.verified_weights,
                100.0 * s.write_verify.fraction
            );
            println!("{}", out_path(&cfg, "report.json").display());
        }
    }
    Ok(())
}

/// Mean backbone epoch time from a previous `train-backbone` log, if any.
fn backbone_epoch_seconds(cfg: &RunConfig) -> Option<f64> {
    let mut reader = csv::Reader::from_path(out_path(cfg, "train_backbone.csv")).ok()?;
    let secs: Vec<f64> = reader
        .deserialize::<nvcim_tsb::pipeline::EpochRow>()
        .filter_map(|r| r.ok())
        .map(|r| r.wall_seconds)
        .collect();
    (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
