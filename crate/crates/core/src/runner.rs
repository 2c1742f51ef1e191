//! Stage-by-stage driver over checkpoints in an output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::crossbar::{overhead_table, OverheadRow};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::eval::{
    self, emit_report, emit_table, monte_carlo_accuracy, to_json_bytes, AblationKind, AblationRow,
    EvalReport, Format, ReportMeta,
};
use crate::nn::{Model, RetrainScope};
use crate::pipeline::{
    attach_identity_tsb, baseline_retrain_last, deploy_backbone, deploy_tsb, train_backbone, train_tsb,
    PipelineState, Stage, TrainLog, WriteVerifySummary,
};

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const DEPLOYED_CKPT: &str = "deployed.ckpt";
pub const TSB_TRAINED_CKPT: &str = "tsb_trained.ckpt";
pub const TSB_DEPLOYED_CKPT: &str = "tsb_deployed.ckpt";

pub fn baseline_ckpt(scope: RetrainScope) -> &'static str {
    match scope {
        RetrainScope::LastLayer => "baseline_last_layer.ckpt",
        RetrainScope::LastLayers => "baseline_last_layers.ckpt",
    }
}

pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

pub fn save(cfg: &RunConfig, state: &PipelineState, name: &str) -> Result<PathBuf> {
    let path = out_path(cfg, name);
    save_checkpoint(state, &cfg.hash(), &path)?;
    Ok(path)
}

pub fn load(cfg: &RunConfig, path: &Path) -> Result<PipelineState> {
    Ok(load_checkpoint(path, Some(&cfg.hash()))?.0)
}

pub fn stage_train_backbone(cfg: &RunConfig, data: &Splits) -> Result<(PipelineState, TrainLog)> {
    let mut model = Model::new(cfg.architecture(), cfg.seed)?;
    let log = train_backbone(&mut model, data, &cfg.train, &cfg.variation, &cfg.quant, cfg.seed)?;
    let mut state = PipelineState::new(model);
    state.stage = Stage::BackboneTrained;
    Ok((state, log))
}

pub fn stage_deploy(cfg: &RunConfig, mut state: PipelineState) -> Result<PipelineState> {
    state.stage.require(&[Stage::BackboneTrained])?;
    state.deployment = Some(deploy_backbone(&state.model, &cfg.quant, &cfg.variation)?);
    state.stage = Stage::Deployed;
    Ok(state)
}

/// A deployed backbone without a block gets an identity-initialized one first.
pub fn stage_train_tsb(
    cfg: &RunConfig,
    mut state: PipelineState,
    data: &Splits,
) -> Result<(PipelineState, TrainLog)> {
    state.stage.require(&[Stage::Deployed, Stage::TsbTrained])?;
    if state.model.tsb().is_none() {
        attach_identity_tsb(
            &mut state.model,
            cfg.tsb_channels(),
            cfg.tsb.depth,
            cfg.insertion_plan(),
        )?;
    }
    let dep = state.deployment()?.clone();
    let log = train_tsb(
        &mut state.model,
        &dep,
        data,
        &cfg.train,
        &cfg.variation,
        &cfg.quant,
        cfg.seed,
    )?;
    state.stage = Stage::TsbTrained;
    Ok((state, log))
}

pub fn stage_deploy_tsb(
    cfg: &RunConfig,
    mut state: PipelineState,
) -> Result<(PipelineState, WriteVerifySummary)> {
    state.stage.require(&[Stage::TsbTrained])?;
    let (dep, summary) = deploy_tsb(&state.model, &cfg.quant, &cfg.variation)?;
    state.tsb_deployment = Some(dep);
    state.stage = Stage::TsbDeployed;
    Ok((state, summary))
}

pub fn stage_baseline(
    cfg: &RunConfig,
    mut state: PipelineState,
    data: &Splits,
    scope: RetrainScope,
) -> Result<(PipelineState, TrainLog)> {
    state.stage.require(&[Stage::Deployed])?;
    let dep = state.deployment()?.clone();
    let (log, ids) = baseline_retrain_last(
        &mut state.model,
        &dep,
        data,
        &cfg.train,
        &cfg.variation,
        &cfg.quant,
        scope,
        cfg.seed,
    )?;
    state.reprogrammed = ids;
    state.stage = Stage::BaselineRetrained;
    Ok((state, log))
}

pub fn method_name(state: &PipelineState, scope: RetrainScope) -> &'static str {
    match state.stage {
        Stage::TsbTrained | Stage::TsbDeployed => "tsb",
        Stage::BaselineRetrained => match scope {
            RetrainScope::LastLayer => "retrain_last_layer",
            RetrainScope::LastLayers => "retrain_last_layers",
        },
        _ => "noise_injection_only",
    }
}

/// Noise-free test accuracy of the trained backbone, block removed.
pub fn ideal_accuracy(cfg: &RunConfig, state: &PipelineState, test: &Dataset) -> Result<f64> {
    if let Some(a) = cfg.ideal_accuracy {
        return Ok(a);
    }
    let mut backbone = state.model.clone();
    backbone.remove_tsb();
    eval::accuracy(&backbone, backbone.params(), test, cfg.mc.batch_size)
}

pub fn stage_evaluate(
    cfg: &RunConfig,
    state: &PipelineState,
    test: &Dataset,
    method: &str,
) -> Result<EvalReport> {
    let (base, fresh) = state.evaluation_inputs(&cfg.variation)?;
    let per_run = monte_carlo_accuracy(&state.model, &base, &fresh, &cfg.quant, test, &cfg.mc)?;
    let ideal = ideal_accuracy(cfg, state, test)?;
    let meta = ReportMeta {
        model: state.model.arch().name.clone(),
        method: method.into(),
        sigma_backbone: cfg.variation.sigma_backbone,
        sigma_verified: cfg.variation.sigma_verified,
        seed: cfg.seed,
        eval_seed: cfg.mc.seed,
        runs: cfg.mc.runs,
    };
    EvalReport::from_runs(per_run, ideal, meta, cfg.to_json())
}

/// Baseline, Common and Separate costs; the block is attached as configured if missing.
pub fn overhead(cfg: &RunConfig, model: &Model) -> Result<Vec<OverheadRow>> {
    let mut m = model.clone();
    if m.tsb().is_none() {
        attach_identity_tsb(&mut m, cfg.tsb_channels(), cfg.tsb.depth, cfg.insertion_plan())?;
    }
    overhead_table(&m, &cfg.quant, cfg.crossbar.rows, cfg.crossbar.cols, &cfg.cost)
}

pub fn default_grid(cfg: &RunConfig, kind: AblationKind) -> Vec<usize> {
    match kind {
        AblationKind::TsbChannels => match cfg.model {
            crate::config::ModelKind::Lenet3 => vec![2, 3, 5, 8, 10],
            _ => vec![16, 32, 64, 128, 256, 512],
        },
        AblationKind::InsertionCount => (1..=cfg.architecture().conv_layers().len()).collect(),
        AblationKind::TsbDepth => (1..=4).collect(),
    }
}

/// Trains and evaluates one block per grid point on the same deployed
/// backbone. Per-epoch time is divided by `reference_epoch_seconds`
/// (typically a backbone epoch), or by the first grid point's if absent.
pub fn ablation_sweep(
    cfg: &RunConfig,
    deployed: &PipelineState,
    data: &Splits,
    kind: AblationKind,
    grid: &[usize],
    reference_epoch_seconds: Option<f64>,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::config("ablation grid is empty"));
    }
    deployed.stage.require(&[Stage::Deployed])?;
    let plan = cfg.insertion_plan();
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut point = cfg.clone();
        match kind {
            AblationKind::TsbChannels => point.tsb.channels = Some(value),
            AblationKind::TsbDepth => point.tsb.depth = value,
            AblationKind::InsertionCount => {
                if value == 0 || value > plan.len() {
                    return Err(Error::config(format!(
                        "insertion count {value} outside 1..={}",
                        plan.len()
                    )));
                }
                point.tsb.plan = Some(plan.truncated(value).positions);
            }
        }
        point.validate()?;
        let (state, log) = stage_train_tsb(&point, deployed.clone(), data)?;
        let report = stage_evaluate(&point, &state, &data.test, "tsb")?;
        rows.push(AblationRow {
            value,
            tsb_params: state.model.num_tsb_weights(),
            accuracy: report.mean,
            ci_half_width: report.ci_half_width,
            normalized_epoch_time: log.mean_epoch_seconds(),
        });
    }
    let reference = reference_epoch_seconds.unwrap_or(rows[0].normalized_epoch_time);
    for r in &mut rows {
        r.normalized_epoch_time = if reference > 0.0 {
            r.normalized_epoch_time / reference
        } else {
            0.0
        };
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullRunSummary {
    pub noise_injection_only: EvalReport,
    pub tsb: EvalReport,
    pub write_verify: WriteVerifySummary,
    pub overhead: Vec<OverheadRow>,
    pub backbone_epochs: usize,
    pub tsb_epochs: usize,
    pub config_hash: String,
}

/// Every stage in order, writing checkpoints, logs and reports into `cfg.out`.
/// `report.json` holds only deterministic content.
pub fn full_run(cfg: &RunConfig) -> Result<FullRunSummary> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let (state, log1) = stage_train_backbone(cfg, &data)?;
    log1.write_csv(&out_path(cfg, "train_backbone.csv"))?;
    save(cfg, &state, BACKBONE_CKPT)?;
    let state = stage_deploy(cfg, state)?;
    save(cfg, &state, DEPLOYED_CKPT)?;
    let ni = stage_evaluate(cfg, &state, &data.test, "noise_injection_only")?;
    let (state, log2) = stage_train_tsb(cfg, state, &data)?;
    log2.write_csv(&out_path(cfg, "train_tsb.csv"))?;
    save(cfg, &state, TSB_TRAINED_CKPT)?;
    let (state, wv) = stage_deploy_tsb(cfg, state)?;
    save(cfg, &state, TSB_DEPLOYED_CKPT)?;
    let tsb = stage_evaluate(cfg, &state, &data.test, "tsb")?;
    emit_report(&tsb, &out_path(cfg, "eval_tsb.json"), Format::Json)?;
    emit_report(
        &ni,
        &out_path(cfg, "eval_noise_injection_only.json"),
        Format::Json,
    )?;
    let rows = overhead(cfg, &state.model)?;
    emit_table(
        &rows,
        &OVERHEAD_HEADER,
        &out_path(cfg, "overhead.csv"),
        Format::Csv,
    )?;
    let summary = FullRunSummary {
        noise_injection_only: ni,
        tsb,
        write_verify: wv,
        overhead: rows,
        backbone_epochs: log1.epochs(),
        tsb_epochs: log2.epochs(),
        config_hash: cfg.hash(),
    };
    let path = out_path(cfg, "report.json");
    std::fs::write(&path, to_json_bytes(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

pub const OVERHEAD_HEADER: [&str; 8] = [
    "design",
    "crossbars",
    "devices",
    "write_verify_operations",
    "energy",
    "latency",
    "edp",
    "write_energy",
];

/// Re-runs a configuration from the config embedded in a report.
pub fn config_from_report(report: &serde_json::Value) -> Result<RunConfig> {
    let cfg = report
        .get("tsb")
        .and_then(|r| r.get("config"))
        .or_else(|| report.get("config"))
        .ok_or_else(|| Error::config("report carries no embedded config"))?;
    let cfg: RunConfig = serde_json::from_value(cfg.clone())?;
    cfg.validate()?;
    Ok(cfg)
}
