//! Two-stage deployment: noise-injection backbone training, programming with
//! a frozen noise snapshot, TSB fine-tuning against that snapshot,
//! write-verified TSB programming, and the last-layer retraining baselines.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{Sgd, SgdConfig};
use crate::autodiff::{BnMode, Graph};
use crate::data::{Dataset, Splits};
use crate::device::{
    perturb_for_training, quantize_weights, reconstruct_weights, sample_variation, DeviceSlices,
    NoiseSnapshot, NoiseSpace, QuantConfig, SnapshotProvenance, VariationParams,
};
use crate::error::{Error, Result};
use crate::eval::{self, accuracy_from, run_steps};
use crate::nn::{ForwardOptions, Model, ParamStore, RetrainScope};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::tsb::{InsertionPlan, TsbBlock};

/// Prefix activations larger than this are recomputed instead of cached.
const PREFIX_CACHE_LIMIT: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Untrained,
    BackboneTrained,
    Deployed,
    TsbTrained,
    TsbDeployed,
    BaselineRetrained,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Untrained => "untrained",
            Stage::BackboneTrained => "backbone_trained",
            Stage::Deployed => "deployed",
            Stage::TsbTrained => "tsb_trained",
            Stage::TsbDeployed => "tsb_deployed",
            Stage::BaselineRetrained => "baseline_retrained",
        }
    }

    pub fn require(self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self) {
            return Ok(());
        }
        Err(Error::Stage {
            expected: allowed.iter().map(|s| s.name()).collect::<Vec<_>>().join(" | "),
            found: self.name().into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    /// Run every configured epoch.
    MaxEpochs,
    /// Stop after `ceil(fraction * full_epochs)` epochs.
    EpochFraction { fraction: f64, full_epochs: usize },
    /// Stop once noisy validation accuracy reaches `target`.
    Threshold { target: f64 },
    /// Stop when noisy validation accuracy has not improved by at least
    /// `min_delta` for `patience` epochs.
    Plateau { min_delta: f64, patience: usize },
}

impl StopRule {
    pub fn plateau() -> Self {
        StopRule::Plateau {
            min_delta: 0.001,
            patience: 5,
        }
    }

    /// Epoch budget implied by the rule alone.
    pub fn epoch_limit(&self, max_epochs: usize) -> usize {
        match *self {
            StopRule::EpochFraction {
                fraction,
                full_epochs,
            } => max_epochs.min((fraction * full_epochs as f64 - 1e-9).ceil().max(0.0) as usize),
            _ => max_epochs,
        }
    }

    /// Decision after the epochs whose noisy accuracies are in `history`.
    pub fn should_stop(&self, history: &[f64]) -> bool {
        match *self {
            StopRule::MaxEpochs => false,
            StopRule::EpochFraction { .. } => history.len() >= self.epoch_limit(usize::MAX),
            StopRule::Threshold { target } => history.last().is_some_and(|&a| a >= target),
            StopRule::Plateau { min_delta, patience } => {
                let best = best_epoch(history, min_delta);
                best.is_some_and(|b| history.len() - b >= patience)
            }
        }
    }
}

/// 1-based epoch of the last improvement by at least `min_delta`.
pub fn best_epoch(history: &[f64], min_delta: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in history.iter().enumerate() {
        if best.is_none_or(|(_, b)| a >= b + min_delta) {
            best = Some((i + 1, a));
        }
    }
    best.map(|(e, _)| e)
}

/// Learning rate multiplied by `gamma` every `step_epochs` epochs (0 = constant).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub step_epochs: usize,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule {
            step_epochs: 0,
            gamma: 1.0,
        }
    }

    pub fn rate(&self, base: f32, epoch: usize) -> f32 {
        match self.step_epochs {
            0 => base,
            s => base * self.gamma.powi((epoch / s) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ep1: usize,
    pub eta1: f32,
    pub schedule1: LrSchedule,
    pub stop1: StopRule,
    pub ep2: usize,
    pub eta2: f32,
    pub stop2: StopRule,
    pub retrain_epochs: usize,
    pub retrain_eta: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub noise_space: NoiseSpace,
    /// Monte Carlo runs behind every noisy-validation accuracy.
    pub val_runs: usize,
    /// Validation samples used per epoch; `None` uses all of them.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ep1: 20,
            eta1: 0.05,
            schedule1: LrSchedule {
                step_epochs: 8,
                gamma: 0.3,
            },
            stop1: StopRule::EpochFraction {
                fraction: 0.15,
                full_epochs: 20,
            },
            ep2: 10,
            eta2: 0.005,
            stop2: StopRule::MaxEpochs,
            retrain_epochs: 10,
            retrain_eta: 0.005,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            noise_space: NoiseSpace::Conductance,
            val_runs: 2,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let rates = [self.eta1, self.eta2, self.retrain_eta];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        Ok(())
    }

    fn optimizer(&self) -> Sgd {
        Sgd::new(SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub clean_val_accuracy: f64,
    pub noisy_val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub rows: Vec<EpochRow>,
    /// Epoch of the last noisy-validation improvement of at least 0.1%.
    pub converged_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    pub fn noisy_history(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.noisy_val_accuracy).collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.wall_seconds).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// What one training stage may touch.
struct LoopSpec<'a> {
    label: &'static str,
    /// Keeps random streams of different stages apart.
    tag: u64,
    /// Values of every parameter that is not trained.
    frozen: &'a ParamStore,
    trainable: Vec<usize>,
    /// Trainable ids that receive fresh device noise in every forward pass.
    noise: Vec<(usize, f32)>,
    bn_mode: BnMode,
    epochs: usize,
    lr: f32,
    schedule: LrSchedule,
    stop: StopRule,
}

#[allow(clippy::too_many_arguments)]
fn noisy_store(
    clean: &ParamStore,
    noise: &[(usize, f32)],
    quant: &QuantConfig,
    space: NoiseSpace,
    seed: u64,
    purpose: Purpose,
    a: u64,
    b: u64,
) -> Result<ParamStore> {
    let mut store = clean.clone();
    for &(id, sigma) in noise {
        let mut rng = stream(seed, purpose, a, (b << 20) | id as u64);
        store.set(
            id,
            perturb_for_training(clean.get(id), sigma, quant, space, &mut rng)?,
        )?;
    }
    Ok(store)
}

/// Mean accuracy over `runs` fresh noise draws on the `noise` ids.
#[allow(clippy::too_many_arguments)]
pub fn noisy_accuracy(
    model: &Model,
    weights: &ParamStore,
    noise: &[(usize, f32)],
    quant: &QuantConfig,
    inputs: &Tensor,
    labels: &[usize],
    from: usize,
    runs: usize,
    seed: u64,
    key: u64,
) -> Result<f64> {
    if noise.is_empty() || runs == 0 {
        return accuracy_from(model, weights, inputs, labels, from, 1000);
    }
    let mut total = 0.0;
    for r in 0..runs {
        let store = noisy_store(
            weights,
            noise,
            quant,
            NoiseSpace::Conductance,
            seed,
            Purpose::EarlyStop,
            key,
            r as u64,
        )?;
        total += accuracy_from(model, &store, inputs, labels, from, 1000)?;
    }
    Ok(total / runs as f64)
}

/// Evaluates noisy validation accuracy for the current weights, appends it
/// to `history` and applies `rule`.
#[allow(clippy::too_many_arguments)]
pub fn early_stop_check(
    model: &Model,
    weights: &ParamStore,
    val: &Dataset,
    variation: &VariationParams,
    quant: &QuantConfig,
    rule: &StopRule,
    history: &mut Vec<f64>,
    runs: usize,
) -> Result<bool> {
    let noise: Vec<(usize, f32)> = model
        .backbone_device_ids()
        .into_iter()
        .map(|id| (id, variation.sigma_backbone))
        .collect();
    let acc = noisy_accuracy(
        model,
        weights,
        &noise,
        quant,
        &val.images,
        &val.labels,
        0,
        runs,
        variation.seed,
        history.len() as u64,
    )?;
    history.push(acc);
    Ok(rule.should_stop(history))
}

fn train_loop(
    model: &Model,
    spec: &LoopSpec,
    cfg: &TrainConfig,
    data: &Splits,
    quant: &QuantConfig,
    seed: u64,
) -> Result<(ParamStore, TrainLog)> {
    cfg.validate()?;
    let mut cur = spec.frozen.clone();
    for &id in &spec.trainable {
        cur.set(id, model.params().get(id).clone())?;
    }
    let mut touched = spec.trainable.clone();
    touched.extend(spec.noise.iter().map(|&(id, _)| id));
    let mut from = model.first_step_using(&touched);
    if spec.bn_mode == BnMode::Train {
        from = 0;
    }
    let val = match cfg.val_limit {
        Some(n) => data.val.head(n),
        None => data.val.clone(),
    };
    let per_sample: usize = model.step_input_shape(from)?.iter().product();
    if (data.train.len() + val.len()) * per_sample * 4 > PREFIX_CACHE_LIMIT {
        from = 0;
    }
    let (train_in, val_in) = if from > 0 {
        (
            run_steps(model, &cur, &data.train.images, 0..from, 1000)?,
            run_steps(model, &cur, &val.images, 0..from, 1000)?,
        )
    } else {
        (data.train.images.clone(), val.images.clone())
    };

    let n = data.train.len();
    let steps = from..model.num_steps();
    let mut opt = cfg.optimizer();
    let mut log = TrainLog {
        stage: spec.label.into(),
        ..Default::default()
    };
    let epochs = spec.stop.epoch_limit(spec.epochs);
    let mut history = Vec::new();
    for epoch in 0..epochs {
        let started = Instant::now();
        let lr = spec.schedule.rate(spec.lr, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Purpose::Shuffle, spec.tag, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (it, idx) in order.chunks(cfg.batch_size).enumerate() {
            let store = noisy_store(
                &cur,
                &spec.noise,
                quant,
                cfg.noise_space,
                seed,
                Purpose::TrainNoise,
                (spec.tag << 32) | epoch as u64,
                it as u64,
            )?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(train_in.gather_outer(idx));
            let opts = ForwardOptions {
                bn_mode: spec.bn_mode,
                trainable: spec.trainable.clone(),
            };
            let fwd = model.forward_steps(&mut g, x, &store, &opts, steps.clone())?;
            let loss = g.softmax_cross_entropy(fwd.output, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    iteration: it,
                    detail: format!("{} loss is {value}", spec.label),
                });
            }
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch: epoch + 1,
                    iteration: it,
                    detail: format!("non-finite gradient in {what}"),
                },
                other => other,
            })?;
            for &id in &spec.trainable {
                if let Some(grad) = fwd.param_vars[id].and_then(|v| g.take_grad(v)) {
                    // the gradient was taken at the noisy weights; the update goes to the clean ones
                    opt.step(id, cur.get_mut(id), &grad, lr)?;
                }
            }
            for (mean_id, var_id, stats) in fwd.bn_updates {
                let c = stats.mean.len();
                cur.set(mean_id, Tensor::new(vec![c], stats.mean)?)?;
                cur.set(var_id, Tensor::new(vec![c], stats.var)?)?;
            }
            loss_sum += value as f64;
            batches += 1;
        }
        let clean = accuracy_from(model, &cur, &val_in, &val.labels, from, 1000)?;
        let noisy = noisy_accuracy(
            model,
            &cur,
            &spec.noise,
            quant,
            &val_in,
            &val.labels,
            from,
            cfg.val_runs,
            seed,
            (spec.tag << 32) | epoch as u64,
        )?;
        history.push(noisy);
        let row = EpochRow {
            epoch: epoch + 1,
            loss: loss_sum / batches.max(1) as f64,
            clean_val_accuracy: clean,
            noisy_val_accuracy: noisy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}: loss {:.4} clean-val {:.4} noisy-val {:.4} ({:.1}s)",
            spec.label,
            row.epoch,
            row.loss,
            row.clean_val_accuracy,
            row.noisy_val_accuracy,
            row.wall_seconds
        );
        log.rows.push(row);
        if spec.stop.should_stop(&history) {
            log.stopped_early = epoch + 1 < spec.epochs;
            break;
        }
    }
    log.converged_epoch = best_epoch(&history, 0.001);
    Ok((cur, log))
}

fn copy_back(model: &mut Model, trained: &ParamStore, ids: &[usize]) -> Result<()> {
    for &id in ids {
        model.params_mut().set(id, trained.get(id).clone())?;
    }
    Ok(())
}

fn with_sigma(ids: Vec<usize>, sigma: f32) -> Vec<(usize, f32)> {
    if sigma == 0.0 {
        return Vec::new();
    }
    ids.into_iter().map(|id| (id, sigma)).collect()
}

/// Stage 1: every iteration draws fresh conductance noise at
/// `sigma_backbone`, takes the gradient at the noisy weights and applies it
/// to the clean ones. With `sigma_backbone == 0` this is plain float training.
pub fn train_backbone(
    model: &mut Model,
    data: &Splits,
    cfg: &TrainConfig,
    variation: &VariationParams,
    quant: &QuantConfig,
    seed: u64,
) -> Result<TrainLog> {
    if model.tsb().is_some() {
        return Err(Error::Stage {
            expected: "backbone without TSB".into(),
            found: "model with TSB".into(),
        });
    }
    let frozen = model.params().clone();
    let trainable = model.backbone_trainable_ids();
    let spec = LoopSpec {
        label: "backbone",
        tag: 1,
        frozen: &frozen,
        noise: with_sigma(model.backbone_device_ids(), variation.sigma_backbone),
        trainable,
        bn_mode: BnMode::Train,
        epochs: cfg.ep1,
        lr: cfg.eta1,
        schedule: cfg.schedule1,
        stop: cfg.stop1.clone(),
    };
    let (trained, log) = train_loop(model, &spec, cfg, data, quant, seed)?;
    let mut ids = model.backbone_trainable_ids();
    ids.extend(model.params().ids_where(|e| e.kind.is_buffer()));
    copy_back(model, &trained, &ids)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Programmed {
    pub id: usize,
    pub slices: DeviceSlices,
    pub snapshot: NoiseSnapshot,
}

/// Weights programmed onto devices together with the deviations captured
/// right after programming.
#[derive(Clone, Debug, PartialEq)]
pub struct Deployment {
    pub quant: QuantConfig,
    pub programs: Vec<Programmed>,
}

impl Deployment {
    /// Quantizes and slices `ids`, then samples one snapshot per tensor.
    pub fn program(
        params: &ParamStore,
        ids: &[usize],
        quant: &QuantConfig,
        sigma: f32,
        seed: u64,
        tag: u64,
    ) -> Result<Self> {
        let programs = ids
            .iter()
            .map(|&id| {
                let (slices, _) = quantize_weights(params.get(id), quant)?;
                let provenance = SnapshotProvenance {
                    seed,
                    sigma,
                    stream: [tag, id as u64],
                    timestamp: None,
                };
                let mut rng = stream(seed, Purpose::Snapshot, tag, id as u64);
                let snapshot = sample_variation(&slices, sigma, &mut rng, provenance)?;
                Ok(Programmed { id, slices, snapshot })
            })
            .collect::<Result<_>>()?;
        Ok(Deployment {
            quant: *quant,
            programs,
        })
    }

    /// Rebuilds a deployment from stored snapshots; slices are re-derived
    /// from the clean weights.
    pub fn from_snapshots(
        params: &ParamStore,
        quant: &QuantConfig,
        snapshots: Vec<(usize, NoiseSnapshot)>,
    ) -> Result<Self> {
        let programs = snapshots
            .into_iter()
            .map(|(id, snapshot)| {
                let (slices, _) = quantize_weights(params.get(id), quant)?;
                Ok(Programmed { id, slices, snapshot })
            })
            .collect::<Result<_>>()?;
        Ok(Deployment {
            quant: *quant,
            programs,
        })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.programs.iter().map(|p| p.id).collect()
    }

    pub fn num_weights(&self) -> usize {
        self.programs.iter().map(|p| p.slices.num_weights()).sum()
    }

    /// Writes `W_real` for every programmed tensor into `store`.
    pub fn realize(&self, store: &mut ParamStore) -> Result<()> {
        for p in &self.programs {
            store.set(p.id, reconstruct_weights(&p.slices, &p.snapshot)?)?;
        }
        Ok(())
    }

    pub fn realize_except(&self, store: &mut ParamStore, skip: &[usize]) -> Result<()> {
        for p in self.programs.iter().filter(|p| !skip.contains(&p.id)) {
            store.set(p.id, reconstruct_weights(&p.slices, &p.snapshot)?)?;
        }
        Ok(())
    }
}

/// Programs every backbone conv/linear weight with one frozen snapshot at `sigma_backbone`.
pub fn deploy_backbone(
    model: &Model,
    quant: &QuantConfig,
    variation: &VariationParams,
) -> Result<Deployment> {
    Deployment::program(
        model.params(),
        &model.backbone_device_ids(),
        quant,
        variation.sigma_backbone,
        variation.seed,
        0,
    )
}

/// The model's parameters with the deployed backbone realized.
pub fn realized(model: &Model, deployment: &Deployment) -> Result<ParamStore> {
    let mut store = model.params().clone();
    deployment.realize(&mut store)?;
    Ok(store)
}

/// Inserts an identity-initialized block after the planned convolutions.
pub fn attach_identity_tsb(
    model: &mut Model,
    channels: usize,
    depth: usize,
    plan: InsertionPlan,
) -> Result<()> {
    model.insert_tsb(plan, TsbBlock::build_multilayer(channels, depth)?)
}

/// Stage 2: only the block is trained. The backbone sits at `W_real` from
/// the frozen snapshot, BN is frozen, and the block sees fresh noise at
/// `sigma_verified` in every forward pass.
pub fn train_tsb(
    model: &mut Model,
    deployment: &Deployment,
    data: &Splits,
    cfg: &TrainConfig,
    variation: &VariationParams,
    quant: &QuantConfig,
    seed: u64,
) -> Result<TrainLog> {
    if model.tsb().is_none() {
        return Err(Error::Stage {
            expected: "model with TSB".into(),
            found: "backbone without TSB".into(),
        });
    }
    let frozen = realized(model, deployment)?;
    let ids = model.tsb_ids();
    let spec = LoopSpec {
        label: "tsb",
        tag: 2,
        frozen: &frozen,
        noise: with_sigma(ids.clone(), variation.sigma_verified),
        trainable: ids.clone(),
        bn_mode: BnMode::Frozen,
        epochs: cfg.ep2,
        lr: cfg.eta2,
        schedule: LrSchedule::constant(),
        stop: cfg.stop2.clone(),
    };
    let (trained, log) = train_loop(model, &spec, cfg, data, quant, seed)?;
    copy_back(model, &trained, &ids)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriteVerifySummary {
    pub verified_weights: usize,
    pub total_weights: usize,
    pub fraction: f64,
}

/// Programs the block with write-verify (`sigma_verified`). Only the block's
/// weights are verified.
pub fn deploy_tsb(
    model: &Model,
    quant: &QuantConfig,
    variation: &VariationParams,
) -> Result<(Deployment, WriteVerifySummary)> {
    let ids = model.tsb_ids();
    if ids.is_empty() {
        return Err(Error::Stage {
            expected: "model with TSB".into(),
            found: "backbone without TSB".into(),
        });
    }
    let dep = Deployment::program(
        model.params(),
        &ids,
        quant,
        variation.sigma_verified,
        variation.seed,
        1,
    )?;
    let verified = model.num_tsb_weights();
    let total = verified + model.num_backbone_weights();
    Ok((
        dep,
        WriteVerifySummary {
            verified_weights: verified,
            total_weights: total,
            fraction: verified as f64 / total as f64,
        },
    ))
}

/// Retrains the scoped layers of a deployed backbone. Everything else stays
/// at `W_real`; the retrained weights are trained with fresh
/// `sigma_backbone` noise because they are re-programmed without
/// write-verify. Returns the log and the ids that must be re-programmed.
#[allow(clippy::too_many_arguments)]
pub fn baseline_retrain_last(
    model: &mut Model,
    deployment: &Deployment,
    data: &Splits,
    cfg: &TrainConfig,
    variation: &VariationParams,
    quant: &QuantConfig,
    scope: RetrainScope,
    seed: u64,
) -> Result<(TrainLog, Vec<usize>)> {
    if model.tsb().is_some() {
        return Err(Error::Stage {
            expected: "backbone without TSB".into(),
            found: "model with TSB".into(),
        });
    }
    let layers = model.arch().retrain_layers(scope)?;
    let ids = model.layer_param_ids(&layers);
    let device_ids: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&id| model.params().entry(id).kind.on_devices())
        .collect();
    let frozen = realized(model, deployment)?;
    let tag = match scope {
        RetrainScope::LastLayer => 3,
        RetrainScope::LastLayers => 4,
    };
    let spec = LoopSpec {
        label: "baseline",
        tag,
        frozen: &frozen,
        noise: with_sigma(device_ids.clone(), variation.sigma_backbone),
        trainable: ids.clone(),
        bn_mode: BnMode::Frozen,
        epochs: cfg.retrain_epochs,
        lr: cfg.retrain_eta,
        schedule: LrSchedule::constant(),
        stop: StopRule::MaxEpochs,
    };
    let (trained, log) = train_loop(model, &spec, cfg, data, quant, seed)?;
    copy_back(model, &trained, &ids)?;
    Ok((log, device_ids))
}

/// Everything needed to run a deployed model: the stage, the model with its
/// clean weights and the captured snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub stage: Stage,
    pub model: Model,
    pub deployment: Option<Deployment>,
    pub tsb_deployment: Option<Deployment>,
    /// Weights re-programmed after deployment (baselines); they get fresh
    /// noise in every Monte Carlo run.
    pub reprogrammed: Vec<usize>,
}

impl PipelineState {
    pub fn new(model: Model) -> Self {
        PipelineState {
            stage: Stage::Untrained,
            model,
            deployment: None,
            tsb_deployment: None,
            reprogrammed: Vec::new(),
        }
    }

    pub fn deployment(&self) -> Result<&Deployment> {
        self.deployment.as_ref().ok_or_else(|| Error::Stage {
            expected: "deployed".into(),
            found: self.stage.name().into(),
        })
    }

    /// Base weights and per-run re-programmed weights for Monte Carlo evaluation.
    pub fn evaluation_inputs(&self, variation: &VariationParams) -> Result<(ParamStore, Vec<(usize, f32)>)> {
        self.stage.require(&[
            Stage::Deployed,
            Stage::TsbTrained,
            Stage::TsbDeployed,
            Stage::BaselineRetrained,
        ])?;
        let mut base = self.model.params().clone();
        self.deployment()?.realize_except(&mut base, &self.reprogrammed)?;
        let fresh = match self.stage {
            Stage::TsbTrained | Stage::TsbDeployed => self
                .model
                .tsb_ids()
                .into_iter()
                .map(|id| (id, variation.sigma_verified))
                .collect(),
            Stage::BaselineRetrained => self
                .reprogrammed
                .iter()
                .map(|&id| (id, variation.sigma_backbone))
                .collect(),
            _ => Vec::new(),
        };
        Ok((base, fresh))
    }

    /// Noise-free accuracy of the clean weights.
    pub fn clean_accuracy(&self, data: &Dataset) -> Result<f64> {
        eval::accuracy(&self.model, self.model.params(), data, 1000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rules() {
        assert!(StopRule::Threshold { target: 0.0 }.should_stop(&[0.1]));
        assert!(!StopRule::Threshold { target: 1.01 }.should_stop(&[1.0]));
        assert!(StopRule::Threshold { target: 0.5 }.should_stop(&[0.2, 0.5]));
        let frac = StopRule::EpochFraction {
            fraction: 0.15,
            full_epochs: 20,
        };
        assert_eq!(frac.epoch_limit(100), 3);
        assert!(!frac.should_stop(&[0.1, 0.2]));
        assert!(frac.should_stop(&[0.1, 0.2, 0.3]));
        assert!(!StopRule::MaxEpochs.should_stop(&[0.9; 50]));
    }

    #[test]
    fn plateau_rule() {
        let p = StopRule::plateau();
        let mut h = vec![0.5, 0.6, 0.7];
        assert!(!p.should_stop(&h));
        h.extend([0.7005, 0.699, 0.7, 0.7009]);
        assert!(!p.should_stop(&h));
        h.push(0.6);
        assert!(p.should_stop(&h));
        assert_eq!(best_epoch(&h, 0.001), Some(3));
    }

    #[test]
    fn schedule() {
        let s = LrSchedule {
            step_epochs: 2,
            gamma: 0.5,
        };
        assert_eq!(s.rate(1.0, 0), 1.0);
        assert_eq!(s.rate(1.0, 3), 0.5);
        assert_eq!(s.rate(1.0, 4), 0.25);
        assert_eq!(LrSchedule::constant().rate(0.3, 9), 0.3);
    }

    #[test]
    fn stage_errors_name_both_sides() {
        let err = Stage::BackboneTrained.require(&[Stage::Deployed]).unwrap_err();
        assert_eq!(
            err.to_string(),
            "stage error: expected deployed, found backbone_trained"
        );
    }
}
