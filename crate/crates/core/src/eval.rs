//! Monte Carlo noisy inference, confidence intervals and accuracy distance.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::device::{perturb_for_training, NoiseSpace, QuantConfig};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ForwardOptions, Model, ParamStore};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 200;
/// Half-width at or below which `within_one_percent` is set.
pub const TARGET_HALF_WIDTH: f64 = 0.01;
const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub runs: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool. Results do not depend on it.
    pub threads: Option<usize>,
    pub batch_size: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            runs: DEFAULT_RUNS,
            seed: 0,
            threads: None,
            batch_size: 1000,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "Monte Carlo needs at least one run and a positive batch size",
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::config("thread count must be positive"));
        }
        Ok(())
    }
}

/// `(mean, 1.96 * s / sqrt(n))` with the sample standard deviation `s`.
pub fn confidence_interval(samples: &[f64]) -> Result<(f64, f64)> {
    let (mean, std) = mean_std(samples)?;
    Ok((mean, Z95 * std / (samples.len() as f64).sqrt()))
}

fn mean_std(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::input(format!(
            "a confidence interval needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok((samples[0], 0.0));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    /// `ideal - mean`.
    pub absolute: f64,
    /// `absolute / ideal`; absent when the ideal accuracy is zero.
    pub normalized: Option<f64>,
}

pub fn accuracy_distance(mean: f64, ideal: f64) -> Distance {
    let absolute = ideal - mean;
    Distance {
        absolute,
        normalized: (ideal != 0.0).then(|| absolute / ideal),
    }
}

/// `distance_a / distance_b`, e.g. how many times further from ideal `a` is.
pub fn improvement_ratio(distance_a: f64, distance_b: f64) -> Option<f64> {
    (distance_b != 0.0).then(|| distance_a / distance_b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub method: String,
    pub sigma_backbone: f32,
    pub sigma_verified: f32,
    pub seed: u64,
    pub eval_seed: u64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci_half_width: f64,
    pub ideal: f64,
    pub distance: Distance,
    pub within_one_percent: bool,
    /// The full run configuration that produced the report.
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Single runs are allowed (deterministic evaluations); their spread is zero.
    pub fn from_runs(
        per_run: Vec<f64>,
        ideal: f64,
        meta: ReportMeta,
        config: serde_json::Value,
    ) -> Result<Self> {
        let (mean, std, half) = match per_run.len() {
            0 => return Err(Error::input("report needs at least one run")),
            1 => (per_run[0], 0.0, 0.0),
            _ => {
                let (mean, std) = mean_std(&per_run)?;
                (mean, std, Z95 * std / (per_run.len() as f64).sqrt())
            }
        };
        Ok(EvalReport {
            meta,
            mean,
            std,
            ci_half_width: half,
            ideal,
            distance: accuracy_distance(mean, ideal),
            within_one_percent: half <= TARGET_HALF_WIDTH,
            per_run,
            config,
        })
    }
}

/// Runs `steps` of the forward pass (eval-mode BN, no noise) over `images` in batches.
pub fn run_steps(
    model: &Model,
    weights: &ParamStore,
    images: &Tensor,
    steps: std::ops::Range<usize>,
    batch_size: usize,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let opts = ForwardOptions::inference();
    let mut parts = Vec::with_capacity(n.div_ceil(batch_size.max(1)));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut g = Graph::inference();
        let x = g.input(images.slice_outer(start, end));
        let out = model.forward_steps(&mut g, x, weights, &opts, steps.clone())?;
        parts.push(g.take_value(out.output));
        start = end;
    }
    if parts.is_empty() {
        let mut shape = model.step_input_shape(steps.end)?;
        shape.insert(0, 0);
        return Ok(Tensor::zeros(&shape));
    }
    Tensor::concat_outer(&parts)
}

/// Classification accuracy of `inputs` entering the network at step `from`.
pub fn accuracy_from(
    model: &Model,
    weights: &ParamStore,
    inputs: &Tensor,
    labels: &[usize],
    from: usize,
    batch_size: usize,
) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = run_steps(model, weights, inputs, from..model.num_steps(), batch_size)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("inference".into()));
    }
    let hits = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &Model, weights: &ParamStore, data: &Dataset, batch_size: usize) -> Result<f64> {
    accuracy_from(model, weights, &data.images, &data.labels, 0, batch_size)
}

/// Calls `f(run, rng)` for every run with an independent stream keyed by
/// `(seed, run)`, possibly in parallel, and returns results in run order.
pub fn monte_carlo<F>(runs: usize, seed: u64, threads: Option<usize>, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut StreamRng) -> Result<f64> + Sync,
{
    let body = || {
        (0..runs)
            .into_par_iter()
            .map(|r| f(r, &mut stream(seed, Purpose::MonteCarlo, r as u64, u64::MAX)))
            .collect::<Result<Vec<f64>>>()
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Deployed-model Monte Carlo accuracy. `base` holds the realized weights
/// (frozen snapshot already applied). Every `(id, sigma)` in `fresh` is
/// re-programmed in each run: quantized from `base` and given new device
/// noise drawn from the stream `(eval seed, run, id)`.
pub fn monte_carlo_accuracy(
    model: &Model,
    base: &ParamStore,
    fresh: &[(usize, f32)],
    quant: &QuantConfig,
    data: &Dataset,
    mc: &McConfig,
) -> Result<Vec<f64>> {
    mc.validate()?;
    let ids: Vec<usize> = fresh.iter().map(|&(id, _)| id).collect();
    let from = model.first_step_using(&ids);
    // everything before the first re-programmed weight is identical in every run
    let cached = match from {
        0 => None,
        _ => Some(run_steps(model, base, &data.images, 0..from, mc.batch_size)?),
    };
    let inputs = cached.as_ref().unwrap_or(&data.images);
    if fresh.is_empty() {
        let acc = accuracy_from(model, base, inputs, &data.labels, from, mc.batch_size)?;
        return Ok(vec![acc; mc.runs]);
    }
    monte_carlo(mc.runs, mc.seed, mc.threads, |run, _| {
        let mut weights = base.clone();
        for &(id, sigma) in fresh {
            let mut rng = stream(mc.seed, Purpose::MonteCarlo, run as u64, id as u64);
            let w = perturb_for_training(base.get(id), sigma, quant, NoiseSpace::Conductance, &mut rng)?;
            weights.set(id, w)?;
        }
        accuracy_from(model, &weights, inputs, &data.labels, from, mc.batch_size)
    })
}

/// A stand-in classifier: starts from all-correct predictions on `samples`
/// items and flips each one independently with probability `p` per run.
#[derive(Clone, Copy, Debug)]
pub struct FlipClassifier {
    pub samples: usize,
    pub p: f64,
}

impl FlipClassifier {
    pub fn run(&self, rng: &mut StreamRng) -> f64 {
        let wrong = (0..self.samples).filter(|_| rng.random_bool(self.p)).count();
        1.0 - wrong as f64 / self.samples as f64
    }

    pub fn monte_carlo(&self, mc: &McConfig) -> Result<Vec<f64>> {
        mc.validate()?;
        monte_carlo(mc.runs, mc.seed, mc.threads, |_, rng| Ok(self.run(rng)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    TsbChannels,
    InsertionCount,
    TsbDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub tsb_params: usize,
    pub accuracy: f64,
    pub ci_half_width: f64,
    /// Seconds per TSB epoch divided by seconds per backbone epoch.
    pub normalized_epoch_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline; field order follows the struct.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn emit_report(report: &EvalReport, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Json => to_json_bytes(report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["run", "accuracy"])?;
            for (i, a) in report.per_run.iter().enumerate() {
                w.write_record([i.to_string(), a.to_string()])?;
            }
            w.into_inner().map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    write_bytes(path, &bytes)
}

pub fn emit_table<T: Serialize>(rows: &[T], header: &[&str], path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Json => to_json_bytes(&rows)?,
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(header)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.into_inner().map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    write_bytes(path, &bytes)
}

pub const ABLATION_HEADER: [&str; 5] = [
    "value",
    "tsb_params",
    "accuracy",
    "ci_half_width",
    "normalized_epoch_time",
];
