//! Weight → quantized level → device conductances → noisy weight.
//!
//! A layer's weights are quantized to `M`-bit magnitudes with a per-layer
//! scale `max|W| / (2^M - 1)`; the sign is kept per weight (negative weights
//! live on a mirrored crossbar). Each magnitude level is split into `M/K`
//! devices of `K` bits, device `j` holding bits `jK .. jK+K-1`. Programming
//! adds a Gaussian deviation to every device conductance, with standard
//! deviation `sigma * (2^K - 1)` in integer-level units, i.e. `sigma` is
//! relative to the largest conductance one device can hold. The realized
//! weight is
//!
//! ```text
//! W_real = W_quant + sign * scale * sum_j dg_j * 2^(jK)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Weight precision `M` in bits.
    pub weight_bits: u32,
    /// Bits stored per device, `K`.
    pub device_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: 8,
            device_bits: 2,
        }
    }
}

impl QuantConfig {
    pub fn new(weight_bits: u32, device_bits: u32) -> Result<Self> {
        let cfg = QuantConfig {
            weight_bits,
            device_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_bits == 0 || self.device_bits == 0 {
            return Err(Error::config("weight and device bit widths must be positive"));
        }
        if !self.weight_bits.is_multiple_of(self.device_bits) {
            return Err(Error::config(format!(
                "weight bits {} must be a multiple of device bits {}",
                self.weight_bits, self.device_bits
            )));
        }
        if self.weight_bits > 16 {
            return Err(Error::config("weight precision above 16 bits is not supported"));
        }
        Ok(())
    }

    pub fn devices_per_weight(&self) -> usize {
        (self.weight_bits / self.device_bits) as usize
    }

    /// `2^M - 1`.
    pub fn max_level(&self) -> u32 {
        (1u32 << self.weight_bits) - 1
    }

    /// `2^K - 1`, the largest conductance level of a single device.
    pub fn max_device_level(&self) -> u32 {
        (1u32 << self.device_bits) - 1
    }

    /// `sum_j 2^(2jK)`: variance gain from device noise to level noise.
    pub fn level_variance_gain(&self) -> f64 {
        (0..self.devices_per_weight())
            .map(|j| 4f64.powi((j as u32 * self.device_bits) as i32))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationParams {
    /// Relative conductance std-dev for ordinary (unverified) devices.
    pub sigma_backbone: f32,
    /// Relative conductance std-dev for write-verified devices.
    pub sigma_verified: f32,
    pub seed: u64,
}

impl Default for VariationParams {
    fn default() -> Self {
        VariationParams {
            sigma_backbone: 0.1,
            sigma_verified: 0.004,
            seed: 0,
        }
    }
}

impl VariationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_verified >= 0.0
            && self.sigma_verified <= self.sigma_backbone
            && self.sigma_backbone.is_finite();
        if !ok {
            return Err(Error::config(format!(
                "need 0 <= sigma_verified ({}) <= sigma_backbone ({})",
                self.sigma_verified, self.sigma_backbone
            )));
        }
        Ok(())
    }
}

/// Where training-time weight noise is generated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpace {
    /// Per-device conductance deviations pushed through the slicing chain.
    #[default]
    Conductance,
    /// One Gaussian per weight with the same variance as the conductance route.
    Weight,
}

/// Sign-magnitude, bit-sliced representation of one weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSlices {
    pub shape: Vec<usize>,
    pub config: QuantConfig,
    pub max_abs: f32,
    /// `max|W| / (2^M - 1)`.
    pub scale: f32,
    pub signs: Vec<i8>,
    pub levels: Vec<u32>,
    /// `M/K` device levels per weight, weight-major.
    pub devices: Vec<u8>,
}

impl DeviceSlices {
    pub fn num_weights(&self) -> usize {
        self.levels.len()
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    /// The quantized weights `sign * scale * v`.
    pub fn quantized(&self) -> Tensor {
        let data = self
            .signs
            .iter()
            .zip(&self.levels)
            .map(|(&s, &v)| s as f32 * self.scale * v as f32)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("slice shape")
    }
}

/// Rounds half away from zero; used for every weight→level mapping.
fn nearest_level(magnitude: f64, max_abs: f64, max_level: u32) -> u32 {
    if max_abs == 0.0 {
        return 0;
    }
    let x = magnitude * max_level as f64 / max_abs;
    (x.round() as u32).min(max_level)
}

/// Quantizes `w` to `M`-bit sign-magnitude levels and slices every level
/// into devices. Returns the slices and the reconstructed quantized tensor.
pub fn quantize_weights(w: &Tensor, cfg: &QuantConfig) -> Result<(DeviceSlices, Tensor)> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::input("cannot quantize non-finite weights"));
    }
    let max_abs = w.max_abs();
    let max_level = cfg.max_level();
    let scale = if max_abs == 0.0 {
        0.0
    } else {
        max_abs / max_level as f32
    };
    let per = cfg.devices_per_weight();
    let mut signs = Vec::with_capacity(w.numel());
    let mut levels = Vec::with_capacity(w.numel());
    let mut devices = Vec::with_capacity(w.numel() * per);
    for &x in w.data() {
        let v = nearest_level(x.abs() as f64, max_abs as f64, max_level);
        // zero keeps a positive sign so that W_quant never holds -0.0
        signs.push(if x < 0.0 && v > 0 { -1 } else { 1 });
        levels.push(v);
        for j in 0..per {
            devices.push(((v >> (j as u32 * cfg.device_bits)) & cfg.max_device_level()) as u8);
        }
    }
    let slices = DeviceSlices {
        shape: w.shape().to_vec(),
        config: *cfg,
        max_abs,
        scale,
        signs,
        levels,
        devices,
    };
    let quant = slices.quantized();
    Ok((slices, quant))
}

/// Splits level `v` into `M/K` device conductances, least significant first.
pub fn slice_to_devices(v: u32, cfg: &QuantConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    if v > cfg.max_level() {
        return Err(Error::input(format!(
            "level {v} out of range for {} bits",
            cfg.weight_bits
        )));
    }
    Ok((0..cfg.devices_per_weight())
        .map(|j| (v >> (j as u32 * cfg.device_bits)) & cfg.max_device_level())
        .collect())
}

/// Inverse of [`slice_to_devices`]: `sum_j g_j * 2^(jK)`.
pub fn devices_to_level(devices: &[u32], cfg: &QuantConfig) -> u32 {
    devices
        .iter()
        .enumerate()
        .map(|(j, &g)| g << (j as u32 * cfg.device_bits))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotProvenance {
    pub seed: u64,
    pub sigma: f32,
    /// Stream coordinates the deviations were drawn from.
    pub stream: [u64; 2],
    /// Seconds since the Unix epoch; absent when the capture must be reproducible byte for byte.
    pub timestamp: Option<u64>,
}

/// Per-device conductance deviations captured once at programming time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSnapshot {
    pub weight_shape: Vec<usize>,
    pub devices_per_weight: usize,
    deltas: Vec<f32>,
    pub provenance: SnapshotProvenance,
}

impl NoiseSnapshot {
    pub fn new(
        weight_shape: Vec<usize>,
        devices_per_weight: usize,
        deltas: Vec<f32>,
        provenance: SnapshotProvenance,
    ) -> Result<Self> {
        let weights: usize = weight_shape.iter().product();
        if weights * devices_per_weight != deltas.len() {
            return Err(Error::config(format!(
                "snapshot of {} deviations does not cover {weights} weights x {devices_per_weight} devices",
                deltas.len()
            )));
        }
        Ok(NoiseSnapshot {
            weight_shape,
            devices_per_weight,
            deltas,
            provenance,
        })
    }

    pub fn zeros(slices: &DeviceSlices) -> Self {
        NoiseSnapshot {
            weight_shape: slices.shape.clone(),
            devices_per_weight: slices.config.devices_per_weight(),
            deltas: vec![0.0; slices.num_devices()],
            provenance: SnapshotProvenance {
                seed: 0,
                sigma: 0.0,
                stream: [0, 0],
                timestamp: None,
            },
        }
    }

    pub fn deltas(&self) -> &[f32] {
        &self.deltas
    }
}

/// Draws one i.i.d. Gaussian deviation per device, std `sigma * (2^K - 1)`.
pub fn sample_variation(
    slices: &DeviceSlices,
    sigma: f32,
    rng: &mut StreamRng,
    provenance: SnapshotProvenance,
) -> Result<NoiseSnapshot> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::input(format!("sigma must be non-negative, got {sigma}")));
    }
    let std = sigma * slices.config.max_device_level() as f32;
    let deltas = if std == 0.0 {
        vec![0.0; slices.num_devices()]
    } else {
        (0..slices.num_devices())
            .map(|_| std * standard_normal(rng))
            .collect()
    };
    NoiseSnapshot::new(
        slices.shape.clone(),
        slices.config.devices_per_weight(),
        deltas,
        provenance,
    )
}

/// Realized weights after programming with the given deviations.
pub fn reconstruct_weights(slices: &DeviceSlices, snapshot: &NoiseSnapshot) -> Result<Tensor> {
    let per = slices.config.devices_per_weight();
    if snapshot.weight_shape != slices.shape || snapshot.devices_per_weight != per {
        return Err(Error::config(format!(
            "snapshot shape {:?}x{} does not match slices {:?}x{per}",
            snapshot.weight_shape, snapshot.devices_per_weight, slices.shape
        )));
    }
    let k = slices.config.device_bits;
    let place: Vec<f64> = (0..per).map(|j| (1u64 << (j as u32 * k)) as f64).collect();
    let mut out = slices.quantized();
    for ((w, dg), &sign) in out
        .data_mut()
        .iter_mut()
        .zip(snapshot.deltas.chunks(per))
        .zip(&slices.signs)
    {
        let shift: f64 = dg.iter().zip(&place).map(|(&d, &p)| d as f64 * p).sum();
        *w += (sign as f64 * slices.scale as f64 * shift) as f32;
    }
    Ok(out)
}

/// One draw of training-time weight noise: quantize, perturb, reconstruct.
/// The caller keeps the clean `w` for the update.
pub fn perturb_for_training(
    w: &Tensor,
    sigma: f32,
    cfg: &QuantConfig,
    space: NoiseSpace,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let (slices, quant) = quantize_weights(w, cfg)?;
    if sigma == 0.0 {
        return Ok(quant);
    }
    match space {
        NoiseSpace::Conductance => {
            let provenance = SnapshotProvenance {
                seed: 0,
                sigma,
                stream: [0, 0],
                timestamp: None,
            };
            let snap = sample_variation(&slices, sigma, rng, provenance)?;
            reconstruct_weights(&slices, &snap)
        }
        NoiseSpace::Weight => {
            let std = (slices.scale as f64
                * sigma as f64
                * cfg.max_device_level() as f64
                * cfg.level_variance_gain().sqrt()) as f32;
            let mut out = quant;
            for v in out.data_mut() {
                *v += std * standard_normal(rng);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn w(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn prov() -> SnapshotProvenance {
        SnapshotProvenance {
            seed: 1,
            sigma: 0.0,
            stream: [0, 0],
            timestamp: None,
        }
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(8, 3).is_err());
        assert!(QuantConfig::new(0, 2).is_err());
        assert!(QuantConfig::new(8, 2).is_ok());
        let v = VariationParams {
            sigma_backbone: 0.01,
            sigma_verified: 0.02,
            seed: 0,
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn all_zero_weights() {
        let (s, q) = quantize_weights(&w(&[0.0, 0.0, -0.0]), &QuantConfig::default()).unwrap();
        assert!(q.data().iter().all(|&x| x == 0.0 && x.is_sign_positive()));
        assert!(s.levels.iter().all(|&v| v == 0));
        assert_eq!(s.scale, 0.0);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let (s, q) = quantize_weights(&w(&[1.0, -1.0, 0.5]), &QuantConfig::default()).unwrap();
        assert_eq!(s.levels, vec![255, 255, 128]);
        assert_eq!(s.signs, vec![1, -1, 1]);
        assert_eq!(q.data()[0], 1.0);
        assert_eq!(q.data()[1], -1.0);
        assert!((q.data()[2] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn one_bit_quantization() {
        let cfg = QuantConfig::new(1, 1).unwrap();
        let (_, q) = quantize_weights(&w(&[0.3, 0.9]), &cfg).unwrap();
        assert_eq!(q.data(), &[0.0, 0.9]);
    }

    #[test]
    fn slicing_examples() {
        let cfg = QuantConfig::default();
        assert_eq!(slice_to_devices(0, &cfg).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(slice_to_devices(255, &cfg).unwrap(), vec![3, 3, 3, 3]);
        assert_eq!(slice_to_devices(182, &cfg).unwrap(), vec![2, 1, 3, 2]);
        assert!(matches!(slice_to_devices(256, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn zero_sigma_snapshot_is_zero_and_reconstruction_exact() {
        let cfg = QuantConfig::default();
        let (s, q) = quantize_weights(&w(&[0.7, -0.2, 0.0, 1.3]), &cfg).unwrap();
        let mut rng = stream(3, Purpose::Snapshot, 0, 0);
        let snap = sample_variation(&s, 0.0, &mut rng, prov()).unwrap();
        assert!(snap.deltas().iter().all(|&d| d == 0.0));
        let real = reconstruct_weights(&s, &snap).unwrap();
        assert_eq!(real.bits_hash(), q.bits_hash());
    }

    #[test]
    fn single_device_shift() {
        let cfg = QuantConfig::default();
        let (s, q) = quantize_weights(&w(&[0.5, -2.0]), &cfg).unwrap();
        let delta = 0.37f32;
        let mut deltas = vec![0.0; 8];
        deltas[3] = delta; // weight 0, device j = 3
        deltas[7] = delta; // weight 1, device j = 3
        let snap = NoiseSnapshot::new(vec![2], 4, deltas, prov()).unwrap();
        let real = reconstruct_weights(&s, &snap).unwrap();
        let expect = 2.0 * 64.0 * delta as f64 / 255.0;
        assert!(((real.data()[0] - q.data()[0]) as f64 - expect).abs() < 1e-6);
        assert!(((real.data()[1] - q.data()[1]) as f64 + expect).abs() < 1e-6);
    }

    #[test]
    fn mismatched_snapshot_rejected() {
        let cfg = QuantConfig::default();
        let (s, _) = quantize_weights(&w(&[0.5, -2.0]), &cfg).unwrap();
        let snap = NoiseSnapshot::new(vec![1], 4, vec![0.0; 4], prov()).unwrap();
        assert!(reconstruct_weights(&s, &snap).is_err());
    }

    #[test]
    fn perturb_is_seed_deterministic_and_zero_sigma_quantizes() {
        let cfg = QuantConfig::default();
        let x = Tensor::from_fn(&[64], |i| (i as f32 * 0.37).sin());
        let (_, q) = quantize_weights(&x, &cfg).unwrap();
        let mut r = stream(0, Purpose::TrainNoise, 0, 0);
        assert_eq!(
            perturb_for_training(&x, 0.0, &cfg, NoiseSpace::Conductance, &mut r).unwrap(),
            q
        );
        let a = perturb_for_training(
            &x,
            0.1,
            &cfg,
            NoiseSpace::Conductance,
            &mut stream(5, Purpose::TrainNoise, 1, 1),
        )
        .unwrap();
        let b = perturb_for_training(
            &x,
            0.1,
            &cfg,
            NoiseSpace::Conductance,
            &mut stream(5, Purpose::TrainNoise, 1, 1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, q);
    }
}
