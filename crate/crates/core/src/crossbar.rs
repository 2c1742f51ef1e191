//! Crossbar tiling, write-verify accounting and a coarse energy/latency model.
//!
//! A weight matrix with `R` inputs and `O` outputs occupies `R` rows and
//! `O * M/K` columns (each weight's devices sit in adjacent columns), once
//! on the positive and once on the negative array. Tiles never split one
//! weight's devices across crossbars.
//!
//! Cost model, per inference:
//! * dynamic energy: every read pass through a matrix activates all of its
//!   devices, `passes * devices * e_read`;
//! * static energy: `e_static` for each allocated crossbar;
//! * latency: layers run one after another, one pass per output pixel, all
//!   tiles of a layer in parallel. In the Common design the shared block has
//!   one crossbar, so its passes (pixels × groups per insertion) queue after
//!   the producing convolution. In the Separate design each insertion owns a
//!   copy that consumes pixels as the convolution produces them; it adds the
//!   pipeline fill (`groups` passes) plus any passes beyond the
//!   convolution's own count.
//!
//! One-time programming energy (writes plus verify cycles) is reported apart.

use serde::{Deserialize, Serialize};

use crate::device::QuantConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tsb::group_count;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// One copy of the block on a public crossbar, reused serially.
    #[default]
    Common,
    /// One copy per insertion point.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    pub design: Design,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        CrossbarConfig {
            rows: 128,
            cols: 128,
            design: Design::Common,
        }
    }
}

/// Placeholder coefficients; units are pJ and ns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub e_read: f64,
    pub e_static: f64,
    pub e_write: f64,
    pub e_verify: f64,
    pub t_pass: f64,
    pub verify_cycles: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            e_read: 0.001,
            e_static: 5.0,
            e_write: 1.0,
            e_verify: 0.5,
            t_pass: 10.0,
            verify_cycles: 10,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let c = [
            self.e_read,
            self.e_static,
            self.e_write,
            self.e_verify,
            self.t_pass,
        ];
        if c.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("cost coefficients must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn scaled_energy(&self, factor: f64) -> Self {
        CostModel {
            e_read: self.e_read * factor,
            e_static: self.e_static * factor,
            e_write: self.e_write * factor,
            e_verify: self.e_verify * factor,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

/// One weight matrix mapped onto crossbars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixPlacement {
    pub name: String,
    /// Input rows `R`.
    pub inputs: usize,
    /// Output columns `O` (weights per row).
    pub outputs: usize,
    pub devices_per_weight: usize,
    pub row_tiles: usize,
    /// Weights per crossbar column span.
    pub weights_per_tile: usize,
    pub col_tiles: usize,
    /// Index of this matrix's first crossbar in the allocation.
    pub first_crossbar: usize,
    /// Read passes per inference.
    pub passes: usize,
    pub verified: bool,
}

impl MatrixPlacement {
    pub fn weights(&self) -> usize {
        self.inputs * self.outputs
    }

    /// Both signs.
    pub fn devices(&self) -> usize {
        2 * self.devices_per_weight * self.weights()
    }

    pub fn crossbars(&self) -> usize {
        2 * self.row_tiles * self.col_tiles
    }

    /// `(crossbar, row, col)` holding device `j` of weight `(r, o)` on the given sign.
    pub fn locate(
        &self,
        r: usize,
        o: usize,
        j: usize,
        sign: Sign,
        cfg: &CrossbarConfig,
    ) -> (usize, usize, usize) {
        let (rt, row) = (r / cfg.rows, r % cfg.rows);
        let (ct, slot) = (o / self.weights_per_tile, o % self.weights_per_tile);
        let sign_off = match sign {
            Sign::Positive => 0,
            Sign::Negative => self.row_tiles * self.col_tiles,
        };
        (
            self.first_crossbar + sign_off + rt * self.col_tiles + ct,
            row,
            slot * self.devices_per_weight + j,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub config: CrossbarConfig,
    pub matrices: Vec<MatrixPlacement>,
    pub crossbars: usize,
    /// Per insertion: `(block passes, producing conv passes, groups)`.
    tsb_sites: Vec<(usize, usize, usize)>,
}

impl Allocation {
    pub fn devices(&self) -> usize {
        self.matrices.iter().map(|m| m.devices()).sum()
    }

    pub fn weights(&self) -> usize {
        self.matrices.iter().map(|m| m.weights()).sum()
    }

    pub fn tsb_copies(&self) -> usize {
        self.matrices.iter().filter(|m| m.verified).count()
    }
}

#[allow(clippy::too_many_arguments)]
fn place(
    name: String,
    inputs: usize,
    outputs: usize,
    passes: usize,
    verified: bool,
    per: usize,
    cfg: &CrossbarConfig,
    next: &mut usize,
) -> Result<MatrixPlacement> {
    let weights_per_tile = cfg.cols / per;
    if cfg.rows == 0 || weights_per_tile == 0 {
        return Err(Error::config(format!(
            "a {}x{} crossbar cannot hold a {per}-device weight",
            cfg.rows, cfg.cols
        )));
    }
    let m = MatrixPlacement {
        name,
        inputs,
        outputs,
        devices_per_weight: per,
        row_tiles: inputs.div_ceil(cfg.rows),
        weights_per_tile,
        col_tiles: outputs.div_ceil(weights_per_tile),
        first_crossbar: *next,
        passes,
        verified,
    };
    *next += m.crossbars();
    Ok(m)
}

/// Maps every conv/linear weight (and the block, per the design) onto crossbars.
pub fn tile_weights(model: &Model, quant: &QuantConfig, cfg: &CrossbarConfig) -> Result<Allocation> {
    quant.validate()?;
    let per = quant.devices_per_weight();
    let arch = model.arch();
    let shapes = arch.shapes()?;
    let mut next = 0;
    let mut matrices = Vec::new();
    let mut tsb_sites = Vec::new();
    let tsb = model.tsb();
    for (i, layer) in arch.layers.iter().enumerate() {
        let out = &shapes[i];
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let pixels = out[1] * out[2];
                matrices.push(place(
                    format!("layer{i}.conv"),
                    in_channels * kernel * kernel,
                    out_channels,
                    pixels,
                    false,
                    per,
                    cfg,
                    &mut next,
                )?);
                if let Some(t) = tsb.filter(|t| t.plan.contains(i)) {
                    let groups = group_count(out_channels, t.channels);
                    tsb_sites.push((pixels * groups, pixels, groups));
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => matrices.push(place(
                format!("layer{i}.linear"),
                in_features,
                out_features,
                1,
                false,
                per,
                cfg,
                &mut next,
            )?),
            _ => {}
        }
    }
    if let Some(t) = tsb {
        let depth = t.weight_ids.len();
        let copies = match cfg.design {
            Design::Common => vec![("tsb".to_string(), tsb_sites.iter().map(|s| s.0).sum())],
            Design::Separate => tsb_sites
                .iter()
                .enumerate()
                .map(|(k, s)| (format!("tsb.copy{k}"), s.0))
                .collect(),
        };
        for (name, passes) in copies {
            for d in 0..depth {
                matrices.push(place(
                    format!("{name}.{d}"),
                    t.channels,
                    t.channels,
                    passes,
                    true,
                    per,
                    cfg,
                    &mut next,
                )?);
            }
        }
    }
    Ok(Allocation {
        config: *cfg,
        matrices,
        crossbars: next,
        tsb_sites,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriteVerifyCount {
    /// Distinct block weights (independent of the design).
    pub weights: usize,
    /// Devices programmed with write-verify, both signs, all copies.
    pub devices: usize,
    pub cycles_per_device: usize,
    pub operations: usize,
}

pub fn count_write_verify(alloc: &Allocation, cost: &CostModel) -> WriteVerifyCount {
    let verified: Vec<&MatrixPlacement> = alloc.matrices.iter().filter(|m| m.verified).collect();
    let devices: usize = verified.iter().map(|m| m.devices()).sum();
    let weights = match alloc.config.design {
        Design::Common => verified.iter().map(|m| m.weights()).sum(),
        Design::Separate => {
            let copies = alloc.tsb_sites.len().max(1);
            verified.iter().map(|m| m.weights()).sum::<usize>() / copies
        }
    };
    WriteVerifyCount {
        weights,
        devices,
        cycles_per_device: cost.verify_cycles,
        operations: devices * cost.verify_cycles,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub energy: f64,
    pub latency: f64,
    pub edp: f64,
    /// One-time programming energy, not part of `energy`.
    pub write_energy: f64,
}

pub fn estimate_costs(alloc: &Allocation, cost: &CostModel) -> Result<CostReport> {
    cost.validate()?;
    let dynamic: f64 = alloc
        .matrices
        .iter()
        .map(|m| (m.passes * m.devices()) as f64 * cost.e_read)
        .sum();
    let energy = dynamic + alloc.crossbars as f64 * cost.e_static;
    let backbone_passes: usize = alloc
        .matrices
        .iter()
        .filter(|m| !m.verified)
        .map(|m| m.passes)
        .sum();
    let tsb_depth = match alloc.tsb_copies() {
        0 => 0,
        n => {
            n / match alloc.config.design {
                Design::Common => 1,
                Design::Separate => alloc.tsb_sites.len().max(1),
            }
        }
    };
    let tsb_passes: usize = alloc
        .tsb_sites
        .iter()
        .map(|&(tsb, conv, groups)| match alloc.config.design {
            Design::Common => tsb * tsb_depth,
            Design::Separate => groups * tsb_depth + tsb.saturating_sub(conv),
        })
        .sum();
    let latency = (backbone_passes + tsb_passes) as f64 * cost.t_pass;
    let wv = count_write_verify(alloc, cost);
    let write_energy = alloc.devices() as f64 * cost.e_write + wv.operations as f64 * cost.e_verify;
    Ok(CostReport {
        energy,
        latency,
        edp: energy * latency,
        write_energy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub design: String,
    pub crossbars: usize,
    pub devices: usize,
    pub write_verify_operations: usize,
    pub energy: f64,
    pub latency: f64,
    pub edp: f64,
    pub write_energy: f64,
}

/// Baseline (block removed), Common and Separate costs for one model.
pub fn overhead_table(
    model: &Model,
    quant: &QuantConfig,
    rows: usize,
    cols: usize,
    cost: &CostModel,
) -> Result<Vec<OverheadRow>> {
    let mut base_model = model.clone();
    base_model.remove_tsb();
    let mut out = Vec::new();
    for (label, m, design) in [
        ("baseline", &base_model, Design::Common),
        ("common", model, Design::Common),
        ("separate", model, Design::Separate),
    ] {
        let alloc = tile_weights(m, quant, &CrossbarConfig { rows, cols, design })?;
        let c = estimate_costs(&alloc, cost)?;
        out.push(OverheadRow {
            design: label.into(),
            crossbars: alloc.crossbars,
            devices: alloc.devices(),
            write_verify_operations: count_write_verify(&alloc, cost).operations,
            energy: c.energy,
            latency: c.latency,
            edp: c.edp,
            write_energy: c.write_energy,
        });
    }
    Ok(out)
}
