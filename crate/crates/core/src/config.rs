//! Run configuration: one JSON document, every field defaulted to the
//! LeNet-3 / MNIST run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossbar::{CostModel, CrossbarConfig};
use crate::data::{ingest_cifar10, ingest_mnist, resolve_data_dir, DatasetKind, Splits};
use crate::device::{QuantConfig, VariationParams};
use crate::error::{Error, Result};
use crate::eval::{AblationKind, McConfig};
use crate::nn::{Architecture, RetrainScope, VggProfile};
use crate::pipeline::TrainConfig;
use crate::tsb::{InsertionPlan, MAX_DEPTH};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Lenet3,
    Vgg8Small,
    Vgg8,
}

impl ModelKind {
    pub fn architecture(self) -> Architecture {
        match self {
            ModelKind::Lenet3 => Architecture::lenet3(),
            ModelKind::Vgg8Small => Architecture::vgg8(VggProfile::Small),
            ModelKind::Vgg8 => Architecture::vgg8(VggProfile::Full),
        }
    }

    pub fn dataset(self) -> DatasetKind {
        match self {
            ModelKind::Lenet3 => DatasetKind::Mnist,
            _ => DatasetKind::Cifar10,
        }
    }

    pub fn default_tsb_channels(self) -> usize {
        match self {
            ModelKind::Lenet3 => 5,
            ModelKind::Vgg8Small => 64,
            ModelKind::Vgg8 => 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; falls back to `$NVCIM_DATA_DIR/<mnist|cifar10>`.
    pub dir: Option<PathBuf>,
    /// Keep only the first samples of the training file (before the split).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsbConfig {
    /// Channel capacity; `None` picks the model's default.
    pub channels: Option<usize>,
    pub depth: usize,
    /// Conv layer indices; `None` means after every convolution.
    pub plan: Option<Vec<usize>>,
}

impl Default for TsbConfig {
    fn default() -> Self {
        TsbConfig {
            channels: None,
            depth: 1,
            plan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub kind: AblationKind,
    /// Empty picks a grid for the kind.
    pub grid: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            kind: AblationKind::TsbChannels,
            grid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub data: DataConfig,
    pub quant: QuantConfig,
    pub variation: VariationParams,
    pub train: TrainConfig,
    pub mc: McConfig,
    pub crossbar: CrossbarConfig,
    pub cost: CostModel,
    pub tsb: TsbConfig,
    pub baseline_scope: RetrainScope,
    pub ablation: AblationConfig,
    /// Reference accuracy for distances; `None` uses the noise-free
    /// accuracy of the trained backbone.
    pub ideal_accuracy: Option<f64>,
    /// Seed for initialization, data order and training noise.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::default(),
            data: DataConfig::default(),
            quant: QuantConfig::default(),
            variation: VariationParams::default(),
            train: TrainConfig::default(),
            mc: McConfig::default(),
            crossbar: CrossbarConfig::default(),
            cost: CostModel::default(),
            tsb: TsbConfig::default(),
            baseline_scope: RetrainScope::LastLayer,
            ablation: AblationConfig::default(),
            ideal_accuracy: None,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.variation.validate()?;
        self.train.validate()?;
        self.mc.validate()?;
        self.cost.validate()?;
        if !(1..=MAX_DEPTH).contains(&self.tsb.depth) {
            return Err(Error::config(format!("TSB depth must be in 1..={MAX_DEPTH}")));
        }
        if self.tsb_channels() == 0 {
            return Err(Error::config("TSB channel capacity must be positive"));
        }
        self.architecture().validate_plan(&self.insertion_plan())?;
        Ok(())
    }

    /// Sets the training, snapshot and Monte Carlo seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.variation.seed = seed;
        self.mc.seed = seed;
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture()
    }

    pub fn tsb_channels(&self) -> usize {
        self.tsb
            .channels
            .unwrap_or_else(|| self.model.default_tsb_channels())
    }

    pub fn insertion_plan(&self) -> InsertionPlan {
        match &self.tsb.plan {
            Some(p) => InsertionPlan::new(p.clone()),
            None => self.architecture().default_insertion_plan(),
        }
    }

    pub fn load_data(&self) -> Result<Splits> {
        let kind = self.model.dataset();
        let dir = resolve_data_dir(self.data.dir.as_deref(), kind)?;
        let mut splits = match kind {
            DatasetKind::Mnist => ingest_mnist(&dir, self.seed)?,
            DatasetKind::Cifar10 => {
                ingest_cifar10(&dir, self.seed, self.data.train_limit, self.data.test_limit)?
            }
        };
        if kind == DatasetKind::Mnist {
            if let Some(n) = self.data.train_limit {
                splits.train = splits.train.head(n);
            }
            if let Some(n) = self.data.test_limit {
                splits.test = splits.test.head(n);
            }
        }
        Ok(splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "variation": {"sigma_backbone": 0.05}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.variation.sigma_backbone, 0.05);
        assert_eq!(cfg.variation.sigma_verified, 0.004);
        assert_eq!(cfg.mc.runs, 200);
        assert_eq!(cfg.tsb_channels(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(1);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn bad_plan_rejected() {
        let mut cfg = RunConfig::default();
        cfg.tsb.plan = Some(vec![2]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
