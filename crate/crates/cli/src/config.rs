use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poinf_core::attacker::AttackPolicy;
use poinf_core::he::Preset;
use poinf_core::leakage::GroupScheme;
use poinf_core::nn::{self, Dataset, NetworkSpec, Split, TrainConfig};
use poinf_core::packing::{ConvGrouping, FcPackingKind, Layout, Mode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub he: HeConfig,
    pub cost: CostConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub name: String,
    pub format: DataFormat,
    /// IDX: `[images, labels]`; CIFAR-10: one or more batch files.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Keep only the first N samples (0 keeps everything).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let dir = PathBuf::from("data/mnist-subset");
        Self {
            name: "mnist-subset".into(),
            format: DataFormat::Idx,
            train: vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")],
            test: vec![dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")],
            train_limit: 0,
            test_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `mnist-cnn`, `cifar-cnn`, or a path to a JSON network description.
    pub arch: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: "mnist-cnn".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub grid: Vec<f64>,
    /// `random` and/or `max-weight`.
    pub strategies: Vec<String>,
    /// `const(c)`, `mean`, `std-normal`, `fitted-normal`.
    pub policies: Vec<String>,
    pub hide_biases: bool,
    pub runs: usize,
    /// Train a fresh network for every run instead of attacking one model.
    pub retrain: bool,
    pub fc_packing: FcPackingKind,
    pub conv_grouping: ConvGrouping,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            strategies: vec!["random".into()],
            policies: vec!["const(0)".into()],
            hide_biases: true,
            runs: 10,
            retrain: false,
            fc_packing: FcPackingKind::Naive,
            conv_grouping: ConvGrouping::PerFilter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Exact,
    CostModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeConfig {
    pub backend: BackendChoice,
    /// `n12-d2`, `n13-d2`, `n13-d4`, `n14-d8`; empty picks the smallest preset that fits each layer.
    pub preset: String,
    pub mode: Mode,
    pub repetitions: usize,
}

impl Default for HeConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Exact,
            preset: String::new(),
            mode: Mode::RelinOnly,
            repetitions: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Fc {
        packing: FcPackingKind,
        inputs: usize,
        outputs: usize,
    },
    Conv {
        grouping: ConvGrouping,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        height: usize,
    },
}

impl LayerConfig {
    pub fn layout(&self) -> Layout {
        match *self {
            LayerConfig::Fc { packing, inputs, outputs } => Layout::fc(packing, inputs, outputs),
            LayerConfig::Conv {
                grouping,
                kernel,
                in_channels,
                out_channels,
                width,
                height,
            } => Layout::conv(grouping, kernel, in_channels, out_channels, width, height),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerConfig::Fc { packing, inputs, outputs } => format!("fc-{packing:?}({inputs},{outputs})").to_lowercase(),
            LayerConfig::Conv {
                grouping,
                kernel,
                in_channels,
                out_channels,
                width,
                height,
            } => format!("conv-{grouping:?}({kernel}x{kernel},{width}x{height}x{in_channels},{out_channels})").to_lowercase(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub grid: Vec<f64>,
    pub bias_hidden: bool,
    pub layers: Vec<LayerConfig>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            bias_hidden: false,
            layers: vec![
                LayerConfig::Fc {
                    packing: FcPackingKind::Naive,
                    inputs: 128,
                    outputs: 10,
                },
                LayerConfig::Conv {
                    grouping: ConvGrouping::PerFilter,
                    kernel: 3,
                    in_channels: 3,
                    out_channels: 32,
                    width: 32,
                    height: 32,
                },
            ],
        }
    }
}

/// A parsed config plus the directory its relative paths refer to.
pub struct Loaded {
    pub config: Config,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_path(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let config: Config = toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {}", p.display(), e.message()))?;
                (config, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Config::default(), PathBuf::new()),
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        if let Some(spec) = NetworkSpec::by_name(&self.config.model.arch) {
            return Ok(spec);
        }
        let path = self.resolve(Path::new(&self.config.model.arch));
        let text = std::fs::read_to_string(&path).with_context(|| format!("unknown architecture {:?}", self.config.model.arch))?;
        Ok(NetworkSpec::from_json(&text)?)
    }

    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let d = &self.config.data;
        let (paths, limit) = match split {
            Split::Train => (&d.train, d.train_limit),
            Split::Test => (&d.test, d.test_limit),
        };
        let paths: Vec<PathBuf> = paths.iter().map(|p| self.resolve(p)).collect();
        let data = match d.format {
            DataFormat::Idx => {
                let [images, labels] = paths.as_slice() else {
                    bail!("IDX data needs [images, labels] paths");
                };
                nn::load_idx(images, labels, split)?
            }
            DataFormat::Cifar10 => nn::load_cifar10(&paths, split)?,
        };
        Ok(if limit > 0 && limit < data.len() {
            data.subset(&(0..limit).collect::<Vec<_>>())
        } else {
            data
        })
    }

    pub fn schemes(&self, spec: &NetworkSpec) -> Vec<GroupScheme> {
        poinf_core::leakage::uniform_schemes(spec, self.config.attack.fc_packing, self.config.attack.conv_grouping)
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        for &p in self.attack.grid.iter().chain(&self.cost.grid) {
            if !(0.0..=1.0).contains(&p) {
                bail!("grid value {p} outside [0, 1]");
            }
        }
        if self.attack.runs == 0 {
            bail!("attack.runs must be at least 1");
        }
        for s in &self.attack.strategies {
            if !matches!(s.as_str(), "random" | "max-weight") {
                bail!("unknown strategy {s:?}");
            }
        }
        for p in &self.attack.policies {
            p.parse::<AttackPolicy>().map_err(anyhow::Error::msg)?;
        }
        if !self.he.preset.is_empty() && Preset::from_name(&self.he.preset).is_none() {
            bail!("unknown preset {:?}", self.he.preset);
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn policies(&self) -> Vec<AttackPolicy> {
        self.attack.policies.iter().map(|p| p.parse().expect("validated")).collect()
    }

    pub fn preset(&self) -> Option<Preset> {
        Preset::from_name(&self.he.preset)
    }

    /// SHA-256 of the canonical serialization of the effective config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
