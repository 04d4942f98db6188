//! Experiment configuration, read from TOML.
//!
//! ```toml
//! method = "fedcpf"          # required
//! n_clients = 5
//! rounds = 100
//! seed = 1
//! output_dir = "runs/demo"   # optional
//!
//! [hyper]
//! p = 0.05
//! rho = 0.5
//! acc = 0.05
//! local_epochs = 1
//! lr = 0.05
//! freeze_mode = "aggregation-freeze"   # or "hard-freeze"
//! batch_size = 0                       # 0 = full local batch
//!
//! [model]
//! phi = 4
//! d_model = 16
//! d_attn = 16
//! n_classes = 5
//! lambda = 1e8
//! input_dim = 8
//!
//! [data]
//! mode = "label_skew"        # or "feature_shift"
//! alpha = 0.5
//! rotation_angle = 0.3
//! samples_per_client = 100
//! noise_std = 0.5
//! export = false
//!
//! [baseline]
//! mu = 0.1
//! fedavg_weighted = true
//! freeze_seed = 7            # optional, defaults to `seed`
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::data::{SkewMode, SkewSpec};
use crate::error::{Error, Result};
use crate::mask_upgrade::HyperParams;
use crate::model::TokenModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedcpf,
    LocalOnly,
    Fedavg,
    Fedprox,
    SingleRoundSelect,
    RandomFreeze,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fedcpf,
        Method::LocalOnly,
        Method::Fedavg,
        Method::Fedprox,
        Method::SingleRoundSelect,
        Method::RandomFreeze,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fedcpf => "fedcpf",
            Method::LocalOnly => "local_only",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::SingleRoundSelect => "single_round_select",
            Method::RandomFreeze => "random_freeze",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mode: SkewMode,
    pub alpha: f64,
    pub rotation_angle: f64,
    pub samples_per_client: usize,
    pub noise_std: f64,
    /// Also write every generated sample to `partition.jsonl`.
    pub export: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: SkewMode::LabelSkew,
            alpha: 0.5,
            rotation_angle: 0.3,
            samples_per_client: 100,
            noise_std: 0.5,
            export: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub mu: f64,
    pub fedavg_weighted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_seed: Option<u64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            fedavg_weighted: true,
            freeze_seed: None,
        }
    }
}

fn default_n_clients() -> usize {
    5
}

fn default_rounds() -> usize {
    100
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub model: TokenModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl ExperimentConfig {
    /// All defaults for the given method.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            n_clients: default_n_clients(),
            rounds: default_rounds(),
            seed: default_seed(),
            output_dir: None,
            hyper: HyperParams::default(),
            model: TokenModelConfig::default(),
            data: DataConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The config with every default written out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        self.hyper.validate()?;
        self.model.validate()?;
        self.skew_spec().validate()?;
        if let Some(kind) = self.baseline_kind() {
            kind.validate()?;
        }
        Ok(())
    }

    pub fn skew_spec(&self) -> SkewSpec {
        SkewSpec {
            mode: self.data.mode,
            alpha: self.data.alpha,
            rotation_angle: self.data.rotation_angle,
            n_classes: self.model.n_classes,
            samples_per_client: self.data.samples_per_client,
            input_dim: self.model.input_dim,
            phi: self.model.phi,
            noise_std: self.data.noise_std,
        }
    }

    /// `None` for FedCPF itself.
    pub fn baseline_kind(&self) -> Option<BaselineKind> {
        let weighted = self.baseline.fedavg_weighted;
        match self.method {
            Method::Fedcpf => None,
            Method::LocalOnly => Some(BaselineKind::LocalOnly),
            Method::Fedavg => Some(BaselineKind::Fedavg { weighted }),
            Method::Fedprox => Some(BaselineKind::Fedprox {
                mu: self.baseline.mu,
                weighted,
            }),
            Method::SingleRoundSelect => Some(BaselineKind::SingleRoundSelect),
            Method::RandomFreeze => Some(BaselineKind::RandomFreeze {
                seed: self.baseline.freeze_seed.unwrap_or(self.seed),
            }),
        }
    }
}
