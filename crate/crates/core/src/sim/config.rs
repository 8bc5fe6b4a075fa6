use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::cost::CostParams;
use crate::datagen::{ClientLayout, SizeProfile, SuiteSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, SgdConfig, TrunkArch};
use crate::partition::DEFAULT_MAX_TASKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mas,
    AllInOne,
    OneByOne,
    Standalone,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mas => "mas",
            Method::AllInOne => "all_in_one",
            Method::OneByOne => "one_by_one",
            Method::Standalone => "standalone",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mas" => Ok(Method::Mas),
            "all_in_one" => Ok(Method::AllInOne),
            "one_by_one" => Ok(Method::OneByOne),
            "standalone" => Ok(Method::Standalone),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Trunk widths; the input width comes from the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            hidden: vec![16, 3],
            activation: Activation::Tanh,
        }
    }
}

/// Everything a run depends on. Serialized into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub suite: SuiteSpec,
    pub trunk: TrunkConfig,
    /// Total clients `N`.
    pub clients: usize,
    /// Clients selected per round `K`.
    pub select: usize,
    /// Local epochs `E`.
    pub epochs: usize,
    /// Total rounds `R`.
    pub rounds: usize,
    /// All-in-one rounds before splitting.
    pub r0: usize,
    /// 1-based round whose server affinity matrix drives the split.
    pub score_round: usize,
    /// Number of splits `x`.
    pub splits: usize,
    /// Measure affinity every `rho` batches; 0 disables measurement.
    pub rho: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sizes: SizeProfile,
    pub test_fraction: f64,
    /// Weight client affinity matrices by dataset size instead of uniformly.
    pub weighted_affinity: bool,
    /// Give each split its own disjoint client pool and run splits concurrently.
    pub disjoint_split_pools: bool,
    /// Allow fewer than `splits` blocks when that scores higher.
    pub splits_at_most: bool,
    pub max_partition_tasks: usize,
    pub cost: CostParams,
    /// Load frozen client data from an exported suite directory.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let clients = 32;
        ExperimentConfig {
            method: Method::Mas,
            seed: 0,
            suite: SuiteSpec::clustered(&[3, 3], 0.9),
            trunk: TrunkConfig::default(),
            clients,
            select: 4,
            epochs: 1,
            rounds: 100,
            r0: 30,
            score_round: 10,
            splits: 2,
            rho: 5,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            sizes: SizeProfile::Skewed {
                total: clients * 250,
                ratio: 4.5,
            },
            test_fraction: 0.2,
            weighted_affinity: false,
            disjoint_split_pools: false,
            splits_at_most: false,
            max_partition_tasks: DEFAULT_MAX_TASKS,
            cost: CostParams::default(),
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn trunk_arch(&self) -> TrunkArch {
        TrunkArch {
            input_dim: self.suite.input_dim,
            hidden: self.trunk.hidden.clone(),
            activation: self.trunk.activation,
        }
    }

    pub fn client_layout(&self) -> ClientLayout {
        ClientLayout {
            clients: self.clients,
            sizes: self.sizes.clone(),
            test_fraction: self.test_fraction,
            batch_size: self.batch_size,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.suite.tasks.len()
    }

    /// Checks the cross-field constraints; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if self.select == 0 || self.select > self.clients {
            return Err(Error::config(
                "select",
                format!("must lie in 1..={} (clients)", self.clients),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.r0 > self.rounds {
            return Err(Error::config(
                "r0",
                format!("must not exceed rounds ({})", self.rounds),
            ));
        }
        if self.score_round > self.r0 {
            return Err(Error::config(
                "score_round",
                format!("must not exceed r0 ({})", self.r0),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.trunk.hidden.contains(&0) {
            return Err(Error::config("trunk.hidden", "widths must be positive"));
        }
        let n = self.num_tasks();
        if self.method == Method::Mas {
            if self.splits < 2 || self.splits > n {
                return Err(Error::config(
                    "splits",
                    format!("must lie in 2..={n} for mas"),
                ));
            }
            if self.score_round == 0 {
                return Err(Error::config("score_round", "must be at least 1 for mas"));
            }
            if self.rho == 0 {
                return Err(Error::config(
                    "rho",
                    "mas needs affinity measurement (rho > 0)",
                ));
            }
            if n > self.max_partition_tasks {
                return Err(Error::config(
                    "max_partition_tasks",
                    format!(
                        "{n} tasks exceed the enumeration guard {}",
                        self.max_partition_tasks
                    ),
                ));
            }
        }
        Ok(())
    }
}
