//! Run configuration: benchmark/method ids and per-benchmark defaults.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationMethod;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    Permuted,
    Imbalanced,
    Split,
}

impl FromStr for BenchmarkId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(BenchmarkId::Permuted),
            "imbalanced" => Ok(BenchmarkId::Imbalanced),
            "split" => Ok(BenchmarkId::Split),
            other => Err(Error::Config(format!("unknown benchmark '{other}'"))),
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchmarkId::Permuted => "permuted",
            BenchmarkId::Imbalanced => "imbalanced",
            BenchmarkId::Split => "split",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodId {
    Finetune,
    Dhp,
    Si,
    DhpSi,
    OnlineEwc,
    DhpOnlineEwc,
    Mas,
    DhpMas,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::Finetune,
        MethodId::Dhp,
        MethodId::Si,
        MethodId::DhpSi,
        MethodId::OnlineEwc,
        MethodId::DhpOnlineEwc,
        MethodId::Mas,
        MethodId::DhpMas,
    ];

    pub fn uses_dhp(self) -> bool {
        matches!(
            self,
            MethodId::Dhp | MethodId::DhpSi | MethodId::DhpOnlineEwc | MethodId::DhpMas
        )
    }

    pub fn consolidation(self) -> ConsolidationMethod {
        match self {
            MethodId::Finetune | MethodId::Dhp => ConsolidationMethod::None,
            MethodId::Si | MethodId::DhpSi => ConsolidationMethod::Si,
            MethodId::OnlineEwc | MethodId::DhpOnlineEwc => ConsolidationMethod::OnlineEwc,
            MethodId::Mas | MethodId::DhpMas => ConsolidationMethod::Mas,
        }
    }
}

impl FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(MethodId::Finetune),
            "dhp" => Ok(MethodId::Dhp),
            "si" => Ok(MethodId::Si),
            "dhp+si" => Ok(MethodId::DhpSi),
            "online_ewc" => Ok(MethodId::OnlineEwc),
            "dhp+online_ewc" => Ok(MethodId::DhpOnlineEwc),
            "mas" => Ok(MethodId::Mas),
            "dhp+mas" => Ok(MethodId::DhpMas),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodId::Finetune => "finetune",
            MethodId::Dhp => "dhp",
            MethodId::Si => "si",
            MethodId::DhpSi => "dhp+si",
            MethodId::OnlineEwc => "online_ewc",
            MethodId::DhpOnlineEwc => "dhp+online_ewc",
            MethodId::Mas => "mas",
            MethodId::DhpMas => "dhp+mas",
        })
    }
}

impl Serialize for MethodId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub benchmark: BenchmarkId,
    pub method: MethodId,
    pub seed: u64,
    pub trials: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub n_tasks: usize,
    pub lambda: f64,
    pub xi: f64,
    pub gamma: f64,
    pub eta0: f64,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Leave task 1 unpermuted in the permuted benchmarks.
    pub identity_first: bool,
    pub clamp_eta: bool,
    /// Differentiate the trace update back into the hidden activations.
    pub hebb_grad_full: bool,
    /// CI profile: 2 epochs/task over a 10k-sample train subset.
    pub fast: bool,
    /// Train on a generated dataset instead of MNIST files.
    pub synthetic: bool,
    pub eval_batch: usize,
    pub log_every: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::defaults(BenchmarkId::Permuted, MethodId::Dhp)
    }
}

impl RunConfig {
    /// Per-benchmark, per-method default hyperparameters.
    pub fn defaults(benchmark: BenchmarkId, method: MethodId) -> Self {
        let consolidation = method.consolidation();
        let lambda = match (benchmark, consolidation) {
            (_, ConsolidationMethod::None) => 0.0,
            (BenchmarkId::Permuted, ConsolidationMethod::OnlineEwc) => 100.0,
            (BenchmarkId::Permuted, ConsolidationMethod::Si) => 0.1,
            (BenchmarkId::Permuted, ConsolidationMethod::Mas) => 0.1,
            (BenchmarkId::Imbalanced, ConsolidationMethod::OnlineEwc) => 400.0,
            (BenchmarkId::Imbalanced, ConsolidationMethod::Si) => 1.0,
            (BenchmarkId::Imbalanced, ConsolidationMethod::Mas) => 0.1,
            (BenchmarkId::Split, ConsolidationMethod::OnlineEwc) => 400.0,
            (BenchmarkId::Split, ConsolidationMethod::Si) => 1.0,
            (BenchmarkId::Split, ConsolidationMethod::Mas) => 1.5,
        };
        let xi = match benchmark {
            BenchmarkId::Split => 0.001,
            _ => 0.1,
        };
        let (hidden, epochs, n_tasks) = match benchmark {
            BenchmarkId::Split => (vec![256, 256], 10, 5),
            _ => (vec![400, 400], 20, 10),
        };
        RunConfig {
            benchmark,
            method,
            seed: 1,
            trials: 1,
            lr: 0.01,
            batch_size: 64,
            epochs_per_task: epochs,
            n_tasks,
            lambda,
            xi,
            gamma: 1.0,
            eta0: 0.001,
            hidden,
            leaky_slope: 0.3,
            identity_first: false,
            clamp_eta: true,
            hebb_grad_full: false,
            fast: false,
            synthetic: false,
            eval_batch: 512,
            log_every: 100,
            data_dir: None,
            out_dir: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || self.batch_size == 0
            || self.epochs_per_task == 0
            || self.n_tasks == 0
            || self.trials == 0
            || self.eval_batch == 0
            || self.log_every == 0
        {
            return Err(Error::Config(
                "lr, batch_size, epochs_per_task, n_tasks, trials, eval_batch and log_every must be positive".into(),
            ));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || !(0.0..=1.0).contains(&self.eta0) {
            return Err(Error::Config(
                "lambda and gamma must be nonnegative, eta0 in [0,1]".into(),
            ));
        }
        if self.method.consolidation() == ConsolidationMethod::Si && self.xi <= 0.0 {
            return Err(Error::Config("SI requires xi > 0".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Effective epochs per task under the current profile.
    pub fn effective_epochs(&self) -> usize {
        if self.fast {
            2
        } else {
            self.epochs_per_task
        }
    }

    /// Training subset cap under the fast profile.
    pub fn train_cap(&self) -> Option<usize> {
        if self.fast {
            Some(10_000)
        } else {
            None
        }
    }
}
