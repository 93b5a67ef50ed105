//! Run configurations. Each command reads an optional JSON file into its
//! config struct; command-line flags then override individual keys.

use std::fs;
use std::path::{Path, PathBuf};

use ipsi_core::estimator::EstimatorKind;
use ipsi_core::intervention::{default_grid, DeltaGrid, Spacing};
use ipsi_core::panel::CsvSchema;
use ipsi_core::simulation::{benchmark_specs, DgpConfig, DgpKind};
use ipsi_core::NuisanceSpecs;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
}

/// Either explicit values or an evenly spaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Spaced {
        lo: f64,
        hi: f64,
        count: usize,
        #[serde(default = "log_spacing")]
        spacing: Spacing,
    },
}

fn log_spacing() -> Spacing {
    Spacing::Log
}

impl GridSpec {
    pub fn build(&self) -> Result<DeltaGrid, CliError> {
        let grid = match self {
            GridSpec::Values(v) => DeltaGrid::new(v.clone()),
            GridSpec::Spaced { lo, hi, count, spacing } => DeltaGrid::spaced(*lo, *hi, *count, *spacing),
        };
        grid.map_err(CliError::from)
    }

    /// `0.5,1,2` lists values; `log:0.1:5:25` or `linear:0.5:2:4` gives a range.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Input(format!("cannot parse grid '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() == 4 {
            let spacing = match parts[0] {
                "log" => Spacing::Log,
                "linear" => Spacing::Linear,
                _ => return Err(bad()),
            };
            return Ok(GridSpec::Spaced {
                lo: parts[1].parse().map_err(|_| bad())?,
                hi: parts[2].parse().map_err(|_| bad())?,
                count: parts[3].parse().map_err(|_| bad())?,
                spacing,
            });
        }
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()
            .map(GridSpec::Values)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Values(default_grid().values().to_vec())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub t: Option<usize>,
    pub folds: usize,
    pub seed: Option<u64>,
    pub grid: GridSpec,
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub bootstrap: usize,
    pub learners: NuisanceSpecs,
    pub schema: CsvSchema,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            input: None,
            out_dir: None,
            t: None,
            folds: 5,
            seed: None,
            grid: GridSpec::default(),
            estimator: EstimatorKind::CrossFit,
            alpha: 0.05,
            bootstrap: 1000,
            learners: NuisanceSpecs::default(),
            schema: CsvSchema::default(),
        }
    }
}

/// DGP name plus the parameter each family needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: String,
    pub u_l: f64,
    pub p: f64,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            kind: "dropout".into(),
            u_l: 1.0,
            p: 0.5,
            n: 1000,
            horizon: 10,
        }
    }
}

impl DgpSpec {
    pub fn build(&self, seed: u64) -> Result<DgpConfig, CliError> {
        let kind = match self.kind.as_str() {
            "dropout" | "dropout_sim" => DgpKind::DropoutSim { u_l: self.u_l },
            "trial" => DgpKind::Trial { p: self.p },
            "observational" => DgpKind::Observational,
            other => return Err(CliError::Input(format!("unknown DGP kind '{other}'"))),
        };
        let cfg = DgpConfig {
            kind,
            n: self.n,
            horizon: self.horizon,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub dgp: DgpSpec,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub grid: GridSpec,
    pub estimators: Vec<EstimatorKind>,
    pub folds: usize,
    pub truth_draws: usize,
    pub seed: Option<u64>,
    pub sqrt: bool,
    pub learners: NuisanceSpecs,
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dgp: DgpSpec::default(),
            replications: 50,
            grid: GridSpec::Spaced {
                lo: 0.1,
                hi: 5.0,
                count: 9,
                spacing: Spacing::Log,
            },
            estimators: vec![
                EstimatorKind::CrossFit,
                EstimatorKind::Plugin,
                EstimatorKind::Ipw,
                EstimatorKind::NoCensoring,
            ],
            folds: 5,
            truth_draws: 200_000,
            seed: None,
            sqrt: true,
            learners: benchmark_specs(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencyConfig {
    pub delta: f64,
    pub p: f64,
    pub tmax: usize,
    pub variant: ipsi_core::efficiency::Variant,
    pub out_dir: Option<PathBuf>,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        Self {
            delta: 2.0,
            p: 0.5,
            tmax: 12,
            variant: ipsi_core::efficiency::Variant::AlwaysTreated,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub input: Option<PathBuf>,
    pub schema: CsvSchema,
}

pub fn require<T>(value: Option<T>, key: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Input(format!("missing required setting '{key}'")))
}
