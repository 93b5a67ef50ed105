//! Synthetic designs, Monte Carlo ground truth and the benchmark protocol.

mod bench;
mod dgp;
mod oracle;

pub use bench::{
    benchmark_specs, normalized_rmse, relative_efficiency_mc, run_benchmark, BenchmarkConfig, BenchmarkResult, ErrorRow,
    RelativeEfficiencyCurve, RelativeEfficiencyPoint,
};
pub use dgp::{design_outcome_mean, design_propensity, simulate, truncated_standard_normal, DgpConfig, DgpKind};
pub use oracle::{oracle_specs, true_psi_oracle, TruthPoint};
