//! Report types written as JSON artifacts, and the deterministic config hash
//! stamped into every artifact.

use serde::Serialize;

use crate::cost::{CostBreakdown, QuadraticExpansion};
use crate::decouple::FbsdeResiduals;
use crate::problem::AssumptionReport;

/// FNV-1a 64-bit hash; stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn config_hash(parts: &[&str]) -> String {
    let joined = parts.join("\u{1f}");
    format!("{:016x}", fnv1a64(joined.as_bytes()))
}

/// Verification outcome: residuals, oracle comparison, and pass flags at the
/// pinned tolerances.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// L2 norm of R u* - B^T X with X re-solved from the coupled system.
    pub stationarity_residual: f64,
    /// Same norm along the construction path (algebraic identity).
    pub stationarity_construction: f64,
    /// Largest |linear coefficient| over the tested directions.
    pub quadratic_expansion_linear_coeff: f64,
    pub quadratic_expansions: Vec<QuadraticExpansion>,
    /// L2 distance between the Riccati control and the CG minimizer on the
    /// oracle configuration (common random numbers).
    pub oracle_control_distance: f64,
    pub oracle_control_norm: f64,
    /// J(u_riccati) - J(u_oracle) on the oracle configuration.
    pub cost_gap: f64,
    /// Value-function estimate J(u*) on the main configuration.
    pub value: f64,
    pub value_stderr: f64,
    pub pass_stationarity: bool,
    pub pass_variational: bool,
    pub pass_oracle: bool,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.pass_stationarity && self.pass_variational && self.pass_oracle
    }
}

/// report.json written by the solve command.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub config_hash: String,
    pub seed: u64,
    pub route: String,
    pub steps: usize,
    pub paths: usize,
    pub degree: usize,
    pub assumptions: AssumptionReport,
    pub control_l2_norm: f64,
    pub cost: CostBreakdown,
    pub fbsde: FbsdeResiduals,
}

/// verify_report.json written by the verify command.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReportFile {
    pub config_hash: String,
    pub seed: u64,
    pub route: String,
    pub verification: VerificationReport,
    pub fbsde: FbsdeResiduals,
    pub pass_fbsde: bool,
    pub fixed_point_residual: f64,
    pub fixed_point_tolerance: f64,
    pub pass_fixed_point: bool,
    pub overall_pass: bool,
}

/// eps_table.json written by the eps-study command.
#[derive(Debug, Clone, Serialize)]
pub struct EpsTableFile {
    pub config_hash: String,
    pub seed: u64,
    pub eps: Vec<f64>,
    pub sup_diffs: Vec<f64>,
    pub monotone_ok: Vec<bool>,
    pub all_monotone: bool,
    pub worst_violation: f64,
}
