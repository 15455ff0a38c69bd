//! Error types shared across the solver stack.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// An expression could not be parsed from its string form.
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    /// A denominator vanished (within 1e-12) while evaluating an expression.
    #[error("domain error: denominator vanished at (s={s}, w={w})")]
    Domain { s: f64, w: f64 },

    /// Shape mismatch between declared and supplied data.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Problem data violates a structural precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Requested ensemble exceeds the configured memory budget.
    #[error("capacity error: {requested} samples exceed budget of {budget}")]
    Capacity { requested: usize, budget: usize },

    /// Regression design matrix is numerically singular.
    #[error("singular design: normal-equations condition {cond:.3e} exceeds 1e12")]
    SingularDesign { cond: f64 },

    /// Per-path implicit step matrix could not be inverted.
    #[error("linear solve failed at step {step}: (I + dt*A) singular")]
    LinearSolve { step: usize },

    /// A solver iterate left the admissible region.
    #[error("blow-up in {what}: norm {norm:.3e} exceeds 1e6 at step {step}")]
    Blowup {
        what: String,
        norm: f64,
        step: usize,
    },

    /// (I + Sigma N) or a similar required inverse is ill-conditioned.
    #[error("inversion error in {what}: condition {cond:.3e} exceeds 1e12")]
    Conditioning { what: String, cond: f64 },

    /// PSD ordering of the epsilon family is violated beyond tolerance.
    #[error("monotonicity violated: eigenvalue {min_eig:.3e} below -1e-6 between eps {eps_hi} and {eps_lo}")]
    Nonmonotone {
        eps_hi: f64,
        eps_lo: f64,
        min_eig: f64,
    },

    /// Zero denominator where a meaningful ratio was requested.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Iterative minimization did not reach tolerance.
    #[error("no convergence after {iters} iterations: residual {residual:.3e}")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Pipeline-stage context attached near the CLI boundary.
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl Error {
    /// Exit code used by the CLI: 2 for input problems, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

/// Attach a stage name to errors bubbling out of a pipeline step.
pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })
    }
}
