//! Planar rigid-body pushing simulation and mechanical model identification.
//!
//! An unknown table-top object is modeled as `k` rigidly joined square cells,
//! each with its own mass, moment of inertia, and support-surface friction
//! magnitude. One dynamics step solves a mixed linear complementarity problem
//! coupling the rigid joints, an optional pusher contact, and a linearized
//! Coulomb friction cone per cell. The identification engine recovers the
//! per-cell parameters from observed push trajectories by descending an
//! analytic gradient of the trajectory mismatch, and ships random-search,
//! weighted-sampling, and finite-difference baselines for comparison.
//!
//! Module map:
//! - [`model`] — geometry, parameters, states, actions, trajectories
//! - [`lcp`] — mixed LCP assembly and projected Gauss-Seidel solve
//! - [`dynamics`] — constraint Jacobians, single step, rollout
//! - [`ident`] — loss, analytic gradient, descent loop, baselines
//! - [`scen`] — synthetic scenarios, dataset files, train/test splits

pub mod dynamics;
pub mod ident;
pub mod lcp;
pub mod model;
pub mod par;
pub mod scen;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("solver did not converge after {iterations} iterations (complementarity residual {residual:.3e})")]
    SolverNoConvergence { iterations: usize, residual: f64 },

    #[error("simulation failed at action {action_index}, step {step}: {source}")]
    SimulationFailed {
        action_index: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("zero simulation budget")]
    ZeroBudget,

    #[error("identification diverged at epoch {epoch}: loss {loss:.6e} exceeds {factor}x initial loss {initial:.6e}")]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
        factor: f64,
        report: Box<ident::IdentReport>,
    },

    #[error("unknown archetype '{name}' (expected one of: {known})")]
    UnknownArchetype { name: String, known: String },

    #[error("unsupported dataset schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("dataset parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
