//! Finite-horizon linear-quadratic optimal control with singular control
//! weights.
//!
//! The solver classifies a problem as regular or irregular by testing whether
//! the range of `B'P` stays inside the range of `R` along the horizon. Regular
//! problems get the classical pseudoinverse feedback. Irregular problems go
//! through a second optimization layer: a reduced system is extracted from the
//! null space of `R`, a second Riccati-like equation `P1` is integrated
//! backward from a terminal value chosen so the layer-two consistency residual
//! vanishes, and controllers (open-loop via a controllability Gramian,
//! closed-loop via a time-singular gain) are synthesized so the terminal
//! constraint `P1(T) x(T) = 0` holds.
//!
//! Modules:
//! * [`linalg`] — pseudoinverse, range inclusion, linear matrix equations,
//!   projector decomposition
//! * [`model`] — problem definition, fixtures, JSON problem files
//! * [`integrate`] — matrix ODE integration (RK4), transition matrices,
//!   quadrature
//! * [`reduce`] — regular/irregular classification and reduced-system data
//! * [`synth`] — controller synthesis (regular, open-loop, closed-loop)
//! * [`sim`] — forward simulation, cost evaluation, residual audits
//! * [`oracle`] — brute-force discrete transcription cross-check
//! * [`pipeline`] — end-to-end solve driver and report assembly

pub mod integrate;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod reduce;
pub mod sim;
pub mod synth;

/// Fault-style failures. Verdicts (no solution, not open-loop solvable,
/// no gain found) are ordinary values, not errors.
#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    /// Malformed or inadmissible input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// An integration produced a non-finite value.
    #[error("{what} diverged at node {node} (t = {time})")]
    Divergence {
        what: &'static str,
        node: usize,
        time: f64,
    },

    /// A matrix that must be inverted is numerically singular.
    #[error("ill-conditioned: {0}")]
    Conditioning(String),

    /// rank(R(t)) changes over the horizon; the reduced input dimension
    /// would vary, which is unsupported.
    #[error("unsupported rank variation: {0}")]
    RankVariation(String),

    /// An operation was called outside its contract.
    #[error("misuse: {0}")]
    Misuse(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;
