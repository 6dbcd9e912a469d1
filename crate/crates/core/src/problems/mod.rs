//! Constrained problems `min c(y) s.t. g(x, y) = 0, h(x, y) <= 0`.
//!
//! Every problem evaluates its residuals twice: as plain `f64` code used for
//! metrics and selection, and as a batched recording on an autodiff [`Tape`]
//! used by training. The two paths are written independently and tested
//! against each other.

pub mod acopf;
pub mod qp;

use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::{Matrix, NodeId, Tape};

pub use acopf::{AcopfCase, AcopfDecision, AcopfProblem};
pub use qp::QpProblem;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid problem parameters: {0}")]
    InvalidParameters(String),
    #[error("KKT system is singular")]
    SingularKkt,
    #[error("malformed record: {0}")]
    Record(String),
    #[error("case file {path}: {message}")]
    Case { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// Closed interval bound on one output coordinate; infinite ends mean unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub const FREE: Bound = Bound {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// A named contiguous block of the output vector, predicted by one sub-network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputGroup {
    pub label: String,
    pub len: usize,
}

/// Equality and inequality residual nodes for a batch recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeResiduals {
    /// `batch x eq_count`
    pub eq: NodeId,
    /// `batch x ineq_count`
    pub ineq: NodeId,
}

/// One dataset record: an input, optionally a solved output and its objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub objective: Option<f64>,
}

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eq_count(&self) -> usize;
    fn ineq_count(&self) -> usize;

    /// Objective value. The input is passed because some families (the QP)
    /// have input-dependent linear terms.
    fn cost(&self, x: &[f64], y: &[f64]) -> Result<f64>;
    fn eq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    /// Entries are `<= 0` exactly when satisfied.
    fn ineq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    fn output_bounds(&self) -> Vec<Bound>;
    fn output_groups(&self) -> Vec<OutputGroup>;
    fn sample_inputs(&self, n: usize, seed: u64) -> Vec<Vec<f64>>;

    /// Records batched residuals of `y` (a `batch x output_dim` node) for the
    /// inputs stacked in `x`.
    fn record_residuals(&self, tape: &mut Tape, x: &Matrix, y: NodeId) -> TapeResiduals;

    fn encode_record(&self, sample: &Sample) -> Value {
        let mut v = json!({ "x": sample.x });
        if let Some(y) = &sample.y {
            v["y"] = json!(y);
        }
        if let Some(obj) = sample.objective {
            v["objective"] = json!(obj);
        }
        v
    }

    fn decode_record(&self, value: &Value) -> Result<Sample> {
        let vec_field = |key: &str| -> Result<Option<Vec<f64>>> {
            match value.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(v) => serde_json::from_value(v.clone())
                    .map(Some)
                    .map_err(|e| ProblemError::Record(format!("field `{key}`: {e}"))),
            }
        };
        let x = vec_field("x")?.ok_or_else(|| ProblemError::Record("missing `x`".into()))?;
        check_len("x", self.input_dim(), x.len())?;
        let y = vec_field("y")?;
        if let Some(y) = &y {
            check_len("y", self.output_dim(), y.len())?;
        }
        let objective = value.get("objective").and_then(Value::as_f64);
        Ok(Sample { x, y, objective })
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ProblemError::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// Feasibility `F(y, x) = lambda_e |g|^2 + lambda_i |relu(h)|^2`.
pub fn feasibility(
    problem: &dyn Problem,
    x: &[f64],
    y: &[f64],
    lambda_e: f64,
    lambda_i: f64,
) -> Result<f64> {
    let g = problem.eq_residuals(x, y)?;
    let h = problem.ineq_residuals(x, y)?;
    let eq: f64 = g.iter().map(|v| v * v).sum();
    let ineq: f64 = h.iter().map(|v| v.max(0.0).powi(2)).sum();
    Ok(lambda_e * eq + lambda_i * ineq)
}

/// Records per-row feasibility as a `batch x 1` node.
pub fn record_feasibility(
    tape: &mut Tape,
    residuals: TapeResiduals,
    lambda_e: f64,
    lambda_i: f64,
) -> NodeId {
    let g2 = tape.square(residuals.eq);
    let g2 = tape.row_sum(g2);
    let h = tape.relu(residuals.ineq);
    let h2 = tape.square(h);
    let h2 = tape.row_sum(h2);
    let eq = tape.scale(g2, lambda_e);
    let ineq = tape.scale(h2, lambda_i);
    tape.add(eq, ineq)
}

/// Largest absolute equality residual; 0 when the problem has none.
pub fn max_abs_eq(problem: &dyn Problem, x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(problem
        .eq_residuals(x, y)?
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs())))
}
