//! Problem definition: horizon and time grid, time-varying matrix functions,
//! validation, the built-in fixtures, and the JSON problem-file schema.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::max_abs;
use crate::{Result, SolverError};

/// Symmetry tolerance applied to Q, R, H during validation.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Default number of grid cells over the horizon.
pub const DEFAULT_STEPS: usize = 1000;

/// Uniform time grid `t0 = s_0 < … < s_steps = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, steps: usize) -> Result<Self> {
        if !t_final.is_finite() || !t0.is_finite() || t_final <= t0 {
            return Err(SolverError::Input(format!(
                "horizon needs T > t0, got t0 = {t0}, T = {t_final}"
            )));
        }
        if steps == 0 {
            return Err(SolverError::Input("grid needs at least one step".into()));
        }
        Ok(TimeGrid { t0, t_final, steps })
    }

    /// Cell width.
    pub fn spacing(&self) -> f64 {
        (self.t_final - self.t0) / self.steps as f64
    }

    /// i-th node; exact at both endpoints.
    pub fn node(&self, i: usize) -> f64 {
        if i == 0 {
            self.t0
        } else if i >= self.steps {
            self.t_final
        } else {
            self.t0 + (self.t_final - self.t0) * (i as f64 / self.steps as f64)
        }
    }

    pub fn node_count(&self) -> usize {
        self.steps + 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.node_count()).map(|i| self.node(i))
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.t_final.abs().max(self.t0.abs()));
        t >= self.t0 - slack && t <= self.t_final + slack
    }
}

/// Time-varying matrix data: a constant matrix, or samples on a strictly
/// increasing time grid with linear interpolation in between.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFunction {
    Constant(DMatrix<f64>),
    Sampled {
        times: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl MatrixFunction {
    pub fn constant(value: DMatrix<f64>) -> Self {
        MatrixFunction::Constant(value)
    }

    pub fn sampled(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(SolverError::Input(
                "sampled matrix needs at least two samples with matching time stamps".into(),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SolverError::Input(
                "sampled matrix times must be strictly increasing".into(),
            ));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(SolverError::Input(
                "sampled matrix values must all share one shape".into(),
            ));
        }
        Ok(MatrixFunction::Sampled { times, values })
    }

    pub fn rows(&self) -> usize {
        match self {
            MatrixFunction::Constant(v) => v.nrows(),
            MatrixFunction::Sampled { values, .. } => values[0].nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            MatrixFunction::Constant(v) => v.ncols(),
            MatrixFunction::Sampled { values, .. } => values[0].ncols(),
        }
    }

    /// Evaluate at `t`: constants are exact everywhere; sampled data is exact
    /// at sample times and linearly interpolated between brackets.
    pub fn evaluate(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixFunction::Constant(v) => v.clone(),
            MatrixFunction::Sampled { times, values } => {
                let first = *times.first().unwrap();
                let last = *times.last().unwrap();
                if t <= first {
                    return values.first().unwrap().clone();
                }
                if t >= last {
                    return values.last().unwrap().clone();
                }
                let idx = match times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
                    Ok(exact) => return values[exact].clone(),
                    Err(insertion) => insertion,
                };
                let (t_lo, t_hi) = (times[idx - 1], times[idx]);
                let span = t_hi - t_lo;
                // Snap to a sample when t sits on it up to rounding.
                let snap = 1e-12 * (1.0 + t.abs());
                if (t - t_lo).abs() <= snap {
                    return values[idx - 1].clone();
                }
                if (t_hi - t).abs() <= snap {
                    return values[idx].clone();
                }
                let w = (t - t_lo) / span;
                &values[idx - 1] * (1.0 - w) + &values[idx] * w
            }
        }
    }

    fn spans(&self, grid: &TimeGrid) -> bool {
        match self {
            MatrixFunction::Constant(_) => true,
            MatrixFunction::Sampled { times, .. } => {
                let slack = 1e-9 * (1.0 + grid.t_final.abs());
                *times.first().unwrap() <= grid.t0 + slack
                    && *times.last().unwrap() >= grid.t_final - slack
            }
        }
    }
}

/// A finite-horizon LQ problem: dynamics `x' = A x + B u` on `[t0, T]` with
/// cost `∫ (x'Qx + u'Ru) dt + x(T)' H x(T)` from initial state `x0`.
#[derive(Debug, Clone)]
pub struct LQProblem {
    pub n: usize,
    pub m: usize,
    pub grid: TimeGrid,
    pub a: MatrixFunction,
    pub b: MatrixFunction,
    pub q: MatrixFunction,
    pub r: MatrixFunction,
    pub h: DMatrix<f64>,
    pub x0: DVector<f64>,
}

/// One admissibility violation found by [`LQProblem::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub what: String,
}

/// Findings of a validation pass; empty means admissible.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, what: impl Into<String>) {
        self.violations.push(Violation { what: what.into() });
    }
}

impl LQProblem {
    /// Evaluate `A(t)` at `t`, failing outside the horizon.
    pub fn eval_checked(&self, f: &MatrixFunction, t: f64) -> Result<DMatrix<f64>> {
        if !self.grid.contains(t) {
            return Err(SolverError::Input(format!(
                "time {t} outside the horizon [{}, {}]",
                self.grid.t0, self.grid.t_final
            )));
        }
        Ok(f.evaluate(t))
    }

    /// Collect dimension, symmetry, and positivity violations. An empty
    /// report means the problem is admissible for the solver.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let dims: [(&str, &MatrixFunction, usize, usize); 4] = [
            ("A", &self.a, self.n, self.n),
            ("B", &self.b, self.n, self.m),
            ("Q", &self.q, self.n, self.n),
            ("R", &self.r, self.m, self.m),
        ];
        for (name, f, rows, cols) in dims {
            if f.rows() != rows || f.cols() != cols {
                report.push(format!(
                    "{name} must be {rows}x{cols}, got {}x{}",
                    f.rows(),
                    f.cols()
                ));
            }
            if !f.spans(&self.grid) {
                report.push(format!("{name} samples do not span the horizon"));
            }
        }
        if self.h.shape() != (self.n, self.n) {
            report.push(format!(
                "H must be {0}x{0}, got {1}x{2}",
                self.n,
                self.h.nrows(),
                self.h.ncols()
            ));
        } else if max_abs(&(&self.h - self.h.transpose())) > SYMMETRY_TOL {
            report.push("H not symmetric");
        }
        if self.x0.len() != self.n {
            report.push(format!(
                "x0 must have length {}, got {}",
                self.n,
                self.x0.len()
            ));
        }
        if !report.is_clean() {
            return report;
        }
        for (i, t) in self.grid.nodes().enumerate() {
            let q = self.q.evaluate(t);
            let r = self.r.evaluate(t);
            if max_abs(&(&q - q.transpose())) > SYMMETRY_TOL {
                report.push(format!("Q not symmetric at node {i} (t = {t})"));
                break;
            }
            if max_abs(&(&r - r.transpose())) > SYMMETRY_TOL {
                report.push(format!("R not symmetric at node {i} (t = {t})"));
                break;
            }
            let (eigenvalues, _) = crate::linalg::symmetric_eigen(&((&r + r.transpose()) * 0.5));
            let min_eig = eigenvalues.iter().cloned().fold(0.0_f64, f64::min);
            if min_eig < -1e-10 * (1.0 + max_abs(&r)) {
                report.push(format!(
                    "R not PSD at node {i} (t = {t}, min eigenvalue {min_eig:.3e})"
                ));
                break;
            }
        }
        report
    }
}

/// Built-in fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    /// Double-input integrator, control weight diag(1, 0), terminal weight 1.
    E1,
    /// Same plant with unit state weight and terminal weight 2.
    E2,
}

impl std::str::FromStr for Fixture {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E1" => Ok(Fixture::E1),
            "E2" => Ok(Fixture::E2),
            other => Err(SolverError::Input(format!(
                "unknown fixture '{other}' (expected E1 or E2)"
            ))),
        }
    }
}

/// Build a fixture on `[0, 1]` with `x0 = [1]` and the given grid resolution.
pub fn fixture(which: Fixture, steps: usize) -> LQProblem {
    let (q, h) = match which {
        Fixture::E1 => (0.0, 1.0),
        Fixture::E2 => (1.0, 2.0),
    };
    LQProblem {
        n: 1,
        m: 2,
        grid: TimeGrid::new(0.0, 1.0, steps).unwrap(),
        a: MatrixFunction::constant(DMatrix::from_element(1, 1, 0.0)),
        b: MatrixFunction::constant(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
        q: MatrixFunction::constant(DMatrix::from_element(1, 1, q)),
        r: MatrixFunction::constant(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))),
        h: DMatrix::from_element(1, 1, h),
        x0: DVector::from_vec(vec![1.0]),
    }
}

// ---------------------------------------------------------------------------
// Problem-file schema
// ---------------------------------------------------------------------------

/// On-disk form of a time-varying matrix: `{"constant": [[..]]}` or
/// `{"sampled": {"times": [..], "values": [[[..]]]}}`, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFunctionFile {
    Constant(Vec<Vec<f64>>),
    Sampled {
        times: Vec<f64>,
        values: Vec<Vec<Vec<f64>>>,
    },
}

/// On-disk problem document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub steps: usize,
    pub x0: Vec<f64>,
    #[serde(rename = "A")]
    pub a: MatrixFunctionFile,
    #[serde(rename = "B")]
    pub b: MatrixFunctionFile,
    #[serde(rename = "Q")]
    pub q: MatrixFunctionFile,
    #[serde(rename = "R")]
    pub r: MatrixFunctionFile,
    #[serde(rename = "H")]
    pub h: MatrixFunctionFile,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(SolverError::Input(
            "matrix literal must not be empty".into(),
        ));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(SolverError::Input(
            "matrix literal rows must be non-empty and of equal length".into(),
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::Input(
            "matrix literal entries must be finite".into(),
        ));
    }
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl MatrixFunctionFile {
    pub fn to_function(&self) -> Result<MatrixFunction> {
        match self {
            MatrixFunctionFile::Constant(rows) => {
                Ok(MatrixFunction::constant(rows_to_matrix(rows)?))
            }
            MatrixFunctionFile::Sampled { times, values } => {
                let mats = values
                    .iter()
                    .map(|rows| rows_to_matrix(rows))
                    .collect::<Result<Vec<_>>>()?;
                MatrixFunction::sampled(times.clone(), mats)
            }
        }
    }

    pub fn from_function(f: &MatrixFunction) -> Self {
        match f {
            MatrixFunction::Constant(v) => MatrixFunctionFile::Constant(matrix_to_rows(v)),
            MatrixFunction::Sampled { times, values } => MatrixFunctionFile::Sampled {
                times: times.clone(),
                values: values.iter().map(matrix_to_rows).collect(),
            },
        }
    }
}

impl ProblemFile {
    pub fn to_problem(&self) -> Result<LQProblem> {
        let grid = TimeGrid::new(self.t0, self.t_final, self.steps)?;
        let h = match &self.h {
            MatrixFunctionFile::Constant(rows) => rows_to_matrix(rows)?,
            MatrixFunctionFile::Sampled { .. } => {
                return Err(SolverError::Input(
                    "terminal weight H must be a constant matrix".into(),
                ))
            }
        };
        if self.x0.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::Input("x0 entries must be finite".into()));
        }
        Ok(LQProblem {
            n: self.n,
            m: self.m,
            grid,
            a: self.a.to_function()?,
            b: self.b.to_function()?,
            q: self.q.to_function()?,
            r: self.r.to_function()?,
            h,
            x0: DVector::from_vec(self.x0.clone()),
        })
    }

    pub fn from_problem(p: &LQProblem) -> Self {
        ProblemFile {
            n: p.n,
            m: p.m,
            t0: p.grid.t0,
            t_final: p.grid.t_final,
            steps: p.grid.steps,
            x0: p.x0.iter().copied().collect(),
            a: MatrixFunctionFile::from_function(&p.a),
            b: MatrixFunctionFile::from_function(&p.b),
            q: MatrixFunctionFile::from_function(&p.q),
            r: MatrixFunctionFile::from_function(&p.r),
            h: MatrixFunctionFile::Constant(matrix_to_rows(&p.h)),
        }
    }
}

/// Parse a problem document from JSON text.
pub fn problem_from_json(text: &str) -> Result<LQProblem> {
    let file: ProblemFile = serde_json::from_str(text)
        .map_err(|e| SolverError::Input(format!("problem file parse error: {e}")))?;
    file.to_problem()
}

/// Serialize a problem to canonical JSON.
pub fn problem_to_json(p: &LQProblem) -> String {
    serde_json::to_string_pretty(&ProblemFile::from_problem(p)).expect("problem serializes")
}
