//! Matrix ODE machinery: fixed-step RK4 integration of the backward Riccati
//! equations, fundamental solutions for the transition family `P2(t, s)`, and
//! composite Simpson quadrature on the grid.

use nalgebra::DMatrix;

use crate::linalg::{max_abs, pinv};
use crate::model::{LQProblem, TimeGrid};
use crate::reduce::ReducedSystem;
use crate::{Result, SolverError};

/// One matrix per grid node, optionally with the node time-derivatives.
///
/// With derivatives present, [`MatrixGridFunction::eval`] is a cubic Hermite
/// interpolant (exact at nodes, O(h^4) in between), which is what keeps
/// stage-time evaluations from degrading the RK4 order of downstream
/// integrations. Without them it falls back to linear interpolation.
#[derive(Debug, Clone)]
pub struct MatrixGridFunction {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
    pub derivs: Option<Vec<DMatrix<f64>>>,
}

impl MatrixGridFunction {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(SolverError::Input(format!(
                "grid function needs {} values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(SolverError::Input(
                "grid function values must share one shape".into(),
            ));
        }
        Ok(MatrixGridFunction {
            grid,
            values,
            derivs: None,
        })
    }

    pub fn with_derivs(
        grid: TimeGrid,
        values: Vec<DMatrix<f64>>,
        derivs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let mut f = Self::new(grid, values)?;
        if derivs.len() != f.values.len() {
            return Err(SolverError::Input(
                "grid function needs one derivative per node".into(),
            ));
        }
        f.derivs = Some(derivs);
        Ok(f)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn value(&self, node: usize) -> &DMatrix<f64> {
        &self.values[node]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().unwrap()
    }

    /// Locate the cell containing `t` and its normalized offset.
    fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.grid.spacing();
        let raw = (t - self.grid.t0) / h;
        let mut cell = raw.floor() as isize;
        cell = cell.clamp(0, self.grid.steps as isize - 1);
        let cell = cell as usize;
        let tau = (t - self.grid.node(cell)) / (self.grid.node(cell + 1) - self.grid.node(cell));
        (cell, tau)
    }

    /// Evaluate at `t`, exact at grid nodes.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let (cell, tau) = self.locate(t);
        let snap = 1e-9;
        if tau.abs() <= snap {
            return self.values[cell].clone();
        }
        if (tau - 1.0).abs() <= snap {
            return self.values[cell + 1].clone();
        }
        let v0 = &self.values[cell];
        let v1 = &self.values[cell + 1];
        match &self.derivs {
            Some(derivs) => {
                let h = self.grid.node(cell + 1) - self.grid.node(cell);
                let d0 = &derivs[cell];
                let d1 = &derivs[cell + 1];
                let t2 = tau * tau;
                let t3 = t2 * tau;
                v0 * (2.0 * t3 - 3.0 * t2 + 1.0)
                    + d0 * ((t3 - 2.0 * t2 + tau) * h)
                    + v1 * (-2.0 * t3 + 3.0 * t2)
                    + d1 * ((t3 - t2) * h)
            }
            None => v0 * (1.0 - tau) + v1 * tau,
        }
    }
}

/// A backward-integrated Riccati solution with its finite-difference
/// residual.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: MatrixGridFunction,
    /// Max over interior nodes of the ODE residual measured by central
    /// differences.
    pub residual_norm: f64,
}

/// March `d/dt X = rhs(t, X)` backward from `X(T) = terminal` with classical
/// RK4 on the grid, optionally symmetrizing after each step.
pub fn integrate_backward<F>(
    grid: &TimeGrid,
    terminal: DMatrix<f64>,
    mut rhs: F,
    what: &'static str,
    symmetrize: bool,
) -> Result<MatrixGridFunction>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let nodes = grid.node_count();
    let mut values = vec![DMatrix::zeros(terminal.nrows(), terminal.ncols()); nodes];
    let mut derivs = values.clone();
    derivs[nodes - 1] = rhs(grid.t_final, &terminal)?;
    values[nodes - 1] = terminal;
    for i in (0..grid.steps).rev() {
        let t_hi = grid.node(i + 1);
        let t_lo = grid.node(i);
        let step = t_lo - t_hi; // negative
        let x = &values[i + 1];
        let k1 = rhs(t_hi, x)?;
        let k2 = rhs(t_hi + 0.5 * step, &(x + &k1 * (0.5 * step)))?;
        let k3 = rhs(t_hi + 0.5 * step, &(x + &k2 * (0.5 * step)))?;
        let k4 = rhs(t_lo, &(x + &k3 * step))?;
        let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        if symmetrize {
            next = (&next + next.transpose()) * 0.5;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                what,
                node: i,
                time: t_lo,
            });
        }
        derivs[i] = rhs(t_lo, &next)?;
        values[i] = next;
    }
    MatrixGridFunction::with_derivs(grid.clone(), values, derivs)
}

fn central_difference_residual<F>(f: &MatrixGridFunction, mut rhs: F) -> Result<f64>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let grid = &f.grid;
    let h = grid.spacing();
    let mut worst = 0.0_f64;
    for i in 1..grid.steps {
        let diff = (&f.values[i + 1] - &f.values[i - 1]) / (2.0 * h);
        let residual = diff - rhs(grid.node(i), &f.values[i])?;
        worst = worst.max(max_abs(&residual));
    }
    Ok(worst)
}

/// Right-hand side of the first-layer Riccati equation,
/// `dP/dt = -(A'P + PA + Q - Gamma0' Upsilon0† Gamma0)` with
/// `Upsilon0 = R(t)` and `Gamma0 = B(t)'P`; the pseudoinverse is recomputed
/// at every evaluation.
pub fn regular_riccati_rhs(
    problem: &LQProblem,
    rank_tol: f64,
    t: f64,
    p_mat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a = problem.a.evaluate(t);
    let b = problem.b.evaluate(t);
    let q = problem.q.evaluate(t);
    let r = problem.r.evaluate(t);
    let gamma0 = b.transpose() * p_mat;
    let upsilon0_pinv = pinv(&r, rank_tol)?.pinv;
    Ok(-(a.transpose() * p_mat + p_mat * a + q - gamma0.transpose() * upsilon0_pinv * gamma0))
}

/// Integrate the first-layer Riccati equation backward from `P(T) = H`.
pub fn integrate_regular_riccati(problem: &LQProblem, rank_tol: f64) -> Result<RiccatiSolution> {
    let terminal = (&problem.h + problem.h.transpose()) * 0.5;
    let p = integrate_backward(
        &problem.grid,
        terminal,
        |t, m| regular_riccati_rhs(problem, rank_tol, t, m),
        "Riccati P",
        true,
    )?;
    let residual_norm =
        central_difference_residual(&p, |t, m| regular_riccati_rhs(problem, rank_tol, t, m))?;
    Ok(RiccatiSolution { p, residual_norm })
}

/// Integrate the layer-two equation
/// `dP1/dt = -(P1 A0 + A0' P1 + P1 D0 P1)` backward from `P1(T)`.
///
/// The quadratic correction `Gamma1' Upsilon1† Gamma1` of the full layer-two
/// equation is identically zero because `Upsilon1 = 0` and `0† = 0`.
pub fn integrate_p1(
    reduced: &ReducedSystem,
    p1_terminal: &DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let n = reduced.state_dim();
    if p1_terminal.shape() != (n, n) {
        return Err(SolverError::Input(format!(
            "P1(T) must be {n}x{n}, got {}x{}",
            p1_terminal.nrows(),
            p1_terminal.ncols()
        )));
    }
    if max_abs(&(p1_terminal - p1_terminal.transpose())) > 1e-9 * (1.0 + max_abs(p1_terminal)) {
        return Err(SolverError::Input("P1(T) must be symmetric".into()));
    }
    let rhs = |t: f64, p1: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let a0 = reduced.eval_a0(t)?;
        let d0 = reduced.eval_d0(t)?;
        Ok(-(p1 * &a0 + a0.transpose() * p1 + p1 * d0 * p1))
    };
    let terminal = (p1_terminal + p1_terminal.transpose()) * 0.5;
    let p = integrate_backward(reduced.grid(), terminal, rhs, "layer-two P1", true)?;
    let residual_norm = central_difference_residual(&p, rhs)?;
    Ok(RiccatiSolution { p, residual_norm })
}

/// Fundamental solution `Psi` of `dPsi/dt = -A0(t)' Psi`, `Psi(t0) = I`,
/// from which `P2(t, s) = Psi(t) Psi(s)^{-1}`.
pub fn fundamental_solution(reduced: &ReducedSystem) -> Result<MatrixGridFunction> {
    let grid = reduced.grid();
    let n = reduced.state_dim();
    let nodes = grid.node_count();
    let mut values = vec![DMatrix::zeros(n, n); nodes];
    let mut derivs = values.clone();
    let rhs = |t: f64, psi: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(-reduced.eval_a0(t)?.transpose() * psi)
    };
    values[0] = DMatrix::identity(n, n);
    derivs[0] = rhs(grid.t0, &values[0])?;
    for i in 0..grid.steps {
        let t_lo = grid.node(i);
        let t_hi = grid.node(i + 1);
        let step = t_hi - t_lo;
        let x = &values[i];
        let k1 = rhs(t_lo, x)?;
        let k2 = rhs(t_lo + 0.5 * step, &(x + &k1 * (0.5 * step)))?;
        let k3 = rhs(t_lo + 0.5 * step, &(x + &k2 * (0.5 * step)))?;
        let k4 = rhs(t_hi, &(x + &k3 * step))?;
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                what: "transition fundamental solution",
                node: i + 1,
                time: t_hi,
            });
        }
        derivs[i + 1] = rhs(t_hi, &next)?;
        values[i + 1] = next;
    }
    MatrixGridFunction::with_derivs(grid.clone(), values, derivs)
}

/// Invert `Psi(s)`, guarding against numerically singular values.
pub fn invert_fundamental(psi_at_s: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    psi_at_s.clone().try_inverse().ok_or_else(|| {
        SolverError::Conditioning(format!(
            "transition fundamental solution is numerically singular at t = {s}"
        ))
    })
}

/// The family `s -> P2(t_ref, s)` over all grid nodes, with
/// `P2(t_ref, t_ref) = I` exact.
pub fn transition_family(reduced: &ReducedSystem, t_ref: f64) -> Result<MatrixGridFunction> {
    let grid = reduced.grid();
    let h = grid.spacing();
    let idx = ((t_ref - grid.t0) / h).round() as isize;
    if idx < 0
        || idx as usize >= grid.node_count()
        || (grid.node(idx as usize) - t_ref).abs() > 1e-9 * (1.0 + t_ref.abs())
    {
        return Err(SolverError::Input(format!(
            "transition reference time {t_ref} is not a grid node"
        )));
    }
    let idx = idx as usize;
    let psi = fundamental_solution(reduced)?;
    let at_ref = psi.value(idx).clone();
    let n = reduced.state_dim();
    let mut values = Vec::with_capacity(grid.node_count());
    for i in 0..grid.node_count() {
        if i == idx {
            values.push(DMatrix::identity(n, n));
            continue;
        }
        let inv = invert_fundamental(psi.value(i), grid.node(i))?;
        values.push(&at_ref * inv);
    }
    MatrixGridFunction::new(grid.clone(), values)
}

/// Composite Simpson quadrature of a matrix-valued grid function; the last
/// cell falls back to the trapezoid rule when the interval count is odd.
pub fn quadrature(values: &MatrixGridFunction) -> DMatrix<f64> {
    let weights = simpson_weights(values.grid.steps, values.grid.spacing());
    let (r, c) = values.shape();
    let mut acc = DMatrix::zeros(r, c);
    for (w, v) in weights.iter().zip(values.values.iter()) {
        acc += v * *w;
    }
    acc
}

/// Scalar counterpart of [`quadrature`] over per-node samples.
pub fn scalar_quadrature(grid: &TimeGrid, samples: &[f64]) -> f64 {
    assert_eq!(samples.len(), grid.node_count());
    simpson_weights(grid.steps, grid.spacing())
        .iter()
        .zip(samples)
        .map(|(w, s)| w * s)
        .sum()
}

fn simpson_weights(steps: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; steps + 1];
    if steps == 0 {
        return w;
    }
    if steps == 1 {
        w[0] = 0.5 * h;
        w[1] = 0.5 * h;
        return w;
    }
    let simpson_cells = if steps % 2 == 0 { steps } else { steps - 1 };
    let third = h / 3.0;
    for pair in 0..simpson_cells / 2 {
        let base = 2 * pair;
        w[base] += third;
        w[base + 1] += 4.0 * third;
        w[base + 2] += third;
    }
    if steps % 2 == 1 {
        w[steps - 1] += 0.5 * h;
        w[steps] += 0.5 * h;
    }
    w
}
