//! First-layer analysis: build `Upsilon0 = R(t)` and `Gamma0 = B(t)'P(t)`
//! along the grid, classify the problem as regular or irregular by the range
//! test, and extract the reduced-system data `C0, B0, G0, A0, D0` from the
//! null-space directions of the control weight.

use nalgebra::DMatrix;

use crate::integrate::RiccatiSolution;
use crate::linalg::{pinv, projector_decomposition, range_included};
use crate::model::{LQProblem, TimeGrid};
use crate::{Result, SolverError};

/// Regular / irregular verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Regular,
    Irregular,
}

/// Outcome of the per-node range test `Range(Gamma0) ⊆ Range(Upsilon0)`.
#[derive(Debug, Clone)]
pub struct Classification {
    pub verdict: Verdict,
    /// rank of `Upsilon0`, constant across the grid.
    pub m0: usize,
    pub per_node_inclusion: Vec<bool>,
}

fn rank_constancy(ranks: &[usize], grid: &TimeGrid) -> Result<usize> {
    let m0 = ranks[0];
    if let Some(bad) = ranks.iter().position(|&r| r != m0) {
        return Err(SolverError::RankVariation(format!(
            "rank(R) is {m0} at t = {} but {} at t = {}",
            grid.node(0),
            ranks[bad],
            grid.node(bad)
        )));
    }
    Ok(m0)
}

/// Classify a problem given its first-layer Riccati solution.
pub fn classify(
    problem: &LQProblem,
    riccati: &RiccatiSolution,
    tol_range: f64,
    rank_tol: f64,
) -> Result<Classification> {
    let grid = &problem.grid;
    if riccati.p.grid != *grid {
        return Err(SolverError::Input(
            "Riccati solution grid does not match the problem grid".into(),
        ));
    }
    let mut per_node_inclusion = Vec::with_capacity(grid.node_count());
    let mut ranks = Vec::with_capacity(grid.node_count());
    for (i, t) in grid.nodes().enumerate() {
        let upsilon0 = problem.r.evaluate(t);
        let gamma0 = problem.b.evaluate(t).transpose() * riccati.p.value(i);
        per_node_inclusion.push(range_included(&gamma0, &upsilon0, tol_range)?);
        ranks.push(pinv(&upsilon0, rank_tol)?.rank);
    }
    let m0 = rank_constancy(&ranks, grid)?;
    let verdict = if per_node_inclusion.iter().all(|&b| b) {
        Verdict::Regular
    } else {
        Verdict::Irregular
    };
    Ok(Classification {
        verdict,
        m0,
        per_node_inclusion,
    })
}

/// Per-time reduced quantities in one consistent basis, for stage-time
/// evaluation between grid nodes.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub upsilon0_pinv: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub g0: DMatrix<f64>,
}

/// Reduced-system data along the grid.
///
/// The raw `C0`, `B0`, `G0` entries are basis-dependent (the null-space basis
/// of `R(t)` is only determined up to orthogonal transformations); products
/// like `C0'C0`, `B0 C0`, `G0 u1` are the basis-invariant interface.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub m0: usize,
    pub upsilon0: Vec<DMatrix<f64>>,
    pub gamma0: Vec<DMatrix<f64>>,
    pub c0: Vec<DMatrix<f64>>,
    pub b0: Vec<DMatrix<f64>>,
    pub g0: Vec<DMatrix<f64>>,
    pub a0: Vec<DMatrix<f64>>,
    pub d0: Vec<DMatrix<f64>>,
    problem: LQProblem,
    riccati: RiccatiSolution,
    rank_tol: f64,
}

impl ReducedSystem {
    pub fn grid(&self) -> &TimeGrid {
        &self.problem.grid
    }

    pub fn problem(&self) -> &LQProblem {
        &self.problem
    }

    pub fn riccati(&self) -> &RiccatiSolution {
        &self.riccati
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn state_dim(&self) -> usize {
        self.problem.n
    }

    pub fn input_dim(&self) -> usize {
        self.problem.m
    }

    /// Dimension of the reduced control `u1`.
    pub fn reduced_dim(&self) -> usize {
        self.problem.m - self.m0
    }

    /// `A0(t) = A(t) - B(t) R(t)† B(t)' P(t)` at arbitrary `t` (Hermite
    /// evaluation of `P` between nodes).
    pub fn eval_a0(&self, t: f64) -> Result<DMatrix<f64>> {
        let a = self.problem.a.evaluate(t);
        let b = self.problem.b.evaluate(t);
        let r = self.problem.r.evaluate(t);
        let p = self.riccati.p.eval(t);
        let r_pinv = pinv(&r, self.rank_tol)?.pinv;
        Ok(a - &b * r_pinv * b.transpose() * p)
    }

    /// `D0(t) = -B(t) R(t)† B(t)'` at arbitrary `t`.
    pub fn eval_d0(&self, t: f64) -> Result<DMatrix<f64>> {
        let b = self.problem.b.evaluate(t);
        let r = self.problem.r.evaluate(t);
        let r_pinv = pinv(&r, self.rank_tol)?.pinv;
        Ok(-(&b * r_pinv * b.transpose()))
    }

    /// Fresh projector decomposition of `R(t)` at arbitrary `t`; all returned
    /// matrices share one basis, so their products are well-defined.
    pub fn eval_basis(&self, t: f64) -> Result<ReducedBasis> {
        let b = self.problem.b.evaluate(t);
        let r = self.problem.r.evaluate(t);
        let p = self.riccati.p.eval(t);
        let gamma0 = b.transpose() * &p;
        let decomp = projector_decomposition(&r, self.rank_tol)?;
        let upsilon0_pinv = pinv(&r, self.rank_tol)?.pinv;
        Ok(ReducedBasis {
            upsilon0_pinv,
            c0: &decomp.upsilon_t0 * gamma0,
            b0: &b * &decomp.g0,
            g0: decomp.g0,
        })
    }
}

/// Construct the reduced system along the grid. Regular problems are
/// permitted and yield empty `C0`/`B0`/`G0`.
pub fn reduce(
    problem: &LQProblem,
    riccati: &RiccatiSolution,
    rank_tol: f64,
) -> Result<ReducedSystem> {
    let grid = &problem.grid;
    if riccati.p.grid != *grid {
        return Err(SolverError::Input(
            "Riccati solution grid does not match the problem grid".into(),
        ));
    }
    let nodes = grid.node_count();
    let m = problem.m;
    let mut upsilon0 = Vec::with_capacity(nodes);
    let mut gamma0 = Vec::with_capacity(nodes);
    let mut c0 = Vec::with_capacity(nodes);
    let mut b0 = Vec::with_capacity(nodes);
    let mut g0 = Vec::with_capacity(nodes);
    let mut a0 = Vec::with_capacity(nodes);
    let mut d0 = Vec::with_capacity(nodes);
    let mut ranks = Vec::with_capacity(nodes);

    for (i, t) in grid.nodes().enumerate() {
        let a = problem.a.evaluate(t);
        let b = problem.b.evaluate(t);
        let r = problem.r.evaluate(t);
        let p = riccati.p.value(i);
        let gam = b.transpose() * p;
        let r_pinv = pinv(&r, rank_tol)?;
        let decomp = projector_decomposition(&r, rank_tol)?;
        if decomp.m0 != r_pinv.rank {
            return Err(SolverError::RankVariation(format!(
                "rank decision disagrees between pinv and eigendecomposition at t = {t}"
            )));
        }
        ranks.push(decomp.m0);
        let m0 = decomp.m0;

        // Partitions: the trailing m - m0 columns of X (I - U† U) T0^{-1}.
        let projector = DMatrix::identity(m, m) - &r_pinv.pinv * &r;
        let t0_inv = decomp.t0_mat.transpose();
        let c0_full = gam.transpose() * &projector * &t0_inv;
        let b0_full = &b * &projector * &t0_inv;
        c0.push(c0_full.columns(m0, m - m0).transpose().clone_owned());
        b0.push(b0_full.columns(m0, m - m0).clone_owned());
        g0.push(decomp.g0.clone());

        a0.push(&a - &b * &r_pinv.pinv * &gam);
        d0.push(-(&b * &r_pinv.pinv * b.transpose()));
        upsilon0.push(r);
        gamma0.push(gam);
    }
    let m0 = rank_constancy(&ranks, grid)?;
    Ok(ReducedSystem {
        m0,
        upsilon0,
        gamma0,
        c0,
        b0,
        g0,
        a0,
        d0,
        problem: problem.clone(),
        riccati: riccati.clone(),
        rank_tol,
    })
}
