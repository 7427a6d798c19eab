//! Controller synthesis: pseudoinverse feedback for regular problems, and
//! for irregular ones the layer-two terminal selection, the consistency
//! verdict `Gamma1 ≡ 0`, open-loop synthesis through a controllability
//! Gramian, and closed-loop gain synthesis with the time-singular target
//! dynamics `I/(t-T)`.

use nalgebra::{DMatrix, DVector};

use crate::integrate::{fundamental_solution, quadrature, MatrixGridFunction, RiccatiSolution};
use crate::linalg::{
    jacobi_svd, max_abs, pinv, range_included, solve_linear_matrix_eq, DEFAULT_RANK_TOL,
};
use crate::model::LQProblem;
use crate::reduce::{classify, ReducedSystem, Verdict};
use crate::{Result, SolverError};

/// Outcome of the layer-two integration: the second Riccati-like solution
/// plus the consistency verdict.
#[derive(Debug, Clone)]
pub struct LayerTwoSolution {
    pub p1_terminal: DMatrix<f64>,
    pub p1: RiccatiSolution,
    /// Max over nodes of `max_abs(C0 + B0' P1)`.
    pub gamma1_max: f64,
    pub solvable: bool,
}

/// Regular pseudoinverse feedback `u = K0 x`, `K0 = -Upsilon0† Gamma0`.
#[derive(Debug, Clone)]
pub struct RegularFeedback {
    pub k0: MatrixGridFunction,
    pub riccati: RiccatiSolution,
    problem: LQProblem,
    rank_tol: f64,
}

/// Open-loop irregular controller: `u1(t) = C0(t) P2'(t0, t) zeta`.
#[derive(Debug, Clone)]
pub struct IrregularOpenLoop {
    pub u1_profile: MatrixGridFunction,
    pub zeta: DVector<f64>,
    pub gramian: DMatrix<f64>,
    pub reduced: ReducedSystem,
    pub l2: LayerTwoSolution,
    /// Fundamental solution of `dPsi/dt = -A0' Psi`, `Psi(t0) = I`.
    psi: MatrixGridFunction,
}

/// Shape of the closed-loop gain construction.
#[derive(Debug, Clone)]
pub enum GainKind {
    /// `P1` invertible on the interior: gain solves
    /// `B0 K = I/(t-T) - A0 - D0 P1` directly.
    Nonsingular,
    /// `P1` singular with constant rank: gain solves the leading block row of
    /// the transformed dynamics.
    Singular(SingularGainData),
}

/// Tracked eigenstructure of a singular `P1(t)`.
#[derive(Debug, Clone)]
pub struct SingularGainData {
    /// Constant rank of `P1` on the interior.
    pub rank: usize,
    /// Orthogonal `T1(t)` per node with `T1' P1 T1 = blkdiag(Phat, 0)`,
    /// columns matched across nodes.
    pub t1: MatrixGridFunction,
    /// `d(T1')/dt * T1` per node, by finite differences of the tracked grid.
    pub t1_dot_t1: MatrixGridFunction,
}

/// Closed-loop irregular controller: `u1 = K(t) x`, gains on the interior
/// nodes `t0 .. T-h` (the target dynamics is singular at `T`).
#[derive(Debug, Clone)]
pub struct IrregularClosedLoop {
    pub k1: Vec<DMatrix<f64>>,
    pub kind: GainKind,
    pub reduced: ReducedSystem,
    pub l2: LayerTwoSolution,
}

/// A synthesized controller.
#[derive(Debug, Clone)]
pub enum Controller {
    RegularFeedback(RegularFeedback),
    IrregularOpenLoop(IrregularOpenLoop),
    IrregularClosedLoop(IrregularClosedLoop),
}

impl Controller {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Controller::RegularFeedback(_) => "regular-feedback",
            Controller::IrregularOpenLoop(_) => "irregular-open-loop",
            Controller::IrregularClosedLoop(c) => match c.kind {
                GainKind::Nonsingular => "irregular-closed-loop",
                GainKind::Singular(_) => "irregular-closed-loop-singular",
            },
        }
    }

    /// `Theta(t) = P1(t) x` for irregular controllers, zero for regular.
    pub fn theta(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Controller::RegularFeedback(_) => DVector::zeros(x.len()),
            Controller::IrregularOpenLoop(c) => c.l2.p1.p.eval(t) * x,
            Controller::IrregularClosedLoop(c) => c.l2.p1.p.eval(t) * x,
        }
    }

    /// First-layer Riccati solution backing this controller.
    pub fn riccati(&self) -> &RiccatiSolution {
        match self {
            Controller::RegularFeedback(c) => &c.riccati,
            Controller::IrregularOpenLoop(c) => c.reduced.riccati(),
            Controller::IrregularClosedLoop(c) => c.reduced.riccati(),
        }
    }

    /// Layer-two solution, when the controller is irregular.
    pub fn layer_two(&self) -> Option<&LayerTwoSolution> {
        match self {
            Controller::RegularFeedback(_) => None,
            Controller::IrregularOpenLoop(c) => Some(&c.l2),
            Controller::IrregularClosedLoop(c) => Some(&c.l2),
        }
    }

    pub fn reduced(&self) -> Option<&ReducedSystem> {
        match self {
            Controller::RegularFeedback(_) => None,
            Controller::IrregularOpenLoop(c) => Some(&c.reduced),
            Controller::IrregularClosedLoop(c) => Some(&c.reduced),
        }
    }

    /// Reduced control `u1(t, x)`; empty vector for regular controllers.
    pub fn u1(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Controller::RegularFeedback(_) => Ok(DVector::zeros(0)),
            Controller::IrregularOpenLoop(c) => c.u1_at(t),
            Controller::IrregularClosedLoop(c) => c.u1_at(t, x),
        }
    }

    /// Full control `u(t, x)` of dimension `m`.
    pub fn control(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Controller::RegularFeedback(c) => c.control(t, x),
            Controller::IrregularOpenLoop(c) => {
                let u1 = c.u1_at(t)?;
                full_control(&c.reduced, &c.l2, t, x, &u1)
            }
            Controller::IrregularClosedLoop(c) => {
                let u1 = c.u1_at(t, x)?;
                full_control(&c.reduced, &c.l2, t, x, &u1)
            }
        }
    }
}

impl RegularFeedback {
    /// `u = -Upsilon0†(t) Gamma0(t) x`, evaluated from problem data at any
    /// `t` (the stored gain grid is for inspection and reporting).
    pub fn control(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let b = self.problem.b.evaluate(t);
        let r = self.problem.r.evaluate(t);
        let p = self.riccati.p.eval(t);
        let r_pinv = pinv(&r, self.rank_tol)?.pinv;
        Ok(-(r_pinv * b.transpose() * p * x))
    }
}

impl IrregularOpenLoop {
    /// `u1(t) = C0(t) P2'(t0, t) zeta` with `P2(t0, t) = Psi(t)^{-1}`.
    pub fn u1_at(&self, t: f64) -> Result<DVector<f64>> {
        let basis = self.reduced.eval_basis(t)?;
        let psi_t = self.psi.eval(t);
        let p2 = crate::integrate::invert_fundamental(&psi_t, t)?;
        Ok(basis.c0 * p2.transpose() * &self.zeta)
    }
}

impl IrregularClosedLoop {
    /// Gain at arbitrary interior time, solved from the defining equation
    /// rather than interpolated: the target dynamics `I/(t-T)` is evaluated
    /// analytically while the smooth coefficients come from the tracked
    /// grids, so the gain keeps full accuracy near the terminal time.
    pub fn gain_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let grid = self.reduced.grid();
        if t >= grid.t_final {
            return Err(SolverError::Misuse(
                "closed-loop gain is undefined at the terminal time".into(),
            ));
        }
        let n = self.reduced.state_dim();
        let basis = self.reduced.eval_basis(t)?;
        let a0 = self.reduced.eval_a0(t)?;
        let d0 = self.reduced.eval_d0(t)?;
        let p1 = self.l2.p1.p.eval(t);
        let closed = &a0 + &d0 * &p1;
        match &self.kind {
            GainKind::Nonsingular => {
                let rhs = DMatrix::identity(n, n) / (t - grid.t_final) - closed;
                solve_linear_matrix_eq(&basis.b0, &DMatrix::identity(n, n), &rhs, 1e-8)?.ok_or_else(
                    || {
                        SolverError::Conditioning(format!(
                            "closed-loop gain equation became unsolvable at t = {t}"
                        ))
                    },
                )
            }
            GainKind::Singular(data) => {
                let r = data.rank;
                if r == 0 {
                    return Ok(DMatrix::zeros(self.reduced.reduced_dim(), n));
                }
                let t1 = data.t1.eval(t);
                let ttilde = data.t1_dot_t1.eval(t);
                let a_hat = (t1.transpose() * closed * &t1).rows(0, r).clone_owned();
                let b1 = (t1.transpose() * &basis.b0).rows(0, r).clone_owned();
                let mut rhs = DMatrix::zeros(r, n);
                for i in 0..r {
                    rhs[(i, i)] = 1.0 / (t - grid.t_final);
                }
                rhs -= ttilde.rows(0, r);
                rhs -= a_hat;
                let x = solve_linear_matrix_eq(&b1, &DMatrix::identity(n, n), &rhs, 1e-8)?
                    .ok_or_else(|| {
                        SolverError::Conditioning(format!(
                            "closed-loop block equation became unsolvable at t = {t}"
                        ))
                    })?;
                Ok(x * t1.transpose())
            }
        }
    }

    pub fn u1_at(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.gain_at(t)? * x)
    }
}

/// The full control map `u = -Upsilon0†(Gamma0 x + B' Theta) + G0 u1` with
/// `Theta = P1(t) x`, everything evaluated in one per-`t` basis.
pub fn full_control(
    reduced: &ReducedSystem,
    l2: &LayerTwoSolution,
    t: f64,
    x: &DVector<f64>,
    u1: &DVector<f64>,
) -> Result<DVector<f64>> {
    let problem = reduced.problem();
    let b = problem.b.evaluate(t);
    let p = reduced.riccati().p.eval(t);
    let p1 = l2.p1.p.eval(t);
    let basis = reduced.eval_basis(t)?;
    let theta = &p1 * x;
    let gamma0x = b.transpose() * p * x;
    let regular_part = -(&basis.upsilon0_pinv * (gamma0x + b.transpose() * theta));
    Ok(regular_part + &basis.g0 * u1)
}

/// Build the full-control closure from a caller-supplied `u1(t, x)`.
pub fn assemble_full_control<'a, F>(
    reduced: &'a ReducedSystem,
    l2: &'a LayerTwoSolution,
    u1_at: F,
) -> impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + 'a
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + 'a,
{
    move |t, x| {
        let u1 = u1_at(t, x)?;
        full_control(reduced, l2, t, x, &u1)
    }
}

/// Regular synthesis `K0 = -Upsilon0† Gamma0` (free term taken as zero).
/// Fails with a misuse error when the problem is irregular.
pub fn solve_regular(
    problem: &LQProblem,
    riccati: &RiccatiSolution,
    tol_range: f64,
    rank_tol: f64,
) -> Result<Controller> {
    let class = classify(problem, riccati, tol_range, rank_tol)?;
    if class.verdict != Verdict::Regular {
        return Err(SolverError::Misuse(
            "regular synthesis called on an irregular problem".into(),
        ));
    }
    let grid = &problem.grid;
    let mut gains = Vec::with_capacity(grid.node_count());
    for (i, t) in grid.nodes().enumerate() {
        let b = problem.b.evaluate(t);
        let r = problem.r.evaluate(t);
        let r_pinv = pinv(&r, rank_tol)?.pinv;
        gains.push(-(r_pinv * b.transpose() * riccati.p.value(i)));
    }
    let k0 = MatrixGridFunction::new(grid.clone(), gains)?;
    Ok(Controller::RegularFeedback(RegularFeedback {
        k0,
        riccati: riccati.clone(),
        problem: problem.clone(),
        rank_tol,
    }))
}

/// Choose the layer-two terminal value: the minimal-norm symmetric solution
/// of `B0'(T) X = -C0(T)`, or `None` when the equation is unsolvable (the
/// problem is then unsolvable by the minimal-norm terminal).
pub fn select_p1_terminal(reduced: &ReducedSystem, tol: f64) -> Result<Option<DMatrix<f64>>> {
    let n = reduced.state_dim();
    if reduced.reduced_dim() == 0 {
        return Ok(Some(DMatrix::zeros(n, n)));
    }
    let b0_t = reduced.b0.last().unwrap().transpose();
    let c0_t = reduced.c0.last().unwrap();
    let rhs = -c0_t;
    let x = match solve_linear_matrix_eq(&b0_t, &DMatrix::identity(n, n), &rhs, tol)? {
        Some(x) => x,
        None => return Ok(None),
    };
    let sym = (&x + x.transpose()) * 0.5;
    // Symmetrization must not break the terminal equation.
    let residual = &b0_t * &sym + c0_t;
    if max_abs(&residual) > tol * (1.0 + max_abs(c0_t)) {
        return Ok(None);
    }
    Ok(Some(sym))
}

/// Evaluate the layer-two consistency condition `Gamma1(t) = C0 + B0' P1`
/// along the grid and set the solvability flag.
pub fn check_solvability(
    reduced: &ReducedSystem,
    p1: &RiccatiSolution,
    tol_gamma: f64,
) -> LayerTwoSolution {
    let mut gamma1_max = 0.0_f64;
    let mut p1_scale = 0.0_f64;
    for i in 0..reduced.grid().node_count() {
        let gamma1 = &reduced.c0[i] + reduced.b0[i].transpose() * p1.p.value(i);
        gamma1_max = gamma1_max.max(max_abs(&gamma1));
        p1_scale = p1_scale.max(max_abs(p1.p.value(i)));
    }
    LayerTwoSolution {
        p1_terminal: p1.p.terminal().clone(),
        p1: p1.clone(),
        gamma1_max,
        solvable: gamma1_max <= tol_gamma * (1.0 + p1_scale),
    }
}

/// Result of the open-loop construction: the Gramian and range test are
/// reported even when synthesis fails.
#[derive(Debug)]
pub struct OpenLoopSynthesis {
    pub gramian: DMatrix<f64>,
    /// The range condition `Range(P1(t0)) ⊆ Range(G1)`.
    pub range_ok: bool,
    pub controller: Option<Controller>,
}

/// Open-loop synthesis: Gramian `G1 = ∫ P2(t0,s) C0'(s) C0(s) P2'(t0,s) ds`,
/// range test, then `zeta = G1† P1(t0) x0` and `u1(t) = C0(t) P2'(t0,t) zeta`.
pub fn open_loop(
    reduced: &ReducedSystem,
    l2: &LayerTwoSolution,
    tol_range: f64,
) -> Result<OpenLoopSynthesis> {
    if !l2.solvable {
        return Err(SolverError::Misuse(
            "open-loop synthesis requires a solvable layer-two solution".into(),
        ));
    }
    let grid = reduced.grid().clone();
    let psi = fundamental_solution(reduced)?;
    // P2(t0, s) = Psi(t0) Psi(s)^{-1} = Psi(s)^{-1}.
    let mut p2_rows = Vec::with_capacity(grid.node_count());
    let mut integrand = Vec::with_capacity(grid.node_count());
    for i in 0..grid.node_count() {
        let p2 = crate::integrate::invert_fundamental(psi.value(i), grid.node(i))?;
        let c0p2t = &reduced.c0[i] * p2.transpose();
        integrand.push(c0p2t.transpose() * &c0p2t);
        p2_rows.push(p2);
    }
    let gramian = quadrature(&MatrixGridFunction::new(grid.clone(), integrand)?);
    let p1_t0 = l2.p1.p.value(0).clone();
    let range_ok = range_included(&p1_t0, &gramian, tol_range)?;
    if !range_ok {
        return Ok(OpenLoopSynthesis {
            gramian,
            range_ok,
            controller: None,
        });
    }
    let x0 = &reduced.problem().x0;
    let zeta = pinv(&gramian, DEFAULT_RANK_TOL)?.pinv * &p1_t0 * x0;
    let mut u1_values = Vec::with_capacity(grid.node_count());
    for i in 0..grid.node_count() {
        let u1 = &reduced.c0[i] * p2_rows[i].transpose() * &zeta;
        u1_values.push(DMatrix::from_column_slice(u1.len(), 1, u1.as_slice()));
    }
    let u1_profile = MatrixGridFunction::new(grid, u1_values)?;
    let controller = Controller::IrregularOpenLoop(IrregularOpenLoop {
        u1_profile,
        zeta,
        gramian: gramian.clone(),
        reduced: reduced.clone(),
        l2: l2.clone(),
        psi,
    });
    Ok(OpenLoopSynthesis {
        gramian,
        range_ok,
        controller: Some(controller),
    })
}

/// Outcome of a closed-loop gain construction.
#[derive(Debug)]
pub enum ClosedLoopOutcome {
    Gain(Controller),
    /// The gain equation has no solution at the named node.
    NoGain {
        node: usize,
        time: f64,
    },
    /// The nonsingular path does not apply: `P1` is singular at the node.
    SingularP1 {
        node: usize,
    },
    /// The singular path cannot track the eigenstructure of `P1`.
    Unsupported(String),
}

/// Closed-loop synthesis for invertible `P1(t)`: solve
/// `B0(t) K = I/(t-T) - A0(t) - D0(t) P1(t)` per interior node.
pub fn closed_loop_nonsingular(
    reduced: &ReducedSystem,
    l2: &LayerTwoSolution,
    tol: f64,
) -> Result<ClosedLoopOutcome> {
    if !l2.solvable {
        return Err(SolverError::Misuse(
            "closed-loop synthesis requires a solvable layer-two solution".into(),
        ));
    }
    let grid = reduced.grid();
    let n = reduced.state_dim();
    for i in 0..grid.steps {
        let svd = jacobi_svd(l2.p1.p.value(i));
        let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
        let cutoff = reduced.rank_tol() * sigma_max * n as f64;
        if svd.sigma.iter().any(|&s| s <= cutoff) {
            return Ok(ClosedLoopOutcome::SingularP1 { node: i });
        }
    }
    let mut gains = Vec::with_capacity(grid.steps);
    for i in 0..grid.steps {
        let t = grid.node(i);
        let rhs = DMatrix::identity(n, n) / (t - grid.t_final)
            - &reduced.a0[i]
            - &reduced.d0[i] * l2.p1.p.value(i);
        match solve_linear_matrix_eq(&reduced.b0[i], &DMatrix::identity(n, n), &rhs, tol)? {
            Some(k) => gains.push(k),
            None => return Ok(ClosedLoopOutcome::NoGain { node: i, time: t }),
        }
    }
    Ok(ClosedLoopOutcome::Gain(Controller::IrregularClosedLoop(
        IrregularClosedLoop {
            k1: gains,
            kind: GainKind::Nonsingular,
            reduced: reduced.clone(),
            l2: l2.clone(),
        },
    )))
}

/// Overlap threshold below which eigenvector tracking across nodes is
/// refused.
pub const EIGENVECTOR_OVERLAP_THRESHOLD: f64 = 0.9;

fn match_block(
    prev: &DMatrix<f64>,
    fresh: &DMatrix<f64>,
) -> std::result::Result<DMatrix<f64>, f64> {
    let cols = fresh.ncols();
    if cols == 0 {
        return Ok(fresh.clone());
    }
    let overlaps = prev.transpose() * fresh; // prev column x fresh column
    let mut taken_prev = vec![false; cols];
    let mut taken_fresh = vec![false; cols];
    let mut assignment = vec![(0usize, 1.0f64); cols];
    for _ in 0..cols {
        let mut best = (0usize, 0usize, -1.0f64);
        for i in 0..cols {
            if taken_prev[i] {
                continue;
            }
            for j in 0..cols {
                if taken_fresh[j] {
                    continue;
                }
                let v = overlaps[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        let (i, j, v) = best;
        if v < EIGENVECTOR_OVERLAP_THRESHOLD {
            return Err(v);
        }
        taken_prev[i] = true;
        taken_fresh[j] = true;
        assignment[i] = (j, overlaps[(i, j)].signum());
    }
    let mut out = DMatrix::zeros(fresh.nrows(), cols);
    for (slot, &(j, sign)) in assignment.iter().enumerate() {
        out.column_mut(slot).copy_from(&(fresh.column(j) * sign));
    }
    Ok(out)
}

/// Closed-loop synthesis for singular `P1(t)` of constant rank: track the
/// eigenstructure `T1(t)` across nodes, differentiate it by finite
/// differences, and solve the leading block row of the transformed dynamics
/// for the gain. Delegates to [`closed_loop_nonsingular`] when `P1` is in
/// fact invertible everywhere.
pub fn closed_loop_singular(
    reduced: &ReducedSystem,
    l2: &LayerTwoSolution,
    tol: f64,
) -> Result<ClosedLoopOutcome> {
    if !l2.solvable {
        return Err(SolverError::Misuse(
            "closed-loop synthesis requires a solvable layer-two solution".into(),
        ));
    }
    let grid = reduced.grid().clone();
    let n = reduced.state_dim();
    let nodes = grid.node_count();

    // Rank profile on [t0, T).
    let rank_at = |i: usize| -> usize {
        let svd = jacobi_svd(l2.p1.p.value(i));
        let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
        let cutoff = reduced.rank_tol() * sigma_max * n as f64;
        svd.sigma.iter().filter(|&&s| s > cutoff).count()
    };
    let rank = rank_at(0);
    for i in 1..grid.steps {
        let r = rank_at(i);
        if r != rank {
            return Ok(ClosedLoopOutcome::Unsupported(format!(
                "rank of P1 varies over the horizon ({rank} at t0, {r} at t = {})",
                grid.node(i)
            )));
        }
    }
    if rank == n {
        return closed_loop_nonsingular(reduced, l2, tol);
    }

    // Tracked eigenbasis per node; the terminal node is included because the
    // simulator needs T1(T) for the terminal placement.
    let mut t1_values: Vec<DMatrix<f64>> = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let svd = jacobi_svd(l2.p1.p.value(i));
        let fresh = svd.v;
        if let Some(prev) = t1_values.last() {
            match match_block(prev, &fresh) {
                Ok(matched) => t1_values.push(matched),
                Err(overlap) => {
                    return Ok(ClosedLoopOutcome::Unsupported(format!(
                        "eigenvector overlap {overlap:.3} fell below {EIGENVECTOR_OVERLAP_THRESHOLD} at t = {}",
                        grid.node(i)
                    )))
                }
            }
        } else {
            t1_values.push(fresh);
        }
    }

    // d(T1')/dt * T1 by finite differences (central inside, one-sided ends).
    let h = grid.spacing();
    let mut ttilde_values = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let dt1 = if i == 0 {
            (&t1_values[1] - &t1_values[0]) / h
        } else if i == nodes - 1 {
            (&t1_values[nodes - 1] - &t1_values[nodes - 2]) / h
        } else {
            (&t1_values[i + 1] - &t1_values[i - 1]) / (2.0 * h)
        };
        ttilde_values.push(dt1.transpose() * &t1_values[i]);
    }

    let mut gains = Vec::with_capacity(grid.steps);
    for i in 0..grid.steps {
        let t = grid.node(i);
        if rank == 0 {
            gains.push(DMatrix::zeros(reduced.reduced_dim(), n));
            continue;
        }
        let t1 = &t1_values[i];
        let closed = &reduced.a0[i] + &reduced.d0[i] * l2.p1.p.value(i);
        let a_hat = (t1.transpose() * closed * t1).rows(0, rank).clone_owned();
        let b1 = (t1.transpose() * &reduced.b0[i])
            .rows(0, rank)
            .clone_owned();
        let mut rhs = DMatrix::zeros(rank, n);
        for d in 0..rank {
            rhs[(d, d)] = 1.0 / (t - grid.t_final);
        }
        rhs -= ttilde_values[i].rows(0, rank);
        rhs -= a_hat;
        match solve_linear_matrix_eq(&b1, &DMatrix::identity(n, n), &rhs, tol)? {
            Some(x) => gains.push(x * t1.transpose()),
            None => return Ok(ClosedLoopOutcome::NoGain { node: i, time: t }),
        }
    }

    let t1 = MatrixGridFunction::new(grid.clone(), t1_values)?;
    let t1_dot_t1 = MatrixGridFunction::new(grid, ttilde_values)?;
    Ok(ClosedLoopOutcome::Gain(Controller::IrregularClosedLoop(
        IrregularClosedLoop {
            k1: gains,
            kind: GainKind::Singular(SingularGainData {
                rank,
                t1,
                t1_dot_t1,
            }),
            reduced: reduced.clone(),
            l2: l2.clone(),
        },
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_p1, integrate_regular_riccati};
    use crate::model::{fixture, Fixture, MatrixFunction, TimeGrid};
    use crate::reduce::reduce;
    use nalgebra::{dmatrix, dvector};

    const RANK_TOL: f64 = DEFAULT_RANK_TOL;
    const RANGE_TOL: f64 = 1e-8;
    const GAMMA_TOL: f64 = 1e-6;

    fn layer_two(problem: &LQProblem) -> (ReducedSystem, LayerTwoSolution) {
        let riccati = integrate_regular_riccati(problem, RANK_TOL).unwrap();
        let reduced = reduce(problem, &riccati, RANK_TOL).unwrap();
        let terminal = select_p1_terminal(&reduced, RANGE_TOL).unwrap().unwrap();
        let p1 = integrate_p1(&reduced, &terminal).unwrap();
        let l2 = check_solvability(&reduced, &p1, GAMMA_TOL);
        (reduced, l2)
    }

    /// Scalar regular problem a=0, b=1, q=1, r=1, H=0 on [0, 1]:
    /// P(t) = tanh(1-t), K0(t) = -tanh(1-t).
    fn scalar_regular(steps: usize) -> LQProblem {
        LQProblem {
            n: 1,
            m: 1,
            grid: TimeGrid::new(0.0, 1.0, steps).unwrap(),
            a: MatrixFunction::constant(dmatrix![0.0]),
            b: MatrixFunction::constant(dmatrix![1.0]),
            q: MatrixFunction::constant(dmatrix![1.0]),
            r: MatrixFunction::constant(dmatrix![1.0]),
            h: dmatrix![0.0],
            x0: dvector![1.0],
        }
    }

    /// Two-state variant whose layer-two solution is diag(pi(t), 0): the
    /// first state is a copy of the E1 dynamics, the second is uncontrolled
    /// and cost-free.
    fn split_fixture(steps: usize) -> LQProblem {
        LQProblem {
            n: 2,
            m: 2,
            grid: TimeGrid::new(0.0, 1.0, steps).unwrap(),
            a: MatrixFunction::constant(DMatrix::zeros(2, 2)),
            b: MatrixFunction::constant(dmatrix![1.0, 1.0; 0.0, 0.0]),
            q: MatrixFunction::constant(DMatrix::zeros(2, 2)),
            r: MatrixFunction::constant(dmatrix![1.0, 0.0; 0.0, 0.0]),
            h: dmatrix![1.0, 0.0; 0.0, 0.0],
            x0: dvector![1.0, 0.5],
        }
    }

    #[test]
    fn regular_gain_matches_scalar_closed_form() {
        let p = scalar_regular(1000);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let controller = solve_regular(&p, &riccati, RANGE_TOL, RANK_TOL).unwrap();
        let Controller::RegularFeedback(ref fb) = controller else {
            panic!("expected regular feedback");
        };
        for (i, t) in p.grid.nodes().enumerate().step_by(100) {
            let expected = -((1.0 - t).tanh());
            assert!((fb.k0.value(i)[(0, 0)] - expected).abs() <= 1e-10);
        }
        assert!((riccati.p.value(0)[(0, 0)] - 1.0_f64.tanh()).abs() <= 1e-10);
    }

    #[test]
    fn regular_gain_full_weight() {
        let mut p = fixture(Fixture::E1, 300);
        p.r = MatrixFunction::constant(DMatrix::identity(2, 2));
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let controller = solve_regular(&p, &riccati, RANGE_TOL, RANK_TOL).unwrap();
        let Controller::RegularFeedback(ref fb) = controller else {
            panic!("expected regular feedback");
        };
        for i in [0, 150, 300] {
            let pv = riccati.p.value(i)[(0, 0)];
            assert!(max_abs(&(fb.k0.value(i) + dmatrix![pv; pv])) <= 1e-12);
        }
    }

    #[test]
    fn regular_gain_zero_cost() {
        let mut p = scalar_regular(100);
        p.q = MatrixFunction::constant(dmatrix![0.0]);
        p.h = dmatrix![0.0];
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let controller = solve_regular(&p, &riccati, RANGE_TOL, RANK_TOL).unwrap();
        let Controller::RegularFeedback(ref fb) = controller else {
            panic!("expected regular feedback");
        };
        assert!(fb.k0.values.iter().all(|k| max_abs(k) == 0.0));
    }

    #[test]
    fn regular_synthesis_rejects_irregular() {
        let p = fixture(Fixture::E1, 100);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        assert!(matches!(
            solve_regular(&p, &riccati, RANGE_TOL, RANK_TOL),
            Err(SolverError::Misuse(_))
        ));
    }

    #[test]
    fn terminal_selection_e1() {
        let p = fixture(Fixture::E1, 400);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let reduced = reduce(&p, &riccati, RANK_TOL).unwrap();
        let terminal = select_p1_terminal(&reduced, RANGE_TOL).unwrap().unwrap();
        assert!((terminal[(0, 0)] + 1.0).abs() <= 1e-10);
    }

    #[test]
    fn terminal_selection_e2() {
        let p = fixture(Fixture::E2, 400);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let reduced = reduce(&p, &riccati, RANK_TOL).unwrap();
        let terminal = select_p1_terminal(&reduced, RANGE_TOL).unwrap().unwrap();
        assert!((terminal[(0, 0)] + 2.0).abs() <= 1e-10);
    }

    #[test]
    fn terminal_selection_zero_c0() {
        // H = 0 keeps P ≡ 0, so C0(T) = 0 and the minimal terminal is zero.
        let mut p = fixture(Fixture::E1, 100);
        p.h = DMatrix::zeros(1, 1);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let reduced = reduce(&p, &riccati, RANK_TOL).unwrap();
        let terminal = select_p1_terminal(&reduced, RANGE_TOL).unwrap().unwrap();
        assert_eq!(max_abs(&terminal), 0.0);
    }

    #[test]
    fn solvability_verdicts() {
        let (_, l2_e1) = layer_two(&fixture(Fixture::E1, 1000));
        assert!(l2_e1.solvable);
        assert!(l2_e1.gamma1_max <= 1e-8, "gamma1 {:.3e}", l2_e1.gamma1_max);

        let (_, l2_e2) = layer_two(&fixture(Fixture::E2, 1000));
        assert!(!l2_e2.solvable);
        assert!((l2_e2.gamma1_max - 1.0_f64.tanh()).abs() <= 1e-4);
    }

    #[test]
    fn open_loop_e1() {
        let (reduced, l2) = layer_two(&fixture(Fixture::E1, 1000));
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        assert!(synth.range_ok);
        assert!((synth.gramian[(0, 0)] - 0.25).abs() <= 1e-10);
        let Some(Controller::IrregularOpenLoop(ref ol)) = synth.controller else {
            panic!("expected open-loop controller");
        };
        assert!((ol.zeta[0] + 2.0).abs() <= 1e-8);
        for v in &ol.u1_profile.values {
            assert!((v[(0, 0)] + 1.0).abs() <= 1e-8);
        }
        // Stage-time evaluation matches the grid values.
        let u1_mid = ol.u1_at(0.3335).unwrap();
        assert!((u1_mid[0] + 1.0).abs() <= 1e-8);
    }

    #[test]
    fn open_loop_zero_initial_state() {
        let mut p = fixture(Fixture::E1, 500);
        p.x0 = dvector![0.0];
        let (reduced, l2) = layer_two(&p);
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        let Some(Controller::IrregularOpenLoop(ref ol)) = synth.controller else {
            panic!("expected open-loop controller");
        };
        assert_eq!(ol.zeta.amax(), 0.0);
        assert!(ol.u1_profile.values.iter().all(|v| max_abs(v) <= 1e-12));
    }

    #[test]
    fn open_loop_zero_p1() {
        // C0 ≡ 0 (H = 0) gives P1 ≡ 0, zeta = 0, u1 ≡ 0.
        let mut p = fixture(Fixture::E1, 200);
        p.h = DMatrix::zeros(1, 1);
        let (reduced, l2) = layer_two(&p);
        assert!(l2.solvable);
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        let Some(Controller::IrregularOpenLoop(ref ol)) = synth.controller else {
            panic!("expected open-loop controller");
        };
        assert!(ol.u1_profile.values.iter().all(|v| max_abs(v) <= 1e-12));
    }

    #[test]
    fn closed_loop_nonsingular_e1() {
        let (reduced, l2) = layer_two(&fixture(Fixture::E1, 1000));
        let outcome = closed_loop_nonsingular(&reduced, &l2, 1e-8).unwrap();
        let ClosedLoopOutcome::Gain(controller) = outcome else {
            panic!("expected gain");
        };
        let Controller::IrregularClosedLoop(ref cl) = controller else {
            panic!("expected closed loop");
        };
        let grid = reduced.grid();
        for (i, k) in cl.k1.iter().enumerate() {
            let t = grid.node(i);
            let expected = 1.0 / (t - 1.0);
            assert!(
                (k[(0, 0)] - expected).abs() <= 1e-6 * (1.0 + expected.abs()),
                "node {i}: {} vs {}",
                k[(0, 0)],
                expected
            );
        }
        // Analytic gain evaluation agrees off the grid.
        let t_probe = 0.98765;
        let k_mid = cl.gain_at(t_probe).unwrap();
        let expected = 1.0 / (t_probe - 1.0);
        assert!((k_mid[(0, 0)] - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
    }

    #[test]
    fn closed_loop_no_gain_when_b0_vanishes() {
        // Reduced system with B0 = 0 plus an invertible stand-in P1: the
        // gain equation 0 * K = rhs with rhs != 0 has no solution.
        let mut p = fixture(Fixture::E1, 50);
        p.b = MatrixFunction::constant(dmatrix![1.0, 0.0]);
        p.a = MatrixFunction::constant(dmatrix![0.5]);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let reduced = reduce(&p, &riccati, RANK_TOL).unwrap();
        let constant = dmatrix![2.0];
        let values = vec![constant.clone(); p.grid.node_count()];
        let derivs = vec![DMatrix::zeros(1, 1); p.grid.node_count()];
        let p1 = RiccatiSolution {
            p: MatrixGridFunction::with_derivs(p.grid.clone(), values, derivs).unwrap(),
            residual_norm: 0.0,
        };
        let l2 = LayerTwoSolution {
            p1_terminal: constant,
            p1,
            gamma1_max: 0.0,
            solvable: true,
        };
        let outcome = closed_loop_nonsingular(&reduced, &l2, 1e-8).unwrap();
        assert!(matches!(outcome, ClosedLoopOutcome::NoGain { node: 0, .. }));
    }

    #[test]
    fn open_loop_range_failure_reports_no_controller() {
        // C0 ≡ 0 makes the Gramian vanish; a stand-in nonzero P1 (still
        // consistent, since B0 = 0 keeps Gamma1 = C0 = 0) then violates the
        // range condition and synthesis must decline.
        let mut p = fixture(Fixture::E1, 50);
        p.b = MatrixFunction::constant(dmatrix![1.0, 0.0]);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let reduced = reduce(&p, &riccati, RANK_TOL).unwrap();
        let constant = dmatrix![2.0];
        let values = vec![constant.clone(); p.grid.node_count()];
        let derivs = vec![DMatrix::zeros(1, 1); p.grid.node_count()];
        let p1 = RiccatiSolution {
            p: MatrixGridFunction::with_derivs(p.grid.clone(), values, derivs).unwrap(),
            residual_norm: 0.0,
        };
        let l2 = LayerTwoSolution {
            p1_terminal: constant,
            p1,
            gamma1_max: 0.0,
            solvable: true,
        };
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        assert!(!synth.range_ok);
        assert!(synth.controller.is_none());
        assert_eq!(max_abs(&synth.gramian), 0.0);
    }

    #[test]
    fn closed_loop_singular_delegates_when_nonsingular() {
        let (reduced, l2) = layer_two(&fixture(Fixture::E1, 500));
        let direct = closed_loop_nonsingular(&reduced, &l2, 1e-8).unwrap();
        let via_singular = closed_loop_singular(&reduced, &l2, 1e-8).unwrap();
        let (ClosedLoopOutcome::Gain(a), ClosedLoopOutcome::Gain(b)) = (direct, via_singular)
        else {
            panic!("expected gains from both paths");
        };
        let (Controller::IrregularClosedLoop(a), Controller::IrregularClosedLoop(b)) = (a, b)
        else {
            panic!("expected closed-loop controllers");
        };
        assert!(matches!(b.kind, GainKind::Nonsingular));
        for (ka, kb) in a.k1.iter().zip(b.k1.iter()) {
            assert!(max_abs(&(ka - kb)) <= 1e-8);
        }
    }

    #[test]
    fn closed_loop_singular_block_construction() {
        let (reduced, l2) = layer_two(&split_fixture(1000));
        // P1 = diag(pi(t), 0): singular with rank 1.
        assert!(l2.solvable, "gamma1 {:.3e}", l2.gamma1_max);
        let outcome = closed_loop_singular(&reduced, &l2, 1e-8).unwrap();
        let ClosedLoopOutcome::Gain(controller) = outcome else {
            panic!("expected gain");
        };
        let Controller::IrregularClosedLoop(ref cl) = controller else {
            panic!("expected closed loop");
        };
        let GainKind::Singular(ref data) = cl.kind else {
            panic!("expected singular kind");
        };
        assert_eq!(data.rank, 1);
        let grid = reduced.grid();
        for (i, k) in cl.k1.iter().enumerate().step_by(100) {
            let t = grid.node(i);
            let expected = 1.0 / (t - 1.0);
            assert!(
                (k[(0, 0)] - expected).abs() <= 1e-6 * (1.0 + expected.abs()),
                "node {i}"
            );
            assert!(k[(0, 1)].abs() <= 1e-6);
        }
    }

    #[test]
    fn closed_loop_singular_zero_p1() {
        let mut p = fixture(Fixture::E1, 200);
        p.h = DMatrix::zeros(1, 1);
        let (reduced, l2) = layer_two(&p);
        let outcome = closed_loop_singular(&reduced, &l2, 1e-8).unwrap();
        let ClosedLoopOutcome::Gain(Controller::IrregularClosedLoop(cl)) = outcome else {
            panic!("expected gain");
        };
        assert!(cl.k1.iter().all(|k| max_abs(k) == 0.0));
    }

    #[test]
    fn full_control_structure_e1() {
        let (reduced, l2) = layer_two(&fixture(Fixture::E1, 1000));
        // Open loop: u = [0; u1] because (P + P1) annihilates the regular part.
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        let controller = synth.controller.unwrap();
        let x = dvector![0.7];
        let u = controller.control(0.25, &x).unwrap();
        assert!(u[0].abs() <= 1e-8);
        assert!((u[1] + 1.0).abs() <= 1e-8);

        // Closed loop at t = 0, x = 1: u = [0; -1].
        let outcome = closed_loop_nonsingular(&reduced, &l2, 1e-8).unwrap();
        let ClosedLoopOutcome::Gain(cl) = outcome else {
            panic!("expected gain");
        };
        let u = cl.control(0.0, &dvector![1.0]).unwrap();
        assert!(u[0].abs() <= 1e-8);
        assert!((u[1] + 1.0).abs() <= 1e-8);
    }

    #[test]
    fn full_control_reduces_to_regular_law() {
        // u1 ≡ 0 and P1 ≡ 0 leave u = -Upsilon0† Gamma0 x.
        let mut p = fixture(Fixture::E1, 100);
        p.h = DMatrix::zeros(1, 1);
        let (reduced_zero, l2_zero) = layer_two(&p);
        let law = assemble_full_control(&reduced_zero, &l2_zero, |_t, _x| Ok(dvector![0.0]));
        let x = dvector![2.0];
        let t = 0.5;
        let u = law(t, &x).unwrap();
        let basis = reduced_zero.eval_basis(t).unwrap();
        let b = reduced_zero.problem().b.evaluate(t);
        let expected =
            -(basis.upsilon0_pinv * b.transpose() * reduced_zero.riccati().p.eval(t) * &x);
        assert!((u - expected).amax() <= 1e-12);
    }

    #[test]
    fn gramian_kernel_perturbation_leaves_u1_unchanged() {
        // Split fixture: G1 = diag(1/4, 0) has a kernel direction e2.
        let (reduced, l2) = layer_two(&split_fixture(500));
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        assert!(synth.range_ok);
        assert!((synth.gramian[(0, 0)] - 0.25).abs() <= 1e-9);
        assert!(synth.gramian[(1, 1)].abs() <= 1e-12);
        let Some(Controller::IrregularOpenLoop(ol)) = synth.controller else {
            panic!("expected open-loop controller");
        };
        // u1 with zeta and with zeta + kernel vector agree at every node.
        let kernel = dvector![0.0, 1.0];
        let zeta_perturbed = &ol.zeta + kernel;
        for (i, t) in reduced.grid().nodes().enumerate().step_by(50) {
            let basis = reduced.eval_basis(t).unwrap();
            let p2 = ol.psi.value(i).clone().try_inverse().unwrap();
            let u1_a = &basis.c0 * p2.transpose() * &ol.zeta;
            let u1_b = &basis.c0 * p2.transpose() * &zeta_perturbed;
            assert!((u1_a - u1_b).amax() <= 1e-10);
        }
    }

    #[test]
    fn gain_invariance_under_cost_scaling() {
        let alpha = 2.0;
        // Regular gain.
        let base = scalar_regular(300);
        let mut scaled = scalar_regular(300);
        scaled.q = MatrixFunction::constant(dmatrix![alpha]);
        scaled.r = MatrixFunction::constant(dmatrix![alpha]);
        let rb = integrate_regular_riccati(&base, RANK_TOL).unwrap();
        let rs = integrate_regular_riccati(&scaled, RANK_TOL).unwrap();
        let cb = solve_regular(&base, &rb, RANGE_TOL, RANK_TOL).unwrap();
        let cs = solve_regular(&scaled, &rs, RANGE_TOL, RANK_TOL).unwrap();
        let (Controller::RegularFeedback(cb), Controller::RegularFeedback(cs)) = (cb, cs) else {
            panic!("expected regular feedback");
        };
        for i in [0, 150, 300] {
            assert!(max_abs(&(cb.k0.value(i) - cs.k0.value(i))) <= 1e-8);
        }

        // Irregular gains on E1 with (Q, R, H) scaled by alpha.
        let (reduced_b, l2_b) = layer_two(&fixture(Fixture::E1, 500));
        let mut e1_scaled = fixture(Fixture::E1, 500);
        e1_scaled.r = MatrixFunction::constant(dmatrix![alpha, 0.0; 0.0, 0.0]);
        e1_scaled.h = dmatrix![alpha];
        let (reduced_s, l2_s) = layer_two(&e1_scaled);
        let ob = open_loop(&reduced_b, &l2_b, RANGE_TOL).unwrap();
        let os = open_loop(&reduced_s, &l2_s, RANGE_TOL).unwrap();
        let (Some(Controller::IrregularOpenLoop(ob)), Some(Controller::IrregularOpenLoop(os))) =
            (ob.controller, os.controller)
        else {
            panic!("expected open-loop controllers");
        };
        for i in [0, 250, 500] {
            assert!(max_abs(&(ob.u1_profile.value(i) - os.u1_profile.value(i))) <= 1e-8);
        }
        let kb = closed_loop_nonsingular(&reduced_b, &l2_b, 1e-8).unwrap();
        let ks = closed_loop_nonsingular(&reduced_s, &l2_s, 1e-8).unwrap();
        let (
            ClosedLoopOutcome::Gain(Controller::IrregularClosedLoop(kb)),
            ClosedLoopOutcome::Gain(Controller::IrregularClosedLoop(ks)),
        ) = (kb, ks)
        else {
            panic!("expected gains");
        };
        for i in [0usize, 250, 499] {
            assert!(max_abs(&(&kb.k1[i] - &ks.k1[i])) <= 1e-8 * (1.0 + max_abs(&kb.k1[i])));
        }
    }
}
