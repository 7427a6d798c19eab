//! Forward simulation of closed systems, cost evaluation, terminal
//! constraint verification, and residual audits of the stationarity system
//! along simulated trajectories.

use nalgebra::DVector;

use crate::integrate::scalar_quadrature;
use crate::linalg::jacobi_svd;
use crate::model::{LQProblem, TimeGrid};
use crate::reduce::ReducedSystem;
use crate::synth::Controller;
use crate::{Result, SolverError};

/// A simulated run: per-node state, control, `Theta`, costate, plus the
/// achieved cost and the terminal constraint violation `||P1(T) x(T)||`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub theta: Vec<DVector<f64>>,
    pub costate: Vec<DVector<f64>>,
    pub cost: f64,
    pub terminal_violation: f64,
}

fn rk4_cell<F>(t_lo: f64, t_hi: f64, x: &DVector<f64>, f: F) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let h = t_hi - t_lo;
    let k1 = f(t_lo, x)?;
    let k2 = f(t_lo + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
    let k3 = f(t_lo + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
    let k4 = f(t_hi, &(x + &k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Simulate `dx/dt = A x + B u` under the controller.
///
/// Closed-loop irregular gains behave like `1/(t-T)` near the terminal time,
/// so the last cell is integrated with the reduced control linearly
/// extrapolated from the two preceding nodes (the control value itself stays
/// bounded along the closed loop), and the terminal state is then projected
/// onto the null space of `P1(T)`, where the exact transformed dynamics
/// sends it.
pub fn simulate(problem: &LQProblem, controller: &Controller) -> Result<Trajectory> {
    let grid = problem.grid.clone();
    let controller_grid = match controller {
        Controller::RegularFeedback(c) => &c.riccati.p.grid,
        Controller::IrregularOpenLoop(c) => c.reduced.grid(),
        Controller::IrregularClosedLoop(c) => c.reduced.grid(),
    };
    if *controller_grid != grid {
        return Err(SolverError::Input(
            "controller grid does not match the problem grid".into(),
        ));
    }
    let nodes = grid.node_count();
    let mut x = Vec::with_capacity(nodes);
    x.push(problem.x0.clone());

    let dynamics = |t: f64, state: &DVector<f64>| -> Result<DVector<f64>> {
        let u = controller.control(t, state)?;
        Ok(problem.a.evaluate(t) * state + problem.b.evaluate(t) * u)
    };

    let is_closed_loop = matches!(controller, Controller::IrregularClosedLoop(_));
    let regular_cells = if is_closed_loop {
        grid.steps - 1
    } else {
        grid.steps
    };

    for i in 0..regular_cells {
        let next = rk4_cell(grid.node(i), grid.node(i + 1), &x[i], dynamics)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                what: "state trajectory",
                node: i + 1,
                time: grid.node(i + 1),
            });
        }
        x.push(next);
    }

    let mut u1_terminal: Option<DVector<f64>> = None;
    if let Controller::IrregularClosedLoop(cl) = controller {
        // Extrapolate u1 linearly over the last cell from the two trailing
        // interior nodes; the singular gain never gets evaluated at t = T.
        let last = grid.steps;
        let ia = last.saturating_sub(2);
        let ib = last - 1;
        let (ta, tb) = (grid.node(ia), grid.node(ib));
        let u1_a = cl.u1_at(ta, &x[ia])?;
        let u1_b = cl.u1_at(tb, &x[ib])?;
        let u1_extrap = |t: f64| -> DVector<f64> {
            if tb > ta {
                &u1_b + (&u1_b - &u1_a) * ((t - tb) / (tb - ta))
            } else {
                u1_b.clone()
            }
        };
        let extrap_dynamics = |t: f64, state: &DVector<f64>| -> Result<DVector<f64>> {
            let u1 = u1_extrap(t);
            let u = crate::synth::full_control(&cl.reduced, &cl.l2, t, state, &u1)?;
            Ok(problem.a.evaluate(t) * state + problem.b.evaluate(t) * u)
        };
        let raw_terminal = rk4_cell(
            grid.node(grid.steps - 1),
            grid.node(grid.steps),
            x.last().unwrap(),
            extrap_dynamics,
        )?;
        // Place x(T) on the null space of P1(T): the transformed coordinate
        // along Range(P1(T)) decays exactly like (T - t).
        let svd = jacobi_svd(&cl.l2.p1_terminal);
        let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
        let cutoff = cl.reduced.rank_tol() * sigma_max * problem.n as f64;
        let rank = svd.sigma.iter().filter(|&&s| s > cutoff).count();
        let mut projected = raw_terminal.clone();
        for col in 0..rank {
            let v = svd.v.column(col);
            let coef = v.dot(&raw_terminal);
            projected -= v * coef;
        }
        x.push(projected);
        u1_terminal = Some(u1_extrap(grid.t_final));
    }

    debug_assert_eq!(x.len(), nodes);

    // Node-wise control, Theta, costate.
    let mut u = Vec::with_capacity(nodes);
    let mut theta = Vec::with_capacity(nodes);
    let mut costate = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let t = grid.node(i);
        let ui = match (&u1_terminal, controller) {
            (Some(u1), Controller::IrregularClosedLoop(cl)) if i == nodes - 1 => {
                crate::synth::full_control(&cl.reduced, &cl.l2, t, &x[i], u1)?
            }
            _ => controller.control(t, &x[i])?,
        };
        let th = controller.theta(t, &x[i]);
        let p_mat = controller.riccati().p.value(i);
        costate.push(p_mat * &x[i] + &th);
        theta.push(th);
        u.push(ui);
    }

    // Cost by the same quadrature rule as the Gramian.
    let integrand: Vec<f64> = (0..nodes)
        .map(|i| {
            let t = grid.node(i);
            let q = problem.q.evaluate(t);
            let r = problem.r.evaluate(t);
            (x[i].transpose() * q * &x[i])[(0, 0)] + (u[i].transpose() * r * &u[i])[(0, 0)]
        })
        .collect();
    let terminal_cost = (x[nodes - 1].transpose() * &problem.h * &x[nodes - 1])[(0, 0)];
    let cost = scalar_quadrature(&grid, &integrand) + terminal_cost;

    let terminal_violation = match controller.layer_two() {
        Some(l2) => (&l2.p1_terminal * &x[nodes - 1]).norm(),
        None => 0.0,
    };

    Ok(Trajectory {
        grid,
        x,
        u,
        theta,
        costate,
        cost,
        terminal_violation,
    })
}

/// Max-norm residuals of the stationarity system along a trajectory.
#[derive(Debug, Clone, Default)]
pub struct ResidualReport {
    /// `dx/dt - (A x + B u)` by central differences.
    pub state_eq: f64,
    /// `dp/dt + A' p + Q x` by central differences.
    pub costate_eq: f64,
    /// `R u + B' p` pointwise.
    pub equilibrium: f64,
    /// `C0 x + B0' Theta` pointwise (zero for regular runs).
    pub algebraic: f64,
    /// `dTheta/dt + A0' Theta + C0' u1` by central differences (zero for
    /// regular runs).
    pub theta_dynamics: f64,
    /// `||P1(T) x(T)||` carried over from the trajectory.
    pub terminal_violation: f64,
}

/// Audit the forward/backward stationarity equations along a trajectory.
/// Passing the reduced system enables the layer-two residuals (the algebraic
/// constraint and the `Theta` dynamics).
pub fn audit_fbde(
    problem: &LQProblem,
    traj: &Trajectory,
    reduced: Option<&ReducedSystem>,
) -> Result<ResidualReport> {
    let grid = &traj.grid;
    let h = grid.spacing();
    let nodes = grid.node_count();
    let mut report = ResidualReport {
        terminal_violation: traj.terminal_violation,
        ..Default::default()
    };

    for i in 0..nodes {
        let t = grid.node(i);
        let a = problem.a.evaluate(t);
        let b = problem.b.evaluate(t);
        let q = problem.q.evaluate(t);
        let r = problem.r.evaluate(t);

        let eq = &r * &traj.u[i] + b.transpose() * &traj.costate[i];
        report.equilibrium = report.equilibrium.max(eq.amax());

        if i > 0 && i + 1 < nodes {
            let dx = (&traj.x[i + 1] - &traj.x[i - 1]) / (2.0 * h);
            let state_res = dx - (&a * &traj.x[i] + &b * &traj.u[i]);
            report.state_eq = report.state_eq.max(state_res.amax());

            let dp = (&traj.costate[i + 1] - &traj.costate[i - 1]) / (2.0 * h);
            let costate_res = dp + a.transpose() * &traj.costate[i] + &q * &traj.x[i];
            report.costate_eq = report.costate_eq.max(costate_res.amax());
        }
    }

    if let Some(reduced) = reduced {
        // u1 recovered from the full control:
        // G0' (u + Upsilon0† (Gamma0 x + B' Theta)).
        let mut u1_nodes: Vec<DVector<f64>> = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let t = grid.node(i);
            let b = problem.b.evaluate(t);
            let upsilon0_pinv = crate::linalg::pinv(&reduced.upsilon0[i], reduced.rank_tol())?.pinv;
            let inner = &reduced.gamma0[i] * &traj.x[i] + b.transpose() * &traj.theta[i];
            u1_nodes.push(reduced.g0[i].transpose() * (&traj.u[i] + upsilon0_pinv * inner));
        }
        for i in 0..nodes {
            let alg = &reduced.c0[i] * &traj.x[i] + reduced.b0[i].transpose() * &traj.theta[i];
            if !alg.is_empty() {
                report.algebraic = report.algebraic.max(alg.amax());
            }
            if i > 0 && i + 1 < nodes {
                let dtheta = (&traj.theta[i + 1] - &traj.theta[i - 1]) / (2.0 * h);
                let res = dtheta
                    + reduced.a0[i].transpose() * &traj.theta[i]
                    + reduced.c0[i].transpose() * &u1_nodes[i];
                report.theta_dynamics = report.theta_dynamics.max(res.amax());
            }
        }
    }

    Ok(report)
}

/// Render a trajectory as CSV with 17-significant-digit floats.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let n = traj.x[0].len();
    let m = traj.u[0].len();
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 1..=m {
        out.push_str(&format!(",u_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",theta_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",p_{i}"));
    }
    out.push('\n');
    for i in 0..traj.grid.node_count() {
        out.push_str(&format_float(traj.grid.node(i)));
        for block in [&traj.x[i], &traj.u[i], &traj.theta[i], &traj.costate[i]] {
            for v in block.iter() {
                out.push(',');
                out.push_str(&format_float(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// 17 significant digits, scientific notation; deterministic.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_p1, integrate_regular_riccati};
    use crate::linalg::DEFAULT_RANK_TOL;
    use crate::model::{fixture, Fixture, MatrixFunction};
    use crate::reduce::reduce;
    use crate::synth::{
        check_solvability, closed_loop_nonsingular, closed_loop_singular, open_loop,
        select_p1_terminal, solve_regular, ClosedLoopOutcome, LayerTwoSolution,
    };
    use nalgebra::DMatrix;
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

    fn e1_open_loop(steps: usize) -> (LQProblem, Controller) {
        let p = fixture(Fixture::E1, steps);
        let (reduced, l2) = layer_two(&p);
        let synth = open_loop(&reduced, &l2, RANGE_TOL).unwrap();
        (p, synth.controller.unwrap())
    }

    fn e1_closed_loop(steps: usize) -> (LQProblem, Controller) {
        let p = fixture(Fixture::E1, steps);
        let (reduced, l2) = layer_two(&p);
        let ClosedLoopOutcome::Gain(c) = closed_loop_nonsingular(&reduced, &l2, 1e-8).unwrap()
        else {
            panic!("expected gain");
        };
        (p, c)
    }

    #[test]
    fn open_loop_trajectory_e1() {
        let (p, controller) = e1_open_loop(1000);
        let traj = simulate(&p, &controller).unwrap();
        for (i, t) in p.grid.nodes().enumerate().step_by(100) {
            assert!(
                (traj.x[i][0] - (1.0 - t)).abs() <= 1e-8,
                "x({t}) = {}",
                traj.x[i][0]
            );
        }
        assert!(traj.x.last().unwrap()[0].abs() <= 1e-8);
        assert!(traj.cost.abs() <= 1e-10, "cost {}", traj.cost);
        assert!(traj.cost >= -1e-12);
        assert!(traj.terminal_violation <= 1e-8);
    }

    #[test]
    fn closed_loop_trajectory_e1() {
        let (p, controller) = e1_closed_loop(1000);
        let traj = simulate(&p, &controller).unwrap();
        for (i, t) in p.grid.nodes().enumerate().step_by(100) {
            assert!(
                (traj.x[i][0] - (1.0 - t)).abs() <= 1e-6,
                "x({t}) = {}",
                traj.x[i][0]
            );
        }
        assert!(traj.x.last().unwrap()[0].abs() <= 1e-9);
        assert!(traj.cost.abs() <= 1e-10);
        assert!(traj.terminal_violation <= 1e-9);
    }

    #[test]
    fn open_and_closed_loop_agree_on_e1() {
        let (p, open) = e1_open_loop(1000);
        let (_, closed) = e1_closed_loop(1000);
        let t_open = simulate(&p, &open).unwrap();
        let t_closed = simulate(&p, &closed).unwrap();
        let worst = t_open
            .x
            .iter()
            .zip(t_closed.x.iter())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0_f64, f64::max);
        assert!(worst <= 1e-6, "trajectory gap {worst:.3e}");
        assert!((t_open.cost - t_closed.cost).abs() <= 1e-6);
    }

    #[test]
    fn uncontrolled_integrator_keeps_state() {
        // x stays at x0 when the control has no effect; cost reduces to the
        // terminal term x0' H x0.
        let mut held = fixture(Fixture::E1, 400);
        held.b = MatrixFunction::constant(DMatrix::zeros(1, 2));
        held.r = MatrixFunction::constant(DMatrix::identity(2, 2));
        let riccati = integrate_regular_riccati(&held, RANK_TOL).unwrap();
        let controller = solve_regular(&held, &riccati, RANGE_TOL, RANK_TOL).unwrap();
        let traj = simulate(&held, &controller).unwrap();
        assert!(traj.x.iter().all(|x| (x[0] - 1.0).abs() <= 1e-12));
        assert!(traj.u.iter().all(|u| u.amax() <= 1e-12));
        assert!((traj.cost - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn audit_residuals_small_on_e1() {
        for (p, controller) in [e1_open_loop(1000), e1_closed_loop(1000)] {
            let traj = simulate(&p, &controller).unwrap();
            let report = audit_fbde(&p, &traj, controller.reduced()).unwrap();
            assert!(report.state_eq <= 1e-4, "state {:.3e}", report.state_eq);
            assert!(
                report.costate_eq <= 1e-4,
                "costate {:.3e}",
                report.costate_eq
            );
            assert!(
                report.equilibrium <= 1e-6,
                "equilibrium {:.3e}",
                report.equilibrium
            );
            assert!(
                report.algebraic <= 1e-6,
                "algebraic {:.3e}",
                report.algebraic
            );
            assert!(
                report.theta_dynamics <= 1e-5,
                "theta {:.3e}",
                report.theta_dynamics
            );
            assert!(report.terminal_violation <= 1e-6);
        }
    }

    #[test]
    fn audit_regular_equilibrium() {
        let p = {
            let mut p = fixture(Fixture::E1, 1000);
            p.r = MatrixFunction::constant(DMatrix::identity(2, 2));
            p
        };
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let controller = solve_regular(&p, &riccati, RANGE_TOL, RANK_TOL).unwrap();
        let traj = simulate(&p, &controller).unwrap();
        let report = audit_fbde(&p, &traj, None).unwrap();
        assert!(report.equilibrium <= 1e-6);
        assert_eq!(report.algebraic, 0.0);
    }

    #[test]
    fn audit_flags_suboptimal_control() {
        // A hand-built u ≡ 0 trajectory on E1 with the true costate p = P x:
        // the equilibrium residual ||B' p|| stays visibly nonzero.
        let p = fixture(Fixture::E1, 500);
        let riccati = integrate_regular_riccati(&p, RANK_TOL).unwrap();
        let nodes = p.grid.node_count();
        let traj = Trajectory {
            grid: p.grid.clone(),
            x: vec![dvector![1.0]; nodes],
            u: vec![dvector![0.0, 0.0]; nodes],
            theta: vec![dvector![0.0]; nodes],
            costate: (0..nodes)
                .map(|i| riccati.p.value(i) * dvector![1.0])
                .collect(),
            cost: 1.0,
            terminal_violation: 0.0,
        };
        let report = audit_fbde(&p, &traj, None).unwrap();
        assert!(
            report.equilibrium > 0.1,
            "audit should flag the zero control, got {:.3e}",
            report.equilibrium
        );
    }

    #[test]
    fn singular_gain_trajectory_split_fixture() {
        let p = LQProblem {
            n: 2,
            m: 2,
            grid: crate::model::TimeGrid::new(0.0, 1.0, 1000).unwrap(),
            a: MatrixFunction::constant(DMatrix::zeros(2, 2)),
            b: MatrixFunction::constant(dmatrix![1.0, 1.0; 0.0, 0.0]),
            q: MatrixFunction::constant(DMatrix::zeros(2, 2)),
            r: MatrixFunction::constant(dmatrix![1.0, 0.0; 0.0, 0.0]),
            h: dmatrix![1.0, 0.0; 0.0, 0.0],
            x0: dvector![1.0, 0.5],
        };
        let (reduced, l2) = layer_two(&p);
        let ClosedLoopOutcome::Gain(controller) =
            closed_loop_singular(&reduced, &l2, 1e-8).unwrap()
        else {
            panic!("expected gain");
        };
        let traj = simulate(&p, &controller).unwrap();
        // y1 = x1 follows the linear factor (T - t)/(T - t0); x2 is inert.
        for (i, t) in p.grid.nodes().enumerate().step_by(100) {
            assert!(
                (traj.x[i][0] - (1.0 - t)).abs() <= 1e-6,
                "x1({t}) = {}",
                traj.x[i][0]
            );
            assert!((traj.x[i][1] - 0.5).abs() <= 1e-9);
        }
        assert!(traj.x.last().unwrap()[0].abs() <= 1e-9);
        assert!(traj.terminal_violation <= 1e-9);
        assert!(traj.cost.abs() <= 1e-10);
        let report = audit_fbde(&p, &traj, controller.reduced()).unwrap();
        assert!(report.equilibrium <= 1e-6);
        assert!(report.algebraic <= 1e-6);
    }

    #[test]
    fn closed_loop_u1_matches_open_loop_profile() {
        // u1 = K1 x re-derived along the closed-loop trajectory matches the
        // open-loop profile.
        let (p, open) = e1_open_loop(1000);
        let (_, closed) = e1_closed_loop(1000);
        let traj = simulate(&p, &closed).unwrap();
        let Controller::IrregularOpenLoop(ref ol) = open else {
            panic!();
        };
        let Controller::IrregularClosedLoop(ref cl) = closed else {
            panic!();
        };
        for (i, t) in p.grid.nodes().enumerate().take(p.grid.steps).step_by(50) {
            let u1_closed = cl.u1_at(t, &traj.x[i]).unwrap();
            let u1_open = ol.u1_profile.value(i)[(0, 0)];
            assert!(
                (u1_closed[0] - u1_open).abs() <= 1e-6,
                "node {i}: {} vs {}",
                u1_closed[0],
                u1_open
            );
        }
    }

    #[test]
    fn csv_shape() {
        let (p, controller) = e1_open_loop(10);
        let traj = simulate(&p, &controller).unwrap();
        let csv = trajectory_to_csv(&traj);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,u_1,u_2,theta_1,p_1");
        assert_eq!(csv.lines().count(), 12);
        let first_row = csv.lines().nth(1).unwrap();
        assert_eq!(first_row.split(',').count(), 6);
        // 17 significant digits.
        assert!(first_row.split(',').nth(1).unwrap().contains("e0"));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let (_, controller) = e1_open_loop(100);
        let p_fine = fixture(Fixture::E1, 200);
        assert!(matches!(
            simulate(&p_fine, &controller),
            Err(SolverError::Input(_))
        ));
    }
}
