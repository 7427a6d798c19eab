//! End-to-end solve driver: classify, reduce, run the layer-two analysis,
//! synthesize a controller, simulate, audit, and cross-check against the
//! discrete oracle. Produces a report that renders identically across runs.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::integrate::{integrate_p1, integrate_regular_riccati};
use crate::model::LQProblem;
use crate::oracle::{compare, ComparisonReport};
use crate::reduce::{classify, reduce, Verdict};
use crate::sim::{audit_fbde, format_float, simulate, ResidualReport, Trajectory};
use crate::synth::{
    check_solvability, closed_loop_nonsingular, closed_loop_singular, open_loop,
    select_p1_terminal, solve_regular, ClosedLoopOutcome, Controller,
};
use crate::Result;

/// Solver tolerances, all CLI-overridable.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerances {
    /// Relative singular-value cutoff for rank decisions.
    pub rank: f64,
    /// Layer-two consistency threshold on `max |Gamma1|`.
    pub gamma: f64,
    /// Range-inclusion threshold.
    pub range: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank: 1e-9,
            gamma: 1e-6,
            range: 1e-8,
        }
    }
}

/// Controller selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Open,
    Closed,
    /// Closed-loop first (nonsingular then singular path), open-loop last.
    Auto,
}

impl std::str::FromStr for Mode {
    type Err = crate::SolverError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "open" => Ok(Mode::Open),
            "closed" => Ok(Mode::Closed),
            "auto" => Ok(Mode::Auto),
            other => Err(crate::SolverError::Input(format!(
                "unknown mode '{other}' (expected open, closed, or auto)"
            ))),
        }
    }
}

/// Options for a full solve.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub mode: Mode,
    pub tolerances: Tolerances,
    /// Caller-supplied layer-two terminal value, overriding the minimal-norm
    /// selection.
    pub p1_terminal_override: Option<DMatrix<f64>>,
    /// Oracle ladder resolutions for the report cross-check.
    pub oracle_ladder: Vec<usize>,
    /// One-sided optimality slack for the oracle comparison.
    pub oracle_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            mode: Mode::Auto,
            tolerances: Tolerances::default(),
            p1_terminal_override: None,
            oracle_ladder: vec![50, 100],
            oracle_tol: 1e-4,
        }
    }
}

/// Verdict slug recorded in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solvability {
    /// The range condition holds; the classical construction applies.
    Regular,
    /// Irregular and the layer-two consistency condition holds.
    Solvable,
    /// The terminal equation for the layer-two solution has no solution.
    UnsolvableNoTerminal,
    /// `Gamma1` does not vanish with the minimal-norm terminal value.
    UnsolvableByMinimalTerminal,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerReport {
    pub attempted: Vec<String>,
    pub selected: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualsReport {
    pub state_eq: f64,
    pub costate_eq: f64,
    pub equilibrium: f64,
    pub algebraic: f64,
    pub theta_dynamics: f64,
    pub riccati: f64,
}

impl ResidualsReport {
    fn new(audit: &ResidualReport, riccati_residual: f64) -> Self {
        ResidualsReport {
            state_eq: audit.state_eq,
            costate_eq: audit.costate_eq,
            equilibrium: audit.equilibrium,
            algebraic: audit.algebraic,
            theta_dynamics: audit.theta_dynamics,
            riccati: riccati_residual,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleEntryReport {
    pub steps: usize,
    pub discrete_cost: f64,
    pub gap: f64,
    pub within_tol: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub continuous_cost: f64,
    pub entries: Vec<OracleEntryReport>,
    pub monotone_trend: bool,
}

impl From<&ComparisonReport> for OracleReport {
    fn from(c: &ComparisonReport) -> Self {
        OracleReport {
            continuous_cost: c.continuous_cost,
            entries: c
                .entries
                .iter()
                .map(|e| OracleEntryReport {
                    steps: e.n_steps,
                    discrete_cost: e.discrete_cost,
                    gap: e.gap,
                    within_tol: e.within_tol,
                })
                .collect(),
            monotone_trend: c.monotone_trend,
        }
    }
}

/// Machine-readable solve report; the JSON sidecar is this struct verbatim.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub classification: String,
    pub m0: usize,
    pub solvable: Solvability,
    pub open_loop_solvable: Option<bool>,
    pub controller: ControllerReport,
    pub cost: Option<f64>,
    pub gamma1_max: Option<f64>,
    pub terminal_violation: Option<f64>,
    pub residuals: Option<ResidualsReport>,
    pub oracle: Option<OracleReport>,
    pub tolerances: Tolerances,
}

/// A finished solve: the report, the trajectory when a controller was
/// produced, and whether a certified controller exists.
#[derive(Debug)]
pub struct SolveOutcome {
    pub report: SolveReport,
    pub trajectory: Option<Trajectory>,
    pub solved: bool,
}

/// Classify only (used by the `classify` subcommand).
pub fn run_classify(problem: &LQProblem, tol: &Tolerances) -> Result<(Verdict, usize)> {
    validate_or_fail(problem)?;
    let riccati = integrate_regular_riccati(problem, tol.rank)?;
    let class = classify(problem, &riccati, tol.range, tol.rank)?;
    Ok((class.verdict, class.m0))
}

fn validate_or_fail(problem: &LQProblem) -> Result<()> {
    let report = problem.validate();
    if report.is_clean() {
        Ok(())
    } else {
        let joined: Vec<String> = report.violations.iter().map(|v| v.what.clone()).collect();
        Err(crate::SolverError::Input(joined.join("; ")))
    }
}

/// Run the full pipeline.
pub fn run_solve(problem: &LQProblem, opts: &SolveOptions) -> Result<SolveOutcome> {
    validate_or_fail(problem)?;
    let tol = opts.tolerances;
    let riccati = integrate_regular_riccati(problem, tol.rank)?;
    let class = classify(problem, &riccati, tol.range, tol.rank)?;

    if class.verdict == Verdict::Regular {
        let controller = solve_regular(problem, &riccati, tol.range, tol.rank)?;
        let traj = simulate(problem, &controller)?;
        let audit = audit_fbde(problem, &traj, None)?;
        let oracle = compare(problem, traj.cost, &opts.oracle_ladder, opts.oracle_tol)?;
        let report = SolveReport {
            classification: "regular".into(),
            m0: class.m0,
            solvable: Solvability::Regular,
            open_loop_solvable: None,
            controller: ControllerReport {
                attempted: vec!["regular-feedback".into()],
                selected: Some("regular-feedback".into()),
                notes: vec![],
            },
            cost: Some(traj.cost),
            gamma1_max: None,
            terminal_violation: Some(traj.terminal_violation),
            residuals: Some(ResidualsReport::new(&audit, riccati.residual_norm)),
            oracle: Some((&oracle).into()),
            tolerances: tol,
        };
        return Ok(SolveOutcome {
            report,
            trajectory: Some(traj),
            solved: true,
        });
    }

    // Irregular branch.
    let reduced = reduce(problem, &riccati, tol.rank)?;
    let mut notes = Vec::new();
    let terminal = match &opts.p1_terminal_override {
        Some(t) => {
            notes.push("layer-two terminal value supplied by caller".into());
            t.clone()
        }
        None => match select_p1_terminal(&reduced, tol.range)? {
            Some(t) => t,
            None => {
                let report = SolveReport {
                    classification: "irregular".into(),
                    m0: class.m0,
                    solvable: Solvability::UnsolvableNoTerminal,
                    open_loop_solvable: None,
                    controller: ControllerReport {
                        attempted: vec![],
                        selected: None,
                        notes: vec!["terminal equation B0'(T) X = -C0(T) has no solution".into()],
                    },
                    cost: None,
                    gamma1_max: None,
                    terminal_violation: None,
                    residuals: None,
                    oracle: None,
                    tolerances: tol,
                };
                return Ok(SolveOutcome {
                    report,
                    trajectory: None,
                    solved: false,
                });
            }
        },
    };
    let p1 = integrate_p1(&reduced, &terminal)?;
    let l2 = check_solvability(&reduced, &p1, tol.gamma);
    if !l2.solvable {
        let report = SolveReport {
            classification: "irregular".into(),
            m0: class.m0,
            solvable: Solvability::UnsolvableByMinimalTerminal,
            open_loop_solvable: None,
            controller: ControllerReport {
                attempted: vec![],
                selected: None,
                notes: vec![format!(
                    "layer-two consistency fails: max |Gamma1| = {}",
                    format_float(l2.gamma1_max)
                )],
            },
            cost: None,
            gamma1_max: Some(l2.gamma1_max),
            terminal_violation: None,
            residuals: None,
            oracle: None,
            tolerances: tol,
        };
        return Ok(SolveOutcome {
            report,
            trajectory: None,
            solved: false,
        });
    }

    // The open-loop synthesis also carries the Gramian range test, which is
    // reported regardless of the selected mode.
    let ol = open_loop(&reduced, &l2, tol.range)?;
    let open_loop_solvable = Some(ol.range_ok);
    if !ol.range_ok {
        notes.push("open-loop range condition Range(P1(t0)) ⊆ Range(G1) fails".into());
    }

    let mut attempted = Vec::new();
    let try_closed =
        |attempted: &mut Vec<String>, notes: &mut Vec<String>| -> Result<Option<Controller>> {
            attempted.push("irregular-closed-loop".to_string());
            match closed_loop_nonsingular(&reduced, &l2, tol.range)? {
                ClosedLoopOutcome::Gain(c) => Ok(Some(c)),
                ClosedLoopOutcome::NoGain { node, time } => {
                    notes.push(format!(
                        "closed-loop gain equation unsolvable at node {node} (t = {time})"
                    ));
                    Ok(None)
                }
                ClosedLoopOutcome::SingularP1 { .. } => {
                    attempted.push("irregular-closed-loop-singular".to_string());
                    match closed_loop_singular(&reduced, &l2, tol.range)? {
                        ClosedLoopOutcome::Gain(c) => Ok(Some(c)),
                        ClosedLoopOutcome::NoGain { node, time } => {
                            notes.push(format!(
                                "closed-loop block equation unsolvable at node {node} (t = {time})"
                            ));
                            Ok(None)
                        }
                        ClosedLoopOutcome::Unsupported(reason) => {
                            notes.push(format!("closed-loop singular path unsupported: {reason}"));
                            Ok(None)
                        }
                        ClosedLoopOutcome::SingularP1 { .. } => Ok(None),
                    }
                }
                ClosedLoopOutcome::Unsupported(reason) => {
                    notes.push(format!("closed-loop synthesis unsupported: {reason}"));
                    Ok(None)
                }
            }
        };

    let controller: Option<Controller> = match opts.mode {
        Mode::Open => {
            attempted.push("irregular-open-loop".to_string());
            ol.controller
        }
        Mode::Closed => try_closed(&mut attempted, &mut notes)?,
        Mode::Auto => match try_closed(&mut attempted, &mut notes)? {
            Some(c) => Some(c),
            None => {
                attempted.push("irregular-open-loop".to_string());
                ol.controller
            }
        },
    };

    match controller {
        Some(controller) => {
            let traj = simulate(problem, &controller)?;
            let audit = audit_fbde(problem, &traj, controller.reduced())?;
            let oracle = compare(problem, traj.cost, &opts.oracle_ladder, opts.oracle_tol)?;
            let report = SolveReport {
                classification: "irregular".into(),
                m0: class.m0,
                solvable: Solvability::Solvable,
                open_loop_solvable,
                controller: ControllerReport {
                    attempted,
                    selected: Some(controller.kind_name().to_string()),
                    notes,
                },
                cost: Some(traj.cost),
                gamma1_max: Some(l2.gamma1_max),
                terminal_violation: Some(traj.terminal_violation),
                residuals: Some(ResidualsReport::new(&audit, riccati.residual_norm)),
                oracle: Some((&oracle).into()),
                tolerances: tol,
            };
            Ok(SolveOutcome {
                report,
                trajectory: Some(traj),
                solved: true,
            })
        }
        None => {
            notes.push("no controller produced for the requested mode".into());
            let report = SolveReport {
                classification: "irregular".into(),
                m0: class.m0,
                solvable: Solvability::Solvable,
                open_loop_solvable,
                controller: ControllerReport {
                    attempted,
                    selected: None,
                    notes,
                },
                cost: None,
                gamma1_max: Some(l2.gamma1_max),
                terminal_violation: None,
                residuals: None,
                oracle: None,
                tolerances: tol,
            };
            Ok(SolveOutcome {
                report,
                trajectory: None,
                solved: false,
            })
        }
    }
}

impl SolveReport {
    /// Deterministic human-readable rendering; numbers carry 17 significant
    /// digits so identical inputs produce byte-identical reports.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "classification: {} (m0 = {})\n",
            self.classification, self.m0
        ));
        let verdict = match self.solvable {
            Solvability::Regular => "regular",
            Solvability::Solvable => "solvable",
            Solvability::UnsolvableNoTerminal => "unsolvable (no layer-two terminal value)",
            Solvability::UnsolvableByMinimalTerminal => "unsolvable (by minimal-norm terminal)",
        };
        out.push_str(&format!("solvable: {verdict}\n"));
        if let Some(gamma1) = self.gamma1_max {
            out.push_str(&format!("gamma1_max: {}\n", format_float(gamma1)));
        }
        if let Some(flag) = self.open_loop_solvable {
            out.push_str(&format!("open-loop solvable: {flag}\n"));
        }
        out.push_str(&format!(
            "controller: {}\n",
            self.controller.selected.as_deref().unwrap_or("none")
        ));
        if !self.controller.attempted.is_empty() {
            out.push_str(&format!(
                "attempted: {}\n",
                self.controller.attempted.join(", ")
            ));
        }
        for note in &self.controller.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        if let Some(cost) = self.cost {
            out.push_str(&format!("cost: {}\n", format_float(cost)));
        }
        if let Some(tv) = self.terminal_violation {
            out.push_str(&format!("terminal_violation: {}\n", format_float(tv)));
        }
        if let Some(res) = &self.residuals {
            out.push_str("residuals:\n");
            out.push_str(&format!("  state_eq: {}\n", format_float(res.state_eq)));
            out.push_str(&format!("  costate_eq: {}\n", format_float(res.costate_eq)));
            out.push_str(&format!(
                "  equilibrium: {}\n",
                format_float(res.equilibrium)
            ));
            out.push_str(&format!("  algebraic: {}\n", format_float(res.algebraic)));
            out.push_str(&format!(
                "  theta_dynamics: {}\n",
                format_float(res.theta_dynamics)
            ));
            out.push_str(&format!("  riccati: {}\n", format_float(res.riccati)));
        }
        if let Some(oracle) = &self.oracle {
            out.push_str("oracle:\n");
            out.push_str(&format!(
                "  continuous_cost: {}\n",
                format_float(oracle.continuous_cost)
            ));
            for entry in &oracle.entries {
                out.push_str(&format!(
                    "  N={}: cost={} gap={} within_tol={}\n",
                    entry.steps,
                    format_float(entry.discrete_cost),
                    format_float(entry.gap),
                    entry.within_tol
                ));
            }
            out.push_str(&format!("  monotone_trend: {}\n", oracle.monotone_trend));
        }
        out.push_str(&format!(
            "tolerances: rank={} gamma={} range={}\n",
            format_float(self.tolerances.rank),
            format_float(self.tolerances.gamma),
            format_float(self.tolerances.range)
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixture, Fixture, MatrixFunction};
    use nalgebra::dmatrix;

    #[test]
    fn e1_auto_solves_closed_loop() {
        let p = fixture(Fixture::E1, 1000);
        let outcome = run_solve(&p, &SolveOptions::default()).unwrap();
        assert!(outcome.solved);
        assert_eq!(outcome.report.classification, "irregular");
        assert_eq!(outcome.report.solvable, Solvability::Solvable);
        assert_eq!(outcome.report.open_loop_solvable, Some(true));
        assert_eq!(
            outcome.report.controller.selected.as_deref(),
            Some("irregular-closed-loop")
        );
        assert!(outcome.report.cost.unwrap().abs() <= 1e-10);
        assert!(outcome.report.gamma1_max.unwrap() <= 1e-8);
    }

    #[test]
    fn e1_open_mode() {
        let p = fixture(Fixture::E1, 1000);
        let opts = SolveOptions {
            mode: Mode::Open,
            ..Default::default()
        };
        let outcome = run_solve(&p, &opts).unwrap();
        assert!(outcome.solved);
        assert_eq!(
            outcome.report.controller.selected.as_deref(),
            Some("irregular-open-loop")
        );
        assert!(outcome.report.cost.unwrap().abs() <= 1e-10);
    }

    #[test]
    fn e2_unsolvable() {
        let p = fixture(Fixture::E2, 1000);
        let outcome = run_solve(&p, &SolveOptions::default()).unwrap();
        assert!(!outcome.solved);
        assert_eq!(
            outcome.report.solvable,
            Solvability::UnsolvableByMinimalTerminal
        );
        let gamma1 = outcome.report.gamma1_max.unwrap();
        assert!((gamma1 - 1.0_f64.tanh()).abs() <= 1e-4, "gamma1 {gamma1}");
        assert!(outcome.trajectory.is_none());
    }

    #[test]
    fn regular_pipeline() {
        let mut p = fixture(Fixture::E1, 500);
        p.r = MatrixFunction::constant(nalgebra::DMatrix::identity(2, 2));
        let outcome = run_solve(&p, &SolveOptions::default()).unwrap();
        assert!(outcome.solved);
        assert_eq!(outcome.report.classification, "regular");
        assert_eq!(outcome.report.solvable, Solvability::Regular);
        // Theta ≡ 0 for regular problems.
        let traj = outcome.trajectory.unwrap();
        assert!(traj.theta.iter().all(|th| th.amax() == 0.0));
    }

    #[test]
    fn p1_terminal_override_respected() {
        let p = fixture(Fixture::E1, 500);
        let opts = SolveOptions {
            p1_terminal_override: Some(dmatrix![-1.0]),
            ..Default::default()
        };
        let outcome = run_solve(&p, &opts).unwrap();
        assert!(outcome.solved);
        // A wrong terminal value makes the problem report as unsolvable.
        let opts_bad = SolveOptions {
            p1_terminal_override: Some(dmatrix![0.5]),
            ..Default::default()
        };
        let outcome_bad = run_solve(&p, &opts_bad).unwrap();
        assert!(!outcome_bad.solved);
        assert_eq!(
            outcome_bad.report.solvable,
            Solvability::UnsolvableByMinimalTerminal
        );
    }

    #[test]
    fn report_rendering_is_deterministic() {
        let p = fixture(Fixture::E1, 300);
        let opts = SolveOptions {
            oracle_ladder: vec![20, 40],
            ..Default::default()
        };
        let a = run_solve(&p, &opts).unwrap();
        let b = run_solve(&p, &opts).unwrap();
        assert_eq!(a.report.to_text(), b.report.to_text());
        assert_eq!(a.report.to_json(), b.report.to_json());
        // Key set of the JSON sidecar.
        let value: serde_json::Value = serde_json::from_str(&a.report.to_json()).unwrap();
        let obj = value.as_object().unwrap();
        for key in [
            "classification",
            "m0",
            "solvable",
            "open_loop_solvable",
            "controller",
            "cost",
            "gamma1_max",
            "terminal_violation",
            "residuals",
            "oracle",
            "tolerances",
        ] {
            assert!(obj.contains_key(key), "missing key {key}");
        }
    }

    #[test]
    fn validation_failure_is_input_error() {
        let mut p = fixture(Fixture::E1, 100);
        p.r = MatrixFunction::constant(dmatrix![1.0, 0.0; 0.0, -1.0]);
        assert!(matches!(
            run_solve(&p, &SolveOptions::default()),
            Err(crate::SolverError::Input(_))
        ));
    }
}
