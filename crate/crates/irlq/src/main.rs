//! Command-line front end for the irregular-LQ solver.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 unsolvable verdict
//! (or no controller produced for the requested mode), 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use irlq::model::{self, Fixture, LQProblem};
use irlq::pipeline::{run_classify, run_solve, Mode, SolveOptions, Tolerances};
use irlq::reduce::Verdict;
use irlq::sim::{format_float, trajectory_to_csv};
use irlq::SolverError;

#[derive(Parser)]
#[command(
    name = "irlq",
    about = "Finite-horizon LQ optimal control with singular control weights",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Override the grid resolution from the problem file.
    #[arg(long)]
    grid: Option<usize>,
    /// Relative rank tolerance for singular-value cutoffs.
    #[arg(long = "tol-rank", default_value_t = 1e-9)]
    tol_rank: f64,
    /// Layer-two consistency tolerance on max |Gamma1|.
    #[arg(long = "tol-gamma", default_value_t = 1e-6)]
    tol_gamma: f64,
    /// Range-inclusion tolerance.
    #[arg(long = "tol-range", default_value_t = 1e-8)]
    tol_range: f64,
}

impl CommonFlags {
    fn tolerances(&self) -> Tolerances {
        Tolerances {
            rank: self.tol_rank,
            gamma: self.tol_gamma,
            range: self.tol_range,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Classify a problem as regular or irregular.
    Classify {
        /// Problem file (JSON).
        file: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run the full pipeline and write report plus trajectory CSV.
    Solve {
        /// Problem file (JSON).
        file: PathBuf,
        /// Controller selection: open, closed, or auto.
        #[arg(long, default_value = "auto")]
        mode: String,
        /// File holding an override for the layer-two terminal value
        /// (JSON nested array).
        #[arg(long = "p1-terminal")]
        p1_terminal: Option<PathBuf>,
        /// Output directory for report.txt, report.json, trajectory.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Oracle ladder used in the report, comma-separated.
        #[arg(long = "oracle-steps", default_value = "50,100")]
        oracle_steps: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run the brute-force discrete oracle at the given resolutions.
    Oracle {
        /// Problem file (JSON).
        file: PathBuf,
        /// Comma-separated step counts.
        #[arg(long, default_value = "100,200,400")]
        steps: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Write a built-in fixture problem file.
    Fixture {
        /// Fixture name: E1 or E2.
        name: String,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
}

fn load_problem(path: &Path, grid_override: Option<usize>) -> Result<LQProblem, SolverError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SolverError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut problem = model::problem_from_json(&text)?;
    if let Some(steps) = grid_override {
        problem.grid = model::TimeGrid::new(problem.grid.t0, problem.grid.t_final, steps)?;
    }
    Ok(problem)
}

fn parse_steps(list: &str) -> Result<Vec<usize>, SolverError> {
    let parsed: Result<Vec<usize>, _> =
        list.split(',').map(|s| s.trim().parse::<usize>()).collect();
    parsed.map_err(|e| SolverError::Input(format!("bad step list '{list}': {e}")))
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>, SolverError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SolverError::Input(format!("cannot read {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| SolverError::Input(format!("matrix file parse error: {e}")))?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(SolverError::Input(
            "matrix file must hold a non-empty rectangular nested array".into(),
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat))
}

fn write_file(path: &Path, contents: &str) -> Result<(), SolverError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                SolverError::Input(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    std::fs::write(path, contents)
        .map_err(|e| SolverError::Input(format!("cannot write {}: {e}", path.display())))
}

fn error_code(err: &SolverError) -> u8 {
    match err {
        SolverError::Input(_) | SolverError::RankVariation(_) | SolverError::Misuse(_) => 2,
        SolverError::Divergence { .. } | SolverError::Conditioning(_) => 4,
    }
}

fn run(cli: Cli) -> Result<u8, SolverError> {
    match cli.command {
        Command::Classify { file, common } => {
            let problem = load_problem(&file, common.grid)?;
            let (verdict, m0) = run_classify(&problem, &common.tolerances())?;
            let label = match verdict {
                Verdict::Regular => "Regular",
                Verdict::Irregular => "Irregular",
            };
            println!("{label} (m0 = {m0})");
            Ok(0)
        }
        Command::Solve {
            file,
            mode,
            p1_terminal,
            out,
            oracle_steps,
            common,
        } => {
            let problem = load_problem(&file, common.grid)?;
            let mode: Mode = mode.parse()?;
            let p1_terminal_override = match p1_terminal {
                Some(path) => Some(load_matrix(&path)?),
                None => None,
            };
            let opts = SolveOptions {
                mode,
                tolerances: common.tolerances(),
                p1_terminal_override,
                oracle_ladder: parse_steps(&oracle_steps)?,
                oracle_tol: 1e-4,
            };
            let outcome = run_solve(&problem, &opts)?;
            let text = outcome.report.to_text();
            print!("{text}");
            write_file(&out.join("report.txt"), &text)?;
            write_file(&out.join("report.json"), &outcome.report.to_json())?;
            if let Some(traj) = &outcome.trajectory {
                write_file(&out.join("trajectory.csv"), &trajectory_to_csv(traj))?;
            }
            Ok(if outcome.solved { 0 } else { 3 })
        }
        Command::Oracle {
            file,
            steps,
            common,
        } => {
            let problem = load_problem(&file, common.grid)?;
            let ladder = parse_steps(&steps)?;
            for n_steps in ladder {
                let d = irlq::oracle::discretize(&problem, n_steps)?;
                let solved = irlq::oracle::solve_discrete(&d, &problem.x0)?;
                println!(
                    "N={n_steps}: cost={} min_eig={} attained={}",
                    format_float(solved.optimal_cost),
                    format_float(solved.hessian_min_eigenvalue),
                    solved.attained
                );
            }
            Ok(0)
        }
        Command::Fixture { name, out, common } => {
            let which: Fixture = name.parse()?;
            let steps = common.grid.unwrap_or(model::DEFAULT_STEPS);
            let problem = model::fixture(which, steps);
            let file_name = match which {
                Fixture::E1 => "e1.json",
                Fixture::E2 => "e2.json",
            };
            let path = out.join(file_name);
            write_file(&path, &model::problem_to_json(&problem))?;
            println!("{}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(error_code(&err))
        }
    }
}
