//! `psdtls` command-line frontend.
//!
//! Exit status: 0 on success, 1 when a solver fails or does not converge,
//! 2 on usage or input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use psdtls::bench::{
    dolan_more_profile, read_records_csv, run_suite, write_profiles, write_records_csv,
    BenchSolver, GeneratorSpec, NewtonSolver, RankSpec, SuiteConfig,
};
use psdtls::drivers::{
    solve_correlation, solve_min_rank, solve_psdtls, CorrelationInstance, RankStatus, SweepConfig,
};
use psdtls::io::{format_f64, read_matrix, write_matrix};
use psdtls::newton::InitStrategy;
use psdtls::{solve_rank_r, Backend, Error, Matrix, ProblemInstance, RankRSolution, SolverConfig};

#[derive(Parser)]
#[command(
    name = "psdtls",
    version,
    about = "Positive semi-definite total least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed-rank solve.
    SolveRank {
        #[command(flatten)]
        input: Inputs,
        #[arg(long)]
        rank: usize,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep all ranks and keep the best.
    Psdtls {
        #[command(flatten)]
        input: Inputs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-rank CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Smallest rank with E below a bound.
    Minrank {
        #[command(flatten)]
        input: Inputs,
        #[arg(long)]
        bound: f64,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation matrix from an anchor C and conditions P X ~ Q.
    Corr {
        #[arg(long)]
        c: PathBuf,
        #[arg(long)]
        p: Option<PathBuf>,
        #[arg(long)]
        q: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Timed runs on seeded random instances.
    Bench {
        /// Comma-separated sizes, e.g. "20x10,100x20".
        #[arg(long)]
        sizes: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cg-o,gmres-o,cg-l")]
        solvers: String,
        /// Fixed rank; every rank is swept when omitted.
        #[arg(long)]
        rank: Option<usize>,
        /// Entry interval lower end.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        a: f64,
        /// Entry interval upper end.
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        b: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Performance profiles from a records CSV.
    Profile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "prof")]
        out_prefix: String,
    },
}

#[derive(Args)]
struct Inputs {
    /// Data matrix D.
    #[arg(long)]
    data: PathBuf,
    /// Target matrix T.
    #[arg(long)]
    target: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Top,
    Random,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = Backend::GmresOperator)]
    backend: Backend,
    /// Relative step tolerance.
    #[arg(long, default_value = "1e-10")]
    eps: f64,
    /// Absolute step tolerance.
    #[arg(long, default_value = "1e-12")]
    delta: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value = "1e-10")]
    lin_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting point: leading eigenvectors of C/2, or a seeded random frame.
    #[arg(long, value_enum, default_value_t = Init::Top)]
    init: Init,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            eps: self.eps,
            delta: self.delta,
            max_newton_iters: self.max_iter,
            backend: self.backend,
            lin_tol: self.lin_tol,
            seed: self.seed,
            init: match self.init {
                Init::Top => InitStrategy::TopEigenvectors,
                Init::Random => InitStrategy::Random,
            },
            ..SolverConfig::default()
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Solve rank one with Newton only.
    #[arg(long)]
    no_qep: bool,
    /// Stop the sweep at the first rank with E below this value.
    #[arg(long)]
    early_exit: Option<f64>,
}

impl SweepArgs {
    fn config(&self, solver: &SolverArgs) -> SweepConfig {
        SweepConfig {
            solver: solver.config(),
            qep_rank_one: !self.no_qep,
            early_exit: self.early_exit,
            ..SweepConfig::default()
        }
    }
}

enum Failure {
    Usage(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::Io(_)
            | Error::Dimension(_)
            | Error::NotSquare { .. }
            | Error::InvalidInput(_)
            | Error::InvalidRank { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<Matrix, Failure> {
    read_matrix(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, m: &Matrix) -> Result<(), Failure> {
    write_matrix(path, m).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load(input: &Inputs) -> Result<ProblemInstance, Failure> {
    Ok(ProblemInstance::new(
        read(&input.data)?,
        read(&input.target)?,
    )?)
}

fn report(sol: &RankRSolution) {
    println!("rank {}", sol.rank());
    println!("E {}", format_f64(sol.objective));
    println!("orth_residual {}", format_f64(sol.orth_residual));
    println!("iterations {}", sol.newton_iters);
    println!("converged {}", sol.converged);
}

fn converged(sol: &RankRSolution) -> Result<(), Failure> {
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::Solver(format!(
            "no convergence after {} iterations",
            sol.newton_iters
        )))
    }
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            item.split_once(['x', 'X'])
                .and_then(|(m, n)| Some((m.trim().parse().ok()?, n.trim().parse().ok()?)))
                .ok_or_else(|| Failure::Usage(format!("invalid size '{item}' (expected MxN)")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SolveRank {
            input,
            rank,
            solver,
            out,
            trace,
        } => {
            let inst = load(&input)?;
            let sol = solve_rank_r(&inst, rank, &solver.config())?;
            write(&out, &sol.x)?;
            if let Some(path) = trace {
                sol.write_trace_csv(&path)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            }
            report(&sol);
            converged(&sol)
        }
        Command::Psdtls {
            input,
            solver,
            sweep,
            out,
            report: ranks_csv,
        } => {
            let inst = load(&input)?;
            let res = solve_psdtls(&inst, &sweep.config(&solver))?;
            write(&out, &res.best.x)?;
            if let Some(path) = ranks_csv {
                let mut text = String::from("rank,E,status\n");
                for (i, (e, s)) in res.per_rank_e.iter().zip(&res.per_rank_status).enumerate() {
                    let status = match s {
                        RankStatus::Converged => "converged",
                        RankStatus::NotConverged => "not_converged",
                        RankStatus::Failed(_) => "failed",
                        RankStatus::Skipped => "skipped",
                    };
                    text.push_str(&format!("{},{},{status}\n", i + 1, format_f64(*e)));
                }
                std::fs::write(&path, text)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            }
            report(&res.best);
            Ok(())
        }
        Command::Minrank {
            input,
            bound,
            solver,
            sweep,
            out,
        } => {
            let inst = load(&input)?;
            let res = solve_min_rank(&inst, bound, &sweep.config(&solver))?;
            if let Some(path) = out {
                write(&path, &res.solution.x)?;
            }
            println!("rank {}", res.rank);
            println!("E {}", format_f64(res.solution.objective));
            println!("satisfied {}", res.satisfied);
            Ok(())
        }
        Command::Corr {
            c,
            p,
            q,
            solver,
            sweep,
            out,
        } => {
            let c = read(&c)?;
            let (p, q) = match (p, q) {
                (Some(p), Some(q)) => (read(&p)?, read(&q)?),
                (None, None) => (Matrix::zeros(0, c.ncols()), Matrix::zeros(0, c.ncols())),
                _ => return Err(Failure::Usage("--p and --q go together".into())),
            };
            let inst = CorrelationInstance::new(c, p, q)?;
            let res = solve_correlation(&inst, &sweep.config(&solver))?;
            write(&out, &res.sweep.best.x)?;
            println!("rank {}", res.sweep.best.rank());
            println!("E {}", format_f64(res.sweep.best.objective));
            println!("Std {}", format_f64(res.std));
            Ok(())
        }
        Command::Bench {
            sizes,
            trials,
            seed,
            solvers,
            rank,
            a,
            b,
            jobs,
            out,
        } => {
            let specs: Vec<GeneratorSpec> = parse_sizes(&sizes)?
                .into_iter()
                .map(|(m, n)| GeneratorSpec {
                    a,
                    b,
                    trials,
                    ..GeneratorSpec::new(m, n, seed)
                })
                .collect();
            let newton: Vec<NewtonSolver> = solvers
                .split(',')
                .map(|s| Ok(NewtonSolver::new(s.trim().parse::<Backend>()?, rank)))
                .collect::<Result<_, Error>>()?;
            let dyns: Vec<&dyn BenchSolver> = newton.iter().map(|s| s as _).collect();
            let config = SuiteConfig {
                jobs: jobs.max(1),
                rank: rank.map_or(RankSpec::Sweep, RankSpec::Fixed),
            };
            let records = run_suite(&specs, &dyns, &config)?;
            write_records_csv(&out, &records)
                .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
            let failed = records.iter().filter(|r| !r.converged).count();
            println!("records {}", records.len());
            println!("failed {failed}");
            Ok(())
        }
        Command::Profile { input, out_prefix } => {
            let records = read_records_csv(&input)
                .map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
            let curves = dolan_more_profile(&records)?;
            for path in write_profiles(&out_prefix, &curves)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
