//! Seeded instance generation, timed suite runs and Dolan-Moré profiles.
//!
//! Instances are drawn from ChaCha8 (`rand_chacha`): the generator is seeded
//! with `seed_from_u64(spec.seed)` and the trial index selects the stream via
//! `set_stream(trial)`. `D` is filled first, then `T`, each column by column,
//! with `(b - a) R + a` for `R` uniform in `[0, 1)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::drivers::{solve_psdtls, SweepConfig};
use crate::error::{Error, Result};
use crate::io::format_f64;
use crate::linalg::Matrix;
use crate::newton::{solve_rank_r, Backend};
use crate::objective::ProblemInstance;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub m: usize,
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub trials: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Entries in `[0, 1]`, ten trials.
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            a: 0.0,
            b: 1.0,
            trials: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.b > self.a) {
            return Err(Error::InvalidInput(format!(
                "entry interval [{}, {}] is empty",
                self.a, self.b
            )));
        }
        if self.n == 0 || self.m < self.n {
            return Err(Error::Dimension(format!(
                "need m >= n >= 1, got {}x{}",
                self.m, self.n
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn problem_id(&self, trial: usize) -> String {
        format!("{}x{}-s{}-t{}", self.m, self.n, self.seed, trial)
    }
}

pub fn generate_instance(spec: &GeneratorSpec, trial: usize) -> Result<ProblemInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial as u64);
    let width = spec.b - spec.a;
    let mut draw = |_: usize, _: usize| width * rng.random::<f64>() + spec.a;
    let d = Matrix::from_fn(spec.m, spec.n, &mut draw);
    let t = Matrix::from_fn(spec.m, spec.n, &mut draw);
    ProblemInstance::new(d, t)
}

/// Rank column of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RankSpec {
    Fixed(usize),
    Sweep,
}

impl fmt::Display for RankSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankSpec::Fixed(r) => write!(f, "{r}"),
            RankSpec::Sweep => f.write_str("sweep"),
        }
    }
}

impl FromStr for RankSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "sweep" {
            return Ok(RankSpec::Sweep);
        }
        s.parse()
            .map(RankSpec::Fixed)
            .map_err(|_| Error::InvalidInput(format!("invalid rank '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub problem_id: String,
    pub solver_id: String,
    pub m: usize,
    pub n: usize,
    pub r: RankSpec,
    pub seed: u64,
    pub elapsed_seconds: f64,
    /// `+inf` for failed runs.
    pub e: f64,
    pub orth_residual: f64,
    pub converged: bool,
}

pub const CSV_HEADER: [&str; 10] = [
    "problem_id",
    "solver_id",
    "m",
    "n",
    "r",
    "seed",
    "elapsed_seconds",
    "E",
    "orth_residual",
    "converged",
];

/// What a solver reports back to the harness.
#[derive(Debug, Clone)]
pub struct SolveSummary {
    pub r: RankSpec,
    pub e: f64,
    pub orth_residual: f64,
    pub converged: bool,
}

pub trait BenchSolver: Sync {
    fn id(&self) -> String;

    fn solve(&self, instance: &ProblemInstance, seed: u64) -> Result<SolveSummary>;
}

/// Newton with a given backend at a fixed rank, or a full rank sweep.
#[derive(Debug, Clone)]
pub struct NewtonSolver {
    pub backend: Backend,
    pub rank: Option<usize>,
    pub config: SweepConfig,
}

impl NewtonSolver {
    pub fn new(backend: Backend, rank: Option<usize>) -> Self {
        Self {
            backend,
            rank,
            config: SweepConfig::default(),
        }
    }
}

impl BenchSolver for NewtonSolver {
    fn id(&self) -> String {
        self.backend.name().to_string()
    }

    fn solve(&self, instance: &ProblemInstance, seed: u64) -> Result<SolveSummary> {
        let mut config = self.config.clone();
        config.solver.backend = self.backend;
        config.solver.seed = seed;
        let (r, sol) = match self.rank {
            Some(r) => (
                RankSpec::Fixed(r),
                solve_rank_r(instance, r, &config.solver)?,
            ),
            None => (RankSpec::Sweep, solve_psdtls(instance, &config)?.best),
        };
        Ok(SolveSummary {
            r,
            e: sol.objective,
            orth_residual: sol.orth_residual,
            converged: sol.converged,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    /// Worker threads; 1 runs everything on the calling thread.
    pub jobs: usize,
    /// Rank reported for runs that fail before producing a summary.
    pub rank: RankSpec,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            jobs: 1,
            rank: RankSpec::Sweep,
        }
    }
}

fn run_one(
    spec: &GeneratorSpec,
    trial: usize,
    solver: &dyn BenchSolver,
    fallback_rank: RankSpec,
) -> Result<BenchmarkRecord> {
    let instance = generate_instance(spec, trial)?;
    let seed = spec.seed.wrapping_add(trial as u64);
    let start = Instant::now();
    let outcome = solver.solve(&instance, seed);
    let elapsed_seconds = start.elapsed().as_secs_f64();
    let summary = outcome.unwrap_or(SolveSummary {
        r: fallback_rank,
        e: f64::INFINITY,
        orth_residual: f64::NAN,
        converged: false,
    });
    Ok(BenchmarkRecord {
        problem_id: spec.problem_id(trial),
        solver_id: solver.id(),
        m: spec.m,
        n: spec.n,
        r: summary.r,
        seed: spec.seed,
        elapsed_seconds,
        e: if summary.converged {
            summary.e
        } else {
            f64::INFINITY
        },
        orth_residual: summary.orth_residual,
        converged: summary.converged,
    })
}

/// Runs every `(spec, trial, solver)` triple. Records come back in that
/// nesting order whatever the number of jobs; solver failures become
/// records with `converged = false`.
pub fn run_suite(
    specs: &[GeneratorSpec],
    solvers: &[&dyn BenchSolver],
    config: &SuiteConfig,
) -> Result<Vec<BenchmarkRecord>> {
    if specs.is_empty() || solvers.is_empty() {
        return Err(Error::InvalidInput(
            "a suite needs at least one spec and one solver".into(),
        ));
    }
    for spec in specs {
        spec.validate()?;
    }
    let tasks: Vec<(&GeneratorSpec, usize, &dyn BenchSolver)> = specs
        .iter()
        .flat_map(|spec| {
            (0..spec.trials).flat_map(move |t| solvers.iter().map(move |s| (spec, t, *s)))
        })
        .collect();
    if config.jobs <= 1 {
        return tasks
            .into_iter()
            .map(|(spec, t, s)| run_one(spec, t, s, config.rank))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| {
        tasks
            .into_par_iter()
            .map(|(spec, t, s)| run_one(spec, t, s, config.rank))
            .collect()
    })
}

pub fn write_records<W: Write>(out: W, records: &[BenchmarkRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.problem_id.clone(),
            r.solver_id.clone(),
            r.m.to_string(),
            r.n.to_string(),
            r.r.to_string(),
            r.seed.to_string(),
            format_f64(r.elapsed_seconds),
            format_f64(r.e),
            format_f64(r.orth_residual),
            u8::from(r.converged).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_csv(path: impl AsRef<Path>, records: &[BenchmarkRecord]) -> Result<()> {
    write_records(File::create(path)?, records)
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<BenchmarkRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_records(&text)
}

pub fn parse_records(text: &str) -> Result<Vec<BenchmarkRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{}'", CSV_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let bad = |k: usize| Error::Parse {
            line,
            message: format!("invalid {} '{}'", CSV_HEADER[k], field(k)),
        };
        let num = |k: usize| field(k).parse::<f64>().map_err(|_| bad(k));
        let int = |k: usize| field(k).parse::<u64>().map_err(|_| bad(k));
        records.push(BenchmarkRecord {
            problem_id: field(0).to_string(),
            solver_id: field(1).to_string(),
            m: int(2)? as usize,
            n: int(3)? as usize,
            r: field(4).parse().map_err(|_| bad(4))?,
            seed: int(5)?,
            elapsed_seconds: num(6)?,
            e: num(7)?,
            orth_residual: num(8)?,
            converged: match field(9) {
                "1" => true,
                "0" => false,
                _ => return Err(bad(9)),
            },
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub m: usize,
    pub n: usize,
    pub r: RankSpec,
    pub solver_id: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_elapsed: f64,
    /// Infinite when any run failed.
    pub mean_e: f64,
    pub mean_orth_residual: f64,
}

/// Arithmetic means per `(m, n, r, solver)`, in order of first appearance.
pub fn summarize(records: &[BenchmarkRecord]) -> Vec<SuiteSummary> {
    let mut order: Vec<(usize, usize, RankSpec, &str)> = Vec::new();
    let mut groups: BTreeMap<(usize, usize, RankSpec, &str), Vec<&BenchmarkRecord>> =
        BTreeMap::new();
    for r in records {
        let key = (r.m, r.n, r.r, r.solver_id.as_str());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let k = g.len() as f64;
            let mean = |f: fn(&BenchmarkRecord) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / k;
            SuiteSummary {
                m: key.0,
                n: key.1,
                r: key.2,
                solver_id: key.3.to_string(),
                runs: g.len(),
                converged: g.iter().filter(|r| r.converged).count(),
                mean_elapsed: mean(|r| r.elapsed_seconds),
                mean_e: mean(|r| r.e),
                mean_orth_residual: mean(|r| r.orth_residual),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCurve {
    pub solver_id: String,
    /// `(tau, rho)` with increasing `tau`, starting at `tau = 1`.
    pub points: Vec<(f64, f64)>,
}

impl ProfileCurve {
    /// Fraction of problems solved within `tau` times the best time.
    pub fn rho(&self, tau: f64) -> f64 {
        self.points
            .iter()
            .take_while(|(t, _)| *t <= tau)
            .last()
            .map_or(0.0, |(_, r)| *r)
    }
}

/// Performance profiles on elapsed time. A problem's baseline is the least
/// time among converged runs; failed runs have ratio `+inf`. Every curve is
/// sampled at `tau = 1` and at each distinct finite ratio of any solver.
pub fn dolan_more_profile(records: &[BenchmarkRecord]) -> Result<Vec<ProfileCurve>> {
    let mut solvers: Vec<&str> = Vec::new();
    let mut problems: Vec<&str> = Vec::new();
    for r in records {
        if !solvers.contains(&r.solver_id.as_str()) {
            solvers.push(&r.solver_id);
        }
        if !problems.contains(&r.problem_id.as_str()) {
            problems.push(&r.problem_id);
        }
    }
    // Best time per (problem, solver) among converged runs.
    let mut times: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.converged) {
        let t = times
            .entry((r.problem_id.as_str(), r.solver_id.as_str()))
            .or_insert(f64::INFINITY);
        *t = t.min(r.elapsed_seconds.max(0.0));
    }
    let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(problems.len()); solvers.len()];
    let mut any_success = false;
    for p in &problems {
        let base = solvers
            .iter()
            .filter_map(|s| times.get(&(*p, *s)))
            .fold(f64::INFINITY, |a, &b| a.min(b));
        any_success |= base.is_finite();
        for (k, s) in solvers.iter().enumerate() {
            let ratio = match times.get(&(*p, *s)) {
                None => f64::INFINITY,
                Some(&t) if t == base => 1.0,
                Some(&t) if base > 0.0 => t / base,
                Some(_) => f64::INFINITY,
            };
            ratios[k].push(ratio);
        }
    }
    if !any_success {
        return Err(Error::NoSuccessfulRun);
    }

    let mut taus: Vec<f64> = ratios
        .iter()
        .flatten()
        .copied()
        .filter(|r| r.is_finite())
        .chain([1.0])
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let np = problems.len() as f64;
    Ok(solvers
        .iter()
        .zip(&ratios)
        .map(|(s, rs)| ProfileCurve {
            solver_id: s.to_string(),
            points: taus
                .iter()
                .map(|&tau| (tau, rs.iter().filter(|&&r| r <= tau).count() as f64 / np))
                .collect(),
        })
        .collect())
}

/// Writes `<prefix>_<solver>.dat`, one `tau rho` pair per line.
pub fn write_profiles(prefix: &str, curves: &[ProfileCurve]) -> Result<Vec<PathBuf>> {
    curves
        .iter()
        .map(|c| {
            let path = PathBuf::from(format!("{prefix}_{}.dat", c.solver_id));
            let mut f = File::create(&path)?;
            for (tau, rho) in &c.points {
                writeln!(f, "{} {}", format_f64(*tau), format_f64(*rho))?;
            }
            Ok(path)
        })
        .collect()
}
