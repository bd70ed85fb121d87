//! Problem-level drivers: rank sweep, minimum rank and correlation fitting.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::newton::{solve_rank_r_reduced, RankRSolution, SolverConfig};
use crate::objective::{reduce, ProblemInstance, ReducedProblem};
use crate::qep::{solve_rank1_qep, QepConfig};

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub solver: SolverConfig,
    /// Solve rank one through the quadratic eigenvalue route, falling back to
    /// Newton when it fails.
    pub qep_rank_one: bool,
    /// Stop at the first converged rank with `E` below this value. Off by default.
    pub early_exit: Option<f64>,
    /// Solve ranks concurrently. Ignored when `early_exit` is set.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            qep_rank_one: true,
            early_exit: None,
            parallel: true,
        }
    }
}

impl From<SolverConfig> for SweepConfig {
    fn from(solver: SolverConfig) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RankStatus {
    Converged,
    NotConverged,
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub rank: usize,
    pub status: RankStatus,
    /// `None` when the solve failed or was skipped.
    pub solution: Option<RankRSolution>,
    /// Rank one was solved through the quadratic eigenvalue route.
    pub via_qep: bool,
}

impl RankOutcome {
    pub fn objective(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.objective)
    }

    pub fn converged(&self) -> bool {
        self.status == RankStatus::Converged
    }
}

#[derive(Debug, Clone)]
pub struct PsdtlsSolution {
    pub best: RankRSolution,
    /// `E` at each rank `1..=n`; NaN where the solve failed or was skipped.
    pub per_rank_e: Vec<f64>,
    pub per_rank_status: Vec<RankStatus>,
    pub ranks: Vec<RankOutcome>,
}

impl PsdtlsSolution {
    pub fn best_rank(&self) -> usize {
        self.best.rank()
    }
}

fn solve_one(problem: &ReducedProblem, r: usize, config: &SweepConfig) -> RankOutcome {
    let mut via_qep = false;
    let result = if r == 1 && config.qep_rank_one {
        let qcfg = QepConfig {
            newton: config.solver.clone(),
            ..QepConfig::default()
        };
        match solve_rank1_qep(problem, &qcfg) {
            Ok(q) => {
                via_qep = true;
                Ok(q.solution)
            }
            Err(_) => solve_rank_r_reduced(problem, 1, &config.solver),
        }
    } else {
        solve_rank_r_reduced(problem, r, &config.solver)
    };
    match result {
        Ok(sol) => RankOutcome {
            rank: r,
            status: if sol.converged {
                RankStatus::Converged
            } else {
                RankStatus::NotConverged
            },
            solution: Some(sol),
            via_qep,
        },
        Err(e) => RankOutcome {
            rank: r,
            status: RankStatus::Failed(e.at_rank(r).to_string()),
            solution: None,
            via_qep,
        },
    }
}

fn skipped(rank: usize) -> RankOutcome {
    RankOutcome {
        rank,
        status: RankStatus::Skipped,
        solution: None,
        via_qep: false,
    }
}

/// Relative tolerance under which two ranks count as attaining the same `E`.
const TIE_TOL: f64 = 1e-10;

/// Converged outcome with the least `E`. Ties go to the higher rank: `E` only
/// sees the error inside the range of `X`, so equal values at a lower rank
/// leave part of `T` unexplained.
fn argmin(ranks: &[RankOutcome]) -> Option<&RankOutcome> {
    ranks
        .iter()
        .filter(|o| o.converged())
        .filter_map(|o| Some((o, o.objective()?)))
        .fold(
            None,
            |best: Option<(&RankOutcome, f64)>, (o, e)| match best {
                Some((b, eb)) if eb < e - TIE_TOL * (1.0 + eb.abs().max(e.abs())) => Some((b, eb)),
                _ => Some((o, e)),
            },
        )
        .map(|(o, _)| o)
}

fn failure_report(ranks: &[RankOutcome]) -> Error {
    Error::AllRanksFailed(
        ranks
            .iter()
            .map(|o| match &o.status {
                RankStatus::Failed(msg) => msg.clone(),
                RankStatus::NotConverged => format!("rank {}: did not converge", o.rank),
                RankStatus::Skipped => format!("rank {}: skipped", o.rank),
                RankStatus::Converged => format!("rank {}: converged", o.rank),
            })
            .collect(),
    )
}

fn sweep_reduced(problem: &ReducedProblem, config: &SweepConfig) -> Result<PsdtlsSolution> {
    config.solver.validate()?;
    let n = problem.n;
    let ranks: Vec<RankOutcome> = match config.early_exit {
        Some(threshold) => {
            let mut out = Vec::with_capacity(n);
            for r in 1..=n {
                let o = solve_one(problem, r, config);
                let done = o.converged() && o.objective().is_some_and(|e| e < threshold);
                out.push(o);
                if done {
                    out.extend((r + 1..=n).map(skipped));
                    break;
                }
            }
            out
        }
        None if config.parallel => (1..=n)
            .into_par_iter()
            .map(|r| solve_one(problem, r, config))
            .collect(),
        None => (1..=n).map(|r| solve_one(problem, r, config)).collect(),
    };

    let best = argmin(&ranks)
        .and_then(|o| o.solution.clone())
        .ok_or_else(|| failure_report(&ranks))?;
    Ok(PsdtlsSolution {
        best,
        per_rank_e: ranks
            .iter()
            .map(|o| o.objective().unwrap_or(f64::NAN))
            .collect(),
        per_rank_status: ranks.iter().map(|o| o.status.clone()).collect(),
        ranks,
    })
}

/// Solves every rank `1..=n` and returns the converged solution with the least `E`.
pub fn solve_psdtls(instance: &ProblemInstance, config: &SweepConfig) -> Result<PsdtlsSolution> {
    sweep_reduced(&reduce(instance), config)
}

#[derive(Debug, Clone)]
pub struct MinRankResult {
    pub rank: usize,
    pub solution: RankRSolution,
    /// `E < e` was attained.
    pub satisfied: bool,
    pub e: f64,
    /// Outcomes of the ranks tried, in order.
    pub ranks: Vec<RankOutcome>,
}

/// Smallest rank whose converged solution has `E < e`. When no rank qualifies
/// the converged rank with the least `E` is returned with `satisfied = false`.
pub fn solve_min_rank(
    instance: &ProblemInstance,
    e: f64,
    config: &SweepConfig,
) -> Result<MinRankResult> {
    if !(e > 0.0) {
        return Err(Error::InvalidInput(format!(
            "error bound must be positive, got {e}"
        )));
    }
    config.solver.validate()?;
    let problem = reduce(instance);
    let mut ranks = Vec::with_capacity(problem.n);
    for r in 1..=problem.n {
        let o = solve_one(&problem, r, config);
        let hit = o.converged() && o.objective().is_some_and(|v| v < e);
        ranks.push(o);
        if hit {
            let solution = ranks[r - 1].solution.clone().expect("converged rank");
            return Ok(MinRankResult {
                rank: r,
                solution,
                satisfied: true,
                e,
                ranks,
            });
        }
    }
    let best = argmin(&ranks).ok_or_else(|| failure_report(&ranks))?;
    Ok(MinRankResult {
        rank: best.rank,
        solution: best.solution.clone().expect("converged rank"),
        satisfied: false,
        e,
        ranks,
    })
}

/// `X ~ C` subject to the extra conditions `P X ~ Q`.
#[derive(Debug, Clone)]
pub struct CorrelationInstance {
    pub c: Matrix,
    pub p: Matrix,
    pub q: Matrix,
}

impl CorrelationInstance {
    pub fn new(c: Matrix, p: Matrix, q: Matrix) -> Result<Self> {
        let n = c.nrows();
        if c.ncols() != n {
            return Err(Error::NotSquare {
                rows: c.nrows(),
                cols: c.ncols(),
            });
        }
        if p.shape() != q.shape() || p.ncols() != n {
            return Err(Error::Dimension(format!(
                "C is {n}x{n}, P is {}x{}, Q is {}x{}",
                p.nrows(),
                p.ncols(),
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(Self { c, p, q })
    }

    /// Stacked data `[I; P]` and target `[C; Q]`.
    pub fn stacked(&self) -> Result<ProblemInstance> {
        let n = self.c.nrows();
        let m = self.p.nrows();
        let mut d = Matrix::zeros(n + m, n);
        d.view_mut((0, 0), (n, n)).fill_with_identity();
        d.view_mut((n, 0), (m, n)).copy_from(&self.p);
        let mut t = Matrix::zeros(n + m, n);
        t.view_mut((0, 0), (n, n)).copy_from(&self.c);
        t.view_mut((n, 0), (m, n)).copy_from(&self.q);
        ProblemInstance::new(d, t)
    }
}

#[derive(Debug, Clone)]
pub struct CorrelationResult {
    pub sweep: PsdtlsSolution,
    /// Sample standard deviation (divisor `N - 1`) of the entries of `D X - T`.
    pub std: f64,
}

/// Sample standard deviation of all entries; zero for fewer than two entries.
pub fn entry_std(m: &Matrix) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let mean = m.sum() / n as f64;
    let ss: f64 = m.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

pub fn solve_correlation(
    instance: &CorrelationInstance,
    config: &SweepConfig,
) -> Result<CorrelationResult> {
    let stacked = instance.stacked()?;
    let sweep = solve_psdtls(&stacked, config)?;
    let residual = &stacked.d * &sweep.best.x - &stacked.t;
    Ok(CorrelationResult {
        std: entry_std(&residual),
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newton::{initial_y, solve_rank_r};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn exact_fit(seed: u64, m: usize, n: usize, r: usize) -> (ProblemInstance, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Matrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
        let y = initial_y(n, r, seed + 1000).unwrap();
        let s2 = Matrix::from_fn(r, r, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 });
        let xs = &y * s2 * y.transpose();
        (ProblemInstance::new(d.clone(), &d * &xs).unwrap(), xs)
    }

    fn uniform(seed: u64, m: usize, n: usize) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        let t = Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        ProblemInstance::new(d, t).unwrap()
    }

    #[test]
    fn sweep_finds_exact_rank() {
        let (inst, xs) = exact_fit(1, 30, 6, 3);
        let out = solve_psdtls(&inst, &SweepConfig::default()).unwrap();
        assert!(out.best.objective <= 1e-8, "{:?}", out.per_rank_e);
        assert!((&out.best.x - &xs).norm() <= 1e-6 * xs.norm());
        for r in 3..6 {
            if out.per_rank_status[r - 1] == RankStatus::Converged {
                assert!(
                    out.per_rank_e[r - 1] <= 1e-8,
                    "rank {r}: {:?}",
                    out.per_rank_e
                );
            }
        }
        assert!(out.per_rank_e.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn sweep_is_deterministic_across_schedules() {
        let inst = uniform(4, 20, 6);
        let par = solve_psdtls(&inst, &SweepConfig::default()).unwrap();
        let seq = solve_psdtls(
            &inst,
            &SweepConfig {
                parallel: false,
                ..SweepConfig::default()
            },
        )
        .unwrap();
        for (a, b) in par.per_rank_e.iter().zip(&seq.per_rank_e) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(par.best.x, seq.best.x);
    }

    #[test]
    fn single_column_matches_rank_one() {
        let inst = uniform(2, 8, 1);
        let sweep = solve_psdtls(&inst, &SweepConfig::default()).unwrap();
        let direct = solve_rank_r(&inst, 1, &SolverConfig::default()).unwrap();
        assert_eq!(sweep.per_rank_e.len(), 1);
        assert!((&sweep.best.x - &direct.x).norm() <= 1e-12 * direct.x.norm());
    }

    #[test]
    fn best_is_least_converged() {
        let inst = uniform(7, 20, 10);
        let out = solve_psdtls(&inst, &SweepConfig::default()).unwrap();
        let least = out
            .per_rank_e
            .iter()
            .zip(&out.per_rank_status)
            .filter(|(_, s)| **s == RankStatus::Converged)
            .map(|(e, _)| *e)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.objective, least);
        assert!(out.best.objective >= -1e-10);
        assert!(out.best.orth_residual <= 1e-6);
    }

    #[test]
    fn early_exit_skips_later_ranks() {
        let (inst, _) = exact_fit(3, 20, 5, 2);
        let cfg = SweepConfig {
            early_exit: Some(1e-8),
            ..SweepConfig::default()
        };
        let out = solve_psdtls(&inst, &cfg).unwrap();
        let stop = out.best_rank();
        assert!(stop <= 2 && out.best.objective < 1e-8);
        assert!(out.per_rank_status[stop..]
            .iter()
            .all(|s| *s == RankStatus::Skipped));
        assert!(out.per_rank_status[..stop]
            .iter()
            .all(|s| *s != RankStatus::Skipped));
    }

    #[test]
    fn min_rank_on_exact_fit() {
        let (inst, _) = exact_fit(5, 30, 6, 2);
        let out = solve_min_rank(&inst, 1e-6, &SweepConfig::default()).unwrap();
        assert!(out.satisfied);
        assert!(out.rank <= 2);
        assert!(out.solution.objective < 1e-6);

        let loose = solve_min_rank(&inst, 1e300, &SweepConfig::default()).unwrap();
        assert_eq!(loose.rank, 1);
        assert!(loose.satisfied);
    }

    #[test]
    fn min_rank_unsatisfied_returns_argmin() {
        let inst = uniform(9, 12, 4);
        let out = solve_min_rank(&inst, 1e-300, &SweepConfig::default()).unwrap();
        assert!(!out.satisfied);
        assert_eq!(out.ranks.len(), 4);
        let best = argmin(&out.ranks).unwrap();
        assert_eq!(out.rank, best.rank);
        assert!(solve_min_rank(&inst, 0.0, &SweepConfig::default()).is_err());
    }

    #[test]
    fn correlation_identity_fixture() {
        let i = Matrix::identity(4, 4);
        let inst = CorrelationInstance::new(i.clone(), i.clone(), i.clone()).unwrap();
        let out = solve_correlation(&inst, &SweepConfig::default()).unwrap();
        assert!((&out.sweep.best.x - &i).norm() <= 1e-10);
        assert!(out.std <= 1e-10);
    }

    #[test]
    fn correlation_anchor_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let c = &g * g.transpose() + Matrix::identity(5, 5);
        let inst =
            CorrelationInstance::new(c.clone(), Matrix::zeros(0, 5), Matrix::zeros(0, 5)).unwrap();
        let out = solve_correlation(&inst, &SweepConfig::default()).unwrap();
        assert!(out.sweep.best.objective <= 1e-8);
        assert!((&out.sweep.best.x - &c).norm() <= 1e-6 * c.norm());
        assert!(out.std <= 1e-9);
    }

    #[test]
    fn correlation_rejects_bad_shapes() {
        let c = Matrix::identity(3, 3);
        assert!(
            CorrelationInstance::new(c.clone(), Matrix::zeros(2, 3), Matrix::zeros(2, 2)).is_err()
        );
        assert!(CorrelationInstance::new(
            Matrix::zeros(3, 2),
            Matrix::zeros(1, 2),
            Matrix::zeros(1, 2)
        )
        .is_err());
    }

    #[test]
    fn entry_std_small_cases() {
        assert_eq!(entry_std(&Matrix::from_element(1, 1, 3.0)), 0.0);
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!((entry_std(&m) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
