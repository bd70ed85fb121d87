//! Rank-one solutions through a quadratic eigenvalue problem.
//!
//! With `u = s y` and `v = y / s` the rank-one objective becomes
//! `u^T A u + v^T B v - u^T C v` subject to `u^T v = 1`. Its stationarity
//! conditions are
//!
//! ```text
//! 2 A u - C v - w v = 0
//! 2 B v - C u - w u = 0
//! ```
//!
//! and eliminating `u = A^{-1} (C + w I) v / 2` leaves the quadratic eigenvalue
//! problem `Q(w) v = 0` with `Q(w) = (C + w I) A^{-1} (C + w I) - 4 B`.
//!
//! The substitution drops the requirement that `u` and `v` be parallel, so a
//! stationary pair need not be a stationary rank-one factorization. Each
//! candidate is therefore used as a starting point for Newton's method unless
//! polishing is switched off.

use nalgebra::Complex;

use crate::error::{Error, Result};
use crate::linalg::{orthogonality_residual, spectral_decomposition, Matrix, Vector};
use crate::newton::{solve_from, RankRSolution, SolverConfig};
use crate::objective::{objective_value, FactorPair, ReducedProblem};

/// Candidates whose objective values differ by less than this are tied.
const TIE_TOL: f64 = 1e-12;
/// Newton refinement steps for each eigenvalue.
const REFINE_STEPS: usize = 8;
/// Relative size below which an eigenvalue of `Q(w)` counts as zero.
const NULL_TOL: f64 = 1e-10;
/// Eigenvalues closer than this (relative) are one multiple eigenvalue.
const CLUSTER_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct QepInstance {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub a_inv: Matrix,
}

impl QepInstance {
    pub fn new(problem: &ReducedProblem) -> Result<Self> {
        let n = problem.n;
        let sd = spectral_decomposition(&problem.a)?;
        let (hi, lo) = (sd.values[0], sd.values[n - 1]);
        if !(lo > 0.0) || lo <= n as f64 * f64::EPSILON * hi {
            return Err(Error::SingularA);
        }
        let inv = Vector::from_iterator(n, sd.values.iter().map(|v| 1.0 / v));
        let a_inv = &sd.vectors * Matrix::from_diagonal(&inv) * sd.vectors.transpose();
        Ok(Self {
            a: problem.a.clone(),
            b: problem.b.clone(),
            c: problem.c.clone(),
            a_inv,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    fn shifted_c(&self, omega: f64) -> Matrix {
        &self.c + Matrix::identity(self.n(), self.n()) * omega
    }

    /// `Q(w)`, symmetric by construction.
    pub fn q(&self, omega: f64) -> Matrix {
        let k = self.shifted_c(omega);
        let q = &k * &self.a_inv * &k - &self.b * 4.0;
        (&q + q.transpose()) * 0.5
    }

    /// Companion matrix of the monic problem `A Q(w) v = 0`, whose eigenvalues are the `w`.
    pub fn companion(&self) -> Matrix {
        let n = self.n();
        let k1 = &self.a * &self.c * &self.a_inv + &self.c;
        let k0 = &self.a * (&self.c * &self.a_inv * &self.c - &self.b * 4.0);
        let mut m = Matrix::zeros(2 * n, 2 * n);
        m.view_mut((0, n), (n, n))
            .copy_from(&Matrix::identity(n, n));
        m.view_mut((n, 0), (n, n)).copy_from(&(-k0));
        m.view_mut((n, n), (n, n)).copy_from(&(-k1));
        m
    }

    /// `(|2Au - Cv - wv|, |2Bv - Cu - wu|)`.
    pub fn stationarity_residuals(&self, omega: f64, u: &Vector, v: &Vector) -> (f64, f64) {
        let r1 = &self.a * u * 2.0 - &self.c * v - v * omega;
        let r2 = &self.b * v * 2.0 - &self.c * u - u * omega;
        (r1.norm(), r2.norm())
    }

    /// Scale for the stationarity residuals.
    pub fn residual_scale(&self, omega: f64, u: &Vector, v: &Vector) -> f64 {
        (self.a.norm() + self.b.norm() + self.c.norm() + omega.abs()) * (u.norm() + v.norm())
    }
}

#[derive(Debug, Clone)]
pub struct QepEigenpair {
    pub omega: f64,
    pub v: Vector,
    pub u: Vector,
    /// Objective at `y = u/|u|`, `s = sqrt(|u|/|v|)`.
    pub objective: f64,
}

impl QepEigenpair {
    pub fn y(&self) -> Vector {
        let mut y = &self.u / self.u.norm();
        let imax = y.iamax();
        if y[imax] < 0.0 {
            y = -y;
        }
        y
    }

    pub fn s(&self) -> f64 {
        (self.u.norm() / self.v.norm()).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct QepConfig {
    /// Run Newton's method from every candidate.
    pub polish: bool,
    pub newton: SolverConfig,
}

impl Default for QepConfig {
    fn default() -> Self {
        Self {
            polish: true,
            newton: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QepSolution {
    pub solution: RankRSolution,
    /// Admissible eigenpairs sorted by `w`.
    pub candidates: Vec<QepEigenpair>,
    /// Index into `candidates` of the one the solution came from.
    pub chosen: usize,
}

/// Rounding splits a `k`-fold eigenvalue into a cluster of radius about
/// `eps^(1/k)`, so the test is loose; [`null_space`] decides admissibility.
fn is_nearly_real(z: Complex<f64>) -> bool {
    z.im.abs() <= 1e-4 * (1.0 + z.norm())
}

/// Eigenvalue of `Q(w)` of least magnitude and its eigenvector.
fn smallest_eigenpair(q: &Matrix) -> Result<(f64, Vector)> {
    let sd = spectral_decomposition(q)?;
    let (k, _) = sd
        .values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("nonempty spectrum");
    Ok((sd.values[k], sd.vectors.column(k).into_owned()))
}

/// Newton's method on the least-magnitude eigenvalue `mu(w)` of `Q(w)`.
fn refine(inst: &QepInstance, omega0: f64) -> Result<(f64, f64)> {
    let mut omega = omega0;
    let (mut mu, mut v) = smallest_eigenpair(&inst.q(omega))?;
    for _ in 0..REFINE_STEPS {
        // d mu / d w = v^T (A^{-1} K + K A^{-1}) v = 4 u^T v
        let u = &inst.a_inv * inst.shifted_c(omega) * &v * 0.5;
        let slope = 4.0 * u.dot(&v);
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        let next = omega - mu / slope;
        let (mu_next, v_next) = smallest_eigenpair(&inst.q(next))?;
        if mu_next.abs() >= mu.abs() {
            break;
        }
        omega = next;
        mu = mu_next;
        v = v_next;
    }
    Ok((omega, mu))
}

/// Orthonormal basis of the numerical null space of `Q(w)`.
fn null_space(inst: &QepInstance, omega: f64) -> Result<Matrix> {
    let q = inst.q(omega);
    let sd = spectral_decomposition(&q)?;
    let k = inst.shifted_c(omega);
    let tol = NULL_TOL * (k.norm() * k.norm() * inst.a_inv.norm() + 4.0 * inst.b.norm());
    let cols: Vec<usize> = (0..inst.n())
        .filter(|&j| sd.values[j].abs() <= tol)
        .collect();
    let mut basis = Matrix::zeros(inst.n(), cols.len());
    for (i, &j) in cols.iter().enumerate() {
        basis.set_column(i, &sd.vectors.column(j));
    }
    Ok(basis)
}

/// All admissible real eigenpairs, normalized to `u^T v = 1`.
///
/// For a multiple eigenvalue every `v` in the null space of `Q(w)` is
/// stationary. The candidates taken from such a family are the eigenvectors
/// of the form `v -> u^T v` restricted to it.
pub fn qep_candidates(problem: &ReducedProblem, inst: &QepInstance) -> Result<Vec<QepEigenpair>> {
    let scale = inst.a.norm() + inst.b.norm() + inst.c.norm();
    let eigenvalues = inst.companion().complex_eigenvalues();
    let mut omegas: Vec<f64> = eigenvalues
        .iter()
        .filter(|z| is_nearly_real(**z))
        .map(|z| z.re)
        .collect();
    omegas.sort_by(f64::total_cmp);

    // Complex pairs that are not split multiple eigenvalues have no real
    // null vector and drop out in `null_space`.
    let mut refined: Vec<f64> = Vec::new();
    for omega0 in omegas {
        let (omega, _) = refine(inst, omega0)?;
        if !refined
            .iter()
            .any(|w| (w - omega).abs() <= CLUSTER_TOL * (1.0 + scale + omega.abs()))
        {
            refined.push(omega);
        }
    }

    let mut out = Vec::new();
    for omega in refined {
        let basis = null_space(inst, omega)?;
        let k = basis.ncols();
        if k == 0 {
            continue;
        }
        let kernel = &inst.a_inv * inst.shifted_c(omega) * 0.5;
        let form = basis.transpose() * &kernel * &basis;
        let form = (&form + form.transpose()) * 0.5;
        let sd = spectral_decomposition(&form)?;
        for j in 0..k {
            // u^T v = z^T form z must be positive to allow u^T v = 1.
            if !(sd.values[j] > 0.0) {
                continue;
            }
            let v = &basis * sd.vectors.column(j);
            let u = &kernel * &v;
            let alpha = 1.0 / u.dot(&v).sqrt();
            let (u, v) = (u * alpha, v * alpha);
            let (r1, r2) = inst.stationarity_residuals(omega, &u, &v);
            if r1.max(r2) > 1e-7 * inst.residual_scale(omega, &u, &v) {
                continue;
            }
            let mut pair = QepEigenpair {
                omega,
                v,
                u,
                objective: f64::NAN,
            };
            let factors = FactorPair {
                y: Matrix::from_column_slice(inst.n(), 1, pair.y().as_slice()),
                s: Vector::from_element(1, pair.s()),
            };
            pair.objective = objective_value(problem, &factors)?;
            out.push(pair);
        }
    }
    Ok(out)
}

fn unpolished(
    pair: &QepEigenpair,
    config: &SolverConfig,
    problem: &ReducedProblem,
) -> Result<RankRSolution> {
    let y = Matrix::from_column_slice(problem.n, 1, pair.y().as_slice());
    let factors = FactorPair::new(y, Vector::from_element(1, pair.s()))?;
    let objective = objective_value(problem, &factors)?;
    Ok(RankRSolution {
        x: factors.solution(),
        orth_residual: orthogonality_residual(&factors.y),
        factors,
        objective,
        newton_iters: 0,
        converged: true,
        backend: config.backend,
        step_norms: Vec::new(),
        trace: Vec::new(),
        reorthonormalizations: 0,
        iterates: Vec::new(),
    })
}

/// Rank-one solution via the quadratic eigenvalue problem.
///
/// Returns the candidate of least objective; ties go to the smallest `|w|`.
/// Newton from the directions of `u` and of `v`, which coincide only at
/// stationary points of the unrelaxed problem. Returns the better converged run.
fn polish(
    problem: &ReducedProblem,
    pair: &QepEigenpair,
    config: &SolverConfig,
) -> Result<Option<RankRSolution>> {
    let mut best: Option<RankRSolution> = None;
    for w in [&pair.u, &pair.v] {
        let y0 = Matrix::from_column_slice(problem.n, 1, (w / w.norm()).as_slice());
        let sol = solve_from(problem, y0, config)?;
        if sol.converged && best.as_ref().is_none_or(|b| sol.objective < b.objective) {
            best = Some(sol);
        }
    }
    Ok(best)
}

pub fn solve_rank1_qep(problem: &ReducedProblem, config: &QepConfig) -> Result<QepSolution> {
    config.newton.validate()?;
    let inst = QepInstance::new(problem)?;
    let candidates = qep_candidates(problem, &inst)?;
    if candidates.is_empty() {
        return Err(Error::NoRealCandidate);
    }

    let mut best: Option<(usize, RankRSolution)> = None;
    for (i, pair) in candidates.iter().enumerate() {
        let sol = if config.polish {
            match polish(problem, pair, &config.newton)? {
                Some(sol) => sol,
                None => continue,
            }
        } else {
            unpolished(pair, &config.newton, problem)?
        };
        let better = match &best {
            None => true,
            Some((j, b)) => {
                let tie =
                    (sol.objective - b.objective).abs() <= TIE_TOL * (1.0 + b.objective.abs());
                if tie {
                    pair.omega.abs() < candidates[*j].omega.abs()
                } else {
                    sol.objective < b.objective
                }
            }
        };
        if better {
            best = Some((i, sol));
        }
    }
    let (chosen, mut solution) = best.ok_or(Error::NoRealCandidate)?;
    let y = &mut solution.factors.y;
    let imax = y.column(0).iamax();
    if y[(imax, 0)] < 0.0 {
        *y *= -1.0;
    }
    Ok(QepSolution {
        solution,
        candidates,
        chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newton::{initial_y, solve_rank_r};
    use crate::objective::{reduce, ProblemInstance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, m: usize, n: usize) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        let t = Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        ProblemInstance::new(d, t).unwrap()
    }

    #[test]
    fn scalar_problem() {
        let inst = ProblemInstance::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let p = reduce(&inst);
        let out = solve_rank1_qep(&p, &QepConfig::default()).unwrap();
        // w^2 + 4w = 0; w = -4 gives u = -v and is not admissible.
        assert_eq!(out.candidates.len(), 1);
        let c = &out.candidates[out.chosen];
        assert!(c.omega.abs() < 1e-12);
        assert!((c.u[0] - 1.0).abs() < 1e-12 && (c.v[0] - 1.0).abs() < 1e-12);
        assert!((c.s() - 1.0).abs() < 1e-12);
        assert!((out.solution.x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(out.solution.objective.abs() < 1e-12);
    }

    #[test]
    fn rank_one_exact_fit() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Matrix::from_fn(15, 5, |_, _| rng.random_range(-1.0..1.0));
            let q = initial_y(5, 1, seed + 7).unwrap();
            let sigma = 1.5 + seed as f64 * 0.25;
            let xs = &q * q.transpose() * (sigma * sigma);
            let inst = ProblemInstance::new(d.clone(), &d * &xs).unwrap();
            let out = solve_rank1_qep(&reduce(&inst), &QepConfig::default()).unwrap();
            assert!(
                out.solution.objective <= 1e-8,
                "seed {seed}: E = {}",
                out.solution.objective
            );
            assert!(
                (&out.solution.x - &xs).norm() <= 1e-6 * xs.norm(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn candidates_are_stationary_and_normalized() {
        for seed in 0..10 {
            let p = reduce(&random_instance(seed, 20, 5));
            let inst = QepInstance::new(&p).unwrap();
            assert!((&inst.a_inv * &inst.a - Matrix::identity(5, 5)).norm() < 1e-8);
            let cands = qep_candidates(&p, &inst).unwrap();
            assert!(!cands.is_empty());
            for c in &cands {
                let (r1, r2) = inst.stationarity_residuals(c.omega, &c.u, &c.v);
                let scale = inst.residual_scale(c.omega, &c.u, &c.v);
                assert!(
                    r1 <= 1e-7 * scale && r2 <= 1e-7 * scale,
                    "seed {seed}: {r1:e} {r2:e}"
                );
                assert!((c.u.dot(&c.v) - 1.0).abs() <= 1e-8);
                assert!(c.s() > 0.0);
            }
        }
    }

    #[test]
    fn matches_or_beats_newton() {
        for seed in 0..40 {
            let inst = random_instance(100 + seed, 20, 5);
            let qep = solve_rank1_qep(&reduce(&inst), &QepConfig::default())
                .unwrap()
                .solution;
            let newton = solve_rank_r(&inst, 1, &SolverConfig::default().with_seed(seed)).unwrap();
            assert!(newton.converged);
            assert!(
                qep.objective <= newton.objective + 1e-6 * (1.0 + newton.objective.abs()),
                "seed {seed}: {} vs {}",
                qep.objective,
                newton.objective
            );
            let ev = qep.x.symmetric_eigenvalues();
            assert!(ev.max() > 0.0 && ev.min() >= -1e-8 * ev.max());
        }
    }

    #[test]
    fn unpolished_solution_comes_from_a_candidate() {
        let p = reduce(&random_instance(3, 20, 5));
        let cfg = QepConfig {
            polish: false,
            ..QepConfig::default()
        };
        let out = solve_rank1_qep(&p, &cfg).unwrap();
        let c = &out.candidates[out.chosen];
        assert_eq!(out.solution.objective, c.objective);
        assert!(out
            .candidates
            .iter()
            .all(|d| d.objective >= c.objective - 1e-12 * (1.0 + c.objective.abs())));
        let y = out.solution.factors.y.column(0);
        assert!(y[y.iamax()] > 0.0);
    }

    #[test]
    fn singular_a_is_rejected() {
        let d = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let t = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let p = reduce(&ProblemInstance::new(d, t).unwrap());
        assert!(matches!(
            solve_rank1_qep(&p, &QepConfig::default()),
            Err(Error::SingularA)
        ));
    }
}
