//! Fixed-rank solver: Newton iteration on the Stiefel manifold `{Y : Y^T Y = I}`.
//!
//! Each outer iteration
//! 1. sets the scales `s_i = (y_i^T B y_i / y_i^T A y_i)^(1/4)`,
//! 2. forms `F_Y = dE/dY` and the projected gradient `G = F_Y - Y F_Y^T Y`,
//! 3. solves the Newton equation
//!    `F_YY(D) - Y skew(F_Y^T D) - skew(D F_Y^T) Y - 1/2 (I - Y Y^T) D Y^T F_Y = -G`
//!    for a tangent direction `D`,
//! 4. moves along the geodesic `Y M + Q N` where `(I - Y Y^T) D = Q R` and
//!    `[M; N]` are the first `r` columns of `exp([[Y^T D, -R^T], [R, 0]])`,
//!
//! until `|Y_new - Y|_F <= eps |Y|_F + delta`.
//!
//! The Newton equation is solved on the tangent space. Every backend sees the
//! operator `P L P + (I - P)` with `P(D) = D - Y sym(Y^T D)`: on tangent
//! directions it is the projected Newton operator, on normal directions the
//! identity, so the right-hand side `-G` (which is tangent) yields a tangent
//! solution.
//!
//! Newton steps are taken when they descend and decrease `E(Y, S*(Y))`.
//! Otherwise the equation is re-solved with a growing diagonal shift, then the
//! Newton direction is backtracked, and last a projected-gradient step is
//! backtracked. Linear solves are inexact away from stationary points. A
//! stationary point with negative curvature (found by Lanczos) is left along
//! that direction rather than reported as converged.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::format_f64;
use crate::krylov::{
    cg, cgnr, gmres, lanczos_smallest, KrylovOutcome, LinearOperator, Materialized,
};
use crate::linalg::{
    compact_qr, matrix_exp, orthogonality_residual, skew, spectral_decomposition, symmetrize,
    Matrix,
};
use crate::objective::{
    gradient_derivative, gradient_y, hessian_apply, objective_magnitude, objective_value, reduce,
    solver_scales, FactorPair, ProblemInstance, ReducedProblem, ScaleCoupling,
};

/// `CG_L` refuses to materialize systems larger than this.
pub const MAX_MATERIALIZED_ORDER: usize = 4000;
/// Re-orthonormalize `Y` when `|Y^T Y - I|_F` exceeds this.
pub const REORTHONORMALIZE_TOL: f64 = 1e-8;
/// Relative symmetry defect below which `CG_O` runs plain CG instead of CGNR.
pub const SYMMETRY_TOL: f64 = 1e-8;

const MAX_HALVINGS: usize = 30;
const ARMIJO: f64 = 1e-4;
/// Diagonal shifts, relative to the operator's magnitude along `P F_Y`.
const SHIFT_START: f64 = 1e-3;
const SHIFT_MIN: f64 = 1e-10;
const SHIFT_GROWTH: f64 = 4.0;
/// Steps this short are taken without a slope check, where rounding decides its sign.
const NEWTON_SLOPE_EXEMPT: f64 = 1e-6;
/// Largest rotation angle (spectral norm of the tangent step) taken by the
/// Newton and shifted stages.
const MAX_STEP: f64 = 0.5;
const MAX_SHIFTS: usize = 30;
/// Stop once `|G|_F` is this many ulps of the size of the gradient terms.
/// Needed when the minimizers form a continuum in `Y` (repeated eigenvalues
/// of `X`), where steps along the valley never shrink.
const STATIONARY_ULPS: f64 = 100.0;
/// Stationary points whose smallest Hessian eigenvalue is below this
/// fraction of the largest are treated as saddles and left.
const SADDLE_TOL: f64 = 1e-6;
const LANCZOS_STEPS: usize = 80;
const MAX_ESCAPES: usize = 10;
/// Loosest relative tolerance for the Newton and shifted solves.
const MAX_FORCING: f64 = 0.1;
/// Below this `|G| / gradient scale` the unshifted Newton equation is always tried.
const NEWTON_ALWAYS_BELOW: f64 = 1e-3;

/// Linear solver for the Newton equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    /// Conjugate gradients in operator form (CGNR when the operator is not symmetric).
    CgOperator,
    /// Restarted GMRES in operator form.
    GmresOperator,
    /// Conjugate gradients on the materialized `nr x nr` system.
    CgMaterialized,
}

impl Backend {
    pub const ALL: [Backend; 3] = [
        Backend::CgOperator,
        Backend::GmresOperator,
        Backend::CgMaterialized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backend::CgOperator => "cg-o",
            Backend::GmresOperator => "gmres-o",
            Backend::CgMaterialized => "cg-l",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cg-o" | "cg_o" => Ok(Backend::CgOperator),
            "gmres-o" | "gmres_o" => Ok(Backend::GmresOperator),
            "cg-l" | "cg_l" => Ok(Backend::CgMaterialized),
            other => Err(Error::InvalidInput(format!(
                "unknown backend '{other}' (expected cg-o, gmres-o or cg-l)"
            ))),
        }
    }
}

/// Which second-derivative term enters the Newton operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianForm {
    /// Hessian of `Y -> E(Y, S*(Y))`: the fixed-scale second derivative plus
    /// the coupling through the optimal scales.
    Reduced,
    /// Second derivative of `E` with `S` held fixed.
    FixedScale,
    /// [`hessian_apply`], the half-projected form.
    Projected,
}

/// First-order terms added to the second derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureTerm {
    /// `-D sym(Y^T F_Y)`: the Riemannian Hessian for the embedded metric.
    Embedded,
    /// `-Y skew(F_Y^T D) - skew(D F_Y^T) Y - 1/2 (I - Y Y^T) D K` with `K = Y^T F_Y`.
    /// Agrees with `Embedded` on the normal block but not on the `Y^T` block
    /// unless `F_Y = 0`, which costs the quadratic rate.
    Standard,
    /// As `Standard` with `K = F_Y^T Y`.
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// `Q` factor of a seeded Gaussian `n x r` matrix.
    Random,
    /// Leading `r` eigenvectors of `C / 2`.
    TopEigenvectors,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Relative stopping tolerance on `|Y_new - Y|_F`.
    pub eps: f64,
    /// Absolute stopping tolerance on `|Y_new - Y|_F`.
    pub delta: f64,
    pub max_newton_iters: usize,
    pub backend: Backend,
    pub lin_tol: f64,
    /// Krylov iteration cap; `None` means `n * r`.
    pub lin_max_iters: Option<usize>,
    /// GMRES restart length; `None` means the tangent-space dimension
    /// `n r - r (r + 1) / 2`, capped at 200.
    pub gmres_restart: Option<usize>,
    pub seed: u64,
    pub init: InitStrategy,
    pub hessian: HessianForm,
    pub curvature: CurvatureTerm,
    /// Keep every iterate `Y_k` in the solution (for convergence studies).
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 1e-10,
            delta: 1e-12,
            max_newton_iters: 200,
            backend: Backend::GmresOperator,
            lin_tol: 1e-10,
            lin_max_iters: None,
            gmres_restart: None,
            seed: 0,
            init: InitStrategy::TopEigenvectors,
            hessian: HessianForm::Reduced,
            curvature: CurvatureTerm::Embedded,
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("eps", self.eps)?;
        positive("delta", self.delta)?;
        positive("lin_tol", self.lin_tol)?;
        if self.max_newton_iters == 0
            || self.lin_max_iters == Some(0)
            || self.gmres_restart == Some(0)
        {
            return Err(Error::InvalidInput(
                "iteration caps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn lin_max_iters_for(&self, nr: usize) -> usize {
        self.lin_max_iters.unwrap_or(nr).max(1)
    }

    fn restart_for(&self, n: usize, r: usize) -> usize {
        let tangent = n * r - r * (r + 1) / 2;
        self.gmres_restart.unwrap_or(tangent.min(200)).max(1)
    }
}

/// How the accepted step of an iteration was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Newton,
    /// Newton direction cut back by a line search.
    DampedNewton,
    /// Solution of the Newton equation with a positive diagonal shift.
    Regularized,
    Gradient,
    /// No decrease possible.
    Stalled,
    /// Gradient at rounding level; no step taken.
    Stationary,
    /// Step along a negative-curvature direction out of a saddle point.
    NegativeCurvature,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    /// `E` at the start of the iteration.
    pub objective: f64,
    pub grad_norm: f64,
    pub orth_residual: f64,
    pub backend_iters: usize,
    pub linear_residual: f64,
    pub step: StepKind,
    pub step_norm: f64,
    /// `|<L D1, D2> - <D1, L D2>| / (|D1| |D2|)` for random tangent probes.
    pub symmetry_defect: f64,
}

#[derive(Debug, Clone)]
pub struct RankRSolution {
    pub factors: FactorPair,
    pub x: Matrix,
    pub objective: f64,
    pub orth_residual: f64,
    pub newton_iters: usize,
    pub converged: bool,
    pub backend: Backend,
    pub step_norms: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub reorthonormalizations: usize,
    pub iterates: Vec<Matrix>,
}

impl RankRSolution {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn max_symmetry_defect(&self) -> f64 {
        self.trace
            .iter()
            .map(|t| t.symmetry_defect)
            .fold(0.0, f64::max)
    }

    /// Per-iteration trace as CSV: `iter,E,grad_norm,orth_residual,backend_iters`.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "iter,E,grad_norm,orth_residual,backend_iters")?;
        for t in &self.trace {
            writeln!(
                w,
                "{},{},{},{},{}",
                t.iter,
                format_f64(t.objective),
                format_f64(t.grad_norm),
                format_f64(t.orth_residual),
                t.backend_iters
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded starting point with orthonormal columns.
pub fn initial_y(n: usize, r: usize, seed: u64) -> Result<Matrix> {
    if r == 0 || r > n {
        return Err(Error::InvalidRank { rank: r, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Matrix::zeros(n, r);
    for v in g.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    Ok(compact_qr(&g)?.q)
}

/// `G = F_Y - Y F_Y^T Y`.
pub fn projected_gradient(fy: &Matrix, y: &Matrix) -> Matrix {
    fy - y * (fy.transpose() * y)
}

/// `D - Y sym(Y^T D)`: orthogonal projection onto the tangent space at `Y`.
pub fn tangent_projection(y: &Matrix, delta: &Matrix) -> Matrix {
    delta - y * symmetrize(&(y.transpose() * delta))
}

/// The Newton equation at a fixed `(Y, S)`.
pub struct NewtonStepEquation<'a> {
    pub problem: &'a ReducedProblem,
    pub factors: &'a FactorPair,
    pub fy: Matrix,
    pub g: Matrix,
    pub hessian: HessianForm,
    pub curvature: CurvatureTerm,
    ytf: Matrix,
    /// Tangent projection of `F_Y`. Its `Y^T` block is half that of `G`, which
    /// is what the operator's `Y^T` block is consistent with.
    tangent_fy: Matrix,
    coupling: ScaleCoupling,
    /// Multiple of the identity added on the tangent space.
    pub shift: f64,
}

impl<'a> NewtonStepEquation<'a> {
    pub fn new(
        problem: &'a ReducedProblem,
        factors: &'a FactorPair,
        hessian: HessianForm,
        curvature: CurvatureTerm,
    ) -> Result<Self> {
        let fy = gradient_y(problem, factors)?;
        let g = projected_gradient(&fy, &factors.y);
        let ytf = factors.y.transpose() * &fy;
        let tangent_fy = tangent_projection(&factors.y, &fy);
        Ok(Self {
            problem,
            factors,
            fy,
            g,
            hessian,
            curvature,
            ytf,
            tangent_fy,
            coupling: ScaleCoupling::new(problem, factors),
            shift: 0.0,
        })
    }

    fn second_derivative(&self, delta: &Matrix) -> Matrix {
        match self.hessian {
            HessianForm::Reduced => {
                gradient_derivative(self.problem, self.factors, delta) + self.coupling.apply(delta)
            }
            HessianForm::FixedScale => gradient_derivative(self.problem, self.factors, delta),
            HessianForm::Projected => hessian_apply(self.problem, self.factors, delta),
        }
    }

    fn second_derivative_adjoint(&self, delta: &Matrix) -> Matrix {
        match self.hessian {
            // Both are Hessians of smooth functions, hence self-adjoint.
            HessianForm::Reduced | HessianForm::FixedScale => self.second_derivative(delta),
            HessianForm::Projected => {
                // (H - Y H^T Y)/2 has adjoint (H(G) - H(Y G^T Y))/2 since H is self-adjoint.
                let y = &self.factors.y;
                let h = |d: &Matrix| gradient_derivative(self.problem, self.factors, d);
                (h(delta) - h(&(y * delta.transpose() * y))) * 0.5
            }
        }
    }

    fn curvature_matrix(&self) -> Matrix {
        match self.curvature {
            CurvatureTerm::Embedded | CurvatureTerm::Standard => self.ytf.clone(),
            CurvatureTerm::Transposed => self.ytf.transpose(),
        }
    }

    /// Left-hand side of the Newton equation, unprojected.
    pub fn apply_raw(&self, delta: &Matrix) -> Matrix {
        if self.curvature == CurvatureTerm::Embedded {
            return self.second_derivative(delta) - delta * symmetrize(&self.ytf);
        }
        let y = &self.factors.y;
        let fy = &self.fy;
        let normal = delta * self.curvature_matrix();
        let normal = &normal - y * (y.transpose() * &normal);
        self.second_derivative(delta)
            - y * skew(&(fy.transpose() * delta))
            - skew(&(delta * fy.transpose())) * y
            - normal * 0.5
    }

    fn apply_raw_adjoint(&self, gamma: &Matrix) -> Matrix {
        if self.curvature == CurvatureTerm::Embedded {
            return self.second_derivative_adjoint(gamma) - gamma * symmetrize(&self.ytf);
        }
        let y = &self.factors.y;
        let fy = &self.fy;
        let proj = gamma - y * (y.transpose() * gamma);
        self.second_derivative_adjoint(gamma)
            - fy * skew(&(y.transpose() * gamma))
            - skew(&(gamma * y.transpose())) * fy
            - proj * self.curvature_matrix().transpose() * 0.5
    }

    /// Right-hand side of the tangent-space equation.
    pub fn rhs(&self) -> Matrix {
        -&self.tangent_fy
    }

    /// Residual `|P L(D) + shift D + P F_Y|_F` of the tangent-space equation.
    pub fn residual(&self, delta: &Matrix) -> f64 {
        (tangent_projection(&self.factors.y, &self.apply_raw(delta))
            + delta * self.shift
            + &self.tangent_fy)
            .norm()
    }

    fn shape(&self) -> (usize, usize) {
        self.factors.y.shape()
    }
}

impl LinearOperator for NewtonStepEquation<'_> {
    fn apply(&self, delta: &Matrix) -> Matrix {
        let y = &self.factors.y;
        let t = tangent_projection(y, delta);
        let normal = delta - &t;
        tangent_projection(y, &self.apply_raw(&t)) + &t * self.shift + normal
    }

    fn apply_adjoint(&self, delta: &Matrix) -> Matrix {
        let y = &self.factors.y;
        let t = tangent_projection(y, delta);
        let normal = delta - &t;
        tangent_projection(y, &self.apply_raw_adjoint(&t)) + &t * self.shift + normal
    }
}

/// Newton direction plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct NewtonDirection {
    pub delta: Matrix,
    pub residual: f64,
    pub iterations: usize,
    pub symmetry_defect: f64,
}

/// Solves the Newton equation with the configured backend.
///
/// Succeeds when `|P L(D) + P F_Y|_F <= lin_tol (1 + |G|_F)`; the Krylov methods
/// aim for the stricter `lin_tol |G|_F` first.
pub fn solve_newton_equation(
    eq: &NewtonStepEquation<'_>,
    config: &SolverConfig,
) -> Result<NewtonDirection> {
    let (n, r) = eq.shape();
    let nr = n * r;
    let gnorm = eq.g.norm();
    if gnorm == 0.0 {
        return Ok(NewtonDirection {
            delta: Matrix::zeros(n, r),
            residual: 0.0,
            iterations: 0,
            symmetry_defect: 0.0,
        });
    }
    if !gnorm.is_finite() {
        return Err(Error::InvalidInput(
            "projected gradient is not finite".into(),
        ));
    }
    let rhs = eq.rhs();
    let target = config.lin_tol * gnorm;
    let accept = config.lin_tol * (1.0 + gnorm);
    let max_iters = config.lin_max_iters_for(nr);

    let (outcome, symmetry_defect): (KrylovOutcome, f64) = match config.backend {
        Backend::GmresOperator => {
            let restart = config.restart_for(n, r);
            (gmres(eq, &rhs, target, max_iters, restart), f64::NAN)
        }
        Backend::CgOperator => {
            let defect = symmetry_probe(eq, config.seed);
            let out = if defect <= SYMMETRY_TOL {
                cg(eq, &rhs, target, max_iters)
            } else {
                cgnr(eq, &rhs, target, max_iters)
            };
            (out, defect)
        }
        Backend::CgMaterialized => {
            if nr > MAX_MATERIALIZED_ORDER {
                return Err(Error::ResourceLimit {
                    order: nr,
                    limit: MAX_MATERIALIZED_ORDER,
                });
            }
            let m = materialize(eq);
            let defect = (&m - m.transpose()).norm() / m.norm().max(f64::MIN_POSITIVE);
            let op = Materialized {
                matrix: &m,
                rows: n,
                cols: r,
            };
            let out = if defect <= SYMMETRY_TOL {
                cg(&op, &rhs, target, max_iters)
            } else {
                cgnr(&op, &rhs, target, max_iters)
            };
            (out, defect)
        }
    };

    // Strip any normal component the solver left behind.
    let delta = tangent_projection(&eq.factors.y, &outcome.x);
    let residual = eq.residual(&delta);
    if residual <= accept && delta.iter().all(|v| v.is_finite()) {
        Ok(NewtonDirection {
            delta,
            residual,
            iterations: outcome.iterations,
            symmetry_defect,
        })
    } else {
        Err(Error::NonconvergedLinearSolve {
            best: Box::new(delta),
            residual,
            iterations: outcome.iterations,
        })
    }
}

struct Trial {
    delta: Matrix,
    iterations: usize,
    residual: f64,
    symmetry_defect: f64,
    solved: bool,
}

/// Like [`solve_newton_equation`], but keeps the best iterate of a failed solve.
fn direction_or_best(eq: &NewtonStepEquation<'_>, config: &SolverConfig) -> Result<Trial> {
    match solve_newton_equation(eq, config) {
        Ok(d) => Ok(Trial {
            delta: d.delta,
            iterations: d.iterations,
            residual: d.residual,
            symmetry_defect: d.symmetry_defect,
            solved: true,
        }),
        Err(Error::NonconvergedLinearSolve {
            best,
            residual,
            iterations,
        }) => Ok(Trial {
            delta: *best,
            iterations,
            residual,
            symmetry_defect: f64::NAN,
            solved: false,
        }),
        Err(err) => Err(err),
    }
}

/// Column-major materialization of the projected Newton operator.
pub fn materialize(eq: &NewtonStepEquation<'_>) -> Matrix {
    let (n, r) = eq.shape();
    let nr = n * r;
    let mut m = Matrix::zeros(nr, nr);
    let mut basis = Matrix::zeros(n, r);
    for k in 0..nr {
        basis[k] = 1.0;
        let col = eq.apply(&basis);
        m.column_mut(k).copy_from_slice(col.as_slice());
        basis[k] = 0.0;
    }
    m
}

fn symmetry_probe(eq: &NewtonStepEquation<'_>, seed: u64) -> f64 {
    let (n, r) = eq.shape();
    let y = &eq.factors.y;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut draw = || {
        let mut g = Matrix::zeros(n, r);
        for v in g.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        tangent_projection(y, &g)
    };
    let d1 = draw();
    let d2 = draw();
    let l1 = eq.apply(&d1);
    let l2 = eq.apply(&d2);
    let scale = d1.norm() * d2.norm() * (1.0 + l1.norm() / d1.norm().max(f64::MIN_POSITIVE));
    if scale == 0.0 {
        return 0.0;
    }
    (l1.dot(&d2) - d1.dot(&l2)).abs() / scale
}

/// Geodesic move from `Y` along `delta`: `Y M + Q N`.
pub fn geodesic_step(y: &Matrix, delta: &Matrix) -> Result<Matrix> {
    if y.shape() != delta.shape() {
        return Err(Error::Dimension(format!(
            "Y is {}x{} but the direction is {}x{}",
            y.nrows(),
            y.ncols(),
            delta.nrows(),
            delta.ncols()
        )));
    }
    let r = y.ncols();
    let k = y.transpose() * delta;
    let residual = delta - y * &k;
    let qr = compact_qr(&residual)?;
    let mut w = Matrix::zeros(2 * r, 2 * r);
    w.view_mut((0, 0), (r, r)).copy_from(&k);
    w.view_mut((0, r), (r, r)).copy_from(&(-qr.r.transpose()));
    w.view_mut((r, 0), (r, r)).copy_from(&qr.r);
    let e = matrix_exp(&w)?;
    let m = e.view((0, 0), (r, r));
    let nn = e.view((r, 0), (r, r));
    Ok(y * m + &qr.q * nn)
}

/// `2 (|A Y S^2|_F + |C Y|_F + |B Y S^-2|_F)`.
fn gradient_scale(problem: &ReducedProblem, factors: &FactorPair) -> f64 {
    let y = &factors.y;
    let s2 = Matrix::from_diagonal(&factors.s.map(|v| v * v));
    let s2inv = Matrix::from_diagonal(&factors.s.map(|v| 1.0 / (v * v)));
    2.0 * ((&problem.a * y * s2).norm() + (&problem.c * y).norm() + (&problem.b * y * s2inv).norm())
}

/// Rank-`r` solve from the data and target matrices.
pub fn solve_rank_r(
    instance: &ProblemInstance,
    r: usize,
    config: &SolverConfig,
) -> Result<RankRSolution> {
    solve_rank_r_reduced(&reduce(instance), r, config)
}

/// Rank-`r` solve from the reduced matrices `A`, `B`, `C`.
pub fn solve_rank_r_reduced(
    problem: &ReducedProblem,
    r: usize,
    config: &SolverConfig,
) -> Result<RankRSolution> {
    config.validate()?;
    let n = problem.n;
    if r == 0 || r > n {
        return Err(Error::InvalidRank { rank: r, n });
    }
    let y0 = match config.init {
        InitStrategy::Random => initial_y(n, r, config.seed)?,
        InitStrategy::TopEigenvectors => {
            let sd = spectral_decomposition(&(&problem.c * 0.5))?;
            sd.vectors.columns(0, r).into_owned()
        }
    };
    solve_from(problem, y0, config)
}

/// Runs the Newton iteration from a given orthonormal starting point.
pub fn solve_from(
    problem: &ReducedProblem,
    y0: Matrix,
    config: &SolverConfig,
) -> Result<RankRSolution> {
    config.validate()?;
    let (n, r) = y0.shape();
    if n != problem.n || r == 0 || r > n {
        return Err(Error::InvalidRank {
            rank: r,
            n: problem.n,
        });
    }
    if config.backend == Backend::CgMaterialized && n * r > MAX_MATERIALIZED_ORDER {
        return Err(Error::ResourceLimit {
            order: n * r,
            limit: MAX_MATERIALIZED_ORDER,
        });
    }

    let mut y = y0;
    if orthogonality_residual(&y) > REORTHONORMALIZE_TOL {
        y = compact_qr(&y)?.q;
    }
    let mut trace = Vec::new();
    let mut step_norms = Vec::new();
    let mut iterates = Vec::new();
    let mut reorthonormalizations = 0;
    let mut converged = false;
    let mut iters = 0;
    let mut shift: Option<f64> = None;
    let mut newton_converged = false;
    let mut escapes = 0;
    if config.record_iterates {
        iterates.push(y.clone());
    }

    while iters < config.max_newton_iters || newton_converged {
        iters += 1;
        let factors = FactorPair {
            s: solver_scales(problem, &y),
            y: y.clone(),
        };
        let e = objective_value(problem, &factors)?;
        if !e.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iters });
        }
        let slack =
            1e-12 * (1.0 + e.abs()) + 64.0 * f64::EPSILON * objective_magnitude(problem, &factors);
        let mut eq = NewtonStepEquation::new(problem, &factors, config.hessian, config.curvature)?;
        let gnorm = eq.g.norm();
        let merit = |cand: &Matrix| -> f64 {
            let s = solver_scales(problem, cand);
            objective_value(problem, &FactorPair { y: cand.clone(), s }).unwrap_or(f64::INFINITY)
        };
        let stationary =
            gnorm <= STATIONARY_ULPS * f64::EPSILON * gradient_scale(problem, &factors);
        if (stationary || newton_converged) && escapes < MAX_ESCAPES {
            newton_converged = false;
            escapes += 1;
            if let Some(next) = leave_saddle(&eq, e, config.seed + escapes as u64, &merit)? {
                let step = (&next - &y).norm();
                trace.push(IterationRecord {
                    iter: iters,
                    objective: e,
                    grad_norm: gnorm,
                    orth_residual: orthogonality_residual(&y),
                    backend_iters: 0,
                    linear_residual: 0.0,
                    step: StepKind::NegativeCurvature,
                    step_norm: step,
                    symmetry_defect: f64::NAN,
                });
                step_norms.push(step);
                y = next;
                if config.record_iterates {
                    iterates.push(y.clone());
                }
                continue;
            }
            if !stationary {
                // The previous Newton step met the step test; keep its record.
                iters -= 1;
                converged = true;
                break;
            }
        }
        if stationary {
            trace.push(IterationRecord {
                iter: iters,
                objective: e,
                grad_norm: gnorm,
                orth_residual: orthogonality_residual(&y),
                backend_iters: 0,
                linear_residual: 0.0,
                step: StepKind::Stationary,
                step_norm: 0.0,
                symmetry_defect: 0.0,
            });
            step_norms.push(0.0);
            converged = true;
            break;
        }

        // Inexact solves away from a stationary point. The Newton tolerance
        // shrinks like |G|^2 to keep the quadratic tail; shifted solves only
        // need a descent direction.
        let relative = gnorm / gradient_scale(problem, &factors);
        let newton_cfg = SolverConfig {
            lin_tol: relative.powi(2).clamp(config.lin_tol, MAX_FORCING),
            ..config.clone()
        };
        let shifted_cfg = SolverConfig {
            lin_tol: relative.clamp(config.lin_tol, MAX_FORCING),
            // One restart cycle; a truncated shifted solve is still a descent direction.
            lin_max_iters: Some(
                config
                    .lin_max_iters_for(n * r)
                    .min(config.restart_for(n, r)),
            ),
            ..config.clone()
        };
        let pf = eq.rhs();
        let op_scale = eq.apply(&pf).norm() / pf.norm().max(f64::MIN_POSITIVE);
        // After a strongly shifted step the unshifted system is likely
        // indefinite; skip it until the shift has decayed or |G| is small.
        let skip_newton =
            relative > NEWTON_ALWAYS_BELOW && shift.is_some_and(|mu| mu > SHIFT_START * op_scale);
        let trial = if skip_newton {
            Trial {
                delta: Matrix::zeros(y.nrows(), y.ncols()),
                iterations: 0,
                residual: f64::NAN,
                symmetry_defect: f64::NAN,
                solved: false,
            }
        } else {
            direction_or_best(&eq, &newton_cfg)?
        };
        let mut lin_iters = trial.iterations;
        let mut lin_residual = trial.residual;
        let defect = trial.symmetry_defect;
        let direction = trial.delta;
        let usable = |d: &Matrix| d.iter().all(|v| v.is_finite()) && d.norm() > 0.0;

        let slope = eq.fy.dot(&direction);
        let mut accepted: Option<(Matrix, StepKind)> = None;
        // Near indefinite points the full step can be an ascent direction that
        // still lowers E by jumping over a ridge; only take descending steps.
        let descends = slope < 0.0 || direction.norm() <= NEWTON_SLOPE_EXEMPT;
        if trial.solved && usable(&direction) && descends && rotation_angle(&direction) <= MAX_STEP
        {
            let cand = geodesic_step(&y, &direction)?;
            if merit(&cand) <= e + slack {
                accepted = Some((cand, StepKind::Newton));
            }
        }

        // Shifted equations interpolate between the Newton and gradient directions.
        if accepted.is_none() && gnorm > 0.0 {
            let mut mu = shift
                .unwrap_or(SHIFT_START * op_scale)
                .max(SHIFT_MIN * op_scale);
            let mut tries = 0;
            for _ in 0..MAX_SHIFTS {
                tries += 1;
                eq.shift = mu;
                let t = direction_or_best(&eq, &shifted_cfg)?;
                lin_iters += t.iterations;
                let slope = eq.fy.dot(&t.delta);
                if usable(&t.delta) && slope < 0.0 && rotation_angle(&t.delta) <= MAX_STEP {
                    let cand = geodesic_step(&y, &t.delta)?;
                    if merit(&cand) <= e + ARMIJO * slope {
                        lin_residual = t.residual;
                        accepted = Some((cand, StepKind::Regularized));
                        break;
                    }
                }
                mu *= SHIFT_GROWTH;
            }
            shift = Some(if accepted.is_some() && tries == 1 {
                mu / (SHIFT_GROWTH * SHIFT_GROWTH)
            } else if accepted.is_some() {
                mu / SHIFT_GROWTH
            } else {
                mu
            });
            eq.shift = 0.0;
        }

        if accepted.is_none() && usable(&direction) && slope < 0.0 {
            let mut t = if trial.solved { 0.5 } else { 1.0 };
            for _ in 0..MAX_HALVINGS {
                let cand = geodesic_step(&y, &(&direction * t))?;
                if merit(&cand) <= e + ARMIJO * t * slope {
                    accepted = Some((cand, StepKind::DampedNewton));
                    break;
                }
                t *= 0.5;
            }
        }
        if accepted.is_none() && gnorm > 0.0 {
            let descent = eq.fy.dot(&eq.g);
            let mut alpha = 1.0 / gnorm;
            for _ in 0..MAX_HALVINGS {
                let cand = geodesic_step(&y, &(&eq.g * -alpha))?;
                if merit(&cand) <= e - ARMIJO * alpha * descent {
                    accepted = Some((cand, StepKind::Gradient));
                    break;
                }
                alpha *= 0.5;
            }
        }

        let orth = orthogonality_residual(&y);
        let (mut next, kind) = match accepted {
            Some(a) => a,
            None => {
                trace.push(IterationRecord {
                    iter: iters,
                    objective: e,
                    grad_norm: gnorm,
                    orth_residual: orth,
                    backend_iters: lin_iters,
                    linear_residual: lin_residual,
                    step: StepKind::Stalled,
                    step_norm: 0.0,
                    symmetry_defect: defect,
                });
                step_norms.push(0.0);
                // No decrease is possible at working precision.
                converged = gnorm <= 1e-8 * (1.0 + eq.fy.norm());
                break;
            }
        };
        if orthogonality_residual(&next) > REORTHONORMALIZE_TOL {
            next = compact_qr(&next)?.q;
            reorthonormalizations += 1;
        }
        let step = (&next - &y).norm();
        trace.push(IterationRecord {
            iter: iters,
            objective: e,
            grad_norm: gnorm,
            orth_residual: orth,
            backend_iters: lin_iters,
            linear_residual: lin_residual,
            step: kind,
            step_norm: step,
            symmetry_defect: defect,
        });
        step_norms.push(step);
        y = next;
        if config.record_iterates {
            iterates.push(y.clone());
        }
        let tiny = step <= config.eps * y.norm() + config.delta;
        if kind == StepKind::Newton && tiny {
            if escapes >= MAX_ESCAPES {
                converged = true;
                break;
            }
            // Checked for negative curvature at the top of the next pass.
            newton_converged = true;
        } else if tiny {
            // Safeguarded steps this short make no progress at working precision.
            converged = gnorm <= 1e-8 * (1.0 + eq.fy.norm());
            break;
        }
    }

    let s = solver_scales(problem, &y);
    let factors = FactorPair { y, s };
    let objective = objective_value(problem, &factors)?;
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: iters });
    }
    let x = factors.solution();
    Ok(RankRSolution {
        orth_residual: orthogonality_residual(&factors.y),
        factors,
        x,
        objective,
        newton_iters: iters,
        converged,
        backend: config.backend,
        step_norms,
        trace,
        reorthonormalizations,
        iterates,
    })
}

fn rotation_angle(delta: &Matrix) -> f64 {
    delta.singular_values().max()
}

/// Step out of a stationary point along the Hessian's most negative direction,
/// or `None` when the curvature is nonnegative at working precision.
fn leave_saddle(
    eq: &NewtonStepEquation<'_>,
    e: f64,
    seed: u64,
    merit: &impl Fn(&Matrix) -> f64,
) -> Result<Option<Matrix>> {
    let (n, r) = eq.shape();
    let y = &eq.factors.y;
    let dim = n * r - r * (r + 1) / 2;
    if dim == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd_5add1e);
    let start = tangent_projection(
        y,
        &Matrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng)),
    );
    let Some((lambda, v, spread)) = lanczos_smallest(eq, &start, dim.min(LANCZOS_STEPS), |d| {
        tangent_projection(y, d)
    }) else {
        return Ok(None);
    };
    if !(lambda < -SADDLE_TOL * spread) {
        return Ok(None);
    }
    let v = if eq.fy.dot(&v) > 0.0 { -v } else { v };
    let mut t = MAX_STEP;
    for _ in 0..MAX_HALVINGS {
        let cand = geodesic_step(y, &(&v * t))?;
        if merit(&cand) <= e + 0.5 * ARMIJO * lambda * t * t {
            return Ok(Some(cand));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Per-iteration operation count `2 m n^2 + n^3 r^2 + n^2 (r^2 + r) + 2 n^2 r`
/// for the operator-form backends (`n^3 r^3` replaces `n^3 r^2` for `CG_L`).
pub fn iteration_cost(m: usize, n: usize, r: usize, backend: Backend) -> f64 {
    let (m, n, r) = (m as f64, n as f64, r as f64);
    let solve = match backend {
        Backend::CgMaterialized => n.powi(3) * r.powi(3),
        _ => n.powi(3) * r.powi(2),
    };
    2.0 * m * n * n + solve + n * n * (r * r + r) + 2.0 * n * n * r
}

/// Upper bound on the cost of a full rank sweep, `2 m n^2 + sum_r n (n^3 r^2 + n^2 (r^2 + r) + 2 n^2 r)`.
pub fn sweep_cost(m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let per_rank: f64 = (1..=n)
        .map(|r| {
            let r = r as f64;
            nf * (nf.powi(3) * r * r + nf * nf * (r * r + r) + 2.0 * nf * nf * r)
        })
        .sum();
    2.0 * mf * nf * nf + per_rank
}
