//! Total-error objective for a rank-`r` PSD solution `X = Y S^2 Y^T`.
//!
//! With `A = D^T D`, `B = T^T T` and `C = D^T T + T^T D`, the error
//! `tr(dT^T dD)` between the fitted and measured matrices reduces to
//!
//! ```text
//! E(Y, S) = tr(Y^T A Y S^2 - Y^T C Y + Y^T B Y S^-2)
//!         = sum_i s_i^2 a_i - c_i + b_i / s_i^2,   a_i = y_i^T A y_i, ...
//! ```
//!
//! Everything here is evaluated through the `n x n` reduced matrices; the
//! `m x n` residual form is only used by [`error_pair`].

use crate::error::{Error, Result};
use crate::linalg::{
    check_scales, orthogonality_residual, psd_from_factors, pseudo_inverse_from_factors,
    scale_columns, symmetrize, Matrix, Vector,
};

/// Degenerate-column threshold on `y^T A y`, relative to `|A|_F`.
pub const DEGENERATE_TOL: f64 = 1e-13;
/// Floor applied to `y^T B y` when it is not positive.
pub const B_FLOOR: f64 = 1e-13;
/// Range the ratio `b_i / a_i` is clamped to for degenerate columns in solver mode.
pub const RATIO_CLAMP: (f64, f64) = (1e-8, 1e8);

/// Data matrix `D` and target matrix `T` of `D X ~ T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub d: Matrix,
    pub t: Matrix,
}

impl ProblemInstance {
    pub fn new(d: Matrix, t: Matrix) -> Result<Self> {
        if d.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "D is {}x{} but T is {}x{}",
                d.nrows(),
                d.ncols(),
                t.nrows(),
                t.ncols()
            )));
        }
        if d.ncols() == 0 {
            return Err(Error::InvalidInput("the unknown must have n >= 1".into()));
        }
        if d.nrows() < d.ncols() {
            return Err(Error::Dimension(format!(
                "need m >= n, got m = {}, n = {}",
                d.nrows(),
                d.ncols()
            )));
        }
        if d.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in D or T".into()));
        }
        Ok(Self { d, t })
    }

    pub fn m(&self) -> usize {
        self.d.nrows()
    }

    pub fn n(&self) -> usize {
        self.d.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub m: usize,
    pub n: usize,
}

impl ReducedProblem {
    /// Builds the problem directly from `A`, `B`, `C` (symmetrized).
    pub fn from_parts(a: Matrix, b: Matrix, c: Matrix, m: usize) -> Result<Self> {
        let n = a.nrows();
        for (name, x) in [("A", &a), ("B", &b), ("C", &c)] {
            if x.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        Ok(Self {
            a: symmetrize(&a),
            b: symmetrize(&b),
            c: symmetrize(&c),
            m,
            n,
        })
    }
}

/// Orthonormal `Y` (n x r) and the diagonal `s` of `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub y: Matrix,
    pub s: Vector,
}

impl FactorPair {
    pub fn new(y: Matrix, s: Vector) -> Result<Self> {
        check_scales(&y, &s)?;
        if let Some(i) = s.iter().position(|v| *v <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "scale s[{i}] must be positive"
            )));
        }
        let residual = orthogonality_residual(&y);
        if residual > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "Y is not orthonormal: |Y^T Y - I|_F = {residual:e}"
            )));
        }
        Ok(Self { y, s })
    }

    pub fn rank(&self) -> usize {
        self.y.ncols()
    }

    /// `X = Y S^2 Y^T`.
    pub fn solution(&self) -> Matrix {
        psd_from_factors(&self.y, &self.s).expect("factor shapes checked at construction")
    }
}

/// Errors attributed to the data (`delta_d`) and target (`delta_t`) matrices.
#[derive(Debug, Clone)]
pub struct ErrorPair {
    pub delta_d: Matrix,
    pub delta_t: Matrix,
}

pub fn reduce(instance: &ProblemInstance) -> ReducedProblem {
    let d = &instance.d;
    let t = &instance.t;
    let dt = d.transpose() * t;
    ReducedProblem {
        a: symmetrize(&(d.transpose() * d)),
        b: symmetrize(&(t.transpose() * t)),
        c: symmetrize(&(&dt + dt.transpose())),
        m: instance.m(),
        n: instance.n(),
    }
}

/// `dT = D X - T` and `dD = (D - T X^+) Y Y^T`.
pub fn error_pair(instance: &ProblemInstance, factors: &FactorPair) -> Result<ErrorPair> {
    check_dims(instance.n(), factors)?;
    let x = psd_from_factors(&factors.y, &factors.s)?;
    let pinv = pseudo_inverse_from_factors(&factors.y, &factors.s)?;
    let delta_t = &instance.d * &x - &instance.t;
    let proj = &factors.y * factors.y.transpose();
    let delta_d = (&instance.d - &instance.t * pinv) * proj;
    Ok(ErrorPair { delta_d, delta_t })
}

/// Per-column quadratic forms `(a_i, b_i, c_i)`.
#[derive(Debug, Clone)]
pub struct ColumnForms {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn column_forms(problem: &ReducedProblem, y: &Matrix) -> ColumnForms {
    let ay = &problem.a * y;
    let by = &problem.b * y;
    let cy = &problem.c * y;
    let r = y.ncols();
    let col = |m: &Matrix, j: usize| y.column(j).dot(&m.column(j));
    ColumnForms {
        a: (0..r).map(|j| col(&ay, j)).collect(),
        b: (0..r).map(|j| col(&by, j)).collect(),
        c: (0..r).map(|j| col(&cy, j)).collect(),
    }
}

pub fn objective_value(problem: &ReducedProblem, factors: &FactorPair) -> Result<f64> {
    check_dims(problem.n, factors)?;
    let f = column_forms(problem, &factors.y);
    Ok(factors
        .s
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let s2 = s * s;
            s2 * f.a[i] - f.c[i] + f.b[i] / s2
        })
        .sum())
}

/// Sum of the absolute terms of `E`; scales roundoff estimates.
pub(crate) fn objective_magnitude(problem: &ReducedProblem, factors: &FactorPair) -> f64 {
    let f = column_forms(problem, &factors.y);
    factors
        .s
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let s2 = s * s;
            (s2 * f.a[i]).abs() + f.c[i].abs() + (f.b[i] / s2).abs()
        })
        .sum()
}

/// `dE/dY = 2 (A Y S^2 - C Y + B Y S^-2)`.
pub fn gradient_y(problem: &ReducedProblem, factors: &FactorPair) -> Result<Matrix> {
    check_dims(problem.n, factors)?;
    let (sq, inv_sq) = squares(&factors.s);
    let y = &factors.y;
    let g = scale_columns(&(&problem.a * y), &sq) - &problem.c * y
        + scale_columns(&(&problem.b * y), &inv_sq);
    Ok(g * 2.0)
}

/// The Hessian-like operator used in the Newton equation:
///
/// ```text
/// F_YY(D) = A D S^2 - Y S^2 D^T A Y - C D + Y D^T C Y + B D S^-2 - Y S^-2 D^T B Y
/// ```
///
/// It equals `(H - Y H^T Y) / 2` where `H` is the directional derivative of
/// [`gradient_y`] along `D` with `S` fixed.
pub fn hessian_apply(problem: &ReducedProblem, factors: &FactorPair, delta: &Matrix) -> Matrix {
    let (sq, inv_sq) = squares(&factors.s);
    let y = &factors.y;
    let dt = delta.transpose();
    let ay = &problem.a * y;
    let by = &problem.b * y;
    let cy = &problem.c * y;
    scale_columns(&(&problem.a * delta), &sq)
        - y * scale_rows(&(&dt * &ay), &sq)
        - &problem.c * delta
        + y * (&dt * &cy)
        + scale_columns(&(&problem.b * delta), &inv_sq)
        - y * scale_rows(&(&dt * &by), &inv_sq)
}

/// Directional derivative of [`gradient_y`] along `delta` with `S` held fixed:
/// `2 (A D S^2 - C D + B D S^-2)`.
pub fn gradient_derivative(
    problem: &ReducedProblem,
    factors: &FactorPair,
    delta: &Matrix,
) -> Matrix {
    let (sq, inv_sq) = squares(&factors.s);
    let h = scale_columns(&(&problem.a * delta), &sq) - &problem.c * delta
        + scale_columns(&(&problem.b * delta), &inv_sq);
    h * 2.0
}

/// Change of the gradient caused by the optimal scales moving with `Y`.
///
/// For `s_i = (b_i / a_i)^(1/4)`, `ds_i = s_i/2 (y_i^T B d_i / b_i - y_i^T A d_i / a_i)`
/// and `d(grad)_i / ds_i = 4 (s_i A - s_i^-3 B) y_i`. Adding this to
/// [`gradient_derivative`] gives the Hessian of `Y -> E(Y, S*(Y))`.
pub fn scale_coupling_apply(
    problem: &ReducedProblem,
    factors: &FactorPair,
    delta: &Matrix,
) -> Matrix {
    ScaleCoupling::new(problem, factors).apply(delta)
}

/// [`scale_coupling_apply`] with the `Y`-dependent factors computed once.
#[derive(Debug, Clone)]
pub struct ScaleCoupling {
    /// Columns `A y_i / a_i` and `B y_i / b_i`, zero for degenerate columns.
    ay: Matrix,
    by: Matrix,
    /// `s_i / 2` and the columns `4 (s_i A - s_i^-3 B) y_i`.
    half_s: Vector,
    w: Matrix,
}

impl ScaleCoupling {
    pub fn new(problem: &ReducedProblem, factors: &FactorPair) -> Self {
        let y = &factors.y;
        let mut ay = &problem.a * y;
        let mut by = &problem.b * y;
        let mut w = Matrix::zeros(y.nrows(), y.ncols());
        let mut half_s = Vector::zeros(y.ncols());
        for i in 0..y.ncols() {
            let s = factors.s[i];
            let a = y.column(i).dot(&ay.column(i));
            let b = y.column(i).dot(&by.column(i));
            if a <= 0.0 || b <= 0.0 {
                ay.column_mut(i).fill(0.0);
                by.column_mut(i).fill(0.0);
                continue;
            }
            w.set_column(i, &((ay.column(i) * s - by.column(i) / (s * s * s)) * 4.0));
            ay.column_mut(i).unscale_mut(a);
            by.column_mut(i).unscale_mut(b);
            half_s[i] = 0.5 * s;
        }
        Self { ay, by, half_s, w }
    }

    pub fn apply(&self, delta: &Matrix) -> Matrix {
        let mut out = self.w.clone();
        for i in 0..out.ncols() {
            let ds = self.half_s[i]
                * (self.by.column(i).dot(&delta.column(i))
                    - self.ay.column(i).dot(&delta.column(i)));
            out.column_mut(i).scale_mut(ds);
        }
        out
    }
}

/// Minimizers `s_i = (y_i^T B y_i / y_i^T A y_i)^(1/4)` of `E` for fixed `Y`.
///
/// Strict mode: a column with `y_i^T A y_i <= DEGENERATE_TOL * |A|_F` is an error.
pub fn optimal_scales(problem: &ReducedProblem, y: &Matrix) -> Result<Vector> {
    let f = column_forms(problem, y);
    let tol = DEGENERATE_TOL * problem.a.norm();
    let mut s = Vector::zeros(y.ncols());
    for i in 0..y.ncols() {
        if !(f.a[i] > tol) {
            return Err(Error::DegenerateColumn {
                index: i,
                value: f.a[i],
            });
        }
        let b = if f.b[i] > 0.0 { f.b[i] } else { B_FLOOR };
        s[i] = (b / f.a[i]).powf(0.25);
    }
    Ok(s)
}

/// Solver-mode scales: degenerate columns get their ratio clamped into
/// `RATIO_CLAMP` instead of failing.
pub fn solver_scales(problem: &ReducedProblem, y: &Matrix) -> Vector {
    let f = column_forms(problem, y);
    let tol = DEGENERATE_TOL * problem.a.norm();
    Vector::from_iterator(
        y.ncols(),
        (0..y.ncols()).map(|i| {
            let b = if f.b[i] > 0.0 { f.b[i] } else { B_FLOOR };
            let mut ratio = b / f.a[i];
            if !(f.a[i] > tol) || !ratio.is_finite() {
                ratio = if ratio.is_nan() { 1.0 } else { ratio };
                ratio = ratio.clamp(RATIO_CLAMP.0, RATIO_CLAMP.1);
            }
            ratio.powf(0.25)
        }),
    )
}

fn squares(s: &Vector) -> (Vec<f64>, Vec<f64>) {
    let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
    let inv: Vec<f64> = sq.iter().map(|v| 1.0 / v).collect();
    (sq, inv)
}

fn scale_rows(m: &Matrix, d: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (i, &v) in d.iter().enumerate() {
        out.row_mut(i).scale_mut(v);
    }
    out
}

fn check_dims(n: usize, factors: &FactorPair) -> Result<()> {
    if factors.y.nrows() != n || factors.y.ncols() != factors.s.len() {
        return Err(Error::Dimension(format!(
            "factors are {}x{} with {} scales, problem has n = {n}",
            factors.y.nrows(),
            factors.y.ncols(),
            factors.s.len()
        )));
    }
    check_scales(&factors.y, &factors.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::compact_qr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(0.0..1.0))
    }

    fn orthonormal(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Matrix {
        let g = Matrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        compact_qr(&g).unwrap().q
    }

    fn random_setup(seed: u64, m: usize, n: usize, r: usize) -> (ProblemInstance, FactorPair) {
        let mut g = rng(seed);
        let inst = ProblemInstance::new(uniform(&mut g, m, n), uniform(&mut g, m, n)).unwrap();
        let y = orthonormal(&mut g, n, r);
        let s = Vector::from_fn(r, |_, _| g.random_range(0.5..2.0));
        (inst, FactorPair::new(y, s).unwrap())
    }

    /// Sum-of-squares form `sum_i |(s_i D - T / s_i) y_i|^2`.
    fn sos_oracle(inst: &ProblemInstance, f: &FactorPair) -> f64 {
        (0..f.rank())
            .map(|i| {
                let s = f.s[i];
                ((&inst.d * s - &inst.t / s) * f.y.column(i)).norm_squared()
            })
            .sum()
    }

    #[test]
    fn reduce_identity() {
        let inst = ProblemInstance::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let p = reduce(&inst);
        assert_eq!(p.a, Matrix::identity(2, 2));
        assert_eq!(p.b, Matrix::identity(2, 2));
        assert_eq!(p.c, Matrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn reduce_hand_arithmetic() {
        let d = Matrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let t = Matrix::from_column_slice(2, 1, &[3.0, 1.0]);
        let p = reduce(&ProblemInstance::new(d.clone(), t.clone()).unwrap());
        // Independent elementwise products.
        let dot = |u: &Matrix, v: &Matrix| u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        assert_eq!(p.a[(0, 0)], 5.0);
        assert_eq!(p.b[(0, 0)], 10.0);
        assert_eq!(p.c[(0, 0)], 10.0);
        assert_eq!(p.c[(0, 0)], 2.0 * dot(&d, &t));
    }

    #[test]
    fn reduce_random_is_psd() {
        let (inst, _) = random_setup(1, 10, 4, 1);
        let p = reduce(&inst);
        for m in [&p.a, &p.b] {
            let ev = m.clone().symmetric_eigenvalues();
            assert!(ev.iter().all(|&v| v >= -1e-12));
        }
        assert_eq!(p.c, p.c.transpose());
    }

    #[test]
    fn reduce_rejects_mismatch() {
        assert!(ProblemInstance::new(Matrix::zeros(3, 2), Matrix::zeros(3, 1)).is_err());
        assert!(ProblemInstance::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn error_pair_exact_fit() {
        let y = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let f = FactorPair::new(y, Vector::from_vec(vec![2.0])).unwrap();
        let t = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let inst = ProblemInstance::new(Matrix::identity(2, 2), t).unwrap();
        let e = error_pair(&inst, &f).unwrap();
        assert!(e.delta_d.norm() < 1e-15);
        assert!(e.delta_t.norm() < 1e-15);
        assert_eq!(objective_value(&reduce(&inst), &f).unwrap(), 0.0);
    }

    #[test]
    fn error_pair_zero_target() {
        let y = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let f = FactorPair::new(y, Vector::from_vec(vec![1.0])).unwrap();
        let inst = ProblemInstance::new(Matrix::identity(2, 2), Matrix::zeros(2, 2)).unwrap();
        let e = error_pair(&inst, &f).unwrap();
        let want = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.delta_d, want);
        assert_eq!(e.delta_t, want);
    }

    #[test]
    fn error_pair_constructed_fit() {
        let mut g = rng(7);
        let d = uniform(&mut g, 8, 5);
        let y = orthonormal(&mut g, 5, 2);
        let s = Vector::from_vec(vec![1.5, 0.7]);
        let f = FactorPair::new(y, s).unwrap();
        let t = &d * f.solution();
        let inst = ProblemInstance::new(d, t).unwrap();
        let e = error_pair(&inst, &f).unwrap();
        assert!(e.delta_d.norm() < 1e-10);
        assert!(e.delta_t.norm() < 1e-10);
        assert!(objective_value(&reduce(&inst), &f).unwrap().abs() < 1e-10);
    }

    #[test]
    fn scalar_exact_fit() {
        let inst = ProblemInstance::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let p = reduce(&inst);
        assert_eq!((p.a[(0, 0)], p.b[(0, 0)], p.c[(0, 0)]), (1.0, 4.0, 4.0));
        let f = FactorPair::new(
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 2f64.sqrt()),
        )
        .unwrap();
        assert!(objective_value(&p, &f).unwrap().abs() < 1e-15);
    }

    #[test]
    fn objective_forms_agree() {
        for seed in 0..20 {
            let (inst, f) = random_setup(seed, 9, 5, 1 + seed as usize % 4);
            let p = reduce(&inst);
            let e = objective_value(&p, &f).unwrap();
            assert!(e >= -1e-10);
            let pair = error_pair(&inst, &f).unwrap();
            let trace = pair.delta_t.dot(&pair.delta_d);
            let sos = sos_oracle(&inst, &f);
            assert!(
                (trace - e).abs() <= 1e-8 * e.abs().max(1.0),
                "{trace} vs {e}"
            );
            assert!((sos - e).abs() <= 1e-8 * e.abs().max(1.0), "{sos} vs {e}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (inst, f) = random_setup(3, 10, 6, 2);
        let p = reduce(&inst);
        let g = gradient_y(&p, &f).unwrap();
        let h = 1e-5;
        let mut max_dev: f64 = 0.0;
        for i in 0..6 {
            for j in 0..2 {
                let mut plus = f.clone();
                plus.y[(i, j)] += h;
                let mut minus = f.clone();
                minus.y[(i, j)] -= h;
                let fd = (objective_value(&p, &plus).unwrap()
                    - objective_value(&p, &minus).unwrap())
                    / (2.0 * h);
                max_dev = max_dev.max((fd - g[(i, j)]).abs());
            }
        }
        assert!(max_dev <= 1e-6 * (1.0 + g.norm()), "{max_dev}");
    }

    #[test]
    fn gradient_symmetric_cancellation() {
        let mut g = rng(2);
        let x = uniform(&mut g, 4, 4);
        let a = &x * x.transpose();
        let p = ReducedProblem::from_parts(a.clone(), a.clone(), a * 2.0, 4).unwrap();
        let f = FactorPair::new(orthonormal(&mut g, 4, 2), Vector::from_element(2, 1.0)).unwrap();
        assert!(gradient_y(&p, &f).unwrap().norm() < 1e-12);
    }

    #[test]
    fn projected_gradient_vanishes_at_exact_fit() {
        let mut g = rng(5);
        let d = uniform(&mut g, 8, 4);
        let y = orthonormal(&mut g, 4, 2);
        let xs = psd_from_factors(&y, &Vector::from_vec(vec![2.0, 1.0])).unwrap();
        let inst = ProblemInstance::new(d.clone(), &d * xs).unwrap();
        let p = reduce(&inst);
        let s = optimal_scales(&p, &y).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-10 && (s[1] - 1.0).abs() < 1e-10);
        let f = FactorPair::new(y.clone(), s).unwrap();
        let fy = gradient_y(&p, &f).unwrap();
        let proj = &fy - &y * fy.transpose() * &y;
        assert!(proj.norm() < 1e-10);
    }

    #[test]
    fn hessian_zero_and_linear() {
        let (inst, f) = random_setup(4, 8, 5, 2);
        let p = reduce(&inst);
        assert_eq!(hessian_apply(&p, &f, &Matrix::zeros(5, 2)).norm(), 0.0);
        let mut g = rng(40);
        let d1 = uniform(&mut g, 5, 2);
        let d2 = uniform(&mut g, 5, 2);
        let (al, be) = (0.7, -1.3);
        let lhs = hessian_apply(&p, &f, &(&d1 * al + &d2 * be));
        let rhs = hessian_apply(&p, &f, &d1) * al + hessian_apply(&p, &f, &d2) * be;
        assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + p.a.norm() + p.b.norm()));
    }

    #[test]
    fn hessian_matches_projected_gradient_fd() {
        let (inst, f) = random_setup(6, 9, 5, 2);
        let p = reduce(&inst);
        let mut g = rng(41);
        let dir = uniform(&mut g, 5, 2);
        let h = 1e-5;
        let mut plus = f.clone();
        plus.y += &dir * h;
        let mut minus = f.clone();
        minus.y -= &dir * h;
        let fd = (gradient_y(&p, &plus).unwrap() - gradient_y(&p, &minus).unwrap()) / (2.0 * h);
        assert!((&fd - gradient_derivative(&p, &f, &dir)).norm() <= 1e-5 * (1.0 + fd.norm()));
        let y = &f.y;
        let want = (&fd - y * fd.transpose() * y) * 0.5;
        assert!((hessian_apply(&p, &f, &dir) - want).norm() <= 1e-5 * (1.0 + fd.norm()));
    }

    #[test]
    fn scale_coupling_matches_fd_of_reduced_gradient() {
        let (inst, f0) = random_setup(8, 9, 5, 3);
        let p = reduce(&inst);
        let y = f0.y.clone();
        let reduced_grad = |y: &Matrix| {
            let s = solver_scales(&p, y);
            gradient_y(&p, &FactorPair { y: y.clone(), s }).unwrap()
        };
        let f = FactorPair {
            y: y.clone(),
            s: optimal_scales(&p, &y).unwrap(),
        };
        let mut g = rng(42);
        let dir = uniform(&mut g, 5, 3);
        let h = 1e-5;
        let fd = (reduced_grad(&(&y + &dir * h)) - reduced_grad(&(&y - &dir * h))) / (2.0 * h);
        let exact = gradient_derivative(&p, &f, &dir) + scale_coupling_apply(&p, &f, &dir);
        assert!(
            (&fd - &exact).norm() <= 1e-5 * (1.0 + fd.norm()),
            "{}",
            (&fd - &exact).norm()
        );
    }

    #[test]
    fn scales_examples() {
        let y = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let p = ReducedProblem::from_parts(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2) * 16.0,
            Matrix::zeros(2, 2),
            2,
        )
        .unwrap();
        assert!((optimal_scales(&p, &y).unwrap()[0] - 2.0).abs() < 1e-15);

        let (inst, f) = random_setup(9, 8, 4, 3);
        let mut p = reduce(&inst);
        p.b = p.a.clone();
        let s = optimal_scales(&p, &f.y).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn scales_beat_grid() {
        let mut g = rng(10);
        let x = uniform(&mut g, 6, 4);
        let z = uniform(&mut g, 6, 4);
        let p = ReducedProblem::from_parts(
            x.transpose() * &x,
            z.transpose() * &z,
            Matrix::zeros(4, 4),
            6,
        )
        .unwrap();
        let y = orthonormal(&mut g, 4, 1);
        let s = optimal_scales(&p, &y).unwrap()[0];
        let f = column_forms(&p, &y);
        let phi = |s: f64| s * s * f.a[0] + f.b[0] / (s * s);
        let best = phi(s);
        for k in 0..10_000 {
            let t = 10f64.powf(-3.0 + 6.0 * k as f64 / 9_999.0);
            assert!(best <= phi(t) + 1e-12 * best);
        }
    }

    #[test]
    fn scales_degenerate_column() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        let p =
            ReducedProblem::from_parts(a, Matrix::identity(2, 2), Matrix::zeros(2, 2), 2).unwrap();
        let y = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            optimal_scales(&p, &y),
            Err(Error::DegenerateColumn { index: 0, .. })
        ));
        let s = solver_scales(&p, &y);
        assert!((s[0] - 100.0).abs() < 1e-10);
    }

    #[test]
    fn scales_floor_nonpositive_b() {
        let p = ReducedProblem::from_parts(
            Matrix::identity(2, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            2,
        )
        .unwrap();
        let y = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s = optimal_scales(&p, &y).unwrap()[0];
        assert!((s - B_FLOOR.powf(0.25)).abs() < 1e-15);
    }
}
