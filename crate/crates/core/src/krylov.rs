//! Matrix-free Krylov solvers over `n x r` matrices with the Frobenius inner product.

use crate::linalg::Matrix;

/// A linear map on matrices of a fixed shape.
pub trait LinearOperator {
    fn apply(&self, x: &Matrix) -> Matrix;

    /// Adjoint with respect to the Frobenius inner product.
    fn apply_adjoint(&self, x: &Matrix) -> Matrix;
}

/// An explicit `N x N` matrix acting on column-major vectorized `rows x cols` matrices.
pub struct Materialized<'a> {
    pub matrix: &'a Matrix,
    pub rows: usize,
    pub cols: usize,
}

impl Materialized<'_> {
    fn reshape(&self, v: Matrix) -> Matrix {
        Matrix::from_column_slice(self.rows, self.cols, v.as_slice())
    }

    fn vec(x: &Matrix) -> Matrix {
        Matrix::from_column_slice(x.len(), 1, x.as_slice())
    }
}

impl LinearOperator for Materialized<'_> {
    fn apply(&self, x: &Matrix) -> Matrix {
        self.reshape(self.matrix * Self::vec(x))
    }

    fn apply_adjoint(&self, x: &Matrix) -> Matrix {
        self.reshape(self.matrix.tr_mul(&Self::vec(x)))
    }
}

/// `y += a * x`.
fn axpy(y: &mut Matrix, a: f64, x: &Matrix) {
    y.zip_apply(x, |yi, xi| *yi += a * xi);
}

#[derive(Debug, Clone)]
pub struct KrylovOutcome {
    pub x: Matrix,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric operator, started from zero.
///
/// Stops on `|b - Ax| <= tol`, after `max_iters` steps, or when a search
/// direction has non-positive curvature.
pub fn cg(op: &impl LinearOperator, b: &Matrix, tol: f64, max_iters: usize) -> KrylovOutcome {
    let mut x = Matrix::zeros(b.nrows(), b.ncols());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut iterations = 0;
    while rr.sqrt() > tol && iterations < max_iters {
        let ap = op.apply(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rr / curvature;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = r.norm_squared();
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
        iterations += 1;
    }
    // Recursive residuals drift; report the true one.
    let residual = (b - op.apply(&x)).norm();
    KrylovOutcome {
        converged: residual <= tol,
        x,
        residual,
        iterations,
    }
}

/// CG on the normal equations `A^T A x = A^T b` (CGLS form, true residual tracked).
pub fn cgnr(op: &impl LinearOperator, b: &Matrix, tol: f64, max_iters: usize) -> KrylovOutcome {
    let mut x = Matrix::zeros(b.nrows(), b.ncols());
    let mut r = b.clone();
    let mut s = op.apply_adjoint(&r);
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let mut iterations = 0;
    while r.norm() > tol && iterations < max_iters && gamma > 0.0 {
        let q = op.apply(&p);
        let qq = q.norm_squared();
        if !(qq > 0.0) {
            break;
        }
        let alpha = gamma / qq;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &q);
        s = op.apply_adjoint(&r);
        let gamma_new = s.norm_squared();
        p = &s + &p * (gamma_new / gamma);
        gamma = gamma_new;
        iterations += 1;
    }
    let residual = (b - op.apply(&x)).norm();
    KrylovOutcome {
        converged: residual <= tol,
        x,
        residual,
        iterations,
    }
}

/// Lanczos with full reorthogonalization on the symmetric part of `op`.
///
/// Returns the smallest Ritz value, its unit Ritz vector and the largest Ritz
/// value in magnitude. `project` maps iterates back onto the subspace the
/// operator is restricted to.
pub fn lanczos_smallest(
    op: &impl LinearOperator,
    start: &Matrix,
    steps: usize,
    project: impl Fn(&Matrix) -> Matrix,
) -> Option<(f64, Matrix, f64)> {
    let norm = start.norm();
    if !(norm > 0.0) || steps == 0 {
        return None;
    }
    let mut basis = vec![start / norm];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for k in 0..steps {
        let q = &basis[k];
        let mut w = project(&((op.apply(q) + op.apply_adjoint(q)) * 0.5));
        alphas.push(q.dot(&w));
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                axpy(&mut w, -c, v);
            }
        }
        let beta = w.norm();
        let scale = alphas.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if k + 1 == steps || !(beta > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    let k = alphas.len();
    let t = Matrix::from_fn(k, k, |i, j| {
        if i == j {
            alphas[i]
        } else if i + 1 == j {
            betas[i]
        } else if j + 1 == i {
            betas[j]
        } else {
            0.0
        }
    });
    let eig = t.symmetric_eigen();
    let (imin, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let spread = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut ritz = Matrix::zeros(start.nrows(), start.ncols());
    for (i, v) in basis.iter().enumerate().take(k) {
        axpy(&mut ritz, eig.eigenvectors[(i, imin)], v);
    }
    let rn = ritz.norm();
    Some((lambda, ritz / rn, spread))
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations.
///
/// `max_iters` bounds the total number of Arnoldi steps over all cycles.
pub fn gmres(
    op: &impl LinearOperator,
    b: &Matrix,
    tol: f64,
    max_iters: usize,
    restart: usize,
) -> KrylovOutcome {
    let restart = restart.max(1);
    let mut x = Matrix::zeros(b.nrows(), b.ncols());
    let mut residual = b.norm();
    let mut iterations = 0;

    while residual > tol && iterations < max_iters {
        let r0 = b - op.apply(&x);
        let beta = r0.norm();
        residual = beta;
        if beta <= tol {
            break;
        }
        let mut basis: Vec<Matrix> = vec![r0 / beta];
        // Column-major Hessenberg, rotated in place into R.
        let mut h: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<(f64, f64)> = Vec::new();
        let mut g = vec![beta];
        let mut steps = 0;

        while steps < restart && iterations < max_iters {
            let mut w = op.apply(&basis[steps]);
            let mut col = vec![0.0; steps + 2];
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let hij = w.dot(v);
                    col[i] += hij;
                    axpy(&mut w, -hij, v);
                }
            }
            let wn = w.norm();
            col[steps + 1] = wn;

            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, bb) = (col[i], col[i + 1]);
                col[i] = c * a + s * bb;
                col[i + 1] = -s * a + c * bb;
            }
            let (a, bb) = (col[steps], col[steps + 1]);
            let denom = a.hypot(bb);
            let (c, s) = if denom == 0.0 {
                (1.0, 0.0)
            } else {
                (a / denom, bb / denom)
            };
            col[steps] = denom;
            col[steps + 1] = 0.0;
            cs.push((c, s));
            let gk = g[steps];
            g[steps] = c * gk;
            g.push(-s * gk);

            h.push(col);
            steps += 1;
            iterations += 1;
            residual = g[steps].abs();
            if residual <= tol || wn <= f64::EPSILON * beta {
                break;
            }
            basis.push(w / wn);
        }

        // Back substitution on the triangular factor.
        let mut yv = vec![0.0; steps];
        for i in (0..steps).rev() {
            let mut acc = g[i];
            for j in i + 1..steps {
                acc -= h[j][i] * yv[j];
            }
            yv[i] = if h[i][i] != 0.0 { acc / h[i][i] } else { 0.0 };
        }
        for (j, &c) in yv.iter().enumerate() {
            axpy(&mut x, c, &basis[j]);
        }
        residual = (b - op.apply(&x)).norm();
        if steps == 0 {
            break;
        }
    }

    KrylovOutcome {
        converged: residual <= tol,
        x,
        residual,
        iterations,
    }
}
