//! Dense kernels shared by every solver: ordered symmetric eigendecomposition,
//! compact QR with a fixed sign convention, the matrix exponential, and the
//! pseudo-inverse of a factored PSD matrix.
//!
//! Storage is `nalgebra::DMatrix<f64>`, which is column-major. The Newton
//! backends rely on that ordering when they vectorize an `n x r` direction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by [`spectral_decomposition`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Scales below this magnitude make `Y S^-2 Y^T` undefined.
pub const MIN_SCALE: f64 = 1e-13;

/// `A = U diag(values) U^T` with `values` sorted non-increasingly.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub vectors: Matrix,
    pub values: Vector,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = scale_columns(&self.vectors, self.values.as_slice());
        &scaled * self.vectors.transpose()
    }

    /// Eigenvalue cutoff `n * eps * lambda_max` below which a value counts as zero.
    pub fn zero_threshold(&self) -> f64 {
        let n = self.values.len() as f64;
        let lmax = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        n * f64::EPSILON * lmax
    }

    pub fn numerical_rank(&self) -> usize {
        let tol = self.zero_threshold();
        self.values.iter().filter(|&&v| v > tol).count()
    }

    /// Orthonormal basis of the range (leading `rank` columns).
    pub fn range_basis(&self) -> Matrix {
        let r = self.numerical_rank();
        self.vectors.columns(0, r).into_owned()
    }

    /// Orthonormal basis of the null space (trailing columns).
    pub fn null_basis(&self) -> Matrix {
        let r = self.numerical_rank();
        let n = self.vectors.ncols();
        self.vectors.columns(r, n - r).into_owned()
    }
}

/// Ordered spectral decomposition of a symmetric matrix.
///
/// The input is symmetrized as `(A + A^T) / 2` after checking that the
/// asymmetry is within `SYMMETRY_TOL * |A|_F`.
pub fn spectral_decomposition(a: &Matrix) -> Result<SpectralDecomposition> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let deviation = (a - a.transpose()).norm();
    let tolerance = SYMMETRY_TOL * a.norm();
    if deviation > tolerance {
        return Err(Error::Asymmetric {
            deviation,
            tolerance,
        });
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(SpectralDecomposition {
            vectors: Matrix::zeros(0, 0),
            values: Vector::zeros(0),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition { vectors, values })
}

/// `Q` (n x r, orthonormal columns) and `R` (r x r, upper triangular, nonnegative diagonal).
#[derive(Debug, Clone)]
pub struct CompactQr {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR restricted to the leading `r` columns of `Q`.
///
/// Rank-deficient input is accepted: `R` then carries zero rows and the
/// matching columns of `Q` are whatever unit vectors the reflections produce.
pub fn compact_qr(m: &Matrix) -> Result<CompactQr> {
    let (n, r) = m.shape();
    if n < r {
        return Err(Error::Dimension(format!(
            "compact QR needs rows >= cols, got {n}x{r}"
        )));
    }
    if r == 0 {
        return Ok(CompactQr {
            q: Matrix::zeros(n, 0),
            r: Matrix::zeros(0, 0),
        });
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut rm = qr.r();
    for k in 0..r {
        if rm[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
            rm.row_mut(k).neg_mut();
        }
    }
    Ok(CompactQr { q, r: rm })
}

// Pade(6,6) coefficients: c_k = (12-k)! 6! / (12! k! (6-k)!).
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Matrix exponential by scaling and squaring with a (6,6) Pade approximant.
pub fn matrix_exp(w: &Matrix) -> Result<Matrix> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    let k = w.nrows();
    if k == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let norm1 = (0..k)
        .map(|j| w.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    if !norm1.is_finite() {
        return Err(Error::InvalidInput(
            "matrix_exp of a non-finite matrix".into(),
        ));
    }
    // |W / 2^s|_1 <= 1/2 keeps the Pade(6) truncation error below 1e-17.
    let squarings = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let x = w / 2f64.powi(squarings);
    let id = Matrix::identity(k, k);
    let mut power = id.clone();
    let mut num = id.clone();
    let mut den = id;
    for (j, &c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &x;
        num += c * &power;
        if j % 2 == 0 {
            den += c * &power;
        } else {
            den -= c * &power;
        }
    }
    let mut e = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::InvalidInput("singular Pade denominator".into()))?;
    for _ in 0..squarings {
        e = &e * &e;
    }
    Ok(e)
}

/// `Y S^-2 Y^T`, the Moore-Penrose inverse of `Y S^2 Y^T` for orthonormal `Y`.
pub fn pseudo_inverse_from_factors(y: &Matrix, s: &Vector) -> Result<Matrix> {
    check_scales(y, s)?;
    let inv_sq: Vec<f64> = s.iter().map(|v| 1.0 / (v * v)).collect();
    Ok(&scale_columns(y, &inv_sq) * y.transpose())
}

/// `Y S^2 Y^T`.
pub fn psd_from_factors(y: &Matrix, s: &Vector) -> Result<Matrix> {
    if y.ncols() != s.len() {
        return Err(Error::Dimension(format!(
            "Y has {} columns but {} scales were given",
            y.ncols(),
            s.len()
        )));
    }
    let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
    Ok(symmetrize(&(&scale_columns(y, &sq) * y.transpose())))
}

pub(crate) fn check_scales(y: &Matrix, s: &Vector) -> Result<()> {
    if y.ncols() != s.len() {
        return Err(Error::Dimension(format!(
            "Y has {} columns but {} scales were given",
            y.ncols(),
            s.len()
        )));
    }
    if let Some((index, &value)) = s
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.abs() >= MIN_SCALE) || !v.is_finite())
    {
        return Err(Error::SingularScale { index, value });
    }
    Ok(())
}

/// `|Y^T Y - I|_F`.
pub fn orthogonality_residual(y: &Matrix) -> f64 {
    let r = y.ncols();
    (y.transpose() * y - Matrix::identity(r, r)).norm()
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn skew(a: &Matrix) -> Matrix {
    (a - a.transpose()) * 0.5
}

/// `M diag(d)` without forming the diagonal matrix.
pub fn scale_columns(m: &Matrix, d: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (j, &v) in d.iter().enumerate() {
        out.column_mut(j).scale_mut(v);
    }
    out
}

/// Frobenius inner product.
pub fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.dot(b)
}
