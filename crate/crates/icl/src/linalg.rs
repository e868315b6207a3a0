//! Minimal dense linear algebra for small symmetric systems.
//!
//! Provides the handful of primitives the closed-form error expressions need:
//! matrix products, quadratic forms, trace-of-product, an SPD inverse, and a
//! cyclic-Jacobi symmetric eigendecomposition. Everything is dense row-major
//! `f64`; the dimensions in play are tiny (d <= 64), so no attempt is made at
//! blocked or sparse formats.

use thiserror::Error;

/// Errors raised by the linear-algebra primitives.
#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The Jacobi sweep budget was exhausted before the off-diagonal norm
    /// dropped below tolerance.
    #[error("eigendecomposition did not converge within the sweep budget")]
    NotConverged,
    /// An eigenvalue at or below the SPD floor (1e-12) was encountered where
    /// positive definiteness is required.
    #[error("matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    /// The entries supplied to `SymMatrix::new` were not exactly symmetric.
    #[error("entries are not symmetric at ({0},{1})")]
    NotSymmetric(usize, usize),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square diagonal matrix from the given diagonal entries.
    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Build from a row-major slice; `data.len()` must equal `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Mat { rows, cols, data: data.to_vec() }
    }

    /// Build entrywise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat::from_rows(v.len(), 1, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major entry storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product `self * other`; panics on shape mismatch (internal use
    /// builds shapes explicitly, so a mismatch is a programming error).
    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..self.cols {
                s += self[(i, j)] * v[j];
            }
            out[i] = s;
        }
        out
    }

    /// Entrywise sum `self + other`.
    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + other[(i, j)])
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - other[(i, j)])
    }

    /// Scalar multiple.
    pub fn scale(&self, s: f64) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| s * self[(i, j)])
    }

    /// Trace of a square matrix.
    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of non-square matrix");
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry difference against `other`.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Symmetric d x d matrix. Symmetry is checked exactly at construction and
/// never silently repaired: callers must supply symmetric data so that an
/// asymmetry bug fails loudly instead of being averaged away.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: Mat,
}

impl SymMatrix {
    /// Wrap a square matrix, requiring exact entrywise symmetry.
    pub fn new(m: Mat) -> Result<Self, LinalgError> {
        if m.rows() != m.cols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} is not square",
                m.rows(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                if m[(i, j)] != m[(j, i)] {
                    return Err(LinalgError::NotSymmetric(i, j));
                }
            }
        }
        Ok(SymMatrix { inner: m })
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        SymMatrix { inner: Mat::identity(n) }
    }

    /// Diagonal matrix.
    pub fn diag(d: &[f64]) -> Self {
        SymMatrix { inner: Mat::diag(d) }
    }

    /// Build entrywise from a function of (row, col); the function is only
    /// evaluated on the upper triangle and mirrored, so symmetry is exact.
    pub fn from_fn_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix { inner: m }
    }

    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    /// Borrow as a general matrix.
    pub fn as_mat(&self) -> &Mat {
        &self.inner
    }

    /// Copy into a general matrix.
    pub fn to_mat(&self) -> Mat {
        self.inner.clone()
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.inner[idx]
    }
}

/// Eigendecomposition of a symmetric matrix: `M = U diag(lambda) U^T` with
/// `U` orthogonal and eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub rotation: Mat,
    /// Eigenvalues, sorted descending.
    pub eigenvalues: Vec<f64>,
}

impl EigenDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Reconstruct `U diag(lambda) U^T`.
    pub fn reconstruct(&self) -> Mat {
        let d = self.dim();
        Mat::from_fn(d, d, |i, j| {
            (0..d)
                .map(|k| self.rotation[(i, k)] * self.eigenvalues[k] * self.rotation[(j, k)])
                .sum()
        })
    }

    /// Apply `U diag(f(lambda)) U^T` for an entrywise eigenvalue map; this is
    /// how inverses and the per-eigenvalue pretraining formula are built.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.dim();
        SymMatrix::from_fn_upper(d, |i, j| {
            (0..d)
                .map(|k| self.rotation[(i, k)] * f(self.eigenvalues[k]) * self.rotation[(j, k)])
                .sum()
        })
    }
}

/// Off-diagonal tolerance at which the Jacobi iteration is declared converged.
const JACOBI_TOL: f64 = 1e-12;
/// Maximum number of full cyclic sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 64;

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// Deterministic for a fixed input; accurate to near machine precision for
/// the small (d <= 64) matrices this crate works with.
pub fn sym_eigen(m: &SymMatrix) -> Result<EigenDecomp, LinalgError> {
    let n = m.dim();
    let mut a = m.to_mat();
    let mut u = Mat::identity(n);

    // Scale the convergence test to the matrix magnitude so that uniformly
    // scaled inputs behave identically.
    let frob: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * frob.max(1.0);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            return Ok(sorted_decomp(a, u));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= JACOBI_TOL * frob.max(1.0) / (n as f64) {
                    continue;
                }
                // Classic Jacobi rotation annihilating a[p][q].
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let ukp = u[(k, p)];
                    let ukq = u[(k, q)];
                    u[(k, p)] = c * ukp - s * ukq;
                    u[(k, q)] = s * ukp + c * ukq;
                }
            }
        }
    }
    Err(LinalgError::NotConverged)
}

/// Sort eigenpairs descending by eigenvalue.
fn sorted_decomp(a: Mat, u: Mat) -> EigenDecomp {
    let n = a.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&k| a[(k, k)]).collect();
    let rotation = Mat::from_fn(n, n, |i, j| u[(i, order[j])]);
    EigenDecomp { rotation, eigenvalues }
}

/// Quadratic form `x^T M x`.
pub fn quad_form(x: &[f64], m: &SymMatrix) -> Result<f64, LinalgError> {
    if x.len() != m.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "vector length {} vs matrix dim {}",
            x.len(),
            m.dim()
        )));
    }
    Ok(bilinear(x, m.as_mat(), x))
}

/// Bilinear form `x^T M y` for a general matrix.
pub fn bilinear(x: &[f64], m: &Mat, y: &[f64]) -> f64 {
    assert_eq!(x.len(), m.rows());
    assert_eq!(y.len(), m.cols());
    let mut s = 0.0;
    for i in 0..m.rows() {
        if x[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..m.cols() {
            row += m[(i, j)] * y[j];
        }
        s += x[i] * row;
    }
    s
}

/// Dot product.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Trace of the product `tr(A B)`, computed without forming the product.
pub fn trace_prod(a: &Mat, b: &Mat) -> Result<f64, LinalgError> {
    if a.cols() != b.rows() || a.rows() != b.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "tr(AB) needs A: m x n, B: n x m; got {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    Ok(s)
}

/// Floor below which an eigenvalue disqualifies a matrix from being treated
/// as positive definite.
pub const SPD_EIGENVALUE_FLOOR: f64 = 1e-12;

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = sym_eigen(m)?;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= SPD_EIGENVALUE_FLOOR {
        return Err(LinalgError::NotPositiveDefinite(min));
    }
    Ok(eig.map_eigenvalues(|l| 1.0 / l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sym_eigen_identity() {
        let eig = sym_eigen(&SymMatrix::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(eig.rotation.max_abs_diff(&Mat::identity(3)) < 1e-12 || {
            // Any orthogonal U is valid for the identity; check U U^T = I.
            eig.rotation
                .mul(&eig.rotation.transpose())
                .max_abs_diff(&Mat::identity(3))
                < 1e-10
        });
    }

    #[test]
    fn sym_eigen_diagonal_sorts_descending() {
        let eig = sym_eigen(&SymMatrix::diag(&[4.0, 1.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![4.0, 1.0]);
        // Eigenvectors of a diagonal matrix form a signed permutation.
        for j in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| eig.rotation[(i, j)]).collect();
            let nonzero = col.iter().filter(|v| v.abs() > 1e-12).count();
            assert_eq!(nonzero, 1);
            assert_abs_diff_eq!(col.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sym_eigen_analytic_2x2() {
        // [[2,1],[1,2]] has eigenvalues a +/- b = 3 and 1.
        let m = SymMatrix::new(Mat::from_rows(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let eig = sym_eigen(&m).unwrap();
        assert_abs_diff_eq!(eig.eigenvalues[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.eigenvalues[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quad_form_examples() {
        let m = SymMatrix::diag(&[5.0, 7.0]);
        assert_eq!(quad_form(&[1.0, 0.0], &m).unwrap(), 5.0);
        assert_eq!(quad_form(&[0.0, 0.0], &m).unwrap(), 0.0);
        let m2 = SymMatrix::new(Mat::from_rows(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_eq!(quad_form(&[1.0, 1.0], &m2).unwrap(), 6.0);
        assert_eq!(
            quad_form(&[1.0], &m2).unwrap_err(),
            LinalgError::DimensionMismatch("vector length 1 vs matrix dim 2".into())
        );
    }

    #[test]
    fn spd_inverse_examples() {
        let inv = spd_inverse(&SymMatrix::identity(4)).unwrap();
        assert!(inv.as_mat().max_abs_diff(&Mat::identity(4)) < 1e-12);

        let inv = spd_inverse(&SymMatrix::diag(&[2.0, 4.0])).unwrap();
        assert!(inv.as_mat().max_abs_diff(&Mat::diag(&[0.5, 0.25])) < 1e-12);

        let err = spd_inverse(&SymMatrix::diag(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, LinalgError::NotPositiveDefinite(_)));
    }

    #[test]
    fn trace_prod_examples() {
        assert_eq!(trace_prod(&Mat::identity(3), &Mat::identity(3)).unwrap(), 3.0);
        assert_eq!(
            trace_prod(&Mat::diag(&[1.0, 2.0]), &Mat::diag(&[3.0, 4.0])).unwrap(),
            11.0
        );
        assert!(trace_prod(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn symmetry_is_rejected_not_repaired() {
        let m = Mat::from_rows(2, 2, &[1.0, 2.0, 2.0 + 1e-15, 1.0]);
        assert_eq!(SymMatrix::new(m).unwrap_err(), LinalgError::NotSymmetric(0, 1));
    }

    /// Random SPD matrix with condition number bounded by ~1e3, built as
    /// R diag(l) R^T from a seeded rotation.
    fn random_spd(seed: u64, n: usize) -> SymMatrix {
        use rand::{Rng as _, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        // Make strictly diagonally dominant to keep it PD after symmetrizing.
        let bt = b.transpose();
        b = b.add(&bt);
        for i in 0..n {
            b[(i, i)] += 2.0 * n as f64;
        }
        SymMatrix::new(b).unwrap()
    }

    #[test]
    fn eigen_reconstruct_and_inverse_roundtrip() {
        for seed in 0..10u64 {
            let m = random_spd(seed, 5);
            let eig = sym_eigen(&m).unwrap();
            // U^T U = I within 1e-10 per entry.
            let utu = eig.rotation.transpose().mul(&eig.rotation);
            assert!(utu.max_abs_diff(&Mat::identity(5)) < 1e-10);
            // Reconstruction within 1e-9 per entry.
            assert!(eig.reconstruct().max_abs_diff(m.as_mat()) < 1e-9);
            // Eigenvalues sorted descending.
            for w in eig.eigenvalues.windows(2) {
                assert!(w[0] >= w[1]);
            }
            // M * M^{-1} = I within 1e-8; double inverse returns M within 1e-7.
            let inv = spd_inverse(&m).unwrap();
            assert!(m.as_mat().mul(inv.as_mat()).max_abs_diff(&Mat::identity(5)) < 1e-8);
            let back = spd_inverse(&inv).unwrap();
            assert!(back.as_mat().max_abs_diff(m.as_mat()) < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn quad_form_nonnegative_on_spd(seed in 0u64..200, x in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let m = random_spd(seed, 4);
            prop_assert!(quad_form(&x, &m).unwrap() >= -1e-9);
        }

        #[test]
        fn trace_prod_matches_naive_double_loop(seed in 0u64..100) {
            use rand::{Rng as _, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0));
            let b = Mat::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0));
            let naive: f64 = (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * b[(j, i)])
                .sum();
            prop_assert!((trace_prod(&a, &b).unwrap() - naive).abs() < 1e-12);
        }
    }
}
