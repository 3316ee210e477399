//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{DMatrix, DVector};

/// Condition numbers above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !max.is_finite() || !min.is_finite() {
        return f64::INFINITY;
    }
    if min <= 0.0 {
        return f64::INFINITY;
    }
    max / min
}

/// Solves `X a = rhs` for `X` by factoring `aᵀ`.
///
/// Returns the condition estimate of `a` as the error when it exceeds
/// [`CONDITION_LIMIT`] or the factorization breaks down.
pub fn solve_right(rhs: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let condition = condition_number(a);
    if !(condition <= CONDITION_LIMIT) {
        return Err(condition);
    }
    let lu = a.transpose().lu();
    match lu.solve(&rhs.transpose()) {
        Some(xt) => Ok(xt.transpose()),
        None => Err(condition),
    }
}

/// Solves `a x = b` for a square `a`.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, f64> {
    let condition = condition_number(a);
    if !(condition <= CONDITION_LIMIT) {
        return Err(condition);
    }
    a.clone().lu().solve(b).ok_or(condition)
}

pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// `max|p - pᵀ| / max|p|`, zero for the zero matrix.
pub fn relative_asymmetry(p: &DMatrix<f64>) -> f64 {
    let scale = p.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (p - p.transpose()).amax() / scale
}

/// Smallest eigenvalue of the symmetric part of `p`.
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    symmetrize(p).symmetric_eigenvalues().min()
}

/// Symmetric within `tol` (relative) and no eigenvalue below `-tol * scale`.
pub fn is_symmetric_psd(w: &DMatrix<f64>, tol: f64) -> bool {
    if !w.is_square() || !all_finite(w) {
        return false;
    }
    if relative_asymmetry(w) > tol {
        return false;
    }
    let scale = w.amax().max(f64::MIN_POSITIVE);
    min_eigenvalue(w) >= -tol * scale
}

/// Lower factor `L` with `L Lᵀ = cov` for a symmetric PSD covariance.
///
/// Uses Cholesky when the matrix is definite and falls back to an
/// eigen-decomposition square root (negative eigenvalues clamped) otherwise.
pub fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = symmetrize(cov).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Column-stacking vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Builds a matrix from row-major nested vectors, checking raggedness.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!(
            "row {i} has {} entries, expected {ncols}",
            r.len()
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Serde adapter for matrices stored as nested row arrays.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod list {
        use nalgebra::DMatrix;
        use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter()
                .map(crate::linalg::to_rows)
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            raw.iter()
                .enumerate()
                .map(|(i, rows)| {
                    crate::linalg::from_rows(rows).map_err(|e| D::Error::custom(format!("matrix {i}: {e}")))
                })
                .collect()
        }
    }
}
