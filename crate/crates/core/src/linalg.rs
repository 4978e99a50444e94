//! Small dense least-squares helpers shared by fitting, tracking and the
//! implicit solve.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Result, RigError};

/// Relative singular-value cutoff used for rank decisions.
pub fn rank_tolerance(
    svd: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rows: usize,
    cols: usize,
) -> f64 {
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    smax * (rows.max(cols) as f64) * f64::EPSILON
}

/// Minimum-norm least-squares solution of `a x = b` and the numerical rank of `a`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, b.ncols()), 0);
    }
    let svd = SVD::new(a.clone(), true, true);
    let tol = rank_tolerance(&svd, m, n);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd
        .solve(b, tol.max(f64::MIN_POSITIVE))
        .expect("both factors were computed");
    (x, rank)
}

/// Column indices that carry a component of the null space of `a`.
pub fn null_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let (m, n) = a.shape();
    if n == 0 {
        return Vec::new();
    }
    // pad so the SVD exposes all n right singular vectors
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m, n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = SVD::new(padded, false, true);
    let tol = rank_tolerance(&svd, m, n);
    let v_t = svd.v_t.expect("requested");
    let mut out = Vec::new();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s <= tol {
            for j in 0..n {
                if v_t[(k, j)].abs() > 1e-8 && !out.contains(&j) {
                    out.push(j);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Least squares for a full-column-rank `a`; rank deficiency is an error.
pub fn full_rank_lstsq(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    context: &'static str,
) -> Result<DMatrix<f64>> {
    let (x, rank) = pinv_solve(a, b);
    if rank < a.ncols() {
        return Err(RigError::Singular { context });
    }
    Ok(x)
}

/// Solve `(aᵀa + ε²I) x = aᵀb + ε² prior` by Cholesky. With ε = 0 the normal
/// equations must be nonsingular.
pub fn regularized_lstsq(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eps: f64,
    prior: Option<&DMatrix<f64>>,
    context: &'static str,
) -> Result<DMatrix<f64>> {
    if eps == 0.0 {
        return full_rank_lstsq(a, b, context);
    }
    let n = a.ncols();
    let e2 = eps * eps;
    let mut normal = a.transpose() * a;
    for i in 0..n {
        normal[(i, i)] += e2;
    }
    let mut rhs = a.transpose() * b;
    if let Some(p) = prior {
        rhs += p * e2;
    }
    let chol = normal.cholesky().ok_or(RigError::Singular { context })?;
    Ok(chol.solve(&rhs))
}

pub fn vector_lstsq(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    eps: f64,
    context: &'static str,
) -> Result<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = regularized_lstsq(a, &bm, eps, None, context)?;
    Ok(x.column(0).into_owned())
}
