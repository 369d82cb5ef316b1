//! Dense numerical kernel: symmetric eigensolver, pseudoinverse, linear
//! solves and an exact nearest-neighbor index.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Every routine here is a pure
//! function of its inputs.

mod kdtree;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub use kdtree::NeighborIndex;

pub type DenseMatrix = DMatrix<f64>;

/// Absolute symmetry tolerance, scaled by the largest entry when it exceeds one.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RCOND: f64 = 1e-12;

/// Systems whose estimated 1-norm condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e14;

pub fn ensure_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Eigenpairs sorted by ascending eigenvalue.
///
/// Column `l` of `vectors` pairs with `values[l]`; each column is normalized
/// and sign-fixed so that its largest-magnitude entry is positive (the
/// lowest row index wins ties).
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::arg(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let gap = (m[(r, c)] - m[(c, r)]).abs();
            if gap > SYMMETRY_TOL * scale || gap.is_nan() {
                return Err(Error::SymmetryViolation {
                    row: r,
                    col: c,
                    gap,
                });
            }
        }
    }
    Ok(())
}

/// Flip `v` so that its largest-magnitude entry is positive.
pub(crate) fn fix_sign(mut v: nalgebra::DVectorViewMut<'_, f64>) {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// The `k` smallest eigenpairs of a symmetric matrix.
pub fn sym_eig_smallest(m: &DenseMatrix, k: usize) -> Result<EigenPairs> {
    check_symmetric(m)?;
    ensure_finite(m, "eigenproblem input")?;
    let n = m.nrows();
    if k == 0 || k > n {
        return Err(Error::arg(format!("k = {k} must lie in 1..={n}")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });

    let mut vectors = DenseMatrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let norm = col.norm();
        vectors.column_mut(dst).copy_from(&(col / norm));
        fix_sign(vectors.column_mut(dst));
    }
    Ok(EigenPairs { values, vectors })
}

/// Moore-Penrose pseudoinverse via the SVD.
pub fn pinv(m: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_finite(m, "pseudoinverse input")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DenseMatrix::zeros(cols, rows));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let sigma_max = svd.singular_values.max();
    let cutoff = PINV_RCOND * sigma_max;

    // V * diag(1/s) * U^T, skipping the discarded singular values.
    let mut out = DenseMatrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let v_col = v_t.row(i).transpose();
        let u_col = u.column(i);
        out.ger(1.0 / s, &v_col, &u_col, 1.0);
    }
    Ok(out)
}

/// Solve `a x = y` for a single right-hand side.
pub fn solve(a: &DenseMatrix, y: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = DenseMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let x = solve_matrix(a, &rhs)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Solve `a X = Y` for several right-hand sides by LU factorization with
/// partial pivoting and iterative refinement.
pub fn solve_matrix(a: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::arg(format!(
            "solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != y.nrows() {
        return Err(Error::arg(format!(
            "right-hand side has {} rows, system has {}",
            y.nrows(),
            a.nrows()
        )));
    }
    ensure_finite(a, "system matrix")?;
    ensure_finite(y, "right-hand side")?;

    let lu = a.clone().lu();
    let condition = condition_estimate_1(a, &lu);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    let mut x = lu.solve(y).ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;

    let target = 1e-12 * y.norm().max(f64::MIN_POSITIVE);
    for _ in 0..3 {
        let r = y - a * &x;
        if r.norm() <= target {
            break;
        }
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => break,
        }
    }
    ensure_finite(&x, "solution")?;
    Ok(x)
}

/// Hager's estimate of the 1-norm condition number `||A||_1 ||A^-1||_1`.
fn condition_estimate_1(
    a: &DenseMatrix,
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let u = lu.u();
    if (0..n).any(|i| u[(i, i)] == 0.0) {
        return f64::INFINITY;
    }
    let norm_a = (0..n)
        .map(|c| a.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let at_lu = a.transpose().lu();

    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = at_lu.solve(&xi) else {
            return f64::INFINITY;
        };
        let (j, zmax) = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
                if v.abs() > acc.1 {
                    (i, v.abs())
                } else {
                    acc
                }
            });
        if zmax <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[j] = 1.0;
    }
    norm_a * estimate
}

/// Indices of the `k` reference rows nearest to `point`, by ascending
/// distance with ties broken by lowest index.
pub fn nn_query(index: &NeighborIndex, point: &[f64], k: usize) -> Result<Vec<usize>> {
    index.query(point, k)
}

/// Squared Euclidean distance; the single definition every neighbor search uses.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Copy row `r` of `m` into a contiguous vector.
pub fn row_vec(m: &DenseMatrix, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}
