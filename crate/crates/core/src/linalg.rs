//! Small dense complex linear-algebra helpers shared by the estimators and
//! optimizers.

use nalgebra::SymmetricEigen;

use crate::{CMatrix, CVector, Complex64};

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order. The input is symmetrized first so round-off in the
/// caller cannot leak an anti-Hermitian part into the result.
pub fn hermitian_eigen_desc(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    let herm = hermitian_part(m);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `(M + M^H) / 2`.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Both eigenvalues of a general complex 2x2 matrix.
pub fn eigenvalues_2x2(m: &CMatrix) -> [Complex64; 2] {
    debug_assert!(m.nrows() == 2 && m.ncols() == 2);
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr - det * 4.0).sqrt();
    [(tr + disc) * 0.5, (tr - disc) * 0.5]
}

/// Inverse of a complex 2x2 matrix, `None` when numerically singular
/// relative to the matrix scale.
pub fn inverse_2x2(m: &CMatrix) -> Option<CMatrix> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(det.norm() > 1e-12 * scale * scale) {
        return None;
    }
    let inv_det = det.inv();
    Some(CMatrix::from_row_slice(
        2,
        2,
        &[
            m[(1, 1)] * inv_det,
            -m[(0, 1)] * inv_det,
            -m[(1, 0)] * inv_det,
            m[(0, 0)] * inv_det,
        ],
    ))
}

/// Principal (largest-eigenvalue) unit eigenvector of a Hermitian matrix.
pub fn principal_eigenvector(m: &CMatrix) -> (f64, CVector) {
    let (values, vectors) = hermitian_eigen_desc(m);
    (values[0], vectors.column(0).into_owned())
}

/// Orthonormal basis for the joint column space of `mats`, keeping directions
/// whose Gram eigenvalue exceeds `rel_tol` times the largest one.
pub fn joint_column_basis(mats: &[&CMatrix], rel_tol: f64) -> CMatrix {
    let n = mats[0].nrows();
    let mut gram = CMatrix::zeros(n, n);
    for m in mats {
        gram += *m * m.adjoint();
    }
    let (values, vectors) = hermitian_eigen_desc(&gram);
    let top = values[0].max(0.0);
    let rank = if top == 0.0 {
        0
    } else {
        values.iter().take_while(|&&v| v > rel_tol * top).count()
    };
    vectors.columns(0, rank).into_owned()
}

/// `Re tr(A B)` for Hermitian `A`, `B`, i.e. the real Frobenius inner product.
pub fn trace_inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.transpose().iter())
        .map(|(x, y)| (x * y).re)
        .sum()
}

/// `v^H M v` for Hermitian `M`; the (negligible) imaginary part is dropped.
pub fn quadratic_form(m: &CMatrix, v: &CVector) -> f64 {
    v.dotc(&(m * v)).re
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn all_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Neumaier-compensated sum; used where aggregate results must not depend on
/// accumulation order artefacts.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
