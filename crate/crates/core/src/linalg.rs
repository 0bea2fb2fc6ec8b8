//! Dense solves and factorizations backed by `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, SrwganRng};
use crate::tensor::Tensor;

/// Condition numbers above this are treated as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            t.set(r, c, m[(r, c)]);
        }
    }
    t
}

/// Ratio of the largest to the smallest singular value (`∞` when singular).
pub fn condition_number(a: &Tensor) -> f64 {
    let sv = to_na(a).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 || sv.len() < a.cols().min(a.rows()) {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Least-squares solution of `a · x = b`; `a` must have full column rank.
pub fn lstsq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape { context: "lstsq", expected: [a.rows(), b.cols()], found: b.shape() });
    }
    if a.rows() < a.cols() {
        return Err(Error::RankDeficient { condition: f64::INFINITY });
    }
    let cond = condition_number(a);
    if !(cond < MAX_CONDITION) {
        return Err(Error::RankDeficient { condition: cond });
    }
    let svd = to_na(a).svd(true, true);
    let x = svd.solve(&to_na(b), 0.0).map_err(|_| Error::RankDeficient { condition: cond })?;
    Ok(from_na(&x))
}

/// Minimum-norm least-squares solution via the pseudo-inverse. Singular
/// values below `rcond · σ_max` are dropped.
pub fn lstsq_min_norm(a: &Tensor, b: &Tensor, rcond: f64) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape { context: "lstsq_min_norm", expected: [a.rows(), b.cols()], found: b.shape() });
    }
    let svd = to_na(a).svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let x = svd
        .solve(&to_na(b), rcond * smax)
        .map_err(|_| Error::RankDeficient { condition: f64::INFINITY })?;
    Ok(from_na(&x))
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() {
        return Err(Error::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let cond = condition_number(a);
    if !(cond < MAX_CONDITION) {
        return Err(Error::RankDeficient { condition: cond });
    }
    to_na(a)
        .try_inverse()
        .map(|m| from_na(&m))
        .ok_or(Error::RankDeficient { condition: cond })
}

/// Haar-distributed random orthogonal matrix: QR of a Gaussian matrix with
/// the column signs fixed so that `R` has a positive diagonal.
pub fn random_orthogonal(n: usize, rng: &mut SrwganRng) -> Tensor {
    let g = DMatrix::from_fn(n, n, |_, _| standard_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            for row in 0..n {
                q[(row, c)] = -q[(row, c)];
            }
        }
    }
    from_na(&q)
}
