//! Dense linear-algebra helpers on top of nalgebra's Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Initial jitter, relative to the signal variance.
pub const JITTER_REL: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const JITTER_REL_MAX: f64 = 1e-2;

/// Factorizes `k + jitter * I`, escalating the jitter by 10x on failure.
/// Returns the factorization, the jittered matrix and the absolute jitter used.
pub fn factor_with_jitter(k: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    let n = k.nrows();
    let mut rel = JITTER_REL;
    while rel <= JITTER_REL_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj.clone()) {
            return Ok((c, kj, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned(format!(
        "{n}x{n} kernel matrix not positive definite even with jitter {:.0e}",
        JITTER_REL_MAX * scale
    )))
}

pub fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let inv = chol.inverse();
    symmetrize(&inv)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular part of `m` (upper part zeroed).
pub fn lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = m.clone();
    l.fill_upper_triangle(0.0, 1);
    l
}

/// log N(x; mu, C) given a factorization of C.
pub fn gaussian_logpdf(x: &DVector<f64>, mu: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = x - mu;
    let w = chol
        .l_dirty()
        .solve_lower_triangular(&d)
        .expect("cholesky factor has a positive diagonal");
    let n = x.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet(chol) + w.norm_squared())
}

/// Cholesky factor of a symmetric matrix that should already be positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}
