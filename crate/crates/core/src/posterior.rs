//! Mixture-of-Gaussians variational posterior over the inducing variables,
//! the cached per-latent kernel quantities, and the marginal moments of
//! `q(f_n)` that the expected log likelihood needs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::SeArdKernel;
use crate::linalg;

/// Floor applied to every marginal variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Inducing inputs for each latent process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingConfig {
    /// One `M x D` matrix per latent process.
    pub z: Vec<DMatrix<f64>>,
    /// Inducing inputs are pinned to the training inputs.
    pub dense: bool,
}

impl InducingConfig {
    pub fn sparse(z: Vec<DMatrix<f64>>) -> Result<Self> {
        let cfg = InducingConfig { z, dense: false };
        cfg.check_shapes()?;
        Ok(cfg)
    }

    pub fn dense(x: &DMatrix<f64>, num_latent: usize) -> Self {
        InducingConfig {
            z: vec![x.clone(); num_latent],
            dense: true,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let first = self.z.first().ok_or_else(|| Error::config("no inducing inputs"))?;
        if first.nrows() == 0 {
            return Err(Error::config("need at least one inducing input"));
        }
        if self.z.iter().any(|z| z.shape() != first.shape()) {
            return Err(Error::config("all latent processes must share M and D"));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.z[0].nrows()
    }

    pub fn num_latent(&self) -> usize {
        self.z.len()
    }

    pub fn validate(&self, x: &DMatrix<f64>) -> Result<()> {
        self.check_shapes()?;
        if self.z[0].ncols() != x.ncols() {
            return Err(Error::config("inducing inputs and data differ in dimension"));
        }
        if self.dense && self.z.iter().any(|z| z != x) {
            return Err(Error::config("dense mode requires Z = X for every latent"));
        }
        if self.z.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("non-finite inducing input"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovStructure {
    Full,
    Diagonal,
}

/// Stored covariance parameters of one `(k, j)` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CovFactor {
    /// Lower-triangular `L` with `S = L L'`, stored with `log L_ii` on the
    /// diagonal so every entry is unconstrained.
    Full(DMatrix<f64>),
    /// `S = diag(exp(v))`.
    LogDiag(DVector<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePosterior {
    pub raw_weights: DVector<f64>,
    /// `means[k][j]`, each of length M.
    pub means: Vec<Vec<DVector<f64>>>,
    /// `factors[k][j]`; ignored when `log_lambda` is set.
    pub factors: Vec<Vec<CovFactor>>,
    pub structure: CovStructure,
    /// Per-latent `log Lambda_j` (length N) for the linear-in-N covariance
    /// representation. Only valid with one full-covariance component.
    pub log_lambda: Option<Vec<DVector<f64>>>,
}

impl MixturePosterior {
    /// Zero means, identity covariances and uniform weights.
    pub fn new(components: usize, num_latent: usize, num_inducing: usize, structure: CovStructure) -> Result<Self> {
        if components == 0 || num_latent == 0 || num_inducing == 0 {
            return Err(Error::config("posterior dimensions must be positive"));
        }
        let factor = match structure {
            CovStructure::Full => CovFactor::Full(DMatrix::zeros(num_inducing, num_inducing)),
            CovStructure::Diagonal => CovFactor::LogDiag(DVector::zeros(num_inducing)),
        };
        Ok(MixturePosterior {
            raw_weights: DVector::zeros(components),
            means: vec![vec![DVector::zeros(num_inducing); num_latent]; components],
            factors: vec![vec![factor; num_latent]; components],
            structure,
            log_lambda: None,
        })
    }

    /// Single full Gaussian whose covariance is represented through one
    /// positive weight per training point and latent process.
    pub fn with_lambda(num_latent: usize, num_inducing: usize, num_data: usize, initial_lambda: f64) -> Result<Self> {
        if !(initial_lambda > 0.0 && initial_lambda.is_finite()) {
            return Err(Error::config("initial lambda must be positive"));
        }
        let mut post = Self::new(1, num_latent, num_inducing, CovStructure::Full)?;
        post.log_lambda = Some(vec![DVector::from_element(num_data, initial_lambda.ln()); num_latent]);
        Ok(post)
    }

    pub fn num_components(&self) -> usize {
        self.raw_weights.len()
    }

    pub fn num_latent(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_inducing(&self) -> usize {
        self.means[0][0].len()
    }

    /// Mixture proportions `softmax(raw_weights)`.
    pub fn weights(&self) -> Vec<f64> {
        softmax(self.raw_weights.as_slice())
    }

    /// Number of scalar parameters spent on covariances.
    pub fn num_cov_params(&self) -> usize {
        if let Some(l) = &self.log_lambda {
            return l.iter().map(|v| v.len()).sum();
        }
        let m = self.num_inducing();
        let per_block = match self.structure {
            CovStructure::Full => m * (m + 1) / 2,
            CovStructure::Diagonal => m,
        };
        per_block * self.num_components() * self.num_latent()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, q, m) = (self.num_components(), self.num_latent(), self.num_inducing());
        let shapes = self.means.len() == k
            && self.factors.len() == k
            && self
                .means
                .iter()
                .all(|row| row.len() == q && row.iter().all(|v| v.len() == m))
            && self.factors.iter().all(|row| row.len() == q);
        if !shapes {
            return Err(Error::config("posterior parameter shapes are inconsistent"));
        }
        if self.raw_weights.iter().any(|w| !w.is_finite())
            || self.means.iter().flatten().any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::config("non-finite posterior parameter"));
        }
        for f in self.factors.iter().flatten() {
            match (f, self.structure) {
                (CovFactor::Full(l), CovStructure::Full) => {
                    if l.shape() != (m, m) || l.iter().any(|v| !v.is_finite()) {
                        return Err(Error::config("invalid Cholesky factor"));
                    }
                }
                (CovFactor::LogDiag(v), CovStructure::Diagonal) => {
                    if v.len() != m || v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::config("invalid log-diagonal covariance"));
                    }
                }
                _ => return Err(Error::config("covariance factor does not match structure")),
            }
        }
        if let Some(lam) = &self.log_lambda {
            if k != 1 || self.structure != CovStructure::Full {
                return Err(Error::config(
                    "lambda representation requires a single full-covariance component",
                ));
            }
            if lam.len() != q || lam.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::config("invalid lambda parameters"));
            }
        }
        Ok(())
    }

    /// Means flattened component-major, then latent, then inducing index.
    pub fn means_vec(&self) -> Vec<f64> {
        self.means.iter().flatten().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_means_vec(&mut self, p: &[f64]) {
        let m = self.num_inducing();
        for (v, chunk) in self.means.iter_mut().flatten().zip(p.chunks(m)) {
            v.copy_from_slice(chunk);
        }
    }

    /// Unconstrained covariance parameters: the lower triangle of each `L`
    /// (row-major, diagonal in log space), log-diagonals, or `log Lambda`.
    pub fn cov_vec(&self) -> Vec<f64> {
        if let Some(lam) = &self.log_lambda {
            return lam.iter().flat_map(|v| v.iter().copied()).collect();
        }
        let mut out = Vec::with_capacity(self.num_cov_params());
        for f in self.factors.iter().flatten() {
            match f {
                CovFactor::Full(l) => {
                    for i in 0..l.nrows() {
                        out.extend((0..=i).map(|c| l[(i, c)]));
                    }
                }
                CovFactor::LogDiag(v) => out.extend(v.iter()),
            }
        }
        out
    }

    pub fn set_cov_vec(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_cov_params(), "covariance parameter length");
        if let Some(lam) = &mut self.log_lambda {
            let n = lam[0].len();
            for (v, chunk) in lam.iter_mut().zip(p.chunks(n)) {
                v.copy_from_slice(chunk);
            }
            return;
        }
        let mut it = p.iter().copied();
        for f in self.factors.iter_mut().flatten() {
            match f {
                CovFactor::Full(l) => {
                    for i in 0..l.nrows() {
                        for c in 0..=i {
                            l[(i, c)] = it.next().unwrap();
                        }
                    }
                }
                CovFactor::LogDiag(v) => {
                    for x in v.iter_mut() {
                        *x = it.next().unwrap();
                    }
                }
            }
        }
    }

    /// Materializes weights, means and covariances for the current kernel state.
    pub fn materialize(&self, state: &KernelState) -> Result<PosteriorView> {
        let covs = match &self.log_lambda {
            Some(lam) => {
                let mut row = Vec::with_capacity(lam.len());
                for (j, ll) in lam.iter().enumerate() {
                    let lambda = ll.map(f64::exp);
                    let s = reparam_covariance(&state.latents[j], &lambda)?;
                    row.push(Cov::full(s)?);
                }
                vec![row]
            }
            None => self
                .factors
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|f| match f {
                            CovFactor::Full(l) => {
                                let l = cholesky_factor(l);
                                Cov::Full {
                                    s: &l * l.transpose(),
                                    l,
                                }
                            }
                            CovFactor::LogDiag(v) => Cov::Diag(v.map(f64::exp)),
                        })
                        .collect()
                })
                .collect(),
        };
        Ok(PosteriorView {
            weights: self.weights(),
            means: self.means.clone(),
            covs,
        })
    }
}

/// `L` from its stored form (log-diagonal, upper triangle ignored).
pub fn cholesky_factor(stored: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = linalg::lower(stored);
    for i in 0..l.nrows() {
        l[(i, i)] = l[(i, i)].exp();
    }
    l
}

pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// A materialized covariance block `S_kj`.
#[derive(Clone, Debug)]
pub enum Cov {
    Full { s: DMatrix<f64>, l: DMatrix<f64> },
    Diag(DVector<f64>),
}

impl Cov {
    pub fn full(s: DMatrix<f64>) -> Result<Self> {
        let s = linalg::symmetrize(&s);
        let l = linalg::cholesky(&s)?.unpack();
        Ok(Cov::Full { s, l })
    }

    pub fn dim(&self) -> usize {
        match self {
            Cov::Full { s, .. } => s.nrows(),
            Cov::Diag(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Cov::Full { s, .. } => s.clone(),
            Cov::Diag(d) => DMatrix::from_diagonal(d),
        }
    }

    /// `a' S a`
    pub fn quad(&self, a: &DVector<f64>) -> f64 {
        match self {
            Cov::Full { l, .. } => (l.transpose() * a).norm_squared(),
            Cov::Diag(d) => d.iter().zip(a.iter()).map(|(s, x)| s * x * x).sum(),
        }
    }

    pub fn diag(&self, i: usize) -> f64 {
        match self {
            Cov::Full { s, .. } => s[(i, i)],
            Cov::Diag(d) => d[i],
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Cov::Full { s, .. } => s * v,
            Cov::Diag(d) => d.component_mul(v),
        }
    }

    /// `S A'` for `A` with rows `a_n`, returned as rows `(S a_n)'`.
    pub fn mul_rows(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Cov::Full { s, .. } => a * s,
            Cov::Diag(d) => {
                let mut out = a.clone();
                for (c, dv) in d.iter().enumerate() {
                    out.column_mut(c).scale_mut(*dv);
                }
                out
            }
        }
    }
}

/// Weights, means and covariances evaluated for a given kernel state.
#[derive(Clone, Debug)]
pub struct PosteriorView {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<DVector<f64>>>,
    pub covs: Vec<Vec<Cov>>,
}

impl PosteriorView {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn num_latent(&self) -> usize {
        self.means[0].len()
    }
}

/// Cached kernel quantities for one latent process.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: DMatrix<f64>,
    /// `Kzz + jitter * I`
    pub kzz: DMatrix<f64>,
    pub jitter: f64,
    pub chol: Cholesky<f64, Dyn>,
    pub kzz_inv: DMatrix<f64>,
    pub logdet: f64,
    /// `k(X, Z)` without jitter, N x M.
    pub kxz: DMatrix<f64>,
    /// `A = Kxz Kzz^-1` (N x M); `None` in dense mode where `A = I`.
    pub a: Option<DMatrix<f64>>,
    /// `[Kxx - A Kzx]_nn`
    pub ktilde_diag: DVector<f64>,
}

impl LatentState {
    pub fn num_inducing(&self) -> usize {
        self.kzz.nrows()
    }

    /// `a_n`, the n-th row of `A` as a column vector.
    pub fn a_row(&self, n: usize) -> DVector<f64> {
        match &self.a {
            Some(a) => a.row(n).transpose(),
            None => {
                let mut e = DVector::zeros(self.num_inducing());
                e[n] = 1.0;
                e
            }
        }
    }

    /// Rows of `A` for a set of datapoints.
    pub fn a_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        match &self.a {
            Some(a) => a.select_rows(rows),
            None => {
                let mut out = DMatrix::zeros(rows.len(), self.num_inducing());
                for (i, &n) in rows.iter().enumerate() {
                    out[(i, n)] = 1.0;
                }
                out
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

#[derive(Clone, Debug)]
pub struct KernelState {
    pub latents: Vec<LatentState>,
    pub dense: bool,
    pub num_data: usize,
}

/// Factorizes `Kzz`, and computes `A` and `diag(K~)` for every latent process.
/// The `N x N` matrix `K~` is never formed.
pub fn build_kernel_state(kernels: &[SeArdKernel], inducing: &InducingConfig, x: &DMatrix<f64>) -> Result<KernelState> {
    if kernels.len() != inducing.num_latent() {
        return Err(Error::config(format!(
            "{} kernels for {} latent processes",
            kernels.len(),
            inducing.num_latent()
        )));
    }
    inducing.validate(x)?;
    let mut latents = Vec::with_capacity(kernels.len());
    for (kern, z) in kernels.iter().zip(&inducing.z) {
        kern.validate()?;
        let kzz_raw = kern.gram(z, z)?;
        let (chol, kzz, jitter) = linalg::factor_with_jitter(&kzz_raw, kern.signal_variance())?;
        let logdet = linalg::logdet(&chol);
        let kzz_inv = linalg::inverse(&chol);
        let state = if inducing.dense {
            LatentState {
                z: z.clone(),
                kzz,
                jitter,
                chol,
                kzz_inv,
                logdet,
                kxz: kzz_raw,
                a: None,
                ktilde_diag: DVector::zeros(x.nrows()),
            }
        } else {
            let kxz = kern.gram(x, z)?;
            // V = L^-1 Kzx, diag(K~) = sf2 - colsum(V^2), A' = L^-T V
            let l = chol.l();
            let v = l
                .solve_lower_triangular(&kxz.transpose())
                .ok_or_else(|| Error::IllConditioned("triangular solve failed".into()))?;
            let at = l
                .transpose()
                .solve_upper_triangular(&v)
                .ok_or_else(|| Error::IllConditioned("triangular solve failed".into()))?;
            let sf2 = kern.signal_variance();
            let ktilde_diag =
                DVector::from_iterator(x.nrows(), v.column_iter().map(|c| (sf2 - c.norm_squared()).max(0.0)));
            LatentState {
                z: z.clone(),
                kzz,
                jitter,
                chol,
                kzz_inv,
                logdet,
                kxz,
                a: Some(at.transpose()),
                ktilde_diag,
            }
        };
        latents.push(state);
    }
    Ok(KernelState {
        latents,
        dense: inducing.dense,
        num_data: x.nrows(),
    })
}

/// Mean and (diagonal) variance of the Q-dimensional marginal `q_k(f_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalMoment {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn marginal_moments(state: &KernelState, post: &PosteriorView, n: usize, k: usize) -> MarginalMoment {
    let q = state.latents.len();
    let mut mean = Vec::with_capacity(q);
    let mut var = Vec::with_capacity(q);
    for (j, lat) in state.latents.iter().enumerate() {
        let m = &post.means[k][j];
        let cov = &post.covs[k][j];
        let (b, v) = if lat.a.is_none() {
            (m[n], cov.diag(n))
        } else {
            let a = lat.a_row(n);
            (a.dot(m), lat.ktilde_diag[n] + cov.quad(&a))
        };
        mean.push(b);
        var.push(v.max(VARIANCE_FLOOR));
    }
    MarginalMoment { mean, var }
}

/// `S = Kzz (Kzz + Kzx Lambda Kxz)^-1 Kzz` for a nonnegative `Lambda` (length N).
pub fn reparam_covariance(lat: &LatentState, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(reparam_parts(lat, lambda)?.0)
}

/// Returns `S` and `H = B^-1 Kzz` where `B = Kzz + Kzx Lambda Kxz`.
pub(crate) fn reparam_parts(lat: &LatentState, lambda: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if lambda.len() != lat.kxz.nrows() {
        return Err(Error::config("lambda length must equal the number of datapoints"));
    }
    if lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::config("lambda must be finite and nonnegative"));
    }
    let mut scaled = lat.kxz.clone();
    for (mut row, l) in scaled.row_iter_mut().zip(lambda.iter()) {
        row *= *l;
    }
    let b = &lat.kzz + lat.kxz.transpose() * scaled;
    let chol = linalg::cholesky(&b)?;
    let h = chol.solve(&lat.kzz);
    let s = linalg::symmetrize(&(&lat.kzz * &h));
    Ok((s, h))
}
