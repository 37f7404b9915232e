//! Independent reference computations for checking the estimators: exact GP
//! regression, the closed-form Gaussian ELL, a joint-sample gradient
//! estimator, and finite-difference / brute-force Monte-Carlo helpers.
//!
//! These use plain dense algebra on purpose and share as little code with
//! the main path as practical.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::SeArdKernel;
use crate::likelihood::{log_sum_exp, LikelihoodModel};
use crate::linalg;
use crate::model::{Data, Model};
use crate::optimizer::lbfgs;
use crate::posterior::{marginal_moments, KernelState, PosteriorView};
use crate::rng;

const LN_2PI: f64 = 1.8378770664093453;

/// Exact posterior over the latent values at the training inputs.
#[derive(Clone, Debug)]
pub struct ExactGpPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact GP regression with a Gaussian likelihood.
#[derive(Clone, Debug)]
pub struct ExactGp {
    pub kernel: SeArdKernel,
    pub noise_var: f64,
    pub x: DMatrix<f64>,
    pub posterior: ExactGpPosterior,
    alpha: DVector<f64>,
    ky_inv: DMatrix<f64>,
}

pub fn exact_gp_regression(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &SeArdKernel,
    noise_var: f64,
) -> Result<ExactGp> {
    if x.nrows() > 2000 {
        return Err(Error::config("exact GP oracle is limited to 2000 points"));
    }
    if !(noise_var > 0.0) {
        return Err(Error::config("noise variance must be positive"));
    }
    let k = kernel.gram(x, x)?;
    let ky = &k + DMatrix::identity(x.nrows(), x.nrows()) * noise_var;
    let chol = linalg::cholesky(&ky)?;
    let alpha = chol.solve(y);
    let ky_inv = linalg::inverse(&chol);
    let mean = &k * &alpha;
    let cov = linalg::symmetrize(&(&k - &k * &ky_inv * &k));
    Ok(ExactGp {
        kernel: kernel.clone(),
        noise_var,
        x: x.clone(),
        posterior: ExactGpPosterior { mean, cov },
        alpha,
        ky_inv,
    })
}

impl ExactGp {
    /// Latent predictive mean and variance at each row of `xs`.
    pub fn predictive(&self, xs: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        let ks = self.kernel.gram(xs, &self.x)?;
        let sf2 = self.kernel.signal_variance();
        Ok((0..xs.nrows())
            .map(|i| {
                let k = ks.row(i).transpose();
                let mean = k.dot(&self.alpha);
                let var = sf2 - (k.transpose() * &self.ky_inv * &k)[(0, 0)];
                (mean, var.max(0.0))
            })
            .collect())
    }

    /// Mean negative log predictive density of noisy targets.
    pub fn nlpd(&self, xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<f64> {
        let pred = self.predictive(xs)?;
        let total: f64 = pred
            .iter()
            .zip(ys.iter())
            .map(|((m, v), y)| {
                let s = v + self.noise_var;
                0.5 * (LN_2PI + s.ln() + (y - m).powi(2) / s)
            })
            .sum();
        Ok(total / ys.len() as f64)
    }
}

/// `log p(y | X, theta, noise)` and its gradient w.r.t. `[kernel log-params, log noise]`.
pub fn exact_log_marginal(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &SeArdKernel,
    noise_var: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    let k = kernel.gram(x, x)?;
    let ky = &k + DMatrix::identity(n, n) * noise_var;
    let chol = linalg::cholesky(&ky)?;
    let alpha = chol.solve(y);
    let value = -0.5 * (y.dot(&alpha) + linalg::logdet(&chol) + n as f64 * LN_2PI);
    let w = (&alpha * alpha.transpose() - linalg::inverse(&chol)) * 0.5;
    let mut g = kernel.hyper_grad_from_adjoint(x, x, &k, &w);
    g.push(w.trace() * noise_var);
    Ok((value, g))
}

/// Type-II maximum likelihood for the kernel and noise, by L-BFGS in log space.
pub fn fit_exact_gp(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &SeArdKernel,
    noise_var: f64,
) -> Result<(SeArdKernel, f64)> {
    let mut p0 = kernel.params();
    p0.push(noise_var.ln());
    let np = kernel.num_params();
    let res = lbfgs(
        |p| {
            let kern = SeArdKernel::from_params(&p[..np])?;
            let (v, g) = exact_log_marginal(x, y, &kern, p[np].exp())?;
            Ok((-v, g.into_iter().map(|v| -v).collect()))
        },
        p0,
        10,
        500,
        1e-10,
    )?;
    Ok((SeArdKernel::from_params(&res.x[..np])?, res.x[np].exp()))
}

/// Closed-form ELL for the Gaussian likelihood with a dense single-Gaussian
/// posterior `N(m, S)` over the latent values at the data:
/// `log N(y; m, noise I) - tr(S) / (2 noise)`, with gradients w.r.t. `m` and `S`.
pub fn analytic_gaussian_ell(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    noise_var: f64,
    y: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let r = y - m;
    let value =
        -0.5 * (n as f64 * (LN_2PI + noise_var.ln()) + r.norm_squared() / noise_var) - s.trace() / (2.0 * noise_var);
    let gm = r / noise_var;
    let gs = DMatrix::identity(n, n) * (-0.5 / noise_var);
    (value, gm, gs)
}

/// Gradients of the dense Gaussian-likelihood ELBO w.r.t. `m` and `S`:
/// `-K^-1 m + (y - m)/noise` and `S^-1/2 - K^-1/2 - I/(2 noise)`.
/// Both vanish at the exact posterior.
pub fn dense_elbo_stationarity(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    k: &DMatrix<f64>,
    noise_var: f64,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kinv = linalg::inverse(&linalg::cholesky(k)?);
    let sinv = linalg::inverse(&linalg::cholesky(s)?);
    let n = y.len();
    let gm = -(&kinv * m) + (y - m) / noise_var;
    let gs = (sinv - kinv) * 0.5 - DMatrix::identity(n, n) * (0.5 / noise_var);
    Ok((gm, gs))
}

/// Score-function ELL gradient from joint draws of the whole latent vector
/// `f_j ~ N(m_j, S_j)` (dense mode, one component). Returns per-latent
/// gradients w.r.t. `m_j` and `S_j`.
pub fn naive_joint_ell_grad(
    model: &Model,
    state: &KernelState,
    data: &Data,
    samples: usize,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    if !state.dense {
        return Err(Error::config("joint estimator is defined for dense mode"));
    }
    let view = model.posterior.materialize(state)?;
    if view.num_components() != 1 {
        return Err(Error::config("joint estimator supports a single component"));
    }
    let n = data.len();
    let q = view.num_latent();
    let mut rng = rng::stream(&[seed, 0x6a_6f69_6e74]);
    let dense: Vec<DMatrix<f64>> = view.covs[0].iter().map(|c| c.to_dense()).collect();
    let chols = dense.iter().map(linalg::cholesky).collect::<Result<Vec<_>>>()?;
    let sinv: Vec<DMatrix<f64>> = chols.iter().map(linalg::inverse).collect();
    let ls: Vec<DMatrix<f64>> = chols.iter().map(|c| c.l()).collect();
    let mut gm = vec![DVector::zeros(n); q];
    let mut gs = vec![DMatrix::zeros(n, n); q];
    let targets: Vec<Vec<f64>> = (0..n).map(|i| data.target(i)).collect();
    let mut f = vec![DVector::zeros(n); q];
    for _ in 0..samples {
        for j in 0..q {
            let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            f[j] = &view.means[0][j] + &ls[j] * e;
        }
        let mut total = 0.0;
        let mut fn_ = vec![0.0; q];
        for (i, y) in targets.iter().enumerate() {
            for j in 0..q {
                fn_[j] = f[j][i];
            }
            total += model.likelihood.log_pdf_unchecked(y, &fn_);
        }
        for j in 0..q {
            let r = &sinv[j] * (&f[j] - &view.means[0][j]);
            gm[j] += &r * total;
            gs[j] += (&r * r.transpose() - &sinv[j]) * (0.5 * total);
        }
    }
    let s = samples as f64;
    Ok((
        gm.into_iter().map(|g| g / s).collect(),
        gs.into_iter().map(|g| g / s).collect(),
    ))
}

/// Central finite-difference gradient.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, or the absolute difference when both are below `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Exact entropy of a single Gaussian with block covariances.
pub fn gaussian_entropy(view: &PosteriorView, k: usize) -> f64 {
    view.covs[k]
        .iter()
        .map(|c| {
            let s = c.to_dense();
            let m = s.nrows() as f64;
            let logdet = s.determinant().ln();
            0.5 * (m * (1.0 + LN_2PI) + logdet)
        })
        .sum()
}

/// Monte-Carlo estimate of the mixture entropy `-E_q[log q]` and its standard error.
pub fn mc_mixture_entropy(view: &PosteriorView, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let kk = view.num_components();
    let q = view.num_latent();
    let mut rng = rng::stream(&[seed, 0x656e_7472]);
    let mut chols = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut row = Vec::with_capacity(q);
        for j in 0..q {
            row.push(linalg::cholesky(&view.covs[k][j].to_dense())?);
        }
        chols.push(row);
    }
    let ls: Vec<Vec<DMatrix<f64>>> = chols.iter().map(|r| r.iter().map(|c| c.l()).collect()).collect();
    let log_w: Vec<f64> = view.weights.iter().map(|w| w.ln()).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut terms = vec![0.0; kk];
    for _ in 0..samples {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = kk - 1;
        for (k, w) in view.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = k;
                break;
            }
        }
        let draw: Vec<DVector<f64>> = (0..q)
            .map(|j| {
                let m = view.means[comp][j].len();
                let e = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                &view.means[comp][j] + &ls[comp][j] * e
            })
            .collect();
        for k in 0..kk {
            terms[k] = log_w[k]
                + (0..q)
                    .map(|j| linalg::gaussian_logpdf(&draw[j], &view.means[k][j], &chols[k][j]))
                    .sum::<f64>();
        }
        let v = -log_sum_exp(&terms);
        sum += v;
        sum_sq += v * v;
    }
    let s = samples as f64;
    let mean = sum / s;
    let var = (sum_sq / s - mean * mean).max(0.0) * s / (s - 1.0);
    Ok((mean, (var / s).sqrt()))
}

/// Plain Monte-Carlo ELL over all datapoints with its standard error, drawing
/// from an independent stream.
pub fn brute_force_ell(
    lik: &LikelihoodModel,
    view: &PosteriorView,
    state: &KernelState,
    data: &Data,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rng::stream(&[seed, 0x6272_7574]);
    let q = view.num_latent();
    let mut value = 0.0;
    let mut var = 0.0;
    let mut f = vec![0.0; q];
    for n in 0..data.len() {
        let y = data.target(n);
        for k in 0..view.num_components() {
            let mm = marginal_moments(state, view, n, k);
            let sd: Vec<f64> = mm.var.iter().map(|v| v.sqrt()).collect();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..samples {
                for j in 0..q {
                    f[j] = mm.mean[j] + sd[j] * rng.sample::<f64, _>(StandardNormal);
                }
                let l = lik.log_pdf_unchecked(&y, &f);
                s1 += l;
                s2 += l * l;
            }
            let s = samples as f64;
            let mean = s1 / s;
            let w = view.weights[k];
            value += w * mean;
            var += w * w * (s2 / s - mean * mean).max(0.0) / s;
        }
    }
    (value, var.sqrt())
}
