//! The estimated evidence lower bound: Jensen entropy bound, analytic
//! cross-entropy and Monte-Carlo expected log likelihood, with gradients for
//! every parameter group.
//!
//! Each term first produces gradients w.r.t. the natural parameters
//! (`pi`, `m`, `S`) and adjoints w.r.t. the kernel matrices; `elbo` then chains
//! them to the stored parametrization and to the kernel hyperparameters and
//! inducing inputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::inducing_grad_from_adjoint;
use crate::likelihood::{log_sum_exp, LikelihoodModel};
use crate::linalg;
use crate::model::{Data, Model};
use crate::posterior::{cholesky_factor, marginal_moments, reparam_parts, Cov, CovFactor, KernelState, PosteriorView};
use crate::rng;

const LN_2PI: f64 = 1.8378770664093453;
/// Below this sample variance of the score the control-variate coefficient is 0.
pub const CV_VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllMode {
    MonteCarlo,
    /// Closed form for the Gaussian likelihood; for cross-checks.
    AnalyticGaussian,
}

/// Which gradient groups to compute. Values are always computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradGroups {
    pub variational: bool,
    pub hyper: bool,
    pub likelihood: bool,
    pub inducing: bool,
}

impl GradGroups {
    pub const ALL: GradGroups = GradGroups {
        variational: true,
        hyper: true,
        likelihood: true,
        inducing: true,
    };
    pub const NONE: GradGroups = GradGroups {
        variational: false,
        hyper: false,
        likelihood: false,
        inducing: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboOptions {
    pub samples: usize,
    pub seed: u64,
    /// Part of the random-stream key; the optimizer freezes it per iteration.
    pub epoch: u64,
    pub mode: EllMode,
    pub control_variates: bool,
    pub groups: GradGroups,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            samples: 2000,
            seed: 0,
            epoch: 0,
            mode: EllMode::MonteCarlo,
            control_variates: true,
            groups: GradGroups::ALL,
        }
    }
}

/// Gradients in the stored parametrization, one flat vector per group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub raw_weights: Vec<f64>,
    pub means: Vec<f64>,
    pub cov: Vec<f64>,
    /// Per latent, then per kernel log-parameter.
    pub hyper: Vec<f64>,
    pub likelihood: Vec<f64>,
    /// Per latent, then row-major over `M x D`.
    pub inducing: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    pub ent: f64,
    pub cross: f64,
    pub ell: f64,
    pub total: f64,
    /// Standard error of the ELL estimate.
    pub mc_std_err: f64,
    pub grads: Gradients,
    /// The part of `grads.hyper` contributed by the ELL term.
    pub hyper_from_ell: Vec<f64>,
}

/// Gradient w.r.t. one covariance block `S_kj`.
#[derive(Clone, Debug, PartialEq)]
pub enum CovGrad {
    Full(DMatrix<f64>),
    Diag(DVector<f64>),
}

impl CovGrad {
    fn zeros_like(c: &Cov) -> Self {
        match c {
            Cov::Full { s, .. } => CovGrad::Full(DMatrix::zeros(s.nrows(), s.ncols())),
            Cov::Diag(d) => CovGrad::Diag(DVector::zeros(d.len())),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &CovGrad) {
        match (self, other) {
            (CovGrad::Full(a), CovGrad::Full(b)) => *a += b * alpha,
            (CovGrad::Diag(a), CovGrad::Diag(b)) => *a += b * alpha,
            _ => unreachable!("covariance gradient structures differ"),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            CovGrad::Full(g) => g.clone(),
            CovGrad::Diag(d) => DMatrix::from_diagonal(d),
        }
    }
}

/// Gradients of one term w.r.t. the natural parameters `pi`, `m`, `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGrad {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<DVector<f64>>>,
    pub covs: Vec<Vec<CovGrad>>,
}

impl TermGrad {
    pub fn zeros(view: &PosteriorView) -> Self {
        TermGrad {
            weights: vec![0.0; view.num_components()],
            means: view
                .means
                .iter()
                .map(|row| row.iter().map(|m| DVector::zeros(m.len())).collect())
                .collect(),
            covs: view
                .covs
                .iter()
                .map(|row| row.iter().map(CovGrad::zeros_like).collect())
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &TermGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, b) in self.means.iter_mut().flatten().zip(other.means.iter().flatten()) {
            *a += b * alpha;
        }
        for (a, b) in self.covs.iter_mut().flatten().zip(other.covs.iter().flatten()) {
            a.axpy(alpha, b);
        }
    }
}

/// Adjoints of a loss w.r.t. `Kzz` (jittered), selected rows of `Kxz` and the
/// matching diagonal entries `k(x_n, x_n)`, for one latent process.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelAdjoint {
    pub gzz: DMatrix<f64>,
    pub rows: Vec<usize>,
    pub gxz: DMatrix<f64>,
    pub gkxx: DVector<f64>,
}

impl KernelAdjoint {
    fn scale(&mut self, s: f64) {
        self.gzz *= s;
        self.gxz *= s;
        self.gkxx *= s;
    }
}

/// Inverse, factor-derived quantities for one pair `(k, l)` on one latent block.
struct PairBlock {
    log_n: f64,
    /// `C^-1 (m_k - m_l)`
    u: DVector<f64>,
    cinv: CovGrad,
}

/// Pairwise Gaussian overlaps `N(m_k; m_l, S_k + S_l)` needed by the entropy bound.
struct MixturePairWorkspace {
    /// `blocks[k][l][j]` for `l <= k`.
    blocks: Vec<Vec<Vec<PairBlock>>>,
    log_n: DMatrix<f64>,
}

impl MixturePairWorkspace {
    fn new(view: &PosteriorView) -> Result<Self> {
        let kk = view.num_components();
        let mut blocks = Vec::with_capacity(kk);
        let mut log_n = DMatrix::zeros(kk, kk);
        for k in 0..kk {
            let mut row = Vec::with_capacity(k + 1);
            for l in 0..=k {
                let mut per_j = Vec::with_capacity(view.num_latent());
                for j in 0..view.num_latent() {
                    let d = &view.means[k][j] - &view.means[l][j];
                    let m = d.len() as f64;
                    let block = match (&view.covs[k][j], &view.covs[l][j]) {
                        (Cov::Full { s: a, .. }, Cov::Full { s: b, .. }) => {
                            let chol = linalg::cholesky(&(a + b))?;
                            let u = chol.solve(&d);
                            let log_n = -0.5 * (m * LN_2PI + linalg::logdet(&chol) + d.dot(&u));
                            PairBlock {
                                log_n,
                                u,
                                cinv: CovGrad::Full(linalg::inverse(&chol)),
                            }
                        }
                        (Cov::Diag(a), Cov::Diag(b)) => {
                            let c = a + b;
                            let u = d.component_div(&c);
                            let log_n = -0.5 * (m * LN_2PI + c.iter().map(|v| v.ln()).sum::<f64>() + d.dot(&u));
                            PairBlock {
                                log_n,
                                u,
                                cinv: CovGrad::Diag(c.map(|v| 1.0 / v)),
                            }
                        }
                        _ => return Err(Error::config("mixed covariance structures")),
                    };
                    log_n[(k, l)] += block.log_n;
                    per_j.push(block);
                }
                log_n[(l, k)] = log_n[(k, l)];
                row.push(per_j);
            }
            blocks.push(row);
        }
        Ok(MixturePairWorkspace { blocks, log_n })
    }

    /// Block `(k, l, j)` and the sign to apply to `u` so it equals
    /// `C^-1 (m_k - m_l)`.
    fn block(&self, k: usize, l: usize, j: usize) -> (&PairBlock, f64) {
        if l <= k {
            (&self.blocks[k][l][j], 1.0)
        } else {
            (&self.blocks[l][k][j], -1.0)
        }
    }
}

/// Jensen lower bound on the mixture entropy and its gradients.
pub fn entropy_bound(view: &PosteriorView) -> Result<(f64, TermGrad)> {
    let ws = MixturePairWorkspace::new(view)?;
    let w = &view.weights;
    let kk = w.len();
    let log_z: Vec<f64> = (0..kk)
        .map(|k| {
            let terms: Vec<f64> = (0..kk).map(|l| w[l].ln() + ws.log_n[(k, l)]).collect();
            log_sum_exp(&terms)
        })
        .collect();
    let value = -(0..kk).map(|k| w[k] * log_z[k]).sum::<f64>();

    let mut grad = TermGrad::zeros(view);
    for k in 0..kk {
        grad.weights[k] = -log_z[k] - (0..kk).map(|i| w[i] * (ws.log_n[(i, k)] - log_z[i]).exp()).sum::<f64>();
    }
    for k in 0..kk {
        for l in 0..kk {
            let ln = ws.log_n[(k, l)];
            let coef = w[k] * w[l] * ((ln - log_z[k]).exp() + (ln - log_z[l]).exp());
            for j in 0..view.num_latent() {
                let (b, sign) = ws.block(k, l, j);
                if l != k {
                    grad.means[k][j] += &b.u * (coef * sign);
                }
                match (&mut grad.covs[k][j], &b.cinv) {
                    (CovGrad::Full(g), CovGrad::Full(ci)) => {
                        *g -= (&b.u * b.u.transpose() - ci) * (0.5 * coef);
                    }
                    (CovGrad::Diag(g), CovGrad::Diag(ci)) => {
                        *g -= (b.u.component_mul(&b.u) - ci) * (0.5 * coef);
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok((value, grad))
}

/// Analytic `E_q[log p(u)]`, its gradients, and the adjoint w.r.t. each `Kzz`.
pub fn cross_entropy(view: &PosteriorView, state: &KernelState) -> (f64, TermGrad, Vec<DMatrix<f64>>) {
    let mut grad = TermGrad::zeros(view);
    let mut value = 0.0;
    let mut gzz: Vec<DMatrix<f64>> = state
        .latents
        .iter()
        .map(|l| DMatrix::zeros(l.num_inducing(), l.num_inducing()))
        .collect();
    for (k, &pk) in view.weights.iter().enumerate() {
        for (j, lat) in state.latents.iter().enumerate() {
            let kinv = &lat.kzz_inv;
            let m = &view.means[k][j];
            let alpha = kinv * m;
            let dim = m.len() as f64;
            let (trace, ksk) = match &view.covs[k][j] {
                Cov::Full { s, .. } => {
                    grad.covs[k][j] = CovGrad::Full(kinv * (-0.5 * pk));
                    (kinv.component_mul(s).sum(), kinv * s * kinv)
                }
                Cov::Diag(d) => {
                    grad.covs[k][j] = CovGrad::Diag(kinv.diagonal() * (-0.5 * pk));
                    let mut scaled = kinv.clone();
                    for (c, dv) in d.iter().enumerate() {
                        scaled.column_mut(c).scale_mut(*dv);
                    }
                    (kinv.diagonal().dot(d), scaled * kinv)
                }
            };
            let bracket = dim * LN_2PI + lat.logdet + m.dot(&alpha) + trace;
            value -= 0.5 * pk * bracket;
            grad.weights[k] -= 0.5 * bracket;
            grad.means[k][j] = &alpha * (-pk);
            gzz[j] -= (kinv - &alpha * alpha.transpose() - ksk) * (0.5 * pk);
        }
    }
    (value, grad, gzz)
}

/// `g_i - a h_i` with `a = Cov(g, h) / Var(h)` estimated from the same samples.
pub fn control_variate_correct(g: &[f64], h: &[f64]) -> Vec<f64> {
    let a = cv_coefficient(g, h);
    g.iter().zip(h).map(|(gi, hi)| gi - a * hi).collect()
}

fn cv_coefficient(g: &[f64], h: &[f64]) -> f64 {
    let s = g.len() as f64;
    let (mg, mh) = (g.iter().sum::<f64>() / s, h.iter().sum::<f64>() / s);
    let mut cov = 0.0;
    let mut var = 0.0;
    for (gi, hi) in g.iter().zip(h) {
        cov += (gi - mg) * (hi - mh);
        var += (hi - mh) * (hi - mh);
    }
    cov /= s - 1.0;
    var /= s - 1.0;
    if var < CV_VAR_FLOOR {
        0.0
    } else {
        let a = cov / var;
        if a.is_finite() {
            a
        } else {
            0.0
        }
    }
}

/// Mean of the control-variate-corrected samples.
fn cv_mean(g: &[f64], h: &[f64]) -> f64 {
    let s = g.len() as f64;
    let a = cv_coefficient(g, h);
    (g.iter().sum::<f64>() - a * h.iter().sum::<f64>()) / s
}

/// Per-datapoint ELL quantities, all indexed by component (and latent).
struct PointTerms {
    values: Vec<f64>,
    vars: Vec<f64>,
    /// `d E[log p] / d b` per `(k, j)`, component-major.
    gb: Vec<f64>,
    /// `d E[log p] / d v` per `(k, j)`.
    gv: Vec<f64>,
    /// Weighted over components.
    phi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn ell_point(
    n: usize,
    y: &[f64],
    lik: &LikelihoodModel,
    view: &PosteriorView,
    state: &KernelState,
    opts: &ElboOptions,
    want_phi: bool,
) -> Result<PointTerms> {
    let (kk, q) = (view.num_components(), view.num_latent());
    let s = opts.samples;
    let mut out = PointTerms {
        values: vec![0.0; kk],
        vars: vec![0.0; kk],
        gb: vec![0.0; kk * q],
        gv: vec![0.0; kk * q],
        phi: vec![0.0; if want_phi { lik.num_params() } else { 0 }],
    };
    for k in 0..kk {
        let mm = marginal_moments(state, view, n, k);
        match opts.mode {
            EllMode::AnalyticGaussian => {
                let LikelihoodModel::Gaussian { log_noise_var } = lik else {
                    return Err(Error::config("analytic ELL requires the Gaussian likelihood"));
                };
                let s2 = log_noise_var.exp();
                let (b, v) = (mm.mean[0], mm.var[0]);
                let r = y[0] - b;
                out.values[k] = -0.5 * (LN_2PI + s2.ln() + r * r / s2) - v / (2.0 * s2);
                out.gb[k] = r / s2;
                out.gv[k] = -0.5 / s2;
                if want_phi {
                    out.phi[0] += view.weights[k] * (-0.5 + (r * r + v) / (2.0 * s2));
                }
            }
            EllMode::MonteCarlo => {
                let mut rng = rng::stream(&[opts.seed, opts.epoch, n as u64, k as u64]);
                let eps: Vec<f64> = (0..s * q).map(|_| rng.sample(StandardNormal)).collect();
                let sd: Vec<f64> = mm.var.iter().map(|v| v.sqrt()).collect();
                let mut ell = vec![0.0; s];
                let mut f = vec![0.0; q];
                let mut phi = vec![0.0; out.phi.len()];
                for (i, li) in ell.iter_mut().enumerate() {
                    for j in 0..q {
                        f[j] = mm.mean[j] + sd[j] * eps[i * q + j];
                    }
                    *li = lik.log_pdf_unchecked(y, &f);
                    if !li.is_finite() {
                        return Err(Error::Numerical(format!("non-finite log likelihood at datapoint {n}")));
                    }
                    if want_phi {
                        for (a, g) in phi.iter_mut().zip(lik.grad_phi_unchecked(y, &f)) {
                            *a += g;
                        }
                    }
                }
                let sf = s as f64;
                let mean = ell.iter().sum::<f64>() / sf;
                out.values[k] = mean;
                out.vars[k] = ell.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (sf - 1.0);
                for (a, g) in out.phi.iter_mut().zip(&phi) {
                    *a += view.weights[k] * g / sf;
                }
                let mut g = vec![0.0; s];
                let mut h = vec![0.0; s];
                for j in 0..q {
                    for i in 0..s {
                        h[i] = eps[i * q + j] / sd[j];
                        g[i] = ell[i] * h[i];
                    }
                    out.gb[k * q + j] = if opts.control_variates {
                        cv_mean(&g, &h)
                    } else {
                        g.iter().sum::<f64>() / sf
                    };
                    for i in 0..s {
                        let e = eps[i * q + j];
                        h[i] = (e * e - 1.0) / (2.0 * mm.var[j]);
                        g[i] = ell[i] * h[i];
                    }
                    out.gv[k * q + j] = if opts.control_variates {
                        cv_mean(&g, &h)
                    } else {
                        g.iter().sum::<f64>() / sf
                    };
                }
            }
        }
    }
    Ok(out)
}

/// ELL over a batch, summed (not rescaled), with natural-parameter gradients,
/// likelihood-parameter gradients and (in sparse mode) kernel adjoints.
#[derive(Clone, Debug)]
pub struct EllEstimate {
    pub value: f64,
    pub std_err: f64,
    pub grad: TermGrad,
    pub phi: Vec<f64>,
    /// `None` in dense mode, where the ELL does not depend on the kernel.
    pub adjoints: Option<Vec<KernelAdjoint>>,
}

pub fn ell_estimate(
    lik: &LikelihoodModel,
    view: &PosteriorView,
    state: &KernelState,
    data: &Data,
    opts: &ElboOptions,
    batch: &[usize],
) -> Result<EllEstimate> {
    if opts.mode == EllMode::MonteCarlo && opts.samples < 2 {
        return Err(Error::config("at least two samples are needed"));
    }
    let want_phi = opts.groups.likelihood && lik.num_params() > 0;
    let want_adj = (opts.groups.hyper || opts.groups.inducing) && !state.dense;
    let work = |&n: &usize| -> Result<PointTerms> {
        let y = data.target(n);
        lik.check_target(&y).map_err(|e| Error::Datapoint {
            index: n,
            message: e.to_string(),
        })?;
        ell_point(n, &y, lik, view, state, opts, want_phi)
    };
    #[cfg(feature = "parallel")]
    let terms: Vec<Result<PointTerms>> = batch.par_iter().map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let terms: Vec<Result<PointTerms>> = batch.iter().map(work).collect();
    let terms: Vec<PointTerms> = terms.into_iter().collect::<Result<_>>()?;

    let (kk, q) = (view.num_components(), view.num_latent());
    let w = &view.weights;
    let mut value = 0.0;
    let mut var = 0.0;
    let mut grad = TermGrad::zeros(view);
    let mut phi = vec![0.0; lik.num_params()];
    for t in &terms {
        for k in 0..kk {
            value += w[k] * t.values[k];
            var += w[k] * w[k] * t.vars[k] / opts.samples as f64;
            grad.weights[k] += t.values[k];
        }
        for (a, b) in phi.iter_mut().zip(&t.phi) {
            *a += b;
        }
    }
    let std_err = if opts.mode == EllMode::MonteCarlo {
        var.sqrt()
    } else {
        0.0
    };

    let mut adjoints: Vec<KernelAdjoint> = Vec::new();
    for (j, lat) in state.latents.iter().enumerate() {
        let m = lat.num_inducing();
        let a_b = if state.dense { None } else { Some(lat.a_rows(batch)) };
        let mut adj = KernelAdjoint {
            gzz: DMatrix::zeros(m, m),
            rows: batch.to_vec(),
            gxz: DMatrix::zeros(if want_adj { batch.len() } else { 0 }, m),
            gkxx: DVector::zeros(if want_adj { batch.len() } else { 0 }),
        };
        for k in 0..kk {
            let gb = DVector::from_iterator(batch.len(), terms.iter().map(|t| t.gb[k * q + j]));
            let gv = DVector::from_iterator(batch.len(), terms.iter().map(|t| t.gv[k * q + j]));
            match &a_b {
                None => {
                    for (i, &n) in batch.iter().enumerate() {
                        grad.means[k][j][n] += w[k] * gb[i];
                        match &mut grad.covs[k][j] {
                            CovGrad::Full(g) => g[(n, n)] += w[k] * gv[i],
                            CovGrad::Diag(g) => g[n] += w[k] * gv[i],
                        }
                    }
                }
                Some(a) => {
                    let at_gb = a.transpose() * &gb;
                    grad.means[k][j] += &at_gb * w[k];
                    let mut wa = a.clone();
                    for (mut row, g) in wa.row_iter_mut().zip(gv.iter()) {
                        row *= *g;
                    }
                    match &mut grad.covs[k][j] {
                        CovGrad::Full(g) => *g += (a.transpose() * &wa) * w[k],
                        CovGrad::Diag(g) => *g += wa.component_mul(a).row_sum().transpose() * w[k],
                    }
                    if want_adj {
                        let alpha = &lat.kzz_inv * &view.means[k][j];
                        // rows c_n' = a_n' S Kzz^-1
                        let c = view.covs[k][j].mul_rows(a) * &lat.kzz_inv;
                        let mut wc = c.clone();
                        for (mut row, g) in wc.row_iter_mut().zip(gv.iter()) {
                            row *= *g;
                        }
                        let gzz = -(&at_gb * alpha.transpose()) + a.transpose() * &wa
                            - a.transpose() * &wc
                            - c.transpose() * &wa;
                        adj.gzz += gzz * w[k];
                        let gxz = &gb * alpha.transpose() + (wc - &wa) * 2.0;
                        adj.gxz += gxz * w[k];
                        adj.gkxx += &gv * w[k];
                    }
                }
            }
        }
        adjoints.push(adj);
    }
    Ok(EllEstimate {
        value,
        std_err,
        grad,
        phi,
        adjoints: if want_adj { Some(adjoints) } else { None },
    })
}

/// Hyperparameter gradient for latent `j` from a kernel adjoint.
fn hyper_from_adjoint(model: &Model, state: &KernelState, data: &Data, j: usize, adj: &KernelAdjoint) -> Vec<f64> {
    let kern = &model.kernels[j];
    let lat = &state.latents[j];
    let mut g = kern.hyper_grad_from_adjoint(&lat.z, &lat.z, &lat.kzz, &adj.gzz);
    if !adj.rows.is_empty() && adj.gxz.nrows() > 0 {
        let x = data.x.select_rows(&adj.rows);
        let kxz = lat.kxz.select_rows(&adj.rows);
        for (a, b) in g
            .iter_mut()
            .zip(kern.hyper_grad_from_adjoint(&x, &lat.z, &kxz, &adj.gxz))
        {
            *a += b;
        }
    }
    if !adj.gkxx.is_empty() {
        for (a, b) in g
            .iter_mut()
            .zip(kern.hyper_grad_from_diag_adjoint(adj.gkxx.iter().copied()))
        {
            *a += b;
        }
    }
    g
}

fn inducing_from_adjoint(
    model: &Model,
    state: &KernelState,
    data: &Data,
    j: usize,
    adj: &KernelAdjoint,
) -> DMatrix<f64> {
    let lat = &state.latents[j];
    let (x, kxz) = if adj.gxz.nrows() > 0 {
        (data.x.select_rows(&adj.rows), lat.kxz.select_rows(&adj.rows))
    } else {
        (DMatrix::zeros(0, lat.z.ncols()), DMatrix::zeros(0, lat.num_inducing()))
    };
    inducing_grad_from_adjoint(&model.kernels[j], &lat.z, &lat.kzz, &adj.gzz, &x, &kxz, &adj.gxz)
}

/// Chains `dL/dS_j` through `S_j = Kzz (Kzz + Kzx Lambda Kxz)^-1 Kzz`: returns
/// the gradient w.r.t. `log Lambda_j` and the adjoint w.r.t. `Kzz` and all of `Kxz`.
fn lambda_chain(
    g_s: &DMatrix<f64>,
    state: &KernelState,
    j: usize,
    log_lambda: &DVector<f64>,
) -> Result<(Vec<f64>, KernelAdjoint)> {
    let lat = &state.latents[j];
    let lambda = log_lambda.map(f64::exp);
    let (_, h) = reparam_parts(lat, &lambda)?;
    let g = linalg::symmetrize(g_s);
    let e = -(&h * &g * h.transpose());
    let p = &lat.kxz;
    let pe = p * &e;
    let dlog: Vec<f64> = (0..p.nrows()).map(|n| lambda[n] * pe.row(n).dot(&p.row(n))).collect();
    let mut gxz = pe * 2.0;
    for (mut row, l) in gxz.row_iter_mut().zip(lambda.iter()) {
        row *= *l;
    }
    let gzz = &g * h.transpose() + &h * &g + e;
    let n = p.nrows();
    Ok((
        dlog,
        KernelAdjoint {
            gzz,
            rows: (0..n).collect(),
            gxz,
            gkxx: DVector::zeros(0),
        },
    ))
}

/// Gradient w.r.t. the packed lower triangle of `L` (diagonal in log space)
/// given `dL/dS` for `S = L L'`.
fn chain_cholesky(l: &DMatrix<f64>, g_s: &DMatrix<f64>, out: &mut Vec<f64>) {
    let gl = (g_s + g_s.transpose()) * l;
    for i in 0..l.nrows() {
        for c in 0..i {
            out.push(gl[(i, c)]);
        }
        out.push(gl[(i, i)] * l[(i, i)]);
    }
}

/// Evaluates the ELBO and its gradients. With a minibatch the ELL and its
/// gradients are scaled by `N / |batch|`; the KL terms are always exact.
pub fn elbo(
    model: &Model,
    state: &KernelState,
    data: &Data,
    opts: &ElboOptions,
    batch: Option<&[usize]>,
) -> Result<ElboReport> {
    evaluate(model, state, data, opts, batch, true)
}

/// `ent + cross` alone (the negative KL bound) with gradients; `ell` is 0.
pub fn kl_report(model: &Model, state: &KernelState, data: &Data, groups: GradGroups) -> Result<ElboReport> {
    let opts = ElboOptions {
        groups,
        ..Default::default()
    };
    evaluate(model, state, data, &opts, None, false)
}

fn evaluate(
    model: &Model,
    state: &KernelState,
    data: &Data,
    opts: &ElboOptions,
    batch: Option<&[usize]>,
    with_ell: bool,
) -> Result<ElboReport> {
    let n = data.len();
    let all: Vec<usize>;
    let batch = match batch {
        Some(b) => {
            if b.is_empty() || b.iter().any(|&i| i >= n) {
                return Err(Error::config("minibatch indices must be nonempty and in range"));
            }
            b
        }
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let post = &model.posterior;
    let view = post.materialize(state)?;
    let (ent, g_ent) = entropy_bound(&view)?;
    let (cross, g_cross, gzz_cross) = cross_entropy(&view, state);
    let est = if with_ell {
        ell_estimate(&model.likelihood, &view, state, data, opts, batch)?
    } else {
        EllEstimate {
            value: 0.0,
            std_err: 0.0,
            grad: TermGrad::zeros(&view),
            phi: vec![0.0; model.likelihood.num_params()],
            adjoints: None,
        }
    };
    let scale = n as f64 / batch.len() as f64;
    let ell = est.value * scale;

    let mut g = g_ent;
    g.axpy(1.0, &g_cross);
    g.axpy(scale, &est.grad);

    let groups = opts.groups;
    let need_kernel = groups.hyper || groups.inducing;
    let q = model.num_latent();
    let mut other: Vec<KernelAdjoint> = gzz_cross
        .into_iter()
        .map(|gzz| KernelAdjoint {
            gzz,
            rows: vec![],
            gxz: DMatrix::zeros(0, 0),
            gkxx: DVector::zeros(0),
        })
        .collect();
    let mut ell_adj = est.adjoints;
    if let Some(a) = &mut ell_adj {
        a.iter_mut().for_each(|a| a.scale(scale));
    }

    let mut grads = Gradients::default();
    let mut lambda_adj: Vec<KernelAdjoint> = Vec::new();
    if let Some(lam) = &post.log_lambda {
        for j in 0..q {
            let (dlog, adj) = lambda_chain(&g.covs[0][j].to_dense(), state, j, &lam[j])?;
            grads.cov.extend(dlog);
            other[j].gzz += &adj.gzz;
            lambda_adj.push(adj);
        }
    } else {
        for (f, gs) in post.factors.iter().flatten().zip(g.covs.iter().flatten()) {
            match (f, gs) {
                (CovFactor::Full(l), CovGrad::Full(gm)) => chain_cholesky(&cholesky_factor(l), gm, &mut grads.cov),
                (CovFactor::LogDiag(v), CovGrad::Diag(gd)) => {
                    grads.cov.extend(gd.iter().zip(v.iter()).map(|(a, b)| a * b.exp()))
                }
                _ => unreachable!(),
            }
        }
    }

    let w = &view.weights;
    let wg: f64 = w.iter().zip(&g.weights).map(|(a, b)| a * b).sum();
    grads.raw_weights = w.iter().zip(&g.weights).map(|(p, gk)| p * (gk - wg)).collect();
    grads.means = g.means.iter().flatten().flat_map(|v| v.iter().copied()).collect();
    grads.likelihood = est.phi.iter().map(|v| v * scale).collect();

    let nparams: usize = model.kernels.iter().map(|k| k.num_params()).sum();
    let mut hyper_from_ell = vec![0.0; nparams];
    grads.hyper = vec![0.0; nparams];
    let mut offset = 0;
    for j in 0..q {
        let np = model.kernels[j].num_params();
        if groups.hyper {
            let mut gj = hyper_from_adjoint(model, state, data, j, &other[j]);
            if let Some(la) = lambda_adj.get(j) {
                let rows_only = KernelAdjoint {
                    gzz: DMatrix::zeros(la.gzz.nrows(), la.gzz.ncols()),
                    ..la.clone()
                };
                for (a, b) in gj.iter_mut().zip(hyper_from_adjoint(model, state, data, j, &rows_only)) {
                    *a += b;
                }
            }
            if let Some(ea) = &ell_adj {
                let ge = hyper_from_adjoint(model, state, data, j, &ea[j]);
                for (i, v) in ge.into_iter().enumerate() {
                    hyper_from_ell[offset + i] = v;
                    gj[i] += v;
                }
            }
            grads.hyper[offset..offset + np].copy_from_slice(&gj);
        }
        offset += np;
    }

    let zlen: usize = model.inducing.z.iter().map(|z| z.len()).sum();
    grads.inducing = vec![0.0; zlen];
    if groups.inducing && need_kernel && !state.dense {
        let mut offset = 0;
        for j in 0..q {
            let mut total = match &ell_adj {
                Some(ea) => {
                    let mut a = ea[j].clone();
                    a.gzz += &other[j].gzz;
                    inducing_from_adjoint(model, state, data, j, &a)
                }
                None => inducing_from_adjoint(model, state, data, j, &other[j]),
            };
            if let Some(la) = lambda_adj.get(j) {
                let rows_only = KernelAdjoint {
                    gzz: DMatrix::zeros(la.gzz.nrows(), la.gzz.ncols()),
                    ..la.clone()
                };
                total += inducing_from_adjoint(model, state, data, j, &rows_only);
            }
            for r in 0..total.nrows() {
                for c in 0..total.ncols() {
                    grads.inducing[offset] = total[(r, c)];
                    offset += 1;
                }
            }
        }
    }

    if !groups.variational {
        grads.raw_weights.iter_mut().for_each(|v| *v = 0.0);
        grads.means.iter_mut().for_each(|v| *v = 0.0);
        grads.cov.iter_mut().for_each(|v| *v = 0.0);
    }
    if !groups.likelihood {
        grads.likelihood = vec![0.0; model.likelihood.num_params()];
    }

    let total = ent + cross + ell;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite ELBO (ent {ent}, cross {cross}, ell {ell})"
        )));
    }
    Ok(ElboReport {
        ent,
        cross,
        ell,
        total,
        mc_std_err: est.std_err * scale,
        grads,
        hyper_from_ell,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SeArdKernel;
    use crate::posterior::{CovStructure, InducingConfig, MixturePosterior};

    fn scalar_view(m: f64, s: f64) -> PosteriorView {
        PosteriorView {
            weights: vec![1.0],
            means: vec![vec![DVector::from_element(1, m)]],
            covs: vec![vec![Cov::full(DMatrix::from_element(1, 1, s)).unwrap()]],
        }
    }

    #[test]
    fn entropy_of_single_unit_gaussian() {
        let (v, _) = entropy_bound(&scalar_view(0.3, 1.0)).unwrap();
        assert!((v - 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_components_match_single_component() {
        let one = scalar_view(0.3, 1.7);
        let mut two = one.clone();
        two.weights = vec![0.5, 0.5];
        two.means.push(two.means[0].clone());
        two.covs.push(two.covs[0].clone());
        let (a, _) = entropy_bound(&one).unwrap();
        let (b, _) = entropy_bound(&two).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_unit_example() {
        let z = DMatrix::from_element(1, 1, 0.0);
        let kern = SeArdKernel::new(&[1.0], 1.0).unwrap();
        let st = crate::posterior::build_kernel_state(&[kern], &InducingConfig::sparse(vec![z.clone()]).unwrap(), &z)
            .unwrap();
        let (v, g, _) = cross_entropy(&scalar_view(0.0, 1.0), &st);
        // Kzz carries a 1e-6 jitter.
        assert!((v - (-1.418939)).abs() < 1e-5);
        assert!((g.weights[0] - v).abs() < 1e-12);
    }

    #[test]
    fn control_variate_examples() {
        let g = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(control_variate_correct(&g, &[0.0; 4]), g.to_vec());
        let h = [0.3, -1.2, 0.8, 2.0];
        let g: Vec<f64> = h.iter().map(|v| 2.5 * v).collect();
        let c = control_variate_correct(&g, &h);
        let mean = c.iter().sum::<f64>() / 4.0;
        assert!(c.iter().all(|v| (v - mean).abs() < 1e-12));
        let direct = control_variate_correct(&[1.0, 4.0, -2.0], &[0.5, 1.0, -0.3]);
        let m = direct.iter().sum::<f64>() / 3.0;
        assert!((m - cv_mean(&[1.0, 4.0, -2.0], &[0.5, 1.0, -0.3])).abs() < 1e-14);
    }

    fn one_point_model(var: f64) -> (Model, Data, KernelState) {
        let x = DMatrix::from_element(1, 1, 0.0);
        let data = Data::new(x.clone(), DMatrix::from_element(1, 1, 0.0)).unwrap();
        let mut post = MixturePosterior::new(1, 1, 1, CovStructure::Diagonal).unwrap();
        post.factors[0][0] = CovFactor::LogDiag(DVector::from_element(1, var.ln()));
        let model = Model {
            kernels: vec![SeArdKernel::new(&[1.0], 1.0).unwrap()],
            inducing: InducingConfig::dense(&x, 1),
            posterior: post,
            likelihood: LikelihoodModel::gaussian(1.0),
        };
        let st = model.kernel_state(&data.x).unwrap();
        (model, data, st)
    }

    #[test]
    fn gaussian_ell_at_the_origin() {
        let (model, data, st) = one_point_model(1.0);
        let opts = ElboOptions {
            mode: EllMode::AnalyticGaussian,
            ..Default::default()
        };
        let r = elbo(&model, &st, &data, &opts, None).unwrap();
        assert!((r.ell - (-1.418939)).abs() < 1e-6);
        let opts = ElboOptions {
            samples: 200_000,
            ..Default::default()
        };
        let r = elbo(&model, &st, &data, &opts, None).unwrap();
        assert!((r.ell - (-1.418939)).abs() < 3.0 * r.mc_std_err);
        assert_eq!(r.total, r.ent + r.cross + r.ell);
    }

    #[test]
    fn vanishing_variance_is_deterministic() {
        let (model, data, st) = one_point_model(1e-30);
        let opts = ElboOptions {
            samples: 10,
            ..Default::default()
        };
        let r = elbo(&model, &st, &data, &opts, None).unwrap();
        assert!((r.ell - (-0.5 * LN_2PI)).abs() < 1e-9);
        assert!(r.mc_std_err < 1e-9);
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let (model, data, st) = one_point_model(0.5);
        let opts = ElboOptions {
            samples: 500,
            seed: 7,
            ..Default::default()
        };
        let a = elbo(&model, &st, &data, &opts, None).unwrap();
        let b = elbo(&model, &st, &data, &opts, None).unwrap();
        assert_eq!(a, b);
    }
}
