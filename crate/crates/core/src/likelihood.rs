//! Conditional likelihoods `p(y_n | f_n, phi)`. Inference only ever calls
//! `log_pdf` pointwise; everything else here is for prediction and for the
//! optional analytic shortcuts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// One `a * tanh(b * (y + c))` term of the warping function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpTerm {
    pub log_a: f64,
    pub log_b: f64,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LikelihoodModel {
    Gaussian {
        log_noise_var: f64,
    },
    WarpedGaussian {
        log_noise_var: f64,
        terms: Vec<WarpTerm>,
    },
    Logistic,
    Softmax {
        classes: usize,
    },
    PoissonLgcp {
        offset: f64,
    },
    /// Latent layout: `[g_1..g_q, W_11..W_1q, ..., W_P1..W_Pq]`.
    Gprn {
        outputs: usize,
        nodes: usize,
        log_sigma_y: f64,
        log_sigma_w: Option<f64>,
    },
}

/// What kind of target a likelihood models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Summary of the mixture predictive distribution at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction {
    /// Point prediction per output (class index for classifiers).
    pub mean: Vec<f64>,
    /// Predictive variance per output (regression only, zeros otherwise).
    pub variance: Vec<f64>,
    /// Class probabilities for classifiers (`[p0, p1]` for logistic).
    pub class_probs: Option<Vec<f64>>,
    /// `log p(y* | x*)` when an observed target was supplied.
    pub log_density: Option<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn gaussian_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

fn ln_factorial(y: f64) -> f64 {
    libm::lgamma(y + 1.0)
}

impl LikelihoodModel {
    pub fn gaussian(noise_var: f64) -> Self {
        LikelihoodModel::Gaussian {
            log_noise_var: noise_var.ln(),
        }
    }

    /// Warped Gaussian with the default three warping terms spread over `[lo, hi]`.
    pub fn warped(noise_var: f64, lo: f64, hi: f64) -> Self {
        let terms = (0..3)
            .map(|i| WarpTerm {
                log_a: 0.1f64.ln(),
                log_b: 0.0,
                c: -(lo + (hi - lo) * (i as f64 + 0.5) / 3.0),
            })
            .collect();
        LikelihoodModel::WarpedGaussian {
            log_noise_var: noise_var.ln(),
            terms,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodModel::Gaussian { .. } => "gaussian",
            LikelihoodModel::WarpedGaussian { .. } => "warped",
            LikelihoodModel::Logistic => "logistic",
            LikelihoodModel::Softmax { .. } => "softmax",
            LikelihoodModel::PoissonLgcp { .. } => "lgcp",
            LikelihoodModel::Gprn { .. } => "gprn",
        }
    }

    pub fn task(&self) -> Task {
        match self {
            LikelihoodModel::Logistic | LikelihoodModel::Softmax { .. } => Task::Classification,
            _ => Task::Regression,
        }
    }

    /// Number of latent processes Q.
    pub fn num_latent(&self) -> usize {
        match self {
            LikelihoodModel::Softmax { classes } => *classes,
            LikelihoodModel::Gprn { outputs, nodes, .. } => nodes * (outputs + 1),
            _ => 1,
        }
    }

    /// Length of a target vector `y_n`.
    pub fn target_dim(&self) -> usize {
        match self {
            LikelihoodModel::Gprn { outputs, .. } => *outputs,
            _ => 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            LikelihoodModel::Gaussian { log_noise_var } => vec![*log_noise_var],
            LikelihoodModel::WarpedGaussian { log_noise_var, terms } => {
                let mut p = vec![*log_noise_var];
                for t in terms {
                    p.extend([t.log_a, t.log_b, t.c]);
                }
                p
            }
            LikelihoodModel::Logistic | LikelihoodModel::Softmax { .. } => vec![],
            LikelihoodModel::PoissonLgcp { offset } => vec![*offset],
            LikelihoodModel::Gprn {
                log_sigma_y,
                log_sigma_w,
                ..
            } => {
                let mut p = vec![*log_sigma_y];
                p.extend(log_sigma_w.iter());
                p
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "likelihood parameter length");
        match self {
            LikelihoodModel::Gaussian { log_noise_var } => *log_noise_var = p[0],
            LikelihoodModel::WarpedGaussian { log_noise_var, terms } => {
                *log_noise_var = p[0];
                for (t, c) in terms.iter_mut().zip(p[1..].chunks(3)) {
                    t.log_a = c[0];
                    t.log_b = c[1];
                    t.c = c[2];
                }
            }
            LikelihoodModel::Logistic | LikelihoodModel::Softmax { .. } => {}
            LikelihoodModel::PoissonLgcp { offset } => *offset = p[0],
            LikelihoodModel::Gprn {
                log_sigma_y,
                log_sigma_w,
                ..
            } => {
                *log_sigma_y = p[0];
                if let Some(w) = log_sigma_w {
                    *w = p[1];
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LikelihoodModel::Softmax { classes } => *classes >= 2,
            LikelihoodModel::Gprn { outputs, nodes, .. } => *outputs >= 1 && *nodes >= 1,
            LikelihoodModel::WarpedGaussian { terms, .. } => terms
                .iter()
                .all(|t| !t.log_a.is_nan() && t.log_a < f64::INFINITY && t.log_b.is_finite() && t.c.is_finite()),
            _ => true,
        };
        let finite = match self {
            LikelihoodModel::WarpedGaussian { log_noise_var, .. } => log_noise_var.is_finite(),
            _ => self.params().iter().all(|v| v.is_finite()),
        };
        if ok && finite {
            Ok(())
        } else {
            Err(Error::config(format!("invalid {} likelihood parameters", self.name())))
        }
    }

    /// Checks that `y` lies in the support of the likelihood.
    pub fn check_target(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.target_dim() {
            return Err(Error::data(format!(
                "{} likelihood expects {} target value(s), got {}",
                self.name(),
                self.target_dim(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite target"));
        }
        match self {
            LikelihoodModel::Logistic => {
                if y[0] != 0.0 && y[0] != 1.0 {
                    return Err(Error::data(format!("binary label must be 0 or 1, got {}", y[0])));
                }
            }
            LikelihoodModel::Softmax { classes } => {
                let c = y[0];
                if c < 0.0 || c.fract() != 0.0 || c >= *classes as f64 {
                    return Err(Error::data(format!("class index {c} outside 0..{}", classes - 1)));
                }
            }
            LikelihoodModel::PoissonLgcp { .. } => {
                if y[0] < 0.0 || y[0].fract() != 0.0 {
                    return Err(Error::data(format!(
                        "count must be a nonnegative integer, got {}",
                        y[0]
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// `log p(y | f, phi)`.
    pub fn log_pdf(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        self.check_target(y)?;
        if f.len() != self.num_latent() {
            return Err(Error::config(format!(
                "latent vector has length {}, expected {}",
                f.len(),
                self.num_latent()
            )));
        }
        Ok(self.log_pdf_unchecked(y, f))
    }

    /// `log_pdf` without support checks; callers validate targets up front.
    pub fn log_pdf_unchecked(&self, y: &[f64], f: &[f64]) -> f64 {
        match self {
            LikelihoodModel::Gaussian { log_noise_var } => gaussian_log_density(y[0], f[0], log_noise_var.exp()),
            LikelihoodModel::WarpedGaussian { log_noise_var, terms } => {
                let (t, dt) = warp(terms, y[0]);
                dt.ln() + gaussian_log_density(t, f[0], log_noise_var.exp())
            }
            LikelihoodModel::Logistic => {
                if y[0] == 1.0 {
                    -softplus(-f[0])
                } else {
                    -softplus(f[0])
                }
            }
            LikelihoodModel::Softmax { .. } => f[y[0] as usize] - log_sum_exp(f),
            LikelihoodModel::PoissonLgcp { offset } => {
                let eta = f[0] + offset;
                y[0] * eta - eta.exp() - ln_factorial(y[0])
            }
            LikelihoodModel::Gprn {
                outputs,
                nodes,
                log_sigma_y,
                log_sigma_w,
            } => {
                let (q, g) = (*nodes, &f[..*nodes]);
                let mut var = (2.0 * log_sigma_y).exp();
                if let Some(lw) = log_sigma_w {
                    var += (2.0 * lw).exp() * g.iter().map(|v| v * v).sum::<f64>();
                }
                (0..*outputs)
                    .map(|p| {
                        let w = &f[q + p * q..q + (p + 1) * q];
                        let mean: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
                        gaussian_log_density(y[p], mean, var)
                    })
                    .sum()
            }
        }
    }

    pub fn has_analytic_phi_grad(&self) -> bool {
        matches!(
            self,
            LikelihoodModel::Gaussian { .. } | LikelihoodModel::PoissonLgcp { .. }
        )
    }

    /// `d log p / d phi` in the stored parametrization.
    pub fn grad_phi_log_pdf(&self, y: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        self.log_pdf(y, f)?;
        Ok(self.grad_phi_unchecked(y, f))
    }

    pub fn grad_phi_unchecked(&self, y: &[f64], f: &[f64]) -> Vec<f64> {
        match self {
            LikelihoodModel::Gaussian { log_noise_var } => {
                let r = y[0] - f[0];
                vec![-0.5 + 0.5 * r * r / log_noise_var.exp()]
            }
            LikelihoodModel::PoissonLgcp { offset } => vec![y[0] - (f[0] + offset).exp()],
            _ => self.grad_phi_fd(y, f),
        }
    }

    /// Central finite differences, step `1e-6 * max(1, |phi_i|)`.
    pub fn grad_phi_fd(&self, y: &[f64], f: &[f64]) -> Vec<f64> {
        let p0 = self.params();
        let mut m = self.clone();
        let mut g = Vec::with_capacity(p0.len());
        let mut p = p0.clone();
        for i in 0..p0.len() {
            let h = 1e-6 * p0[i].abs().max(1.0);
            p[i] = p0[i] + h;
            m.set_params(&p);
            let up = m.log_pdf_unchecked(y, f);
            p[i] = p0[i] - h;
            m.set_params(&p);
            let down = m.log_pdf_unchecked(y, f);
            p[i] = p0[i];
            g.push((up - down) / (2.0 * h));
        }
        g
    }

    /// Summarizes the predictive distribution from weighted latent samples
    /// (rows of `samples`, weights summing to one).
    pub fn predictive_point(
        &self,
        samples: &DMatrix<f64>,
        weights: &[f64],
        y_obs: Option<&[f64]>,
    ) -> Result<PointPrediction> {
        assert_eq!(samples.nrows(), weights.len(), "one weight per sample");
        let rows: Vec<Vec<f64>> = samples.row_iter().map(|r| r.iter().cloned().collect()).collect();
        let log_density = match y_obs {
            Some(y) => {
                self.check_target(y)?;
                let terms: Vec<f64> = rows
                    .iter()
                    .zip(weights)
                    .map(|(f, w)| w.ln() + self.log_pdf_unchecked(y, f))
                    .collect();
                Some(log_sum_exp(&terms))
            }
            None => None,
        };
        let weighted_mean = |vals: &dyn Fn(&[f64]) -> f64| -> (f64, f64) {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (f, w) in rows.iter().zip(weights) {
                let v = vals(f);
                m1 += w * v;
                m2 += w * v * v;
            }
            (m1, (m2 - m1 * m1).max(0.0))
        };
        let pred = match self {
            LikelihoodModel::Gaussian { log_noise_var } => {
                let (m, v) = weighted_mean(&|f| f[0]);
                PointPrediction {
                    mean: vec![m],
                    variance: vec![v + log_noise_var.exp()],
                    class_probs: None,
                    log_density,
                }
            }
            LikelihoodModel::WarpedGaussian { terms, .. } => {
                let (m, v) = weighted_mean(&|f| warp_inverse(terms, f[0]));
                PointPrediction {
                    mean: vec![m],
                    variance: vec![v],
                    class_probs: None,
                    log_density,
                }
            }
            LikelihoodModel::PoissonLgcp { offset } => {
                let (m, v) = weighted_mean(&|f| (f[0] + offset).exp());
                PointPrediction {
                    mean: vec![m],
                    variance: vec![v + m],
                    class_probs: None,
                    log_density,
                }
            }
            LikelihoodModel::Gprn {
                outputs,
                nodes,
                log_sigma_y,
                log_sigma_w,
            } => {
                let q = *nodes;
                let mut mean = Vec::with_capacity(*outputs);
                let mut variance = Vec::with_capacity(*outputs);
                let (noise, _) = weighted_mean(&|f| {
                    let mut v = (2.0 * log_sigma_y).exp();
                    if let Some(lw) = log_sigma_w {
                        v += (2.0 * lw).exp() * f[..q].iter().map(|g| g * g).sum::<f64>();
                    }
                    v
                });
                for p in 0..*outputs {
                    let (m, v) = weighted_mean(&|f| {
                        f[q + p * q..q + (p + 1) * q]
                            .iter()
                            .zip(&f[..q])
                            .map(|(a, b)| a * b)
                            .sum()
                    });
                    mean.push(m);
                    variance.push(v + noise);
                }
                PointPrediction {
                    mean,
                    variance,
                    class_probs: None,
                    log_density,
                }
            }
            LikelihoodModel::Logistic => {
                let (p1, _) = weighted_mean(&|f| 1.0 / (1.0 + (-f[0]).exp()));
                PointPrediction {
                    mean: vec![if p1 > 0.5 { 1.0 } else { 0.0 }],
                    variance: vec![0.0],
                    class_probs: Some(vec![1.0 - p1, p1]),
                    log_density,
                }
            }
            LikelihoodModel::Softmax { classes } => {
                let mut probs = vec![0.0; *classes];
                for (f, w) in rows.iter().zip(weights) {
                    let lse = log_sum_exp(f);
                    for (p, fc) in probs.iter_mut().zip(f) {
                        *p += w * (fc - lse).exp();
                    }
                }
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc },
                    )
                    .0;
                PointPrediction {
                    mean: vec![best as f64],
                    variance: vec![0.0],
                    class_probs: Some(probs),
                    log_density,
                }
            }
        };
        Ok(pred)
    }
}

/// `t(y)` and `t'(y)` for the tanh warping.
pub fn warp(terms: &[WarpTerm], y: f64) -> (f64, f64) {
    let mut t = y;
    let mut dt = 1.0;
    for term in terms {
        let (a, b) = (term.log_a.exp(), term.log_b.exp());
        let th = (b * (y + term.c)).tanh();
        t += a * th;
        dt += a * b * (1.0 - th * th);
    }
    (t, dt)
}

/// Solves `t(y) = z` by bisection to an absolute tolerance of `1e-10`.
pub fn warp_inverse(terms: &[WarpTerm], z: f64) -> f64 {
    let spread: f64 = terms.iter().map(|t| t.log_a.exp()).sum();
    let (mut lo, mut hi) = (z - spread - 1e-12, z + spread + 1e-12);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if warp(terms, mid).0 < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
