//! Predictive latent moments, Monte Carlo predictive densities and metrics.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{log_sum_exp, warp, LikelihoodModel, PointPrediction, Task};
use crate::model::Model;
use crate::posterior::{KernelState, PosteriorView, VARIANCE_FLOOR};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
// Separates prediction streams from training streams with the same seed.
const PREDICT_TAG: u64 = 0x7072_6564;

#[derive(Clone, Copy, Debug)]
pub struct PredictOptions {
    pub samples: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { samples: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    /// `(mean, variance)` of latent `j` under component `k`, indexed `[k][j]`.
    pub latent: Vec<Vec<(f64, f64)>>,
    pub point: PointPrediction,
}

/// Kernel state for prediction, built from the inducing inputs alone.
///
/// The free-form Λ posterior in sparse mode depends on the training inputs;
/// use [`Model::kernel_state`] with those instead.
pub fn prediction_state(model: &Model) -> Result<KernelState> {
    if model.posterior.log_lambda.is_some() && !model.inducing.dense {
        return Err(Error::config(
            "the sparse lambda posterior needs the training inputs to predict",
        ));
    }
    model.kernel_state(&model.inducing.z[0])
}

/// Latent predictive moments at `xs` for every component and latent process.
/// Returned as `[point][k][j]`.
pub fn predictive_latent(
    model: &Model,
    state: &KernelState,
    view: &PosteriorView,
    xs: &DMatrix<f64>,
) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
    let (kk, q) = (view.num_components(), view.num_latent());
    let mut out = vec![vec![vec![(0.0, 0.0); q]; kk]; xs.nrows()];
    for (j, (kern, lat)) in model.kernels.iter().zip(&state.latents).enumerate() {
        let ksz = kern.gram(xs, &lat.z)?;
        // Row n of `a` is Kzz^-1 k(Z, x_n).
        let a = lat.solve(&ksz.transpose()).transpose();
        let sf2 = kern.signal_variance();
        for n in 0..xs.nrows() {
            let an = a.row(n).transpose();
            let prior = (sf2 - ksz.row(n).dot(&a.row(n))).max(0.0);
            for k in 0..kk {
                let mu = an.dot(&view.means[k][j]);
                let var = (prior + view.covs[k][j].quad(&an)).max(VARIANCE_FLOOR);
                out[n][k][j] = (mu, var);
            }
        }
    }
    Ok(out)
}

/// Predictive summaries at `xs`. With `ys`, log predictive densities at the
/// observed targets are included.
///
/// The Gaussian likelihood is handled in closed form, as is the warped
/// Gaussian density. Everything else mixes `samples` draws per component
/// from the diagonal latent predictive.
pub fn predict(
    model: &Model,
    state: &KernelState,
    xs: &DMatrix<f64>,
    ys: Option<&DMatrix<f64>>,
    opts: &PredictOptions,
) -> Result<Vec<PredictionResult>> {
    if opts.samples == 0 {
        return Err(Error::config("prediction needs at least one sample"));
    }
    let lik = &model.likelihood;
    if let Some(y) = ys {
        if y.nrows() != xs.nrows() || y.ncols() != lik.target_dim() {
            return Err(Error::data(format!(
                "expected {} x {} targets, got {} x {}",
                xs.nrows(),
                lik.target_dim(),
                y.nrows(),
                y.ncols()
            )));
        }
    }
    let view = model.posterior.materialize(state)?;
    let latent = predictive_latent(model, state, &view, xs)?;
    let work = |n: usize| -> Result<PredictionResult> {
        let y_obs: Option<Vec<f64>> = ys.map(|y| y.row(n).iter().copied().collect());
        let point = point_prediction(lik, &view.weights, &latent[n], y_obs.as_deref(), opts, n).map_err(|e| {
            Error::Datapoint {
                index: n,
                message: e.to_string(),
            }
        })?;
        Ok(PredictionResult {
            latent: latent[n].clone(),
            point,
        })
    };
    #[cfg(feature = "parallel")]
    let res: Vec<Result<PredictionResult>> = (0..xs.nrows()).into_par_iter().map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let res: Vec<Result<PredictionResult>> = (0..xs.nrows()).map(work).collect();
    res.into_iter().collect()
}

fn point_prediction(
    lik: &LikelihoodModel,
    weights: &[f64],
    latent: &[Vec<(f64, f64)>],
    y_obs: Option<&[f64]>,
    opts: &PredictOptions,
    n: usize,
) -> Result<PointPrediction> {
    if let LikelihoodModel::Gaussian { log_noise_var } = lik {
        let s2 = log_noise_var.exp();
        let mean: f64 = weights.iter().zip(latent).map(|(w, c)| w * c[0].0).sum();
        let second: f64 = weights
            .iter()
            .zip(latent)
            .map(|(w, c)| w * (c[0].0 * c[0].0 + c[0].1))
            .sum();
        let log_density = match y_obs {
            Some(y) => {
                lik.check_target(y)?;
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(latent)
                    .map(|(w, c)| {
                        let v = c[0].1 + s2;
                        let r = y[0] - c[0].0;
                        w.ln() - 0.5 * (LN_2PI + v.ln() + r * r / v)
                    })
                    .collect();
                Some(log_sum_exp(&terms))
            }
            None => None,
        };
        return Ok(PointPrediction {
            mean: vec![mean],
            variance: vec![(second - mean * mean).max(0.0) + s2],
            class_probs: None,
            log_density,
        });
    }
    let (kk, q, s) = (latent.len(), latent[0].len(), opts.samples);
    let mut samples = DMatrix::zeros(kk * s, q);
    let mut w = Vec::with_capacity(kk * s);
    let mut rng = rng::stream(&[opts.seed, PREDICT_TAG, n as u64]);
    for (k, comp) in latent.iter().enumerate() {
        for i in 0..s {
            for (j, &(mu, var)) in comp.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                samples[(k * s + i, j)] = mu + var.sqrt() * e;
            }
            w.push(weights[k] / s as f64);
        }
    }
    if let LikelihoodModel::WarpedGaussian { log_noise_var, terms } = lik {
        // The latent predictive is Gaussian, so the warped density is exact.
        let mut point = lik.predictive_point(&samples, &w, None)?;
        if let Some(y) = y_obs {
            lik.check_target(y)?;
            let (t, dt) = warp(terms, y[0]);
            let s2 = log_noise_var.exp();
            let comps: Vec<(f64, f64)> = latent.iter().map(|c| (c[0].0, c[0].1 + s2)).collect();
            point.log_density = Some(gaussian_mixture_log_density(weights, &comps, t) + dt.ln());
        }
        return Ok(point);
    }
    lik.predictive_point(&samples, &w, y_obs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    /// Mean squared error over the training-set variance, averaged over outputs.
    pub sse: Option<f64>,
    pub rmse: Option<f64>,
    pub nlpd: Option<f64>,
    pub error_rate: Option<f64>,
    pub nlp: Option<f64>,
    /// `-log p(y*|x*)` for every test point, when densities are available.
    pub per_point_nlpd: Option<Vec<f64>>,
}

/// Metrics for `points` against `targets` (one row per point).
///
/// `train_var` holds the per-output training variance used to standardize
/// the squared error; without it the test-target variance is used.
pub fn evaluate(
    points: &[PointPrediction],
    targets: &DMatrix<f64>,
    task: Task,
    train_var: Option<&[f64]>,
) -> Result<MetricsReport> {
    if points.is_empty() {
        return Err(Error::data("empty test set"));
    }
    if points.len() != targets.nrows() {
        return Err(Error::data(format!(
            "{} predictions for {} targets",
            points.len(),
            targets.nrows()
        )));
    }
    let n = points.len() as f64;
    let per_point: Option<Vec<f64>> = points.iter().map(|p| p.log_density.map(|l| -l)).collect();
    let mean_nl = per_point.as_ref().map(|v| v.iter().sum::<f64>() / n);
    let mut report = MetricsReport {
        task,
        sse: None,
        rmse: None,
        nlpd: None,
        error_rate: None,
        nlp: None,
        per_point_nlpd: per_point,
    };
    match task {
        Task::Regression => {
            let p = targets.ncols();
            if points.iter().any(|pt| pt.mean.len() != p) {
                return Err(Error::data("prediction and target widths differ"));
            }
            let mut sq = 0.0;
            let mut sse = 0.0;
            for c in 0..p {
                let col: f64 = points
                    .iter()
                    .enumerate()
                    .map(|(i, pt)| (targets[(i, c)] - pt.mean[c]).powi(2))
                    .sum();
                sq += col;
                let var = match train_var {
                    Some(v) => v[c],
                    None => crate::model::column_variance(targets, c),
                };
                sse += col / n / var.max(f64::MIN_POSITIVE);
            }
            report.rmse = Some((sq / (n * p as f64)).sqrt());
            report.sse = Some(sse / p as f64);
            report.nlpd = mean_nl;
        }
        Task::Classification => {
            let wrong = points
                .iter()
                .enumerate()
                .filter(|(i, pt)| pt.mean[0] != targets[(*i, 0)])
                .count();
            report.error_rate = Some(wrong as f64 / n);
            report.nlp = mean_nl;
        }
    }
    Ok(report)
}

/// Log density at `y` of a univariate Gaussian mixture with `(mean, variance)` components.
pub fn gaussian_mixture_log_density(weights: &[f64], comps: &[(f64, f64)], y: f64) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(comps)
        .map(|(w, (m, v))| w.ln() - 0.5 * (LN_2PI + v.ln() + (y - m).powi(2) / v))
        .collect();
    log_sum_exp(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SeArdKernel;
    use crate::posterior::{CovFactor, CovStructure, InducingConfig, MixturePosterior};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn sparse_model(lik: LikelihoodModel, k: usize) -> Model {
        let q = lik.num_latent();
        let z = DMatrix::from_row_slice(3, 1, &[-1.0, 0.2, 1.3]);
        Model {
            kernels: vec![SeArdKernel::new(&[0.8], 1.4).unwrap(); q],
            inducing: InducingConfig::sparse(vec![z; q]).unwrap(),
            posterior: MixturePosterior::new(k, q, 3, CovStructure::Full).unwrap(),
            likelihood: lik,
        }
    }

    /// Sets component covariances to `Kzz`, which recovers the prior.
    fn set_prior(model: &mut Model, state: &KernelState) {
        for row in model.posterior.factors.iter_mut() {
            for (j, f) in row.iter_mut().enumerate() {
                let mut l = state.latents[j].chol.l();
                for i in 0..l.nrows() {
                    l[(i, i)] = l[(i, i)].ln();
                }
                *f = CovFactor::Full(l);
            }
        }
    }

    #[test]
    fn prior_recovery() {
        let mut model = sparse_model(LikelihoodModel::gaussian(0.1), 1);
        let state = prediction_state(&model).unwrap();
        set_prior(&mut model, &state);
        let view = model.posterior.materialize(&state).unwrap();
        let xs = DMatrix::from_row_slice(4, 1, &[-2.0, 0.0, 0.5, 3.0]);
        let lat = predictive_latent(&model, &state, &view, &xs).unwrap();
        for p in lat {
            assert_eq!(p[0][0].0, 0.0);
            assert!(close(p[0][0].1, 1.4, 1e-8), "{}", p[0][0].1);
        }
    }

    #[test]
    fn dense_mode_at_a_training_input() {
        let x = DMatrix::from_row_slice(3, 1, &[-1.0, 0.4, 1.5]);
        let mut post = MixturePosterior::new(1, 1, 3, CovStructure::Full).unwrap();
        post.means[0][0] = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        if let CovFactor::Full(l) = &mut post.factors[0][0] {
            l[(1, 0)] = 0.2;
            l[(1, 1)] = -0.5;
        }
        let model = Model {
            kernels: vec![SeArdKernel::new(&[0.9], 1.0).unwrap()],
            inducing: InducingConfig::dense(&x, 1),
            posterior: post,
            likelihood: LikelihoodModel::gaussian(0.1),
        };
        let state = prediction_state(&model).unwrap();
        let view = model.posterior.materialize(&state).unwrap();
        let lat = predictive_latent(&model, &state, &view, &x).unwrap();
        let s = view.covs[0][0].to_dense();
        for n in 0..3 {
            let (mu, var) = lat[n][0][0];
            assert!(close(mu, view.means[0][0][n], 1e-5));
            assert!(close(var, s[(n, n)], 1e-5));
        }
    }

    #[test]
    fn matches_explicit_inverse_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = sparse_model(LikelihoodModel::gaussian(0.1), 1);
        model.posterior.means[0][0] = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        if let CovFactor::Full(l) = &mut model.posterior.factors[0][0] {
            for i in 0..3 {
                for c in 0..=i {
                    l[(i, c)] = rng.random_range(-0.5..0.5);
                }
            }
        }
        let state = prediction_state(&model).unwrap();
        let view = model.posterior.materialize(&state).unwrap();
        let xs = DMatrix::from_row_slice(2, 1, &[0.7, -0.4]);
        let lat = predictive_latent(&model, &state, &view, &xs).unwrap();
        let kern = &model.kernels[0];
        let z = &model.inducing.z[0];
        let kinv = state.latents[0].kzz.clone().try_inverse().unwrap();
        let s = view.covs[0][0].to_dense();
        for n in 0..2 {
            let ks = kern.gram(&xs.rows(n, 1).into_owned(), z).unwrap().transpose();
            let kss = kern.signal_variance();
            let mu = (ks.transpose() * &kinv * &view.means[0][0])[0];
            let var = kss - (ks.transpose() * &kinv * &ks)[0] + (ks.transpose() * &kinv * &s * &kinv * &ks)[0];
            assert!(close(lat[n][0][0].0, mu, 1e-8));
            assert!(close(lat[n][0][0].1, var, 1e-8));
        }
    }

    #[test]
    fn identical_components_match_a_single_one() {
        let xs = DMatrix::from_row_slice(3, 1, &[-0.5, 0.1, 0.9]);
        let ys = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 1.0]);
        let mut one = sparse_model(LikelihoodModel::Logistic, 1);
        one.posterior.means[0][0] = DVector::from_vec(vec![0.5, -0.2, 0.9]);
        let mut two = sparse_model(LikelihoodModel::Logistic, 2);
        two.posterior.means = vec![one.posterior.means[0].clone(); 2];
        let state = prediction_state(&one).unwrap();
        let opts = PredictOptions { samples: 4000, seed: 5 };
        let a = predict(&one, &state, &xs, Some(&ys), &opts).unwrap();
        let b = predict(&two, &state, &xs, Some(&ys), &opts).unwrap();
        for (p, r) in a.iter().zip(&b) {
            assert_eq!(p.latent[0], r.latent[1]);
            let (pa, pb) = (p.point.log_density.unwrap(), r.point.log_density.unwrap());
            assert!((pa - pb).abs() < 0.02, "{pa} vs {pb}");
        }

        let g1 = sparse_model(LikelihoodModel::gaussian(0.2), 1);
        let mut g2 = sparse_model(LikelihoodModel::gaussian(0.2), 2);
        g2.posterior.means = vec![g1.posterior.means[0].clone(); 2];
        let a = predict(&g1, &state, &xs, Some(&ys), &opts).unwrap();
        let b = predict(&g2, &state, &xs, Some(&ys), &opts).unwrap();
        for (p, r) in a.iter().zip(&b) {
            assert!(close(p.point.mean[0], r.point.mean[0], 1e-12));
            assert!(close(p.point.variance[0], r.point.variance[0], 1e-12));
            assert!(close(p.point.log_density.unwrap(), r.point.log_density.unwrap(), 1e-12));
        }
    }

    #[test]
    fn separated_softmax_saturates() {
        let mut model = sparse_model(LikelihoodModel::Softmax { classes: 2 }, 1);
        let state = prediction_state(&model).unwrap();
        // Means so large that the class-0 latent dominates everywhere near Z.
        let kzz = &state.latents[0].kzz;
        model.posterior.means[0][0] = kzz * DVector::from_element(3, 40.0);
        model.posterior.means[0][1] = kzz * DVector::from_element(3, -40.0);
        for f in model.posterior.factors[0].iter_mut() {
            if let CovFactor::Full(l) = f {
                l.fill_diagonal(-6.0);
            }
        }
        let xs = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let res = predict(&model, &state, &xs, None, &PredictOptions::default()).unwrap();
        for r in res {
            let p = r.point.class_probs.unwrap();
            assert!((p[0] - 1.0).abs() < 1e-3 && p[1] < 1e-3);
            assert_eq!(r.point.mean[0], 0.0);
        }
    }

    #[test]
    fn metric_examples() {
        let pts: Vec<PointPrediction> = [0.0, 1.0]
            .iter()
            .map(|&m| PointPrediction {
                mean: vec![m],
                variance: vec![1.0],
                class_probs: None,
                log_density: Some(-0.5 * LN_2PI),
            })
            .collect();
        let y = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let r = evaluate(&pts, &y, Task::Regression, Some(&[1.0])).unwrap();
        assert_eq!(r.rmse, Some(0.0));
        assert!((r.nlpd.unwrap() - 0.918939).abs() < 1e-6);
        let c = evaluate(&pts, &y, Task::Classification, None).unwrap();
        assert_eq!(c.error_rate, Some(0.0));
        assert!(evaluate(&[], &DMatrix::zeros(0, 1), Task::Regression, None).is_err());
    }

    #[test]
    fn constant_predictor_has_unit_sse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let train: Vec<f64> = (0..4000)
            .map(|_| 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (train.len() - 1) as f64;
        let test: Vec<f64> = (0..4000)
            .map(|_| 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pts: Vec<PointPrediction> = test
            .iter()
            .map(|_| PointPrediction {
                mean: vec![mean],
                variance: vec![var],
                class_probs: None,
                log_density: None,
            })
            .collect();
        let y = DMatrix::from_column_slice(test.len(), 1, &test);
        let r = evaluate(&pts, &y, Task::Regression, Some(&[var])).unwrap();
        assert!((r.sse.unwrap() - 1.0).abs() < 0.1);
    }
}
