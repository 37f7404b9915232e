//! Browser demo: fit a sparse GP regressor or classifier to points placed on
//! a canvas, and draw prior samples. The `*_curve`/`*_grid` functions are
//! plain Rust so they can be tested natively; the `#[wasm_bindgen]` wrappers
//! only convert errors.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use savigp::error::{Error, Result};
use savigp::io::{build_dataset, kmeans_init, TargetSpec};
use savigp::kernel::SeArdKernel;
use savigp::likelihood::LikelihoodModel;
use savigp::linalg::factor_with_jitter;
use savigp::model::{Data, Model, PosteriorKind};
use savigp::optimizer::{fit, OptimizerConfig};
use savigp::posterior::{CovStructure, InducingConfig};
use savigp::predict::{predict, prediction_state, PredictOptions};
use savigp::rng;
use wasm_bindgen::prelude::*;

const SAMPLES: usize = 300;
const PRED_SAMPLES: usize = 200;

fn check_inducing(n: usize, m: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::data("add some points first"));
    }
    if m == 0 {
        return Err(Error::config("need at least one inducing point"));
    }
    Ok(m.min(n))
}

fn train(
    x_raw: DMatrix<f64>,
    y_raw: DMatrix<f64>,
    spec: TargetSpec,
    lik: LikelihoodModel,
    m: usize,
    iterations: usize,
) -> Result<(Model, savigp::io::Dataset)> {
    let m = check_inducing(x_raw.nrows(), m)?;
    let ds = build_dataset(x_raw, y_raw, spec)?;
    let data = Data::new(ds.x.clone(), ds.y.clone())?;
    let z = kmeans_init(&ds.x, m, 0)?;
    let kind = PosteriorKind::Mixture {
        components: 1,
        structure: CovStructure::Full,
    };
    let mut model = Model::init(&data, lik, InducingConfig::sparse(vec![z])?, kind)?;
    let cfg = OptimizerConfig {
        max_global_iters: iterations,
        samples: SAMPLES,
        group_tol: 1e-4,
        ..Default::default()
    };
    fit(&mut model, &data, &cfg)?;
    Ok((model, ds))
}

/// Predictive mean and variance of a 1-D Gaussian regressor at `grid`,
/// returned as `[means..., variances...]` on the raw target scale.
pub fn regression_curve(
    xs: &[f64],
    ys: &[f64],
    num_inducing: usize,
    iterations: usize,
    grid: &[f64],
) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::data("x and y lengths differ"));
    }
    let x = DMatrix::from_column_slice(xs.len(), 1, xs);
    let y = DMatrix::from_column_slice(ys.len(), 1, ys);
    let (model, ds) = train(
        x,
        y,
        TargetSpec::Standardized,
        LikelihoodModel::gaussian(0.1),
        num_inducing,
        iterations,
    )?;
    let xg = ds.x_stats.apply(&DMatrix::from_column_slice(grid.len(), 1, grid))?;
    let state = prediction_state(&model)?;
    let preds = predict(
        &model,
        &state,
        &xg,
        None,
        &PredictOptions {
            samples: PRED_SAMPLES,
            seed: 0,
        },
    )?;
    let ys = ds.y_stats.as_ref().expect("regression targets are standardized");
    let (mu, sd) = (ys.mean[0], ys.std[0]);
    let mut out: Vec<f64> = preds.iter().map(|p| mu + sd * p.point.mean[0]).collect();
    out.extend(preds.iter().map(|p| sd * sd * p.point.variance[0]));
    Ok(out)
}

/// Probability of class 1 on a `res`x`res` grid over `[lo, hi]^2`, row-major
/// with the first coordinate varying fastest. `points` is `[x0, y0, x1, y1, ...]`.
pub fn classifier_grid(
    points: &[f64],
    labels: &[u8],
    num_inducing: usize,
    iterations: usize,
    lo: f64,
    hi: f64,
    res: usize,
) -> Result<Vec<f64>> {
    if points.len() != 2 * labels.len() {
        return Err(Error::data("need one label per point"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    if res < 2 {
        return Err(Error::config("grid needs at least two cells per side"));
    }
    let x = DMatrix::from_row_slice(labels.len(), 2, points);
    let y = DMatrix::from_iterator(labels.len(), 1, labels.iter().map(|&l| l as f64));
    let (model, ds) = train(
        x,
        y,
        TargetSpec::Classes(Some(2)),
        LikelihoodModel::Logistic,
        num_inducing,
        iterations,
    )?;
    let step = (hi - lo) / (res - 1) as f64;
    let grid = DMatrix::from_fn(res * res, 2, |r, c| {
        let i = if c == 0 { r % res } else { r / res };
        lo + step * i as f64
    });
    let state = prediction_state(&model)?;
    let preds = predict(
        &model,
        &state,
        &ds.x_stats.apply(&grid)?,
        None,
        &PredictOptions {
            samples: PRED_SAMPLES,
            seed: 0,
        },
    )?;
    Ok(preds
        .iter()
        .map(|p| p.point.class_probs.as_ref().map_or(f64::NAN, |c| c[1]))
        .collect())
}

/// `count` draws from a zero-mean GP prior with a squared-exponential kernel,
/// each evaluated at every grid point, concatenated.
pub fn prior_draws(lengthscale: f64, signal_variance: f64, grid: &[f64], count: usize, seed: u64) -> Result<Vec<f64>> {
    let kernel = SeArdKernel::new(&[lengthscale], signal_variance)?;
    let x = DMatrix::from_column_slice(grid.len(), 1, grid);
    let (chol, _, _) = factor_with_jitter(&kernel.gram(&x, &x)?, signal_variance)?;
    let l = chol.l();
    let mut rng = rng::stream(&[seed]);
    let mut out = Vec::with_capacity(count * grid.len());
    for _ in 0..count {
        let e = DVector::from_fn(grid.len(), |_, _| StandardNormal.sample(&mut rng));
        out.extend((&l * e).iter());
    }
    Ok(out)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = fitRegression)]
pub fn fit_regression(
    xs: &[f64],
    ys: &[f64],
    num_inducing: usize,
    iterations: usize,
    grid: &[f64],
) -> std::result::Result<Vec<f64>, JsError> {
    regression_curve(xs, ys, num_inducing, iterations, grid).map_err(js)
}

#[wasm_bindgen(js_name = fitClassifier)]
pub fn fit_classifier(
    points: &[f64],
    labels: &[u8],
    num_inducing: usize,
    iterations: usize,
    lo: f64,
    hi: f64,
    res: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    classifier_grid(points, labels, num_inducing, iterations, lo, hi, res).map_err(js)
}

#[wasm_bindgen(js_name = samplePrior)]
pub fn sample_prior(
    lengthscale: f64,
    signal_variance: f64,
    grid: &[f64],
    count: usize,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    prior_draws(lengthscale, signal_variance, grid, count, seed as u64).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_tracks_the_points() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0 * 6.0 - 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 10.0 + x.sin()).collect();
        let out = regression_curve(&xs, &ys, 8, 20, &[-1.0, 0.0, 1.0]).unwrap();
        for (i, x) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
            assert!(
                (out[i] - 10.0 - x.sin()).abs() < 0.2,
                "{} vs {}",
                out[i],
                10.0 + x.sin()
            );
            assert!(out[3 + i] > 0.0);
        }
    }

    #[test]
    fn classifier_separates_halves() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 19.0;
            pts.extend([-0.6 - 0.3 * t, 0.8 * t - 0.4]);
            labels.push(0);
            pts.extend([0.6 + 0.3 * t, 0.4 - 0.8 * t]);
            labels.push(1);
        }
        let p = classifier_grid(&pts, &labels, 6, 10, -1.0, 1.0, 3).unwrap();
        assert_eq!(p.len(), 9);
        // middle row: left, centre, right
        assert!(p[3] < 0.3 && p[5] > 0.7, "{p:?}");
    }

    #[test]
    fn prior_draws_are_reproducible() {
        let grid = [0.0, 0.5, 1.0];
        let a = prior_draws(1.0, 2.0, &grid, 2, 7).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, prior_draws(1.0, 2.0, &grid, 2, 7).unwrap());
        assert_ne!(a, prior_draws(1.0, 2.0, &grid, 2, 8).unwrap());
    }

    #[test]
    fn errors_are_reported() {
        assert!(regression_curve(&[], &[], 3, 5, &[0.0]).is_err());
        assert!(regression_curve(&[1.0], &[1.0, 2.0], 3, 5, &[0.0]).is_err());
        assert!(classifier_grid(&[0.0, 0.0], &[2], 1, 5, -1.0, 1.0, 4).is_err());
        assert!(prior_draws(-1.0, 1.0, &[0.0], 1, 0).is_err());
    }
}
