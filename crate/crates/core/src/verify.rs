//! Self-checks run by `savigp verify` and the acceptance tests. Each check
//! pits the engine against an independent oracle from [`crate::oracles`].

use web_time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::elbo::{elbo, ell_estimate, entropy_bound, kl_report, ElboOptions, EllMode, GradGroups};
use crate::error::{Error, Result};
use crate::io::{build_dataset, kmeans_init, Standardization, TargetSpec};
use crate::kernel::SeArdKernel;
use crate::likelihood::{LikelihoodModel, Task, WarpTerm};
use crate::model::{Data, Model, PosteriorKind};
use crate::optimizer::{fit, OptimizerConfig, OptimizerMode};
use crate::oracles::{
    analytic_gaussian_ell, exact_gp_regression, fd_gradient, fit_exact_gp, gaussian_entropy, mc_mixture_entropy,
    naive_joint_ell_grad, rel_err,
};
use crate::packing::{grad_groups, pack, pack_gradient, unpack, Group};
use crate::posterior::{reparam_covariance, CovFactor, CovStructure, InducingConfig, MixturePosterior};
use crate::predict::{evaluate, predict, prediction_state, PredictOptions};

/// Finite-difference step and tolerance for gradient checks.
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
/// Gradient entries smaller than `FD_FLOOR * max(1, |f|)` are compared
/// absolutely: central-difference roundoff grows with the objective value.
pub const FD_FLOOR: f64 = 1e-4;
/// Smallest eigenvalue of `Kzz / sf2` accepted for random instances.
pub const MIN_EIG_REL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    ExactGp,
    Variance,
    All,
}

impl Suite {
    pub fn criteria(self) -> Vec<u32> {
        match self {
            Suite::Gradients => vec![1, 2, 3, 6, 9, 10],
            Suite::ExactGp => vec![4, 5, 12],
            Suite::Variance => vec![7, 8],
            Suite::All => (1..=12).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} [{}] {} ({:.1}s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub fn name(id: u32) -> &'static str {
    match id {
        1 => "KL gradients vs finite differences",
        2 => "KL sign",
        3 => "entropy bound",
        4 => "MC vs analytic Gaussian ELL",
        5 => "exact GP recovery",
        6 => "dense-mode hyperparameter gradients",
        7 => "control-variate variance reduction",
        8 => "marginal vs joint estimator variance",
        9 => "minibatch identity",
        10 => "lambda covariance representation",
        11 => "end-to-end smoke",
        12 => "Boston-shaped regression vs exact GP",
        _ => "unknown",
    }
}

/// Runs one criterion. Errors count as failures.
pub fn run(id: u32) -> Outcome {
    let start = Instant::now();
    let res = match id {
        1 => kl_gradients(),
        2 => kl_sign(),
        3 => entropy_bound_check(),
        4 => mc_vs_analytic_ell(),
        5 => exact_gp_recovery(),
        6 => dense_hyper_gradients(),
        7 => control_variates(),
        8 => marginal_vs_joint(),
        9 => minibatch_identity(),
        10 => lambda_representation(),
        11 => end_to_end(),
        12 => boston_shaped(),
        _ => Err(Error::config(format!("no criterion {id}"))),
    };
    let (passed, detail) = match res {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        name: name(id),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(suite: Suite) -> Vec<Outcome> {
    suite.criteria().into_iter().map(run).collect()
}

type Check = Result<(bool, String)>;

/// Shape of a random test instance.
#[derive(Clone, Debug)]
pub struct InstanceSpec {
    pub components: usize,
    pub inducing: usize,
    pub dim: usize,
    pub n: usize,
    pub structure: CovStructure,
    pub dense: bool,
    pub lambda: bool,
}

impl InstanceSpec {
    pub fn sparse(components: usize, inducing: usize, dim: usize, structure: CovStructure) -> Self {
        InstanceSpec {
            components,
            inducing,
            dim,
            n: 6,
            structure,
            dense: false,
            lambda: false,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Random posterior parameters with moderate means and covariances.
pub fn randomize_posterior(rng: &mut ChaCha8Rng, post: &mut MixturePosterior) {
    for w in post.raw_weights.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    for m in post.means.iter_mut().flatten() {
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for f in post.factors.iter_mut().flatten() {
        match f {
            CovFactor::Full(l) => {
                for i in 0..l.nrows() {
                    for c in 0..i {
                        l[(i, c)] = rng.random_range(-0.4..0.4);
                    }
                    l[(i, i)] = rng.random_range(-0.8..0.2);
                }
            }
            CovFactor::LogDiag(v) => {
                for x in v.iter_mut() {
                    *x = rng.random_range(-1.5..0.3);
                }
            }
        }
    }
    if let Some(lam) = &mut post.log_lambda {
        for x in lam.iter_mut().flat_map(|v| v.iter_mut()) {
            *x = rng.random_range(-1.5..1.0);
        }
    }
}

fn random_targets(rng: &mut ChaCha8Rng, lik: &LikelihoodModel, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, lik.target_dim(), |_, _| match lik {
        LikelihoodModel::Logistic => rng.random_range(0..2) as f64,
        LikelihoodModel::Softmax { classes } => rng.random_range(0..*classes) as f64,
        LikelihoodModel::PoissonLgcp { .. } => rng.random_range(0..5) as f64,
        _ => rng.random_range(-1.5..1.5),
    })
}

/// A random model and dataset. Instances with a nearly singular `Kzz` are
/// redrawn: central differences at step 1e-6 lose about `cond(Kzz) * 1e-10`
/// to roundoff, which would swamp a 1e-5 tolerance.
pub fn random_instance(rng: &mut ChaCha8Rng, spec: &InstanceSpec, lik: LikelihoodModel) -> (Model, Data) {
    let q = lik.num_latent();
    loop {
        let x = uniform(rng, spec.n, spec.dim, -2.0, 2.0);
        let y = random_targets(rng, &lik, spec.n);
        let data = Data::new(x.clone(), y).expect("valid random data");
        let kernels: Vec<SeArdKernel> = (0..q)
            .map(|_| {
                let ls: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(0.6..1.6)).collect();
                SeArdKernel::new(&ls, rng.random_range(0.5..2.0)).expect("valid kernel")
            })
            .collect();
        let inducing = if spec.dense {
            InducingConfig::dense(&x, q)
        } else {
            InducingConfig::sparse(
                (0..q)
                    .map(|_| uniform(rng, spec.inducing, spec.dim, -2.0, 2.0))
                    .collect(),
            )
            .expect("valid inducing inputs")
        };
        let m = inducing.num_inducing();
        let mut posterior = if spec.lambda {
            MixturePosterior::with_lambda(q, m, spec.n, 1.0).expect("valid posterior")
        } else {
            MixturePosterior::new(spec.components, q, m, spec.structure).expect("valid posterior")
        };
        randomize_posterior(rng, &mut posterior);
        let model = Model {
            kernels,
            inducing,
            posterior,
            likelihood: lik.clone(),
        };
        let well_conditioned = model.kernels.iter().zip(&model.inducing.z).all(|(k, z)| {
            k.gram(z, z)
                .map(|kzz| kzz.symmetric_eigen().eigenvalues.min() >= MIN_EIG_REL * k.signal_variance())
                .unwrap_or(false)
        });
        if well_conditioned && model.validate(&data).is_ok() {
            return (model, data);
        }
    }
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `value` over the packed `groups`.
pub fn fd_check<F>(model: &Model, groups: &[Group], grad: &[f64], mut value: F) -> f64
where
    F: FnMut(&Model) -> f64,
{
    let p0 = pack(model, groups);
    let floor = FD_FLOOR * value(model).abs().max(1.0);
    let fd = fd_gradient(
        |p| {
            let mut m = model.clone();
            unpack(&mut m, groups, p).expect("same layout");
            value(&m)
        },
        &p0,
        FD_STEP,
    );
    grad.iter()
        .zip(&fd)
        .map(|(a, b)| rel_err(*a, *b, floor))
        .fold(0.0, f64::max)
}

fn kl_value(model: &Model, data: &Data) -> f64 {
    model
        .kernel_state(&data.x)
        .and_then(|st| kl_report(model, &st, data, GradGroups::NONE))
        .map_or(f64::NAN, |r| r.total)
}

fn kl_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let groups = [Group::Variational, Group::Hyper, Group::Inducing];
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let structure = if i % 2 == 0 {
            CovStructure::Full
        } else {
            CovStructure::Diagonal
        };
        let k = rng.random_range(1..=2);
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=2);
        let lik = if rng.random_bool(0.5) {
            LikelihoodModel::gaussian(0.3)
        } else {
            LikelihoodModel::Softmax { classes: 2 }
        };
        let (model, data) = random_instance(&mut rng, &InstanceSpec::sparse(k, m, d, structure), lik);
        let state = model.kernel_state(&data.x)?;
        let rep = kl_report(&model, &state, &data, grad_groups(&groups))?;
        let g = pack_gradient(&rep.grads, &groups);
        worst = worst.max(fd_check(&model, &groups, &g, |m| kl_value(m, &data)));
    }
    Ok((
        worst <= FD_TOL,
        format!("100 instances, max rel err {worst:.2e} (tol {FD_TOL:e})"),
    ))
}

fn kl_sign() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut max_kl = f64::NEG_INFINITY;
    for i in 0..200 {
        let structure = if i % 2 == 0 {
            CovStructure::Full
        } else {
            CovStructure::Diagonal
        };
        let lik = if rng.random_bool(0.5) {
            LikelihoodModel::gaussian(0.3)
        } else {
            LikelihoodModel::Softmax { classes: 2 }
        };
        let mut spec = InstanceSpec::sparse(
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=3),
            structure,
        );
        spec.lambda = i % 10 == 0;
        spec.dense = i % 7 == 0;
        spec.n = rng.random_range(2..=8);
        let (model, data) = random_instance(&mut rng, &spec, lik);
        let state = model.kernel_state(&data.x)?;
        max_kl = max_kl.max(kl_report(&model, &state, &data, GradGroups::NONE)?.total);
    }
    Ok((max_kl <= 0.0, format!("200 configurations, max ent+cross {max_kl:.3e}")))
}

fn entropy_bound_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut ok = true;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_z = f64::NEG_INFINITY;
    for i in 0..20 {
        let structure = if i % 2 == 0 {
            CovStructure::Full
        } else {
            CovStructure::Diagonal
        };
        let q_lik = if i % 3 == 0 {
            LikelihoodModel::Softmax { classes: 2 }
        } else {
            LikelihoodModel::gaussian(0.3)
        };
        let m = rng.random_range(1..=4);
        let (one, data) = random_instance(&mut rng, &InstanceSpec::sparse(1, m, 1, structure), q_lik.clone());
        let state = one.kernel_state(&data.x)?;
        let view = one.posterior.materialize(&state)?;
        let gap = entropy_bound(&view)?.0 - gaussian_entropy(&view, 0);
        worst_gap = worst_gap.max(gap);
        ok &= gap <= 0.0;

        let (two, data) = random_instance(&mut rng, &InstanceSpec::sparse(2, m, 1, structure), q_lik);
        let state = two.kernel_state(&data.x)?;
        let view = two.posterior.materialize(&state)?;
        let bound = entropy_bound(&view)?.0;
        let (h, se) = mc_mixture_entropy(&view, 1_000_000, 500 + i)?;
        let z = (bound - h) / se;
        worst_z = worst_z.max(z);
        ok &= bound <= h + 3.0 * se;
    }
    Ok((
        ok,
        format!("K=1 max bound-exact {worst_gap:.3e}; K=2 max (bound-MC)/se {worst_z:.2}"),
    ))
}

fn dense_gaussian_instance(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> (Model, Data) {
    let mut spec = InstanceSpec::sparse(1, 0, 1, CovStructure::Full);
    spec.dense = true;
    spec.n = n;
    random_instance(rng, &spec, LikelihoodModel::gaussian(noise))
}

fn mc_vs_analytic_ell() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let noise = 0.5;
    let (model, data) = dense_gaussian_instance(&mut rng, 5, noise);
    let state = model.kernel_state(&data.x)?;
    let view = model.posterior.materialize(&state)?;
    let y = DVector::from_iterator(5, data.y.column(0).iter().copied());
    let (m, s) = (&view.means[0][0], view.covs[0][0].to_dense());
    let (value, gm, gs) = analytic_gaussian_ell(m, &s, noise, &y);
    let all: Vec<usize> = (0..5).collect();
    let opts = |samples, seed| ElboOptions {
        samples,
        seed,
        groups: GradGroups {
            variational: true,
            ..GradGroups::NONE
        },
        ..Default::default()
    };
    let est = ell_estimate(&model.likelihood, &view, &state, &data, &opts(1_000_000, 1), &all)?;
    let z_value = (est.value - value) / est.std_err;

    // Gradient error bars from independent replications.
    let reps = 20;
    let mut g_runs: Vec<Vec<f64>> = Vec::with_capacity(reps);
    for r in 0..reps {
        let e = ell_estimate(
            &model.likelihood,
            &view,
            &state,
            &data,
            &opts(50_000, 10 + r as u64),
            &all,
        )?;
        let mut v: Vec<f64> = e.grad.means[0][0].iter().copied().collect();
        v.extend(e.grad.covs[0][0].to_dense().iter());
        g_runs.push(v);
    }
    let mut want: Vec<f64> = gm.iter().copied().collect();
    want.extend(gs.iter());
    let mut worst_z: f64 = 0.0;
    let mut ok = z_value.abs() <= 3.0;
    for (i, w) in want.iter().enumerate() {
        let xs: Vec<f64> = g_runs.iter().map(|r| r[i]).collect();
        let (mean, se) = mean_se(&xs);
        let diff = (mean - w).abs();
        if diff > 3.0 * se + 1e-12 {
            ok = false;
        }
        if se > 0.0 {
            worst_z = worst_z.max(diff / se);
        }
    }
    Ok((
        ok,
        format!(
            "value z {z_value:.2}; max gradient |z| {worst_z:.2} over {} entries",
            want.len()
        ),
    ))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sample_var(xs: &[f64]) -> f64 {
    mean_se(xs).1.powi(2) * xs.len() as f64
}

/// Smooth 1-D regression data.
pub fn synthetic_regression(n: usize, noise_sd: f64, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| (2.0 * v).sin() + 0.3 * v + noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Data::new(
        DMatrix::from_column_slice(n, 1, &x),
        DMatrix::from_column_slice(n, 1, &y),
    )
    .expect("valid data")
}

fn dense_fg(data: &Data, lik: LikelihoodModel) -> Result<Model> {
    Model::init(
        data,
        lik,
        InducingConfig::dense(&data.x, 1),
        PosteriorKind::Mixture {
            components: 1,
            structure: CovStructure::Full,
        },
    )
}

fn exact_gp_recovery() -> Check {
    let data = synthetic_regression(50, 0.2, 105);
    let noise = 0.05;
    let kernel = SeArdKernel::new(&[1.0], 1.0)?;
    let y = DVector::from_iterator(50, data.y.column(0).iter().copied());
    let exact = exact_gp_regression(&data.x, &y, &kernel, noise)?;
    let mut detail = Vec::new();
    let mut ok = true;
    for (mode, samples, tol) in [
        (EllMode::AnalyticGaussian, 2, 1e-3),
        (EllMode::MonteCarlo, 10_000, 1e-2),
    ] {
        let mut model = dense_fg(&data, LikelihoodModel::gaussian(noise))?;
        model.kernels = vec![kernel.clone()];
        let cfg = OptimizerConfig {
            groups: vec![Group::Variational],
            ell_mode: mode,
            samples,
            group_tol: 1e-12,
            inner_iters: 2000,
            max_global_iters: 20,
            seed: 5,
            ..Default::default()
        };
        fit(&mut model, &data, &cfg)?;
        let state = model.kernel_state(&data.x)?;
        let view = model.posterior.materialize(&state)?;
        let m_err = (&view.means[0][0] - &exact.posterior.mean).norm() / exact.posterior.mean.norm();
        let s_err = (view.covs[0][0].to_dense() - &exact.posterior.cov).norm() / exact.posterior.cov.norm();
        ok &= m_err <= tol && s_err <= tol;
        detail.push(format!("{mode:?}: mean {m_err:.2e}, cov {s_err:.2e} (tol {tol:e})"));
    }
    Ok((ok, detail.join("; ")))
}

fn dense_hyper_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut zeros = true;
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let lik = if i % 2 == 0 {
            LikelihoodModel::Logistic
        } else {
            LikelihoodModel::gaussian(0.4)
        };
        let mut spec = InstanceSpec::sparse(1 + i % 2, 0, 2, CovStructure::Full);
        spec.dense = true;
        spec.n = 5;
        let (model, data) = random_instance(&mut rng, &spec, lik);
        let state = model.kernel_state(&data.x)?;
        let opts = ElboOptions {
            samples: 500,
            seed: 3,
            groups: GradGroups {
                hyper: true,
                ..GradGroups::NONE
            },
            ..Default::default()
        };
        let rep = elbo(&model, &state, &data, &opts, None)?;
        zeros &= rep.hyper_from_ell.iter().all(|g| *g == 0.0);
        // Under fixed samples the dense ELL does not move with the kernel, so
        // finite differences of the full MC objective see only the KL terms.
        let total = |m: &Model| {
            m.kernel_state(&data.x)
                .and_then(|st| {
                    elbo(
                        m,
                        &st,
                        &data,
                        &ElboOptions {
                            groups: GradGroups::NONE,
                            ..opts
                        },
                        None,
                    )
                })
                .map_or(f64::NAN, |r| r.total)
        };
        worst = worst.max(fd_check(&model, &[Group::Hyper], &rep.grads.hyper, total));
    }
    Ok((
        zeros && worst <= FD_TOL,
        format!("ELL theta-gradients all exactly zero: {zeros}; max rel err {worst:.2e}"),
    ))
}

fn control_variates() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut spec = InstanceSpec::sparse(2, 4, 1, CovStructure::Diagonal);
    spec.n = 1;
    let (model, data) = random_instance(&mut rng, &spec, LikelihoodModel::Logistic);
    let state = model.kernel_state(&data.x)?;
    let view = model.posterior.materialize(&state)?;
    let runs = |cv: bool| -> Result<Vec<Vec<f64>>> {
        (0..50u64)
            .map(|r| {
                let opts = ElboOptions {
                    samples: 200,
                    seed: 1000 + r,
                    control_variates: cv,
                    groups: GradGroups {
                        variational: true,
                        ..GradGroups::NONE
                    },
                    ..Default::default()
                };
                let e = ell_estimate(&model.likelihood, &view, &state, &data, &opts, &[0])?;
                Ok(e.grad.means.iter().flatten().flat_map(|m| m.iter().copied()).collect())
            })
            .collect()
    };
    let (with, without) = (runs(true)?, runs(false)?);
    let comps = with[0].len();
    let mut better = 0;
    let mut ratios = Vec::new();
    for c in 0..comps {
        let vw = sample_var(&with.iter().map(|r| r[c]).collect::<Vec<_>>());
        let vo = sample_var(&without.iter().map(|r| r[c]).collect::<Vec<_>>());
        if vw < vo {
            better += 1;
        }
        ratios.push(vw / vo);
    }
    let frac = better as f64 / comps as f64;
    let mean_ratio = ratios.iter().sum::<f64>() / comps as f64;
    Ok((
        frac >= 0.9,
        format!("{better}/{comps} components reduced, mean variance ratio {mean_ratio:.3}"),
    ))
}

fn marginal_vs_joint() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut spec = InstanceSpec::sparse(1, 0, 1, CovStructure::Full);
    spec.dense = true;
    spec.n = 5;
    let (model, data) = random_instance(&mut rng, &spec, LikelihoodModel::Logistic);
    let state = model.kernel_state(&data.x)?;
    let view = model.posterior.materialize(&state)?;
    let all: Vec<usize> = (0..5).collect();
    let (samples, reps, trials) = (50, 20, 50);
    // Components: the five mean entries and the five diagonal covariance entries.
    let mut wins = [0usize; 10];
    let mut seed = 0u64;
    for _ in 0..trials {
        let mut marg: Vec<Vec<f64>> = Vec::with_capacity(reps);
        let mut joint: Vec<Vec<f64>> = Vec::with_capacity(reps);
        for _ in 0..reps {
            seed += 1;
            let opts = ElboOptions {
                samples,
                seed,
                control_variates: false,
                groups: GradGroups {
                    variational: true,
                    ..GradGroups::NONE
                },
                ..Default::default()
            };
            let e = ell_estimate(&model.likelihood, &view, &state, &data, &opts, &all)?;
            let s = e.grad.covs[0][0].to_dense();
            marg.push(
                e.grad.means[0][0]
                    .iter()
                    .copied()
                    .chain(s.diagonal().iter().copied())
                    .collect(),
            );
            let (gm, gs) = naive_joint_ell_grad(&model, &state, &data, samples, seed)?;
            joint.push(gm[0].iter().copied().chain(gs[0].diagonal().iter().copied()).collect());
        }
        for (c, w) in wins.iter_mut().enumerate() {
            let vm = sample_var(&marg.iter().map(|r| r[c]).collect::<Vec<_>>());
            let vj = sample_var(&joint.iter().map(|r| r[c]).collect::<Vec<_>>());
            if vm <= vj {
                *w += 1;
            }
        }
    }
    let worst = *wins.iter().min().unwrap_or(&0);
    Ok((
        worst as f64 >= 0.9 * trials as f64,
        format!("worst component: marginal variance lower in {worst}/{trials} trials"),
    ))
}

fn minibatch_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let liks = [
        LikelihoodModel::Softmax { classes: 2 },
        LikelihoodModel::warped(0.3, -1.5, 1.5),
        LikelihoodModel::Logistic,
    ];
    let mut worst: f64 = 0.0;
    for lik in liks {
        let mut spec = InstanceSpec::sparse(2, 3, 2, CovStructure::Full);
        spec.n = 12;
        let (model, data) = random_instance(&mut rng, &spec, lik);
        let state = model.kernel_state(&data.x)?;
        let groups: Vec<Group> = Group::ALL
            .into_iter()
            .filter(|g| *g != Group::Likelihood || model.likelihood.num_params() > 0)
            .collect();
        let opts = ElboOptions {
            samples: 100,
            seed: 4,
            groups: grad_groups(&groups),
            ..Default::default()
        };
        let kl = pack_gradient(&kl_report(&model, &state, &data, grad_groups(&groups))?.grads, &groups);
        let ell_grad = |batch: Option<&[usize]>| -> Result<Vec<f64>> {
            let g = pack_gradient(&elbo(&model, &state, &data, &opts, batch)?.grads, &groups);
            Ok(g.iter().zip(&kl).map(|(a, b)| a - b).collect())
        };
        let full = ell_grad(None)?;
        let mut order: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = vec![0.0; full.len()];
        for chunk in [&order[..5], &order[5..9], &order[9..]] {
            let mut b = chunk.to_vec();
            b.sort_unstable();
            let g = ell_grad(Some(&b))?;
            let scale = b.len() as f64 / 12.0;
            for (s, v) in sum.iter_mut().zip(&g) {
                *s += scale * v;
            }
        }
        worst = worst.max(sum.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((worst <= 1e-10, format!("max abs difference {worst:.2e}")))
}

fn lambda_representation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut psd = true;
    let mut min_eig_rel = f64::INFINITY;
    for i in 0..100 {
        let mut spec = InstanceSpec::sparse(1, rng.random_range(1..=5), 2, CovStructure::Full);
        spec.lambda = true;
        spec.dense = i % 4 == 0;
        spec.n = rng.random_range(2..=10);
        let (model, data) = random_instance(&mut rng, &spec, LikelihoodModel::gaussian(0.3));
        let state = model.kernel_state(&data.x)?;
        let lambda = DVector::from_fn(spec.n, |_, _| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(-4.0f64..3.0).exp()
            }
        });
        let s = reparam_covariance(&state.latents[0], &lambda)?;
        let sym = (&s - s.transpose()).abs().max() <= 1e-12 * s.abs().max();
        let eig = SymmetricEigen::new((&s + s.transpose()) * 0.5).eigenvalues.min();
        let rel = eig / s.norm();
        min_eig_rel = min_eig_rel.min(rel);
        psd &= sym && rel >= -1e-10;
    }
    let (model, data) = random_instance(
        &mut rng,
        &InstanceSpec {
            lambda: true,
            ..InstanceSpec::sparse(1, 4, 2, CovStructure::Full)
        },
        LikelihoodModel::gaussian(0.3),
    );
    let state = model.kernel_state(&data.x)?;
    let s0 = reparam_covariance(&state.latents[0], &DVector::zeros(data.len()))?;
    let zero_err = (&s0 - &state.latents[0].kzz).abs().max();

    let (q, n) = (2, 7);
    let post = MixturePosterior::with_lambda(q, 3, n, 1.0)?;
    let stored: usize = post.log_lambda.as_ref().map_or(0, |l| l.iter().map(|v| v.len()).sum());
    let count_ok = stored == q * n && post.num_cov_params() == q * n;
    Ok((
        psd && zero_err <= 1e-10 && count_ok,
        format!("min eigenvalue / norm {min_eig_rel:.2e}; |S(0) - Kzz| {zero_err:.2e}; Q*N parameters: {count_ok}"),
    ))
}

fn end_to_end() -> Check {
    let (a, da) = blobs_logistic()?;
    let (b, db) = warped_identity()?;
    let (c, dc) = lgcp_monotone()?;
    Ok((a && b && c, format!("{da}; {db}; {dc}")))
}

fn blobs_logistic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut draw = |n: usize| {
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DMatrix::zeros(n, 1);
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.5 } else { 2.5 };
            x[(i, 0)] = centre + rng.sample::<f64, _>(StandardNormal);
            x[(i, 1)] = centre + rng.sample::<f64, _>(StandardNormal);
            y[(i, 0)] = c as f64;
        }
        (x, y)
    };
    let (xtr, ytr) = draw(200);
    let (xte, yte) = draw(200);
    let ds = build_dataset(xtr, ytr, TargetSpec::Classes(Some(2)))?;
    let data = Data::new(ds.x.clone(), ds.y.clone())?;
    let z = kmeans_init(&data.x, 10, 1)?;
    let mut model = Model::init(
        &data,
        LikelihoodModel::Logistic,
        InducingConfig::sparse(vec![z])?,
        PosteriorKind::Mixture {
            components: 1,
            structure: CovStructure::Full,
        },
    )?;
    let cfg = OptimizerConfig {
        mode: OptimizerMode::Stochastic,
        max_global_iters: 50,
        batch_size: Some(20),
        samples: 200,
        seed: 2,
        ..Default::default()
    };
    fit(&mut model, &data, &cfg)?;
    let xs = ds.x_stats.apply(&xte)?;
    let state = prediction_state(&model)?;
    let preds = predict(
        &model,
        &state,
        &xs,
        Some(&yte),
        &PredictOptions { samples: 500, seed: 1 },
    )?;
    let points: Vec<_> = preds.into_iter().map(|p| p.point).collect();
    let err = evaluate(&points, &yte, Task::Classification, None)?
        .error_rate
        .unwrap_or(1.0);
    Ok((err <= 0.05, format!("blobs held-out error {err:.3}")))
}

fn warped_identity() -> Check {
    let train = synthetic_regression(60, 0.2, 112);
    let test = synthetic_regression(40, 0.2, 113);
    let zero_terms = vec![
        WarpTerm {
            log_a: f64::NEG_INFINITY,
            log_b: 0.0,
            c: -1.0,
        },
        WarpTerm {
            log_a: f64::NEG_INFINITY,
            log_b: 0.3,
            c: 1.0,
        },
    ];
    let noise = 0.05f64;
    let mut nlpd = Vec::new();
    for lik in [
        LikelihoodModel::gaussian(noise),
        LikelihoodModel::WarpedGaussian {
            log_noise_var: noise.ln(),
            terms: zero_terms,
        },
    ] {
        let z = kmeans_init(&train.x, 15, 3)?;
        let mut model = Model::init(
            &train,
            lik,
            InducingConfig::sparse(vec![z])?,
            PosteriorKind::Mixture {
                components: 1,
                structure: CovStructure::Full,
            },
        )?;
        // Likelihood parameters stay fixed: the warp has nothing to learn at a = 0.
        let cfg = OptimizerConfig {
            groups: vec![Group::Variational, Group::Hyper],
            samples: 500,
            max_global_iters: 10,
            seed: 8,
            ..Default::default()
        };
        fit(&mut model, &train, &cfg)?;
        let state = prediction_state(&model)?;
        let preds = predict(&model, &state, &test.x, Some(&test.y), &PredictOptions::default())?;
        let points: Vec<_> = preds.into_iter().map(|p| p.point).collect();
        nlpd.push(
            evaluate(&points, &test.y, Task::Regression, None)?
                .nlpd
                .unwrap_or(f64::NAN),
        );
    }
    let diff = (nlpd[0] - nlpd[1]).abs();
    Ok((
        diff <= 1e-3,
        format!("warped a=0 NLPD {:.4} vs Gaussian {:.4}", nlpd[1], nlpd[0]),
    ))
}

fn lgcp_monotone() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let n = 90;
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let rate = match i * 3 / n {
            0 => 2.0,
            1 => 8.0,
            _ => 3.0,
        };
        Poisson::new(rate).expect("positive rate").sample(&mut rng)
    });
    let ds = build_dataset(x, y, TargetSpec::Raw)?;
    let data = Data::new(ds.x, ds.y)?;
    let mean_count = data.y.mean().max(1e-3);
    let z = kmeans_init(&data.x, 12, 4)?;
    let mut model = Model::init(
        &data,
        LikelihoodModel::PoissonLgcp {
            offset: mean_count.ln(),
        },
        InducingConfig::sparse(vec![z])?,
        PosteriorKind::Mixture {
            components: 1,
            structure: CovStructure::Full,
        },
    )?;
    let cfg = OptimizerConfig {
        samples: 500,
        max_global_iters: 8,
        seed: 6,
        ..Default::default()
    };
    let trace = fit(&mut model, &data, &cfg)?;
    let totals: Vec<f64> = trace.records.iter().map(|r| r.total).collect();
    let monotone = totals.windows(2).all(|w| w[1] >= w[0]);
    Ok((
        monotone && totals.len() > 1,
        format!(
            "LGCP objective {:.3} -> {:.3} over {} records, monotone: {monotone}",
            totals[0],
            totals[totals.len() - 1],
            totals.len()
        ),
    ))
}

/// Regression data with the Boston housing shape: 506 rows, 13 inputs.
pub fn boston_shaped_data(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (506, 13);
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w: Vec<f64> = (0..d).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let y = DMatrix::from_fn(n, 1, |r, _| {
        let row = x.row(r);
        let lin: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
        (1.5 * row[0]).sin() + 0.5 * row[1] * row[2] + lin + 0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    (x, y)
}

fn boston_shaped() -> Check {
    let (x, y) = boston_shaped_data(115);
    let ds = build_dataset(
        x.rows(0, 300).into_owned(),
        y.rows(0, 300).into_owned(),
        TargetSpec::Standardized,
    )?;
    let ys = ds.y_stats.clone().unwrap_or_else(|| Standardization::identity(1));
    let xte = ds.x_stats.apply(&x.rows(300, 206).into_owned())?;
    let yte = ys.apply(&y.rows(300, 206).into_owned())?;
    let data = Data::new(ds.x.clone(), ds.y.clone())?;

    let yv = DVector::from_iterator(300, data.y.column(0).iter().copied());
    let (kern, noise) = fit_exact_gp(&data.x, &yv, &SeArdKernel::new(&[1.0; 13], 1.0)?, 0.1)?;
    let exact = exact_gp_regression(&data.x, &yv, &kern, noise)?;
    let yte_v = DVector::from_iterator(206, yte.column(0).iter().copied());
    let exact_nlpd = exact.nlpd(&xte, &yte_v)?;

    let mut detail = vec![format!("exact GP NLPD {exact_nlpd:.4}")];
    let mut ok = true;
    for sf in [1.0, 0.1] {
        let inducing = if sf == 1.0 {
            InducingConfig::dense(&data.x, 1)
        } else {
            InducingConfig::sparse(vec![kmeans_init(&data.x, 30, 1)?])?
        };
        let mut model = Model::init(
            &data,
            LikelihoodModel::gaussian(0.1),
            inducing,
            PosteriorKind::Mixture {
                components: 1,
                structure: CovStructure::Full,
            },
        )?;
        let cfg = OptimizerConfig {
            samples: 2000,
            max_global_iters: 15,
            inner_iters: 200,
            group_tol: 1e-4,
            seed: 9,
            joint_groups: true,
            ..Default::default()
        };
        fit(&mut model, &data, &cfg)?;
        let state = prediction_state(&model)?;
        let preds = predict(&model, &state, &xte, Some(&yte), &PredictOptions::default())?;
        let points: Vec<_> = preds.into_iter().map(|p| p.point).collect();
        let nlpd = evaluate(&points, &yte, Task::Regression, None)?
            .nlpd
            .unwrap_or(f64::NAN);
        let gap = (nlpd - exact_nlpd).abs();
        if sf == 1.0 {
            ok &= gap <= 0.1;
            detail.push(format!("dense FG NLPD {nlpd:.4} (gap {gap:.4}, tol 0.1)"));
        } else {
            detail.push(format!("SF 0.1 FG NLPD {nlpd:.4} (gap {gap:.4}, reported only)"));
        }
    }
    Ok((ok, detail.join("; ")))
}
