mod common;

use common::{max_rel_err, random_model, Spec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use savigp::elbo::{elbo, kl_report, ElboOptions, EllMode};
use savigp::likelihood::{LikelihoodModel, WarpTerm};
use savigp::model::{Data, Model};
use savigp::oracles::fd_gradient;
use savigp::packing::{grad_groups, pack, pack_gradient, unpack, Group};
use savigp::posterior::CovStructure;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
// Entries whose magnitude is below this are compared absolutely.
const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy)]
enum Objective {
    Kl,
    Analytic,
    MonteCarlo { samples: usize },
}

fn value_and_grad(model: &Model, data: &Data, groups: &[Group], obj: Objective) -> (f64, Vec<f64>) {
    let state = model.kernel_state(&data.x).unwrap();
    let gg = grad_groups(groups);
    let rep = match obj {
        Objective::Kl => kl_report(model, &state, data, gg).unwrap(),
        Objective::Analytic => {
            let opts = ElboOptions {
                mode: EllMode::AnalyticGaussian,
                groups: gg,
                ..Default::default()
            };
            elbo(model, &state, data, &opts, None).unwrap()
        }
        Objective::MonteCarlo { samples } => {
            let opts = ElboOptions {
                samples,
                seed: 11,
                groups: gg,
                ..Default::default()
            };
            elbo(model, &state, data, &opts, None).unwrap()
        }
    };
    (rep.total, pack_gradient(&rep.grads, groups))
}

fn check(model: &Model, data: &Data, groups: &[Group], obj: Objective, label: &str) {
    let (_, g) = value_and_grad(model, data, groups, obj);
    let p0 = pack(model, groups);
    assert_eq!(g.len(), p0.len(), "{label}: gradient length");
    let fd = fd_gradient(
        |p| {
            let mut m = model.clone();
            unpack(&mut m, groups, p).unwrap();
            value_and_grad(&m, data, groups, obj).0
        },
        &p0,
        H,
    );
    let (err, idx) = max_rel_err(&g, &fd, FLOOR);
    assert!(
        err <= TOL,
        "{label}: entry {idx} analytic {} vs fd {} (rel err {err:e})",
        g[idx],
        fd[idx]
    );
}

fn spec(k: usize, m: usize, d: usize, structure: CovStructure) -> Spec {
    Spec {
        components: k,
        inducing: m,
        dim: d,
        n: 6,
        structure,
        dense: false,
        lambda: false,
    }
}

fn softmax2() -> LikelihoodModel {
    LikelihoodModel::Softmax { classes: 2 }
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for structure in [CovStructure::Full, CovStructure::Diagonal] {
        for k in 1..=2 {
            for (q_lik, d) in [(LikelihoodModel::gaussian(0.3), 1), (softmax2(), 2)] {
                for m in [1, 3, 4] {
                    let (model, data) = random_model(&mut rng, &spec(k, m, d, structure), q_lik.clone());
                    let groups = [Group::Variational, Group::Hyper, Group::Inducing];
                    check(
                        &model,
                        &data,
                        &groups,
                        Objective::Kl,
                        &format!("{structure:?} K={k} M={m} D={d}"),
                    );
                }
            }
        }
    }
}

#[test]
fn analytic_elbo_gradients_match_finite_differences_sparse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for structure in [CovStructure::Full, CovStructure::Diagonal] {
        for k in 1..=2 {
            for d in 1..=2 {
                let (model, data) = random_model(&mut rng, &spec(k, 3, d, structure), LikelihoodModel::gaussian(0.4));
                check(
                    &model,
                    &data,
                    &Group::ALL,
                    Objective::Analytic,
                    &format!("{structure:?} K={k} D={d}"),
                );
            }
        }
    }
}

#[test]
fn analytic_elbo_gradients_match_finite_differences_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for structure in [CovStructure::Full, CovStructure::Diagonal] {
        let mut s = spec(2, 0, 2, structure);
        s.dense = true;
        s.n = 5;
        let (model, data) = random_model(&mut rng, &s, LikelihoodModel::gaussian(0.4));
        let groups = [Group::Variational, Group::Hyper, Group::Likelihood];
        check(
            &model,
            &data,
            &groups,
            Objective::Analytic,
            &format!("dense {structure:?}"),
        );
    }
}

#[test]
fn lambda_parametrization_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for dense in [false, true] {
        let mut s = spec(1, 3, 2, CovStructure::Full);
        s.lambda = true;
        s.dense = dense;
        s.n = 5;
        let (model, data) = random_model(&mut rng, &s, LikelihoodModel::gaussian(0.5));
        let groups: Vec<Group> = if dense {
            vec![Group::Variational, Group::Hyper, Group::Likelihood]
        } else {
            Group::ALL.to_vec()
        };
        check(
            &model,
            &data,
            &groups,
            Objective::Kl,
            &format!("lambda kl dense={dense}"),
        );
        check(
            &model,
            &data,
            &groups,
            Objective::Analytic,
            &format!("lambda analytic dense={dense}"),
        );
    }
}

// Under a fixed sample stream the samples do not depend on the likelihood
// parameters, so the Monte Carlo estimate is a smooth function of them.
#[test]
fn likelihood_parameter_gradients_under_fixed_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let liks = vec![
        LikelihoodModel::gaussian(0.3),
        LikelihoodModel::WarpedGaussian {
            log_noise_var: (0.2f64).ln(),
            terms: vec![
                WarpTerm {
                    log_a: 0.1,
                    log_b: -0.2,
                    c: 0.3,
                },
                WarpTerm {
                    log_a: -0.5,
                    log_b: 0.4,
                    c: -0.7,
                },
            ],
        },
        LikelihoodModel::PoissonLgcp { offset: 0.2 },
        LikelihoodModel::Gprn {
            outputs: 2,
            nodes: 1,
            log_sigma_y: -0.7,
            log_sigma_w: Some(-1.2),
        },
    ];
    for lik in liks {
        let name = lik.name();
        let (model, data) = random_model(&mut rng, &spec(2, 2, 1, CovStructure::Full), lik);
        if model.likelihood.num_params() == 0 {
            continue;
        }
        check(
            &model,
            &data,
            &[Group::Likelihood],
            Objective::MonteCarlo { samples: 400 },
            &format!("phi {name}"),
        );
    }
}

#[test]
fn dense_mode_ell_has_no_kernel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = spec(1, 0, 2, CovStructure::Full);
    s.dense = true;
    let (model, data) = random_model(&mut rng, &s, LikelihoodModel::Logistic);
    let state = model.kernel_state(&data.x).unwrap();
    let rep = elbo(
        &model,
        &state,
        &data,
        &ElboOptions {
            samples: 200,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    assert!(rep.hyper_from_ell.iter().all(|g| *g == 0.0));
    let kl = kl_report(&model, &state, &data, savigp::elbo::GradGroups::ALL).unwrap();
    assert_eq!(rep.grads.hyper, kl.grads.hyper);
}
