//! Property tests for structural invariants.

use nalgebra::DMatrix;
use proptest::prelude::*;
use savigp::elbo::{elbo, ElboOptions, GradGroups};
use savigp::io::{kmeans_init, ModelArtifact, Standardization, SCHEMA_VERSION};
use savigp::kernel::SeArdKernel;
use savigp::likelihood::{warp, warp_inverse, LikelihoodModel, WarpTerm};
use savigp::packing::{pack, unpack, Group};
use savigp::posterior::{softmax, CovStructure};
use savigp::predict::{predict, prediction_state, PredictOptions};
use savigp::rng;
use savigp::verify::{random_instance, InstanceSpec};

fn structure(full: bool) -> CovStructure {
    if full {
        CovStructure::Full
    } else {
        CovStructure::Diagonal
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn kl_part_never_positive(seed in any::<u64>(), k in 1usize..4, m in 1usize..6, d in 1usize..4, full in any::<bool>()) {
        let mut r = rng::stream(&[seed]);
        let (model, data) = random_instance(&mut r, &InstanceSpec::sparse(k, m, d, structure(full)), LikelihoodModel::gaussian(0.3));
        let state = model.kernel_state(&data.x).unwrap();
        let opts = ElboOptions { samples: 10, groups: GradGroups::NONE, ..Default::default() };
        let rep = elbo(&model, &state, &data, &opts, None).unwrap();
        prop_assert!(rep.ent + rep.cross <= 1e-9 * (1.0 + rep.cross.abs()), "ent {} cross {}", rep.ent, rep.cross);
    }

    #[test]
    fn packing_round_trips(seed in any::<u64>(), k in 1usize..3, m in 1usize..5, full in any::<bool>()) {
        let mut r = rng::stream(&[seed]);
        let (mut model, _) = random_instance(&mut r, &InstanceSpec::sparse(k, m, 2, structure(full)), LikelihoodModel::warped(0.2, -1.0, 1.0));
        let groups = Group::ALL;
        let p = pack(&model, &groups);
        let before = model.clone();
        unpack(&mut model, &groups, &p).unwrap();
        prop_assert_eq!(&model, &before);
        prop_assert_eq!(pack(&model, &groups), p);
    }

    #[test]
    fn predictive_variance_exceeds_noise(seed in any::<u64>(), noise in 0.01f64..2.0, k in 1usize..3) {
        let mut r = rng::stream(&[seed]);
        let (model, data) = random_instance(&mut r, &InstanceSpec::sparse(k, 3, 2, CovStructure::Full), LikelihoodModel::gaussian(noise));
        let state = prediction_state(&model).unwrap();
        let preds = predict(&model, &state, &data.x, None, &PredictOptions::default()).unwrap();
        for p in preds {
            prop_assert!(p.point.variance[0] >= noise * (1.0 - 1e-12));
        }
    }

    #[test]
    fn standardization_inverts(m in matrix(7, 3)) {
        let s = Standardization::fit(&m);
        let back = s.invert(&s.apply(&m).unwrap()).unwrap();
        for (a, b) in back.iter().zip(m.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn softmax_is_a_distribution(raw in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let p = softmax(&raw);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn warp_inverse_undoes_warp(y in -20.0f64..20.0, la in -3.0f64..1.0, lb in -2.0f64..1.0, c in -2.0f64..2.0) {
        let terms = [WarpTerm { log_a: la, log_b: lb, c }];
        let (z, jac) = warp(&terms, y);
        prop_assert!(jac >= 1.0);
        prop_assert!((warp_inverse(&terms, z) - y).abs() < 1e-9 * (1.0 + y.abs()));
    }

    #[test]
    fn gram_is_symmetric_psd(x in matrix(6, 2), ell in 0.1f64..10.0, sf2 in 0.1f64..10.0) {
        let k = SeArdKernel::new(&[ell, 2.0 * ell], sf2).unwrap();
        let g = k.gram(&x, &x).unwrap();
        prop_assert_eq!(&g, &g.transpose());
        let min = g.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10 * sf2, "min eigenvalue {min}");
    }

    #[test]
    fn kmeans_is_deterministic(x in matrix(12, 2), m in 1usize..12, seed in any::<u64>()) {
        let a = kmeans_init(&x, m, seed).unwrap();
        prop_assert_eq!(a.shape(), (m, 2));
        prop_assert!(a.iter().all(|v| v.is_finite()));
        prop_assert_eq!(a, kmeans_init(&x, m, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn gaussian_predictive_density_integrates_to_one(seed in any::<u64>(), k in 1usize..4, noise in 0.05f64..1.0) {
        let mut r = rng::stream(&[seed]);
        let (model, data) = random_instance(&mut r, &InstanceSpec::sparse(k, 3, 1, CovStructure::Full), LikelihoodModel::gaussian(noise));
        let state = prediction_state(&model).unwrap();
        let x1 = data.x.rows(0, 1).into_owned();
        let p = predict(&model, &state, &x1, None, &PredictOptions::default()).unwrap();
        let (mu, sd) = (p[0].point.mean[0], p[0].point.variance[0].sqrt());
        let g = 4001;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / (g - 1) as f64;
        let xs = DMatrix::from_fn(g, 1, |_, _| x1[(0, 0)]);
        let ys = DMatrix::from_fn(g, 1, |i, _| lo + h * i as f64);
        let dens: Vec<f64> = predict(&model, &state, &xs, Some(&ys), &PredictOptions::default())
            .unwrap()
            .iter()
            .map(|p| p.point.log_density.unwrap().exp())
            .collect();
        let integral = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[g - 1]));
        prop_assert!((integral - 1.0).abs() <= 1e-3, "integral {integral}");
    }

    #[test]
    fn artifact_text_round_trips(seed in any::<u64>(), k in 1usize..3, full in any::<bool>()) {
        let mut r = rng::stream(&[seed]);
        let (model, data) = random_instance(&mut r, &InstanceSpec::sparse(k, 3, 2, structure(full)), LikelihoodModel::gaussian(0.5));
        let art = ModelArtifact {
            schema_version: SCHEMA_VERSION,
            seed,
            x_stats: Standardization::fit(&data.x),
            y_stats: Some(Standardization::fit(&data.y)),
            config: serde_json::json!({ "note": "property test" }),
            model,
        };
        let text = art.to_json().unwrap();
        let back = ModelArtifact::from_json(&text).unwrap();
        prop_assert_eq!(&back, &art);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}
