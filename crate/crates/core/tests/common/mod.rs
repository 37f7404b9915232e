#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use savigp::kernel::SeArdKernel;
use savigp::likelihood::LikelihoodModel;
use savigp::model::{Data, Model};
use savigp::posterior::{CovFactor, CovStructure, InducingConfig, MixturePosterior};

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Random posterior with moderate means and well-conditioned covariances.
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
        for v in lam.iter_mut() {
            for x in v.iter_mut() {
                *x = rng.random_range(-1.5..1.0);
            }
        }
    }
}

/// Targets in the support of `lik`.
pub fn random_targets(rng: &mut ChaCha8Rng, lik: &LikelihoodModel, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, lik.target_dim(), |_, _| match lik {
        LikelihoodModel::Logistic => rng.random_range(0..2) as f64,
        LikelihoodModel::Softmax { classes } => rng.random_range(0..*classes) as f64,
        LikelihoodModel::PoissonLgcp { .. } => rng.random_range(0..5) as f64,
        _ => rng.random_range(-1.5..1.5),
    })
}

pub struct Spec {
    pub components: usize,
    pub inducing: usize,
    pub dim: usize,
    pub n: usize,
    pub structure: CovStructure,
    pub dense: bool,
    pub lambda: bool,
}

pub fn random_model(rng: &mut ChaCha8Rng, spec: &Spec, lik: LikelihoodModel) -> (Model, Data) {
    let q = lik.num_latent();
    let x = uniform_matrix(rng, spec.n, spec.dim, -2.0, 2.0);
    let y = random_targets(rng, &lik, spec.n);
    let data = Data::new(x.clone(), y).unwrap();
    let kernels: Vec<SeArdKernel> = (0..q)
        .map(|_| {
            let ls: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(0.6..1.6)).collect();
            SeArdKernel::new(&ls, rng.random_range(0.5..2.0)).unwrap()
        })
        .collect();
    let inducing = if spec.dense {
        InducingConfig::dense(&x, q)
    } else {
        InducingConfig::sparse(
            (0..q)
                .map(|_| uniform_matrix(rng, spec.inducing, spec.dim, -2.0, 2.0))
                .collect(),
        )
        .unwrap()
    };
    let m = inducing.num_inducing();
    let mut posterior = if spec.lambda {
        MixturePosterior::with_lambda(q, m, spec.n, 1.0).unwrap()
    } else {
        MixturePosterior::new(spec.components, q, m, spec.structure).unwrap()
    };
    randomize_posterior(rng, &mut posterior);
    let model = Model {
        kernels,
        inducing,
        posterior,
        likelihood: lik,
    };
    model.validate(&data).unwrap();
    (model, data)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let e = savigp::oracles::rel_err(*x, *y, floor);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
