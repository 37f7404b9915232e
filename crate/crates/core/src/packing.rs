//! Flat parameter vectors for the optimizers.
//!
//! Segments, in order: raw mixture weights | means | covariance parameters
//! (variational group), kernel log-parameters (hyper), likelihood
//! parameters, inducing inputs. Every segment is already unconstrained, so
//! packing is a plain copy and the stored-parametrization gradients from
//! [`elbo`](crate::elbo::elbo) line up with it entry by entry.

use serde::{Deserialize, Serialize};

use crate::elbo::{GradGroups, Gradients};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Variational,
    Hyper,
    Likelihood,
    Inducing,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Variational, Group::Hyper, Group::Likelihood, Group::Inducing];

    pub fn name(self) -> &'static str {
        match self {
            Group::Variational => "variational",
            Group::Hyper => "hyper",
            Group::Likelihood => "likelihood",
            Group::Inducing => "inducing",
        }
    }
}

pub fn grad_groups(groups: &[Group]) -> GradGroups {
    GradGroups {
        variational: groups.contains(&Group::Variational),
        hyper: groups.contains(&Group::Hyper),
        likelihood: groups.contains(&Group::Likelihood),
        inducing: groups.contains(&Group::Inducing),
    }
}

fn segment(model: &Model, group: Group) -> Vec<f64> {
    match group {
        Group::Variational => {
            let post = &model.posterior;
            let mut v: Vec<f64> = post.raw_weights.iter().copied().collect();
            v.extend(post.means_vec());
            v.extend(post.cov_vec());
            v
        }
        Group::Hyper => model.kernels.iter().flat_map(|k| k.params()).collect(),
        Group::Likelihood => model.likelihood.params(),
        Group::Inducing => model
            .inducing
            .z
            .iter()
            .flat_map(|z| {
                z.row_iter()
                    .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

pub fn segment_len(model: &Model, group: Group) -> usize {
    match group {
        Group::Variational => {
            let post = &model.posterior;
            post.num_components()
                + post.num_components() * post.num_latent() * post.num_inducing()
                + post.num_cov_params()
        }
        Group::Hyper => model.kernels.iter().map(|k| k.num_params()).sum(),
        Group::Likelihood => model.likelihood.num_params(),
        Group::Inducing => model.inducing.z.iter().map(|z| z.len()).sum(),
    }
}

pub fn pack(model: &Model, groups: &[Group]) -> Vec<f64> {
    groups.iter().flat_map(|g| segment(model, *g)).collect()
}

pub fn unpack(model: &mut Model, groups: &[Group], p: &[f64]) -> Result<()> {
    let expected: usize = groups.iter().map(|g| segment_len(model, *g)).sum();
    if p.len() != expected {
        return Err(Error::config(format!(
            "parameter vector has length {}, expected {expected}",
            p.len()
        )));
    }
    let mut rest = p;
    for &g in groups {
        let (cur, tail) = rest.split_at(segment_len(model, g));
        rest = tail;
        match g {
            Group::Variational => {
                let post = &mut model.posterior;
                let k = post.num_components();
                let nm = k * post.num_latent() * post.num_inducing();
                post.raw_weights.copy_from_slice(&cur[..k]);
                post.set_means_vec(&cur[k..k + nm]);
                post.set_cov_vec(&cur[k + nm..]);
            }
            Group::Hyper => {
                let mut off = 0;
                for kern in &mut model.kernels {
                    let np = kern.num_params();
                    kern.set_params(&cur[off..off + np]);
                    off += np;
                }
            }
            Group::Likelihood => model.likelihood.set_params(cur),
            Group::Inducing => {
                let mut it = cur.iter();
                for z in &mut model.inducing.z {
                    for r in 0..z.nrows() {
                        for c in 0..z.ncols() {
                            z[(r, c)] = *it.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradient laid out like [`pack`] for the same groups.
pub fn pack_gradient(g: &Gradients, groups: &[Group]) -> Vec<f64> {
    let mut out = Vec::new();
    for group in groups {
        match group {
            Group::Variational => {
                out.extend(&g.raw_weights);
                out.extend(&g.means);
                out.extend(&g.cov);
            }
            Group::Hyper => out.extend(&g.hyper),
            Group::Likelihood => out.extend(&g.likelihood),
            Group::Inducing => out.extend(&g.inducing),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SeArdKernel;
    use crate::likelihood::LikelihoodModel;
    use crate::posterior::{CovStructure, InducingConfig, MixturePosterior};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(structure: CovStructure) -> Model {
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.5, -0.3, 1.2, 0.7]);
        Model {
            kernels: vec![SeArdKernel::new(&[1.0, 2.0], 1.5).unwrap(); 2],
            inducing: InducingConfig::sparse(vec![z.clone(), z]).unwrap(),
            posterior: MixturePosterior::new(2, 2, 3, structure).unwrap(),
            likelihood: LikelihoodModel::Gprn {
                outputs: 1,
                nodes: 1,
                log_sigma_y: -1.0,
                log_sigma_w: Some(-2.0),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for structure in [CovStructure::Full, CovStructure::Diagonal] {
            let mut m = model(structure);
            let p: Vec<f64> = (0..pack(&m, &Group::ALL).len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            unpack(&mut m, &Group::ALL, &p).unwrap();
            assert_eq!(pack(&m, &Group::ALL), p);
            assert!(unpack(&mut m, &Group::ALL, &p[1..]).is_err());
        }
    }

    #[test]
    fn single_group_leaves_others_untouched() {
        let mut m = model(CovStructure::Full);
        let before = m.clone();
        let mut p = pack(&m, &[Group::Hyper]);
        p[0] += 0.5;
        unpack(&mut m, &[Group::Hyper], &p).unwrap();
        assert_eq!(m.posterior, before.posterior);
        assert_eq!(m.inducing, before.inducing);
        assert_ne!(m.kernels, before.kernels);
    }
}
