//! Training data and the bundle of everything that gets optimized.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::SeArdKernel;
use crate::likelihood::LikelihoodModel;
use crate::posterior::{build_kernel_state, CovStructure, InducingConfig, KernelState, MixturePosterior};

/// Inputs `x` (N x D) and targets `y` (N x P; class index column for softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Data {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::data("dataset is empty"));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::data(format!(
                "{} input rows but {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite value in dataset"));
        }
        Ok(Data { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn target(&self, n: usize) -> Vec<f64> {
        self.y.row(n).iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kernels: Vec<SeArdKernel>,
    pub inducing: InducingConfig,
    pub posterior: MixturePosterior,
    pub likelihood: LikelihoodModel,
}

/// How the posterior is parametrized at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosteriorKind {
    /// `components` Gaussians with the given covariance structure.
    Mixture { components: usize, structure: CovStructure },
    /// One full Gaussian with one covariance weight per datapoint.
    Lambda,
}

impl Model {
    /// Default initialization: zero means, identity covariances, uniform
    /// weights, lengthscales at the per-dimension input spread and signal
    /// variance at the output variance for Gaussian-type regression (1 otherwise).
    pub fn init(
        data: &Data,
        likelihood: LikelihoodModel,
        inducing: InducingConfig,
        kind: PosteriorKind,
    ) -> Result<Self> {
        let q = likelihood.num_latent();
        if inducing.num_latent() != q {
            return Err(Error::config(format!(
                "likelihood needs {q} latent processes, inducing config has {}",
                inducing.num_latent()
            )));
        }
        let d = data.dim();
        let n = data.len() as f64;
        let lengthscales: Vec<f64> = (0..d)
            .map(|c| {
                let col = data.x.column(c);
                let mean = col.mean();
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let sf2 = match likelihood {
            LikelihoodModel::Gaussian { .. } | LikelihoodModel::WarpedGaussian { .. } => {
                let v = column_variance(&data.y, 0);
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        let kernel = SeArdKernel::new(&lengthscales, sf2)?;
        let m = inducing.num_inducing();
        let posterior = match kind {
            PosteriorKind::Mixture { components, structure } => MixturePosterior::new(components, q, m, structure)?,
            PosteriorKind::Lambda => MixturePosterior::with_lambda(q, m, data.len(), 1.0)?,
        };
        let model = Model {
            kernels: vec![kernel; q],
            inducing,
            posterior,
            likelihood,
        };
        model.validate(data)?;
        Ok(model)
    }

    pub fn num_latent(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_state(&self, x: &DMatrix<f64>) -> Result<KernelState> {
        build_kernel_state(&self.kernels, &self.inducing, x)
    }

    /// Checks shapes and invariants of every part against the data.
    pub fn validate(&self, data: &Data) -> Result<()> {
        self.validate_shapes(data.dim())?;
        self.inducing.validate(&data.x)?;
        if let Some(lam) = &self.posterior.log_lambda {
            if lam.iter().any(|l| l.len() != data.len()) {
                return Err(Error::config("lambda length must equal the number of datapoints"));
            }
        }
        if data.y.ncols() != self.likelihood.target_dim() {
            return Err(Error::data(format!(
                "{} likelihood expects {} target column(s), got {}",
                self.likelihood.name(),
                self.likelihood.target_dim(),
                data.y.ncols()
            )));
        }
        for n in 0..data.len() {
            self.likelihood
                .check_target(&data.target(n))
                .map_err(|e| Error::Datapoint {
                    index: n,
                    message: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Data-independent validation, used when loading a saved model.
    pub fn validate_shapes(&self, dim: usize) -> Result<()> {
        self.likelihood.validate()?;
        self.posterior.validate()?;
        let q = self.likelihood.num_latent();
        if self.kernels.len() != q || self.inducing.num_latent() != q || self.posterior.num_latent() != q {
            return Err(Error::config(format!(
                "{} likelihood needs {q} latent processes",
                self.likelihood.name()
            )));
        }
        if self.posterior.num_inducing() != self.inducing.num_inducing() {
            return Err(Error::config("posterior and inducing inputs disagree on M"));
        }
        for k in &self.kernels {
            k.validate()?;
            if k.dim() != dim {
                return Err(Error::config(format!(
                    "kernel has dimension {}, data has {dim}",
                    k.dim()
                )));
            }
        }
        if self.inducing.z[0].ncols() != dim {
            return Err(Error::config("inducing inputs have the wrong dimension"));
        }
        Ok(())
    }
}

pub fn column_variance(m: &DMatrix<f64>, c: usize) -> f64 {
    let col = m.column(c);
    let n = col.len() as f64;
    let mean = col.mean();
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}
