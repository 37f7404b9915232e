//! Squared-exponential ARD covariance function and its derivatives.
//!
//! All positive hyperparameters are stored in log space. The parameter
//! vector of a kernel is `[log l_1, .., log l_D, log sf2]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeArdKernel {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
}

impl SeArdKernel {
    pub fn new(lengthscales: &[f64], signal_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::config("kernel needs at least one input dimension"));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0))
            || !(signal_variance.is_finite() && signal_variance > 0.0)
        {
            return Err(Error::config("kernel parameters must be finite and positive"));
        }
        Ok(SeArdKernel {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
        })
    }

    /// Rebuild from the flat log-parameter vector.
    pub fn from_params(params: &[f64]) -> Result<Self> {
        if params.len() < 2 {
            return Err(Error::config("kernel parameter vector too short"));
        }
        let k = SeArdKernel {
            log_lengthscales: params[..params.len() - 1].to_vec(),
            log_signal_variance: params[params.len() - 1],
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.log_lengthscales.is_empty()
            && self
                .log_lengthscales
                .iter()
                .chain(std::iter::once(&self.log_signal_variance))
                .all(|p| p.is_finite() && p.exp().is_finite() && p.exp() > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid kernel parameters {self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn num_params(&self) -> usize {
        self.dim() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.log_lengthscales.clone();
        p.push(self.log_signal_variance);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let d = self.dim();
        self.log_lengthscales.copy_from_slice(&params[..d]);
        self.log_signal_variance = params[d];
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscale(&self, d: usize) -> f64 {
        self.log_lengthscales[d].exp()
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }

    /// k(x, x2) = sf2 * exp(-0.5 * sum_d (x_d - x2_d)^2 / l_d^2)
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || x2.len() != self.dim() {
            return Err(Error::config(format!(
                "kernel expects {}-dimensional inputs, got {} and {}",
                self.dim(),
                x.len(),
                x2.len()
            )));
        }
        let inv = self.inv_sq_lengthscales();
        Ok(self.eval_scaled(x.iter().copied(), x2.iter().copied(), &inv))
    }

    fn eval_scaled(&self, x: impl Iterator<Item = f64>, x2: impl Iterator<Item = f64>, inv_sq: &[f64]) -> f64 {
        let r2: f64 = x.zip(x2).zip(inv_sq).map(|((a, b), w)| (a - b) * (a - b) * w).sum();
        self.signal_variance() * (-0.5 * r2).exp()
    }

    fn check_cols(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::config(format!(
                "input matrix has {} columns, kernel expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Gram matrix between the rows of `x1` and `x2`.
    pub fn gram(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_cols(x1)?;
        self.check_cols(x2)?;
        let inv = self.inv_sq_lengthscales();
        Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, l| {
            self.eval_scaled(x1.row(i).iter().copied(), x2.row(l).iter().copied(), &inv)
        }))
    }

    /// Elementwise derivative of `gram(x1, x2)` w.r.t. log-parameter `param`.
    pub fn gram_grad_hyper(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, param: usize) -> Result<DMatrix<f64>> {
        if param > self.dim() {
            return Err(Error::config(format!(
                "hyperparameter index {param} out of range (kernel has {})",
                self.num_params()
            )));
        }
        let mut k = self.gram(x1, x2)?;
        if param < self.dim() {
            let w = (-2.0 * self.log_lengthscales[param]).exp();
            for i in 0..x1.nrows() {
                for l in 0..x2.nrows() {
                    let d = x1[(i, param)] - x2[(l, param)];
                    k[(i, l)] *= d * d * w;
                }
            }
        }
        Ok(k)
    }

    /// `sum_{il} adj[i,l] * dK[i,l]/dtheta_p` for every log-parameter, given the
    /// precomputed `k12 = gram(x1, x2)` (possibly with jitter on its diagonal,
    /// which scales with the signal variance).
    pub fn hyper_grad_from_adjoint(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        k12: &DMatrix<f64>,
        adj: &DMatrix<f64>,
    ) -> Vec<f64> {
        let dim = self.dim();
        let inv = self.inv_sq_lengthscales();
        let mut g = vec![0.0; dim + 1];
        for l in 0..x2.nrows() {
            for i in 0..x1.nrows() {
                let w = adj[(i, l)] * k12[(i, l)];
                if w == 0.0 {
                    continue;
                }
                g[dim] += w;
                for d in 0..dim {
                    let diff = x1[(i, d)] - x2[(l, d)];
                    g[d] += w * diff * diff * inv[d];
                }
            }
        }
        g
    }

    /// Same as [`hyper_grad_from_adjoint`](Self::hyper_grad_from_adjoint) for
    /// the diagonal `k(x_n, x_n) = sf2`, which only depends on the signal variance.
    pub fn hyper_grad_from_diag_adjoint(&self, adj: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        g[self.dim()] = adj.sum::<f64>() * self.signal_variance();
        g
    }
}

/// Pairwise differences on dimension `d` divided by `l_d^2`:
/// `out[o, p] = (a[o, d] - b[p, d]) / l_d^2`.
pub fn scaled_differences(kernel: &SeArdKernel, a: &DMatrix<f64>, b: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let w = (-2.0 * kernel.log_lengthscales[d]).exp();
    DMatrix::from_fn(a.nrows(), b.nrows(), |o, p| (a[(o, d)] - b[(p, d)]) * w)
}

/// Per-datapoint inducing-input gradients of the two bilinear forms
/// `t1_n = v_n' dKzz w_n` and `t2_n = v_n' dk(Z, x_n)`.
///
/// Page `d` of each holds `d t_n / d Z[m, d]` at entry `(m, n)`.
#[derive(Clone, Debug)]
pub struct InducingPages {
    pub t1: Vec<DMatrix<f64>>,
    pub t2: Vec<DMatrix<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn grad_inducing_bilinear(
    kernel: &SeArdKernel,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    kxz: &DMatrix<f64>,
) -> Result<InducingPages> {
    let (m, n) = (z.nrows(), x.nrows());
    let shapes_ok = z.ncols() == kernel.dim()
        && x.ncols() == kernel.dim()
        && v.shape() == (m, n)
        && w.shape() == (m, n)
        && kzz.shape() == (m, m)
        && kxz.shape() == (n, m);
    if !shapes_ok {
        return Err(Error::config("shape mismatch in inducing-input gradient"));
    }
    let mut t1 = Vec::with_capacity(kernel.dim());
    let mut t2 = Vec::with_capacity(kernel.dim());
    for d in 0..kernel.dim() {
        let zk = scaled_differences(kernel, z, z, d).component_mul(kzz);
        let page1 = -(&zk * w).component_mul(v) - (&zk * v).component_mul(w);
        // dk(x_n, z_m)/dz_md = k(x_n, z_m) (x_nd - z_md) / l_d^2
        let xk = scaled_differences(kernel, x, z, d).component_mul(kxz);
        let page2 = xk.transpose().component_mul(v);
        t1.push(page1);
        t2.push(page2);
    }
    Ok(InducingPages { t1, t2 })
}

/// Inducing-input gradient `dL/dZ` (M x D) given adjoints of the loss w.r.t.
/// `Kzz` (M x M, entries treated as independent) and w.r.t. selected rows of
/// `Kxz`.
pub fn inducing_grad_from_adjoint(
    kernel: &SeArdKernel,
    z: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    gzz: &DMatrix<f64>,
    x_rows: &DMatrix<f64>,
    kxz_rows: &DMatrix<f64>,
    gxz_rows: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = z.nrows();
    let mut out = DMatrix::zeros(m, kernel.dim());
    let gsym = gzz + gzz.transpose();
    for d in 0..kernel.dim() {
        let zk = scaled_differences(kernel, z, z, d).component_mul(kzz);
        for a in 0..m {
            let mut acc = 0.0;
            for p in 0..m {
                acc -= gsym[(a, p)] * zk[(a, p)];
            }
            out[(a, d)] = acc;
        }
        if x_rows.nrows() > 0 {
            let xk = scaled_differences(kernel, x_rows, z, d).component_mul(kxz_rows);
            for a in 0..m {
                out[(a, d)] += xk.column(a).dot(&gxz_rows.column(a));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn eval_examples() {
        let k = SeArdKernel::new(&[1.0], 1.0).unwrap();
        assert_eq!(k.eval(&[0.0], &[0.0]).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let k = SeArdKernel::new(&[2.0, 1.0], 3.0).unwrap();
        let v = k.eval(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v - 1.819592).abs() < 1e-6);
        assert!((v - k.eval(&[0.0, 0.0], &[2.0, 0.0]).unwrap()).abs() == 0.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let k = SeArdKernel::new(&[1.0], 1.0).unwrap();
        assert!(matches!(k.eval(&[0.0, 1.0], &[0.0]), Err(Error::Config(_))));
        let x = DMatrix::zeros(3, 2);
        assert!(k.gram(&x, &x).is_err());
    }

    #[test]
    fn self_covariance_is_signal_variance() {
        let k = SeArdKernel::new(&[0.3, 2.0], 1.7).unwrap();
        let x = [0.123, -4.0];
        assert_eq!(k.eval(&x, &x).unwrap(), k.signal_variance());
    }

    #[test]
    fn gram_examples() {
        let k = SeArdKernel::new(&[1.0], 1.0).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = k.gram(&x, &x).unwrap();
        let e = (-0.5f64).exp();
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(0, 1)] - e).abs() < 1e-15 && (g[(1, 0)] - e).abs() < 1e-15);
        assert_eq!(g.clone() - g.transpose(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn gram_plus_jitter_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = SeArdKernel::new(&[0.7, 1.3], 1.0).unwrap();
        let x = random_matrix(&mut rng, 5, 2);
        let g = k.gram(&x, &x).unwrap() + DMatrix::identity(5, 5) * 1e-6;
        let eig = g.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn hyper_gradient_examples() {
        let k = SeArdKernel::new(&[0.5], 2.0).unwrap();
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.4, -1.0]);
        let g = k.gram(&x, &x).unwrap();
        assert_eq!(k.gram_grad_hyper(&x, &x, 1).unwrap(), g);
        let dl = k.gram_grad_hyper(&x, &x, 0).unwrap();
        for i in 0..3 {
            assert_eq!(dl[(i, i)], 0.0);
        }
        assert!(k.gram_grad_hyper(&x, &x, 2).is_err());
    }

    #[test]
    fn hyper_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let dim = 1 + trial % 3;
            let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.4..2.0)).collect();
            let k = SeArdKernel::new(&ls, rng.random_range(0.5..2.0)).unwrap();
            let x1 = random_matrix(&mut rng, 3, dim);
            let x2 = random_matrix(&mut rng, 4, dim);
            for p in 0..k.num_params() {
                let an = k.gram_grad_hyper(&x1, &x2, p).unwrap();
                let h = 1e-6;
                let mut kp = k.clone();
                let mut km = k.clone();
                let mut pp = k.params();
                pp[p] += h;
                kp.set_params(&pp);
                pp[p] -= 2.0 * h;
                km.set_params(&pp);
                let fd = (kp.gram(&x1, &x2).unwrap() - km.gram(&x1, &x2).unwrap()) / (2.0 * h);
                for (a, b) in an.iter().zip(fd.iter()) {
                    if a.abs() > 1e-8 {
                        assert!(rel_err(*a, *b) < 1e-5, "param {p}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_contraction_matches_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = SeArdKernel::new(&[0.8, 1.4], 1.3).unwrap();
        let x1 = random_matrix(&mut rng, 4, 2);
        let x2 = random_matrix(&mut rng, 3, 2);
        let adj = random_matrix(&mut rng, 4, 3);
        let k12 = k.gram(&x1, &x2).unwrap();
        let g = k.hyper_grad_from_adjoint(&x1, &x2, &k12, &adj);
        for p in 0..3 {
            let direct = k.gram_grad_hyper(&x1, &x2, p).unwrap().component_mul(&adj).sum();
            assert!((g[p] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_inducing_rows_give_zero_differences() {
        let k = SeArdKernel::new(&[0.5, 2.0], 1.0).unwrap();
        let z = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, -1.0, 3.0]);
        for d in 0..2 {
            let zt = scaled_differences(&k, &z, &z, d);
            for i in 0..3 {
                assert_eq!(zt[(i, i)], 0.0);
            }
            assert_eq!(zt[(0, 1)], 0.0);
            assert_eq!(zt[(1, 0)], 0.0);
        }
    }

    #[test]
    fn zero_bilinear_weights_give_zero_pages() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = SeArdKernel::new(&[1.0], 1.0).unwrap();
        let z = random_matrix(&mut rng, 2, 1);
        let x = random_matrix(&mut rng, 3, 1);
        let zero = DMatrix::zeros(2, 3);
        let pages = grad_inducing_bilinear(
            &k,
            &z,
            &x,
            &zero,
            &zero,
            &k.gram(&z, &z).unwrap(),
            &k.gram(&x, &z).unwrap(),
        )
        .unwrap();
        assert!(pages.t1.iter().chain(&pages.t2).all(|p| p.iter().all(|v| *v == 0.0)));
    }

    fn bilinear_values(
        k: &SeArdKernel,
        z: &DMatrix<f64>,
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let kzz = k.gram(z, z).unwrap();
        let kzx = k.gram(z, x).unwrap();
        let t1 = (0..x.nrows())
            .map(|n| (v.column(n).transpose() * &kzz * w.column(n))[(0, 0)])
            .collect();
        let t2 = (0..x.nrows()).map(|n| v.column(n).dot(&kzx.column(n))).collect();
        (t1, t2)
    }

    #[test]
    fn bilinear_pages_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let dim = 1 + trial % 2;
            let (m, n) = (2 + trial % 3, 2 + trial % 2);
            let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
            let k = SeArdKernel::new(&ls, rng.random_range(0.5..2.0)).unwrap();
            let z = random_matrix(&mut rng, m, dim);
            let x = random_matrix(&mut rng, n, dim);
            let v = random_matrix(&mut rng, m, n);
            let w = random_matrix(&mut rng, m, n);
            let pages =
                grad_inducing_bilinear(&k, &z, &x, &v, &w, &k.gram(&z, &z).unwrap(), &k.gram(&x, &z).unwrap()).unwrap();
            let h = 1e-6;
            for a in 0..m {
                for d in 0..dim {
                    let mut zp = z.clone();
                    zp[(a, d)] += h;
                    let mut zm = z.clone();
                    zm[(a, d)] -= h;
                    let (p1, p2) = bilinear_values(&k, &zp, &x, &v, &w);
                    let (m1, m2) = bilinear_values(&k, &zm, &x, &v, &w);
                    for nn in 0..n {
                        let fd1 = (p1[nn] - m1[nn]) / (2.0 * h);
                        let fd2 = (p2[nn] - m2[nn]) / (2.0 * h);
                        let (a1, a2) = (pages.t1[d][(a, nn)], pages.t2[d][(a, nn)]);
                        assert!(rel_err(a1, fd1) < 1e-5 || (a1 - fd1).abs() < 1e-9);
                        assert!(rel_err(a2, fd2) < 1e-5 || (a2 - fd2).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregated_adjoint_equals_summed_pages() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let k = SeArdKernel::new(&[0.9, 1.1], 1.5).unwrap();
        let z = random_matrix(&mut rng, 3, 2);
        let x = random_matrix(&mut rng, 4, 2);
        let v = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        let kzz = k.gram(&z, &z).unwrap();
        let kxz = k.gram(&x, &z).unwrap();
        let pages = grad_inducing_bilinear(&k, &z, &x, &v, &w, &kzz, &kxz).unwrap();
        // sum_n v_n' dK w_n = tr(dK W V') so the Kzz adjoint is V W'.
        let gzz = &v * w.transpose();
        let gxz = v.transpose();
        let agg = inducing_grad_from_adjoint(&k, &z, &kzz, &gzz, &x, &kxz, &gxz);
        for d in 0..2 {
            for a in 0..3 {
                let expect = pages.t1[d].row(a).sum() + pages.t2[d].row(a).sum();
                assert!((agg[(a, d)] - expect).abs() < 1e-12);
            }
        }
    }
}
