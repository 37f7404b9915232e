//! Batch (group-alternating L-BFGS) and stochastic (AdaDelta) training.

use web_time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo, ElboOptions, ElboReport, EllMode, GradGroups};
use crate::error::{Error, Result};
use crate::model::{Data, Model};
use crate::packing::{grad_groups, pack, pack_gradient, unpack, Group};
use crate::posterior::KernelState;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    Batch,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    /// Stop when one global iteration improves the objective by less than this.
    pub group_tol: f64,
    /// Global iterations (batch) or epochs (stochastic).
    pub max_global_iters: usize,
    /// L-BFGS iterations per group per global iteration.
    pub inner_iters: usize,
    pub lbfgs_memory: usize,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub batch_size: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    pub learn_inducing: bool,
    pub groups: Vec<Group>,
    pub ell_mode: EllMode,
    pub control_variates: bool,
    /// Draw fresh ELL samples every global iteration instead of keeping one
    /// stream for the whole batch run.
    pub refresh_samples: bool,
    /// Batch mode: optimize all active groups in one L-BFGS run per global
    /// iteration instead of alternating between them.
    #[serde(default)]
    pub joint_groups: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: OptimizerMode::Batch,
            group_tol: 1e-6,
            max_global_iters: 200,
            inner_iters: 50,
            lbfgs_memory: 10,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            batch_size: None,
            samples: 2000,
            seed: 0,
            learn_inducing: false,
            groups: Group::ALL.to_vec(),
            ell_mode: EllMode::MonteCarlo,
            control_variates: true,
            refresh_samples: false,
            joint_groups: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.group_tol > 0.0) || !(self.adadelta_eps > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) {
            return Err(Error::config("AdaDelta decay must lie in [0, 1)"));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::config("L-BFGS memory must be positive"));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::config(format!("batch size must lie in 1..={n}")));
            }
        }
        if self.ell_mode == EllMode::MonteCarlo && self.samples < 2 {
            return Err(Error::config("at least two samples are needed"));
        }
        Ok(())
    }

    fn elbo_options(&self, epoch: u64, groups: GradGroups) -> ElboOptions {
        ElboOptions {
            samples: self.samples,
            seed: self.seed,
            epoch,
            mode: self.ell_mode,
            control_variates: self.control_variates,
            groups,
        }
    }

    /// Groups that actually have something to optimize for this model.
    fn active_groups(&self, model: &Model) -> Vec<Group> {
        self.groups
            .iter()
            .copied()
            .filter(|g| match g {
                Group::Inducing => self.learn_inducing && !model.inducing.dense,
                Group::Likelihood => model.likelihood.num_params() > 0,
                _ => true,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub ent: f64,
    pub cross: f64,
    pub ell: f64,
    pub total: f64,
    pub wall_time: f64,
    pub group: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
}

impl Trace {
    fn push(&mut self, iteration: usize, r: &ElboReport, start: &Instant, group: &str) {
        self.records.push(TraceRecord {
            iteration,
            ent: r.ent,
            cross: r.cross,
            ell: r.ell,
            total: r.total,
            wall_time: start.elapsed().as_secs_f64(),
            group: group.to_string(),
        });
    }

    pub fn final_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }

    /// CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,ent,cross,ell,total,wall_time,group\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration, r.ent, r.cross, r.ell, r.total, r.wall_time, r.group
            ));
        }
        s
    }
}

/// Outcome of a minimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

/// Evaluations that fail numerically count as `+inf` so the line search backs off.
fn eval_or_inf<F>(f: &mut F, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    match f(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Ok((v, g)),
        Ok((_, g)) => Ok((f64::INFINITY, g)),
        Err(Error::Numerical(_)) | Err(Error::IllConditioned(_)) => Ok((f64::INFINITY, vec![0.0; x.len()])),
        Err(e) => Err(e),
    }
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded to the interior of the bracket.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let fallback = 0.5 * (a + b);
    if !(disc >= 0.0) || !fb.is_finite() {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        fallback
    }
}

struct LineResult {
    step: f64,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search (bracketing plus zoom).
fn wolfe_search<F>(fun: &mut F, x: &[f64], f0: f64, g0: &[f64], d: &[f64], init: f64) -> Result<Option<LineResult>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let dg0 = dot(g0, d);
    let (mut a_prev, mut f_prev, mut dg_prev) = (0.0, f0, dg0);
    let mut a = init;
    let mut best: Option<LineResult> = None;
    let consider = |r: LineResult, best: &mut Option<LineResult>| {
        if r.f < best.as_ref().map_or(f0, |b| b.f) {
            *best = Some(r);
        }
    };
    for i in 0..25 {
        let (fa, ga) = eval_or_inf(fun, &axpy(x, a, d))?;
        let dga = dot(&ga, d);
        if fa > f0 + C1 * a * dg0 || (i > 0 && fa >= f_prev) || !fa.is_finite() {
            return zoom(fun, x, f0, dg0, d, (a_prev, f_prev, dg_prev), (a, fa, dga), best);
        }
        if dga.abs() <= -C2 * dg0 {
            return Ok(Some(LineResult { step: a, f: fa, g: ga }));
        }
        consider(
            LineResult {
                step: a,
                f: fa,
                g: ga.clone(),
            },
            &mut best,
        );
        if dga >= 0.0 {
            return zoom(fun, x, f0, dg0, d, (a, fa, dga), (a_prev, f_prev, dg_prev), best);
        }
        a_prev = a;
        f_prev = fa;
        dg_prev = dga;
        a *= 2.0;
    }
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    fun: &mut F,
    x: &[f64],
    f0: f64,
    dg0: f64,
    d: &[f64],
    lo: (f64, f64, f64),
    hi: (f64, f64, f64),
    mut best: Option<LineResult>,
) -> Result<Option<LineResult>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..30 {
        let a = if hi.1.is_finite() {
            cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        let (fa, ga) = eval_or_inf(fun, &axpy(x, a, d))?;
        let dga = dot(&ga, d);
        if fa < best.as_ref().map_or(f0, |b| b.f) {
            best = Some(LineResult {
                step: a,
                f: fa,
                g: ga.clone(),
            });
        }
        if fa > f0 + C1 * a * dg0 || fa >= lo.1 || !fa.is_finite() {
            hi = (a, fa, dga);
        } else {
            if dga.abs() <= -C2 * dg0 {
                return Ok(Some(LineResult { step: a, f: fa, g: ga }));
            }
            if dga * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, dga);
        }
        if (hi.0 - lo.0).abs() < 1e-14 * lo.0.abs().max(1.0) {
            break;
        }
    }
    Ok(best)
}

/// Backtracking Armijo search; used when the Wolfe search fails.
fn armijo<F>(fun: &mut F, x: &[f64], f0: f64, g0: &[f64], d: &[f64], init: f64) -> Result<Option<LineResult>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dg0 = dot(g0, d);
    let mut a = init;
    for _ in 0..40 {
        let (fa, ga) = eval_or_inf(fun, &axpy(x, a, d))?;
        if fa <= f0 + 1e-4 * a * dg0 {
            return Ok(Some(LineResult { step: a, f: fa, g: ga }));
        }
        a *= 0.5;
    }
    Ok(None)
}

/// Limited-memory BFGS. Only steps that do not increase `f` are accepted;
/// stops after `max_iter` iterations or when an accepted step improves `f`
/// by less than `tol`.
pub fn lbfgs<F>(mut fun: F, x0: Vec<f64>, memory: usize, max_iter: usize, tol: f64) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut f, mut g) = fun(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite objective {f} at the starting point"
        )));
    }
    let mut x = x0;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    while iterations < max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm == 0.0 {
            break;
        }
        // two-loop recursion
        let mut qv = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &qv);
            qv = axpy(&qv, -a, y);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        let mut r: Vec<f64> = qv.iter().map(|v| v * gamma).collect();
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &r);
            r = axpy(&r, a - b, s);
        }
        let mut d: Vec<f64> = r.iter().map(|v| -v).collect();
        let mut init = 1.0;
        if hist.is_empty() || dot(&d, &g) >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            init = (1.0 / gnorm).min(1.0);
        }
        let found = match wolfe_search(&mut fun, &x, f, &g, &d, init)? {
            Some(r) => Some(r),
            None => {
                hist.clear();
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                d = sd;
                armijo(&mut fun, &x, f, &g, &d, (1.0 / gnorm).min(1.0))?
            }
        };
        let Some(step) = found else { break };
        if !(step.f <= f) {
            break;
        }
        iterations += 1;
        let x_new = axpy(&x, step.step, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(1e-300) && sy > 0.0 {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let improvement = f - step.f;
        x = x_new;
        f = step.f;
        g = step.g;
        if improvement < tol {
            break;
        }
    }
    Ok(MinimizeResult { x, f, iterations })
}

fn needs_new_state(groups: &[Group]) -> bool {
    groups.contains(&Group::Hyper) || groups.contains(&Group::Inducing)
}

/// Objective `-ELBO` and its gradient over the packed parameters of `groups`.
fn negative_elbo(
    base: &Model,
    state: &KernelState,
    data: &Data,
    opts: &ElboOptions,
    groups: &[Group],
    p: &[f64],
    batch: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let mut m = base.clone();
    unpack(&mut m, groups, p)?;
    let fresh;
    let st = if needs_new_state(groups) {
        fresh = m.kernel_state(&data.x)?;
        &fresh
    } else {
        state
    };
    let r = elbo(&m, st, data, opts, batch)?;
    Ok((
        -r.total,
        pack_gradient(&r.grads, groups).into_iter().map(|v| -v).collect(),
    ))
}

/// Group-alternating L-BFGS over the full dataset.
pub fn fit_batch(model: &mut Model, data: &Data, cfg: &OptimizerConfig) -> Result<Trace> {
    cfg.validate(data.len())?;
    model.validate(data)?;
    let start = Instant::now();
    let groups = cfg.active_groups(model);
    let mut trace = Trace::default();
    let mut state = model.kernel_state(&data.x)?;
    let report = elbo(model, &state, data, &cfg.elbo_options(0, GradGroups::NONE), None)?;
    trace.push(0, &report, &start, "init");
    let mut prev_total = report.total;
    for it in 1..=cfg.max_global_iters {
        let epoch = if cfg.refresh_samples { it as u64 } else { 0 };
        let begin = if cfg.refresh_samples {
            elbo(model, &state, data, &cfg.elbo_options(epoch, GradGroups::NONE), None)?.total
        } else {
            prev_total
        };
        let sets: Vec<Vec<Group>> = if cfg.joint_groups {
            vec![groups.clone()]
        } else {
            groups.iter().map(|&g| vec![g]).collect()
        };
        for gs in &sets {
            let label = if gs.len() == 1 { gs[0].name() } else { "joint" };
            let opts = cfg.elbo_options(epoch, grad_groups(gs));
            let x0 = pack(model, gs);
            let res = {
                let base = model.clone();
                let st = &state;
                lbfgs(
                    |p| negative_elbo(&base, st, data, &opts, gs, p, None),
                    x0,
                    cfg.lbfgs_memory,
                    cfg.inner_iters,
                    cfg.group_tol * 0.1,
                )
            }
            .map_err(|e| annotate(e, it, label))?;
            unpack(model, gs, &res.x)?;
            if needs_new_state(gs) {
                state = model.kernel_state(&data.x)?;
            }
            let r = elbo(model, &state, data, &cfg.elbo_options(epoch, GradGroups::NONE), None)
                .map_err(|e| annotate(e, it, label))?;
            trace.push(it, &r, &start, label);
            prev_total = r.total;
        }
        if prev_total - begin < cfg.group_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

fn annotate(e: Error, iteration: usize, group: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{m} (global iteration {iteration}, group {group})")),
        other => other,
    }
}

/// AdaDelta over shuffled disjoint minibatches, all groups jointly.
pub fn fit_stochastic(model: &mut Model, data: &Data, cfg: &OptimizerConfig) -> Result<Trace> {
    cfg.validate(data.len())?;
    model.validate(data)?;
    let n = data.len();
    let batch_size = cfg.batch_size.unwrap_or(n);
    let start = Instant::now();
    let groups = cfg.active_groups(model);
    let gflags = grad_groups(&groups);
    let mut trace = Trace::default();
    let mut state = model.kernel_state(&data.x)?;
    let report = elbo(model, &state, data, &cfg.elbo_options(0, GradGroups::NONE), None)?;
    trace.push(0, &report, &start, "init");

    let dim = pack(model, &groups).len();
    let mut acc_g = vec![0.0; dim];
    let mut acc_dx = vec![0.0; dim];
    let (rho, eps) = (cfg.adadelta_rho, cfg.adadelta_eps);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_global_iters {
        let mut shuffle_rng = rng::stream(&[cfg.seed, epoch as u64, u64::MAX]);
        order.shuffle(&mut shuffle_rng);
        let opts = cfg.elbo_options(epoch as u64, gflags);
        for chunk in order.chunks(batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let r = elbo(model, &state, data, &opts, Some(&batch)).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {epoch})")),
                other => other,
            })?;
            let g = pack_gradient(&r.grads, &groups);
            let mut p = pack(model, &groups);
            for i in 0..dim {
                acc_g[i] = rho * acc_g[i] + (1.0 - rho) * g[i] * g[i];
                // ascent on the ELBO
                let dx = ((acc_dx[i] + eps).sqrt() / (acc_g[i] + eps).sqrt()) * g[i];
                acc_dx[i] = rho * acc_dx[i] + (1.0 - rho) * dx * dx;
                p[i] += dx;
            }
            unpack(model, &groups, &p)?;
            if needs_new_state(&groups) {
                state = model.kernel_state(&data.x)?;
            }
        }
        let r = elbo(
            model,
            &state,
            data,
            &cfg.elbo_options(epoch as u64, GradGroups::NONE),
            None,
        )?;
        trace.push(epoch, &r, &start, "all");
    }
    Ok(trace)
}

/// Dispatches on `cfg.mode`.
pub fn fit(model: &mut Model, data: &Data, cfg: &OptimizerConfig) -> Result<Trace> {
    match cfg.mode {
        OptimizerMode::Batch => fit_batch(model, data, cfg),
        OptimizerMode::Stochastic => fit_stochastic(model, data, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lbfgs_minimizes_rosenbrock() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let r = lbfgs(f, vec![-1.2, 1.0], 10, 500, 0.0).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r);
    }

    #[test]
    fn lbfgs_on_a_quadratic() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
            Ok((
                v,
                x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect(),
            ))
        };
        let r = lbfgs(f, vec![1.0; 6], 10, 100, 0.0).unwrap();
        assert!(r.f < 1e-12);
    }

    #[test]
    fn lbfgs_backs_off_from_failed_evaluations() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] > 0.5 {
                return Err(Error::Numerical("outside domain".into()));
            }
            Ok(((x[0] - 0.4).powi(2), vec![2.0 * (x[0] - 0.4)]))
        };
        let r = lbfgs(f, vec![-3.0], 10, 100, 0.0).unwrap();
        assert!((r.x[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn cubic_interpolation_finds_quadratic_minimum() {
        // f = (a - 1)^2 sampled at 0 and 3
        let t = cubic_min(0.0, 1.0, -2.0, 3.0, 4.0, 4.0);
        assert!((t - 1.0).abs() < 1e-12);
    }
}
