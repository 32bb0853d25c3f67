//! Exact and mini-batch gradients of the bound, and the stochastic ascent
//! loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::{block_value, global_term, VariationalState, Weights};
use crate::error::{Error, Result};
use crate::expectations::{contract_block, HyperGrad, HyperPosterior};
use crate::linalg::{symmetrize, trace_prod};
use crate::noise::{NoiseModel, NoiseParams, Structure};
use crate::problem::{DataBlock, Problem};

/// Gradient of the bound. `cov` is the derivative with respect to the
/// covariance matrix itself, treating it as symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub hyper: HyperGrad,
}

impl GradientBundle {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            mean: DVector::zeros(m),
            cov: DMatrix::zeros(m, m),
            hyper: HyperGrad::zeros(d),
        }
    }

    pub fn add_scaled(&mut self, o: &GradientBundle, c: f64) {
        self.mean.axpy(c, &o.mean, 1.0);
        self.cov.zip_apply(&o.cov, |a, b| *a += c * b);
        self.hyper += &o.hyper.scaled(c);
    }

    /// Euclidean norms of the mean, covariance, lengthscale mean, lengthscale
    /// variance, signal mean and signal variance parts.
    pub fn norms(&self) -> [f64; 6] {
        [
            self.mean.norm(),
            self.cov.norm(),
            self.hyper.ls_mean.norm(),
            self.hyper.ls_var.norm(),
            self.hyper.signal_mean.abs(),
            self.hyper.signal_var.abs(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.cov.iter().all(|v| v.is_finite())
            && self.hyper.ls_mean.iter().all(|v| v.is_finite())
            && self.hyper.ls_var.iter().all(|v| v.is_finite())
            && self.hyper.signal_mean.is_finite()
            && self.hyper.signal_var.is_finite()
    }
}

/// Gradient of the global term.
pub fn global_gradient(problem: &Problem, state: &VariationalState) -> GradientBundle {
    let m = state.n_inducing();
    let linv = state
        .cov_chol
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .expect("non-singular covariance factor");
    let mut s_inv = linv.transpose() * linv;
    symmetrize(&mut s_inv);
    let mut cov = (s_inv - &problem.sigma_inv) * 0.5;
    symmetrize(&mut cov);
    GradientBundle {
        mean: -problem.sigma.solve_vec(&state.mean),
        cov,
        hyper: problem.prior.neg_kl_grad(&state.hyper),
    }
}

pub(crate) fn block_gradient(
    problem: &Problem,
    block: &DataBlock,
    state: &VariationalState,
    w: &Weights,
) -> (f64, GradientBundle) {
    let m = state.n_inducing();
    let d = problem.dim();
    if block.is_empty() {
        return (0.0, GradientBundle::zeros(m, d));
    }
    let c = contract_block(
        &block.inputs,
        &block.noise.inverse,
        &block.cinv_y,
        block.noise.diagonal,
        &problem.inducing,
        &state.hyper,
        &w.p,
        &w.g,
        true,
    );
    let value = block.constant + w.p.dot(&c.omega_cy) + trace_prod(&w.g, &c.psi) - 0.5 * c.upsilon_trace;
    let si = &problem.sigma_inv;
    let mean = si * (&c.omega_cy - &c.psi * &w.p);
    let mut cov = si * &c.psi * si * -0.5;
    symmetrize(&mut cov);
    (
        value,
        GradientBundle {
            mean,
            cov,
            hyper: c.grad,
        },
    )
}

/// Value and gradient of the bound over all blocks.
pub fn exact_gradient(problem: &Problem, state: &VariationalState) -> (f64, GradientBundle) {
    let w = Weights::new(problem, state);
    let parts: Vec<(f64, GradientBundle)> = problem
        .blocks
        .par_iter()
        .map(|b| block_gradient(problem, b, state, &w))
        .collect();
    let mut g = global_gradient(problem, state);
    let mut value = 0.0;
    for (v, gb) in &parts {
        value += v;
        g.add_scaled(gb, 1.0);
    }
    (value + global_term(problem, state), g)
}

/// Unbiased estimate of the bound and its gradient from the blocks in
/// `batch` (indices may repeat).
pub fn stochastic_gradient(problem: &Problem, state: &VariationalState, batch: &[usize]) -> (f64, GradientBundle) {
    let w = Weights::new(problem, state);
    let scale = problem.n_blocks() as f64 / batch.len() as f64;
    let parts: Vec<(f64, GradientBundle)> = batch
        .par_iter()
        .map(|&i| block_gradient(problem, &problem.blocks[i], state, &w))
        .collect();
    let mut g = global_gradient(problem, state);
    let mut value = 0.0;
    for (v, gb) in &parts {
        value += scale * v;
        g.add_scaled(gb, scale);
    }
    (value + global_term(problem, state), g)
}

/// Unbiased estimate of the bound alone.
pub fn stochastic_value(problem: &Problem, state: &VariationalState, batch: &[usize]) -> f64 {
    let w = Weights::new(problem, state);
    let scale = problem.n_blocks() as f64 / batch.len() as f64;
    let mut value = 0.0;
    for &i in batch {
        value += scale * block_value(problem, &problem.blocks[i], state, &w);
    }
    value + global_term(problem, state)
}

/// `η_t = a / (1 + t/τ)^κ`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub a: f64,
    pub tau: f64,
    pub kappa: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            a: 0.1,
            tau: 100.0,
            kappa: 0.75,
        }
    }
}

impl Schedule {
    pub fn rate(&self, t: usize) -> f64 {
        self.a / (1.0 + t as f64 / self.tau).powf(self.kappa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// Plain decaying steps along the gradient.
    Plain,
    /// Per-coordinate steps scaled by running moment estimates.
    Adaptive,
}

/// Flattening of the state into unconstrained coordinates.
///
/// Layout: mean, lower triangle of the covariance factor (row major, with
/// the diagonal stored as logs), lengthscale means, log lengthscale
/// variances, signal mean, log signal variance. With `whiten` set the first
/// two blocks are expressed relative to the Cholesky factor of `Σ_II`.
///
/// The log diagonal makes per-coordinate steps relative, which matters once
/// the posterior is much tighter than the prior in some directions.
#[derive(Clone, Debug)]
pub struct Transform {
    whiten: Option<DMatrix<f64>>,
    m: usize,
    d: usize,
}

impl Transform {
    pub fn new(problem: &Problem, whiten: bool) -> Self {
        Self {
            whiten: whiten.then(|| problem.sigma.l()),
            m: problem.n_inducing(),
            d: problem.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.m + self.m * (self.m + 1) / 2 + 2 * self.d + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, s: &VariationalState) -> DVector<f64> {
        let (mean, chol) = match &self.whiten {
            Some(l) => (
                l.solve_lower_triangular(&s.mean).expect("non-singular"),
                l.solve_lower_triangular(&s.cov_chol).expect("non-singular"),
            ),
            None => (s.mean.clone(), s.cov_chol.clone()),
        };
        let chol = positive_diagonal(chol);
        let mut v = Vec::with_capacity(self.len());
        v.extend(mean.iter());
        for i in 0..self.m {
            for j in 0..i {
                v.push(chol[(i, j)]);
            }
            v.push(chol[(i, i)].ln());
        }
        v.extend(s.hyper.ls_mean.iter());
        v.extend(s.hyper.ls_var.iter().map(|x| x.ln()));
        v.push(s.hyper.signal_mean);
        v.push(s.hyper.signal_var.ln());
        DVector::from_vec(v)
    }

    pub fn decode(&self, v: &DVector<f64>) -> VariationalState {
        let (m, d) = (self.m, self.d);
        let mut mean = DVector::from_iterator(m, v.iter().take(m).copied());
        let mut chol = DMatrix::zeros(m, m);
        let mut o = m;
        for i in 0..m {
            for j in 0..i {
                chol[(i, j)] = v[o];
                o += 1;
            }
            chol[(i, i)] = v[o].exp();
            o += 1;
        }
        if let Some(l) = &self.whiten {
            mean = l * mean;
            chol = l * chol;
        }
        let ls_mean = DVector::from_iterator(d, v.iter().skip(o).take(d).copied());
        o += d;
        let ls_var = DVector::from_iterator(d, v.iter().skip(o).take(d).map(|x| x.exp()));
        o += d;
        VariationalState {
            mean,
            cov_chol: chol,
            hyper: HyperPosterior {
                ls_mean,
                ls_var,
                signal_mean: v[o],
                signal_var: v[o + 1].exp(),
            },
        }
    }

    /// Chain rule from [`GradientBundle`] to the unconstrained coordinates.
    pub fn encode_grad(&self, s: &VariationalState, g: &GradientBundle) -> DVector<f64> {
        let gs2 = &g.cov + g.cov.transpose();
        let (gm, gl) = match &self.whiten {
            Some(l) => (l.transpose() * &g.mean, l.transpose() * gs2 * &s.cov_chol),
            None => (g.mean.clone(), gs2 * &s.cov_chol),
        };
        let diag = match &self.whiten {
            Some(l) => l.solve_lower_triangular(&s.cov_chol).expect("non-singular"),
            None => s.cov_chol.clone(),
        };
        let mut v = Vec::with_capacity(self.len());
        v.extend(gm.iter());
        for i in 0..self.m {
            for j in 0..i {
                v.push(gl[(i, j)]);
            }
            v.push(gl[(i, i)] * diag[(i, i)]);
        }
        v.extend(g.hyper.ls_mean.iter());
        v.extend(g.hyper.ls_var.iter().zip(s.hyper.ls_var.iter()).map(|(gv, x)| gv * x));
        v.push(g.hyper.signal_mean);
        v.push(g.hyper.signal_var * s.hyper.signal_var);
        DVector::from_vec(v)
    }
}

/// Flips the sign of every column whose diagonal entry is negative, which
/// leaves the product `L Lᵀ` unchanged.
fn positive_diagonal(mut l: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..l.ncols() {
        if l[(j, j)] < 0.0 {
            l.column_mut(j).neg_mut();
        }
    }
    l
}

const ADAPTIVE_DECAY1: f64 = 0.9;
const ADAPTIVE_DECAY2: f64 = 0.999;
const ADAPTIVE_EPS: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

/// Step-size state for the ascent.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub rule: StepRule,
    pub schedule: Schedule,
    pub transform: Transform,
    first: DVector<f64>,
    second: DVector<f64>,
    t: usize,
}

impl Optimizer {
    pub fn new(rule: StepRule, schedule: Schedule, transform: Transform) -> Self {
        let n = transform.len();
        Self {
            rule,
            schedule,
            transform,
            first: DVector::zeros(n),
            second: DVector::zeros(n),
            t: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    /// Moves `state` along `grad`. A step that yields a non-finite or
    /// degenerate state is halved, at most ten times.
    pub fn apply_step(&mut self, state: &VariationalState, grad: &GradientBundle) -> Result<VariationalState> {
        let x = self.transform.encode(state);
        let g = self.transform.encode_grad(state, grad);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(self.t));
        }
        let eta = self.schedule.rate(self.t);
        let dir = match self.rule {
            StepRule::Plain => g,
            StepRule::Adaptive => {
                let k = (self.t + 1) as i32;
                self.first = &self.first * ADAPTIVE_DECAY1 + &g * (1.0 - ADAPTIVE_DECAY1);
                self.second = &self.second * ADAPTIVE_DECAY2 + g.component_mul(&g) * (1.0 - ADAPTIVE_DECAY2);
                let c1 = 1.0 - ADAPTIVE_DECAY1.powi(k);
                let c2 = 1.0 - ADAPTIVE_DECAY2.powi(k);
                DVector::from_iterator(
                    g.len(),
                    self.first
                        .iter()
                        .zip(self.second.iter())
                        .map(|(m, v)| (m / c1) / ((v / c2).sqrt() + ADAPTIVE_EPS)),
                )
            }
        };
        self.t += 1;
        let mut step = eta;
        for _ in 0..=MAX_HALVINGS {
            let next = self.transform.decode(&(&x + &dir * step));
            if next.is_valid() {
                return Ok(next);
            }
            step *= 0.5;
        }
        Err(Error::NonFinite(self.t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Blocks per mini-batch, drawn uniformly with replacement.
    pub batch_size: usize,
    pub schedule: Schedule,
    pub rule: StepRule,
    pub whiten: bool,
    pub seed: u64,
    pub learn_noise: bool,
    /// Relative step for finite-difference noise gradients.
    pub noise_fd_step: f64,
    /// When set, iterates from this iteration on are averaged in the
    /// unconstrained coordinates and the average is reported instead of the
    /// last iterate.
    #[serde(default)]
    pub average_from: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1,
            schedule: Schedule::default(),
            rule: StepRule::Adaptive,
            whiten: true,
            seed: 0,
            learn_noise: false,
            noise_fd_step: 1e-4,
            average_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub seconds: f64,
    pub elbo_estimate: f64,
    pub grad_norms: [f64; 6],
}

pub const TRACE_HEADER: [&str; 9] = [
    "iter",
    "seconds",
    "elbo_estimate",
    "grad_mean_norm",
    "grad_cov_norm",
    "grad_ls_mean_norm",
    "grad_ls_var_norm",
    "grad_signal_mean",
    "grad_signal_var",
];

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: VariationalState,
    pub trace: Vec<TraceRow>,
}

/// Runs stochastic ascent from `state`.
pub fn train(problem: &mut Problem, state: VariationalState, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(problem, state, config, |_, _| {})
}

/// Like [`train`], calling `observe` after every step with the iteration
/// count and the new state.
pub fn train_with<F>(
    problem: &mut Problem,
    mut state: VariationalState,
    config: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &VariationalState),
{
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    if problem.n_blocks() == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.rule, config.schedule, Transform::new(problem, config.whiten));
    let mut noise_opt = config.learn_noise.then(|| NoiseLearner::new(problem, config));
    let start = Instant::now();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut average: Option<(DVector<f64>, f64)> = None;
    let mut reported = None;
    for it in 0..config.iterations {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..problem.n_blocks()))
            .collect();
        if let Some(nl) = noise_opt.as_mut() {
            nl.refresh(problem, &batch)?;
        }
        let (value, grad) = stochastic_gradient(problem, &state, &batch);
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(it));
        }
        let next = opt.apply_step(&state, &grad)?;
        if let Some(nl) = noise_opt.as_mut() {
            nl.step(problem, &state, &batch, it)?;
        }
        state = next;
        trace.push(TraceRow {
            iter: it,
            seconds: start.elapsed().as_secs_f64(),
            elbo_estimate: value,
            grad_norms: grad.norms(),
        });
        if config.average_from.is_some_and(|a| it >= a) {
            let x = opt.transform.encode(&state);
            let (avg, k) = average.get_or_insert_with(|| (DVector::zeros(x.len()), 0.0));
            *k += 1.0;
            *avg += (x - &*avg) / *k;
            reported = Some(opt.transform.decode(avg));
        }
        observe(it, reported.as_ref().unwrap_or(&state));
    }
    if let Some(nl) = noise_opt {
        problem.set_noise(nl.params)?;
    }
    Ok(TrainOutcome {
        state: reported.unwrap_or(state),
        trace,
    })
}

/// Finite-difference ascent on the log noise parameters. Blocks are rebuilt
/// lazily when they are sampled, so an iteration stays independent of the
/// total number of blocks.
struct NoiseLearner {
    params: NoiseParams,
    built: Vec<u64>,
    generation: u64,
    schedule: Schedule,
    fd: f64,
    output_std: f64,
}

impl NoiseLearner {
    fn new(problem: &Problem, config: &TrainConfig) -> Self {
        Self {
            params: problem.noise.params.clone(),
            built: vec![0; problem.n_blocks()],
            generation: 0,
            schedule: config.schedule,
            fd: config.noise_fd_step,
            output_std: target_std(problem),
        }
    }

    fn refresh(&mut self, problem: &mut Problem, batch: &[usize]) -> Result<()> {
        if self.generation == 0 {
            return Ok(());
        }
        let model = NoiseModel::new(problem.noise.variant, self.params.clone())?;
        for &i in batch {
            if self.built[i] != self.generation {
                let b = &problem.blocks[i];
                let nb = model.block(&b.inputs)?;
                problem.blocks[i] = DataBlock::new(b.indices.clone(), b.inputs.clone(), b.targets.clone(), nb);
                self.built[i] = self.generation;
            }
        }
        problem.noise = model;
        Ok(())
    }

    fn coords(&self, structure: Structure) -> Vec<f64> {
        let p = &self.params;
        let mut v = vec![p.noise_std.ln()];
        if structure != Structure::Isotropic {
            v.push(p.eps_signal_std.abs().max(f64::MIN_POSITIVE).ln());
            v.extend(
                p.eps_inv_lengthscales
                    .iter()
                    .map(|x| x.abs().max(f64::MIN_POSITIVE).ln()),
            );
        }
        v
    }

    fn with_coords(&self, v: &[f64]) -> NoiseParams {
        let mut p = self.params.clone();
        p.noise_std = v[0].exp();
        if v.len() > 1 {
            p.eps_signal_std = v[1].exp();
            for k in 0..p.eps_inv_lengthscales.len() {
                p.eps_inv_lengthscales[k] = v[2 + k].exp();
            }
        }
        p
    }

    fn batch_value(
        &self,
        problem: &Problem,
        params: NoiseParams,
        state: &VariationalState,
        batch: &[usize],
    ) -> Result<f64> {
        let model = NoiseModel::new(problem.noise.variant, params)?;
        let w = Weights::new(problem, state);
        let mut v = 0.0;
        for &i in batch {
            let b = &problem.blocks[i];
            let nb = model.block(&b.inputs)?;
            let blk = DataBlock::new(Vec::new(), b.inputs.clone(), b.targets.clone(), nb);
            v += block_value(problem, &blk, state, &w);
        }
        Ok(v * problem.n_blocks() as f64 / batch.len() as f64)
    }

    fn step(&mut self, problem: &Problem, state: &VariationalState, batch: &[usize], it: usize) -> Result<()> {
        let structure = problem.noise.variant.structure();
        let x = self.coords(structure);
        let mut g = vec![0.0; x.len()];
        for k in 0..x.len() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[k] += self.fd;
            lo[k] -= self.fd;
            let fh = self.batch_value(problem, self.with_coords(&hi), state, batch)?;
            let fl = self.batch_value(problem, self.with_coords(&lo), state, batch)?;
            g[k] = (fh - fl) / (2.0 * self.fd);
        }
        let eta = self.schedule.rate(it);
        // steps in log space are clipped so one noisy estimate cannot blow up
        let next: Vec<f64> = x
            .iter()
            .zip(g.iter())
            .map(|(xi, gi)| xi + (eta * gi).clamp(-0.1, 0.1))
            .collect();
        if next.iter().all(|v| v.is_finite()) {
            let mut p = self.with_coords(&next);
            p.apply_floor(self.output_std);
            self.params = p;
            self.generation += 1;
        }
        Ok(())
    }
}

fn target_std(problem: &Problem) -> f64 {
    let ys: Vec<f64> = problem.blocks.iter().flat_map(|b| b.targets.iter().copied()).collect();
    let n = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / n;
    (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt()
}
