//! The evidence lower bound, its per-block decomposition and the collapsed
//! form obtained by plugging in the optimal Gaussian over inducing
//! variables.
//!
//! Every function here returns the complete bound on `log p(y)`, constants
//! included, unless its name says otherwise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expectations::{contract_block, omega_block, psi_block, upsilon_block, HyperGrad, HyperPosterior};
use crate::linalg::{jittered_cholesky, log_det_from_triangular, symmetrize, trace_prod};
use crate::problem::{DataBlock, Problem};

/// Variational parameters: `q(s_I) = N(mean, cov_chol cov_cholᵀ)` and the
/// hyperparameter posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    pub cov_chol: DMatrix<f64>,
    pub hyper: HyperPosterior,
}

impl VariationalState {
    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_chol * self.cov_chol.transpose()
    }

    pub fn n_inducing(&self) -> usize {
        self.mean.len()
    }

    pub fn is_valid(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.cov_chol.iter().all(|v| v.is_finite())
            && (0..self.cov_chol.nrows()).all(|i| self.cov_chol[(i, i)] != 0.0)
            && self.hyper.is_valid()
            && self.hyper.ls_var.iter().all(|v| *v > 0.0)
            && self.hyper.signal_var > 0.0
    }

    pub fn log_det_cov(&self) -> f64 {
        log_det_from_triangular(&self.cov_chol)
    }
}

/// Per-block terms and the global term; `total` is their sum.
#[derive(Clone, Debug)]
pub struct ElboBreakdown {
    pub blocks: Vec<f64>,
    pub global: f64,
    pub total: f64,
}

/// Quantities shared by all blocks for a fixed state.
pub(crate) struct Weights {
    /// `Σ^{-1} m`
    pub p: DVector<f64>,
    /// `½ (Σ^{-1} - Σ^{-1} (m mᵀ + S) Σ^{-1})`
    pub g: DMatrix<f64>,
}

impl Weights {
    pub fn new(problem: &Problem, state: &VariationalState) -> Self {
        let p = problem.sigma.solve_vec(&state.mean);
        let w = problem.sigma.solve(&state.cov_chol);
        let mut g = &problem.sigma_inv - &p * p.transpose() - &w * w.transpose();
        g *= 0.5;
        symmetrize(&mut g);
        Self { p, g }
    }
}

/// `−KL(q(s_I) || p(s_I))`
pub fn inducing_neg_kl(problem: &Problem, state: &VariationalState) -> f64 {
    let m = state.n_inducing() as f64;
    let w = problem.sigma.solve_lower(&state.cov_chol);
    let tr = w.norm_squared();
    let p = problem
        .sigma
        .solve_lower(&DMatrix::from_column_slice(state.mean.len(), 1, state.mean.as_slice()));
    let quad = p.norm_squared();
    -0.5 * (tr + quad - m + problem.sigma.log_det() - state.log_det_cov())
}

/// Global term: minus the KL divergences of all posteriors from their priors.
pub fn global_term(problem: &Problem, state: &VariationalState) -> f64 {
    inducing_neg_kl(problem, state) - problem.prior.kl(&state.hyper)
}

pub(crate) fn block_value(problem: &Problem, block: &DataBlock, state: &VariationalState, w: &Weights) -> f64 {
    if block.is_empty() {
        return 0.0;
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
        false,
    );
    block.constant + w.p.dot(&c.omega_cy) + trace_prod(&w.g, &c.psi) - 0.5 * c.upsilon_trace
}

/// The bound as a sum of per-block terms plus the global term.
pub fn elbo_decomposed(problem: &Problem, state: &VariationalState) -> ElboBreakdown {
    let w = Weights::new(problem, state);
    let blocks: Vec<f64> = problem
        .blocks
        .iter()
        .map(|b| block_value(problem, b, state, &w))
        .collect();
    let global = global_term(problem, state);
    let mut total = 0.0;
    for v in &blocks {
        total += v;
    }
    total += global;
    ElboBreakdown { blocks, global, total }
}

/// Sums of the assembled expectation blocks over all of the data.
pub struct ExpectationTotals {
    /// `Ψ = Σ_i Ψ^i`
    pub psi: DMatrix<f64>,
    /// `Ω C^{-1} y`
    pub omega_cy: DVector<f64>,
    /// `tr(C^{-1} Υ)`
    pub upsilon_trace: f64,
}

pub fn expectation_totals(problem: &Problem, hyper: &HyperPosterior) -> ExpectationTotals {
    let m = problem.n_inducing();
    let mut psi = DMatrix::zeros(m, m);
    let mut omega_cy = DVector::zeros(m);
    let mut upsilon_trace = 0.0;
    for b in problem.blocks.iter().filter(|b| !b.is_empty()) {
        psi += psi_block(&b.inputs, &b.noise.inverse, &problem.inducing, hyper);
        omega_cy += omega_block(&b.inputs, &problem.inducing, hyper) * &b.cinv_y;
        upsilon_trace += trace_prod(&b.noise.inverse, &upsilon_block(&b.inputs, hyper));
    }
    symmetrize(&mut psi);
    ExpectationTotals {
        psi,
        omega_cy,
        upsilon_trace,
    }
}

/// Everything in the bound that does not depend on the variational
/// parameters.
pub fn elbo_constant(problem: &Problem) -> f64 {
    let blocks: f64 = problem.blocks.iter().map(|b| b.constant).sum();
    blocks - 0.5 * problem.sigma.log_det() + 0.5 * problem.n_inducing() as f64 + problem.prior.constant(problem.dim())
}

/// The bound evaluated through the whole-data matrices.
pub fn elbo_full(problem: &Problem, state: &VariationalState) -> f64 {
    let t = expectation_totals(problem, &state.hyper);
    let si = &problem.sigma_inv;
    let q = si * &t.psi * si + si;
    let s = state.cov();
    let m = &state.mean;
    let bracket = 2.0 * m.dot(&(si * &t.omega_cy)) - m.dot(&(&q * m)) - trace_prod(&s, &q) - t.upsilon_trace
        + trace_prod(si, &t.psi)
        + state.log_det_cov()
        + problem.prior.bracket(&state.hyper);
    0.5 * bracket + elbo_constant(problem)
}

/// Optimal `q(s_I)` for fixed hyperparameter posterior, returned as a state.
pub fn optimal_inducing(problem: &Problem, hyper: &HyperPosterior) -> Result<VariationalState> {
    let t = expectation_totals_fused(problem, hyper);
    optimal_from_totals(problem, hyper, &t)
}

/// Same sums as [`expectation_totals`], through the fused single-pass
/// contraction.
pub fn expectation_totals_fused(problem: &Problem, hyper: &HyperPosterior) -> ExpectationTotals {
    let m = problem.n_inducing();
    let p = DVector::zeros(m);
    let g = DMatrix::zeros(m, m);
    let parts: Vec<_> = problem
        .blocks
        .par_iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            contract_block(
                &b.inputs,
                &b.noise.inverse,
                &b.cinv_y,
                b.noise.diagonal,
                &problem.inducing,
                hyper,
                &p,
                &g,
                false,
            )
        })
        .collect();
    let mut psi = DMatrix::zeros(m, m);
    let mut omega_cy = DVector::zeros(m);
    let mut upsilon_trace = 0.0;
    for c in &parts {
        psi += &c.psi;
        omega_cy += &c.omega_cy;
        upsilon_trace += c.upsilon_trace;
    }
    ExpectationTotals {
        psi,
        omega_cy,
        upsilon_trace,
    }
}

pub(crate) fn optimal_from_totals(
    problem: &Problem,
    hyper: &HyperPosterior,
    t: &ExpectationTotals,
) -> Result<VariationalState> {
    let sigma = &problem.sigma_mat;
    let a = sigma + &t.psi;
    let scale = sigma[(0, 0)].abs().max(1.0);
    let f = jittered_cholesky(&a, scale, "optimal inducing posterior")?;
    let mean = sigma * f.solve_vec(&t.omega_cy);
    let mut cov = sigma * f.solve(sigma);
    symmetrize(&mut cov);
    let l = jittered_cholesky(&cov, scale, "optimal inducing covariance")?.l();
    if !l.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(0));
    }
    Ok(VariationalState {
        mean,
        cov_chol: l,
        hyper: hyper.clone(),
    })
}

/// The bound with `q(s_I)` collapsed to its optimum, without the offset
/// returned by [`reduced_constant`].
pub fn elbo_reduced(problem: &Problem, hyper: &HyperPosterior) -> Result<f64> {
    let t = expectation_totals_fused(problem, hyper);
    let sigma = &problem.sigma_mat;
    let a = sigma + &t.psi;
    let f = jittered_cholesky(&a, sigma[(0, 0)].abs().max(1.0), "collapsed bound")?;
    let fit = t.omega_cy.dot(&f.solve_vec(&t.omega_cy));
    let bracket =
        fit - t.upsilon_trace + trace_prod(&problem.sigma_inv, &t.psi) - f.log_det() + problem.prior.bracket(hyper);
    Ok(0.5 * bracket)
}

/// `elbo_full(optimal state) - elbo_reduced`
pub fn reduced_constant(problem: &Problem) -> f64 {
    let blocks: f64 = problem.blocks.iter().map(|b| b.constant).sum();
    blocks + 0.5 * problem.sigma.log_det() + problem.prior.constant(problem.dim())
}

/// Collapsed bound, its gradient in the hyperparameter posterior, and the
/// optimal state. The gradient is contracted directly against the factor of
/// `Σ + Ψ` rather than read off the full gradient at the optimum, which keeps
/// it accurate when `Σ` is poorly conditioned.
pub fn collapsed_gradient(problem: &Problem, hyper: &HyperPosterior) -> Result<(f64, HyperGrad, VariationalState)> {
    let t = expectation_totals_fused(problem, hyper);
    let sigma = &problem.sigma_mat;
    let a = sigma + &t.psi;
    let f = jittered_cholesky(&a, sigma[(0, 0)].abs().max(1.0), "collapsed bound")?;
    let p = f.solve_vec(&t.omega_cy);
    let bracket = t.omega_cy.dot(&p) - t.upsilon_trace + trace_prod(&problem.sigma_inv, &t.psi) - f.log_det()
        + problem.prior.bracket(hyper);
    let mut g = (&problem.sigma_inv - f.inverse() - &p * p.transpose()) * 0.5;
    symmetrize(&mut g);
    let parts: Vec<_> = problem
        .blocks
        .par_iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            contract_block(
                &b.inputs,
                &b.noise.inverse,
                &b.cinv_y,
                b.noise.diagonal,
                &problem.inducing,
                hyper,
                &p,
                &g,
                true,
            )
            .grad
        })
        .collect();
    let mut grad = problem.prior.neg_kl_grad(hyper);
    for c in parts {
        grad += &c;
    }
    let state = optimal_from_totals(problem, hyper, &t)?;
    Ok((0.5 * bracket + reduced_constant(problem), grad, state))
}

/// Collapsed bound (complete, constants included) and the optimal state for
/// `hyper`, sharing one pass over the data.
pub fn collapsed_optimum(problem: &Problem, hyper: &HyperPosterior) -> Result<(f64, VariationalState)> {
    let t = expectation_totals_fused(problem, hyper);
    let sigma = &problem.sigma_mat;
    let a = sigma + &t.psi;
    let f = jittered_cholesky(&a, sigma[(0, 0)].abs().max(1.0), "collapsed bound")?;
    let fit = t.omega_cy.dot(&f.solve_vec(&t.omega_cy));
    let bracket =
        fit - t.upsilon_trace + trace_prod(&problem.sigma_inv, &t.psi) - f.log_det() + problem.prior.bracket(hyper);
    let state = optimal_from_totals(problem, hyper, &t)?;
    Ok((0.5 * bracket + reduced_constant(problem), state))
}
