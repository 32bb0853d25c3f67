//! Error metrics, Gaussian divergences and the convergence diagnostic.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::elbo::{collapsed_gradient, collapsed_optimum, VariationalState};
use crate::error::{Error, Result};
use crate::expectations::HyperPosterior;
use crate::linalg::{jittered_cholesky, log_det_from_triangular};
use crate::problem::Problem;
use crate::svi::{train_with, TrainConfig};

pub fn rmse(y: &DVector<f64>, mean: &DVector<f64>) -> f64 {
    assert_eq!(y.len(), mean.len());
    if y.is_empty() {
        return f64::NAN;
    }
    ((y - mean).norm_squared() / y.len() as f64).sqrt()
}

/// Mean negative log probability of `y` under independent Gaussians.
pub fn mnlp(y: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    assert_eq!(y.len(), mean.len());
    assert_eq!(y.len(), var.len());
    if y.is_empty() {
        return f64::NAN;
    }
    let mut s = 0.0;
    for i in 0..y.len() {
        let v = var[i].max(f64::MIN_POSITIVE);
        let r = y[i] - mean[i];
        s += r * r / v + (2.0 * std::f64::consts::PI * v).ln();
    }
    0.5 * s / y.len() as f64
}

/// `KL(N(m0, L0 L0ᵀ) || N(m1, L1 L1ᵀ))` from lower Cholesky factors.
pub fn gaussian_kl_chol(m0: &DVector<f64>, l0: &DMatrix<f64>, m1: &DVector<f64>, l1: &DMatrix<f64>) -> f64 {
    let k = m0.len() as f64;
    let a = l1.solve_lower_triangular(l0).expect("non-singular factor");
    let b = l1.solve_lower_triangular(&(m1 - m0)).expect("non-singular factor");
    0.5 * (a.norm_squared() + b.norm_squared() - k + log_det_from_triangular(l1) - log_det_from_triangular(l0))
}

/// `KL(N(m0, s0) || N(m1, s1))`
pub fn gaussian_kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    let l0 = jittered_cholesky(s0, 1.0, "first covariance")?.l();
    let l1 = jittered_cholesky(s1, 1.0, "second covariance")?.l();
    Ok(gaussian_kl_chol(m0, &l0, m1, &l1))
}

fn kl_1d(m0: f64, v0: f64, m1: f64, v1: f64) -> f64 {
    0.5 * ((v1 / v0).ln() + (v0 + (m0 - m1) * (m0 - m1)) / v1 - 1.0)
}

/// `KL(p || q)` between two factorized hyperparameter posteriors.
pub fn hyper_kl(p: &HyperPosterior, q: &HyperPosterior) -> f64 {
    let mut s = 0.0;
    for k in 0..p.dim() {
        s += kl_1d(p.ls_mean[k], p.ls_var[k], q.ls_mean[k], q.ls_var[k]);
    }
    s + kl_1d(p.signal_mean, p.signal_var, q.signal_mean, q.signal_var)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub n_test: usize,
    pub rmse: f64,
    pub mnlp: f64,
    pub seconds: f64,
}

impl MetricReport {
    pub const HEADER: [&'static str; 5] = ["variant", "n_test", "rmse", "mnlp", "seconds"];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::HEADER)?;
        wr.write_record([
            self.variant.clone(),
            self.n_test.to_string(),
            self.rmse.to_string(),
            self.mnlp.to_string(),
            self.seconds.to_string(),
        ])?;
        wr.flush()?;
        Ok(())
    }
}

/// Settings of the exact-gradient reference ascent.
#[derive(Clone, Debug)]
pub struct ReferenceConfig {
    pub max_iters: usize,
    /// Stop once the gradient norm in transformed coordinates falls below
    /// this.
    pub grad_tol: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
        }
    }
}

/// Outcome of the reference ascent.
#[derive(Clone, Debug)]
pub struct ReferenceOptimum {
    pub state: VariationalState,
    pub bound: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Hyperparameter posterior as unconstrained coordinates: means as is,
/// variances through logs.
fn hyper_coords(h: &HyperPosterior) -> DVector<f64> {
    let d = h.dim();
    let mut v = Vec::with_capacity(2 * d + 2);
    v.extend(h.ls_mean.iter());
    v.extend(h.ls_var.iter().map(|x| x.ln()));
    v.push(h.signal_mean);
    v.push(h.signal_var.ln());
    DVector::from_vec(v)
}

fn hyper_from_coords(v: &DVector<f64>, d: usize) -> HyperPosterior {
    HyperPosterior {
        ls_mean: DVector::from_iterator(d, v.iter().take(d).copied()),
        ls_var: DVector::from_iterator(d, v.iter().skip(d).take(d).map(|x| x.exp())),
        signal_mean: v[2 * d],
        signal_var: v[2 * d + 1].exp(),
    }
}

/// Collapsed bound, its gradient in the coordinates of [`hyper_coords`], and
/// the optimal state.
fn collapsed_eval(problem: &Problem, h: &HyperPosterior) -> Result<(f64, DVector<f64>, VariationalState)> {
    let (f, g, state) = collapsed_gradient(problem, h)?;
    let mut v = Vec::new();
    v.extend(g.ls_mean.iter());
    v.extend(g.ls_var.iter().zip(h.ls_var.iter()).map(|(a, b)| a * b));
    v.push(g.signal_mean);
    v.push(g.signal_var * h.signal_var);
    Ok((f, DVector::from_vec(v), state))
}

/// Exact-gradient ascent on the collapsed bound, with the inducing
/// posterior kept at its optimum throughout. Search directions come from a
/// BFGS inverse-Hessian estimate, step lengths from Armijo backtracking.
pub fn reference_optimum(
    problem: &Problem,
    start: &HyperPosterior,
    config: &ReferenceConfig,
) -> Result<ReferenceOptimum> {
    let d = start.dim();
    let n = 2 * d + 2;
    let mut x = hyper_coords(start);
    let (mut f, mut g, mut state) = collapsed_eval(problem, start)?;
    let mut it = 0;
    let reset = |g: &DVector<f64>| DMatrix::identity(n, n) * (0.1 / g.norm().max(1e-12)).min(1.0);
    let mut hinv = reset(&g);
    let mut fresh = true;
    while it < config.max_iters && g.norm() > config.grad_tol {
        it += 1;
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = reset(&g);
            fresh = true;
            dir = &hinv * &g;
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &x + &dir * t;
            let h = hyper_from_coords(&cand, d);
            if let Ok((fc, gc, sc)) = collapsed_eval(problem, &h) {
                if fc.is_finite() && fc >= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc, gc, sc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn, sn)) = accepted else {
            // a stale curvature estimate can point nowhere useful; retry
            // once along the gradient before giving up
            if fresh {
                break;
            }
            hinv = reset(&g);
            fresh = true;
            continue;
        };
        let was_fresh = fresh;
        fresh = false;
        log::debug!("reference iter {it}: bound {fnew:.6} step {t:e} grad {:.3e}", gn.norm());
        let sv = &xn - &x;
        let yv = &g - &gn;
        let sy = sv.dot(&yv);
        if sy > 1e-12 * sv.norm() * yv.norm() {
            if it == 1 {
                hinv = DMatrix::identity(n, n) * (sy / yv.norm_squared());
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let a = &eye - &sv * yv.transpose() * rho;
            hinv = &a * &hinv * a.transpose() + &sv * sv.transpose() * rho;
        }
        let stalled = (fnew - f).abs() <= 1e-14 * f.abs().max(1.0);
        x = xn;
        f = fnew;
        state = sn;
        g = gn;
        if stalled {
            if was_fresh {
                break;
            }
            hinv = reset(&g);
            fresh = true;
        }
    }
    Ok(ReferenceOptimum {
        grad_norm: g.norm(),
        state,
        bound: f,
        iterations: it,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub iter: usize,
    /// KL from the reference inducing posterior to the current one.
    pub kl_inducing: f64,
    /// KL from the reference hyperparameter posterior to the current one.
    pub kl_hyper: f64,
    /// KL from the optimal inducing posterior for the current
    /// hyperparameters to the current one.
    pub kl_inducing_to_optimal: f64,
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub reference: ReferenceOptimum,
    pub rows: Vec<ConvergenceRow>,
    pub final_state: VariationalState,
    /// Least-squares slope of `log KL` against iteration.
    pub slope_inducing: f64,
    pub slope_hyper: f64,
}

impl ConvergenceReport {
    pub const HEADER: [&'static str; 4] = ["iter", "kl_inducing", "kl_hyper", "kl_inducing_to_optimal"];

    pub fn initial(&self) -> &ConvergenceRow {
        &self.rows[0]
    }

    /// Smallest KL values seen, as fractions of the initial values.
    pub fn best_ratios(&self) -> (f64, f64) {
        let r0 = self.initial();
        let bi = self.rows.iter().map(|r| r.kl_inducing).fold(f64::INFINITY, f64::min);
        let bh = self.rows.iter().map(|r| r.kl_hyper).fold(f64::INFINITY, f64::min);
        (bi / r0.kl_inducing, bh / r0.kl_hyper)
    }

    /// Final KL values as fractions of the initial values.
    pub fn final_ratios(&self) -> (f64, f64) {
        let r0 = self.initial();
        let rl = self.rows.last().expect("at least one row");
        (rl.kl_inducing / r0.kl_inducing, rl.kl_hyper / r0.kl_hyper)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::HEADER)?;
        for r in &self.rows {
            wr.write_record([
                r.iter.to_string(),
                r.kl_inducing.to_string(),
                r.kl_hyper.to_string(),
                r.kl_inducing_to_optimal.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceConfig {
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    /// Record a row every this many iterations.
    pub every: usize,
    /// Also compute the KL to the optimum for the current hyperparameters,
    /// which costs a pass over all the data.
    pub track_optimal: bool,
}

/// Runs the reference ascent, then a stochastic run from `start`, recording
/// the divergence of the stochastic iterates from the reference.
pub fn convergence_study(
    problem: &mut Problem,
    start: &VariationalState,
    config: &ConvergenceConfig,
) -> Result<ConvergenceReport> {
    let reference = reference_optimum(problem, &start.hyper, &config.reference)?;
    let every = config.every.max(1);
    let mut rows = Vec::new();
    let row_for = |problem: &Problem, it: usize, s: &VariationalState| -> ConvergenceRow {
        let kl_inducing = gaussian_kl_chol(&reference.state.mean, &reference.state.cov_chol, &s.mean, &s.cov_chol);
        let kl_hyper = hyper_kl(&reference.state.hyper, &s.hyper);
        let kl_inducing_to_optimal = if config.track_optimal {
            collapsed_optimum(problem, &s.hyper)
                .map(|(_, o)| gaussian_kl_chol(&o.mean, &o.cov_chol, &s.mean, &s.cov_chol))
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        ConvergenceRow {
            iter: it,
            kl_inducing,
            kl_hyper,
            kl_inducing_to_optimal,
        }
    };
    rows.push(row_for(problem, 0, start));
    let snapshot = problem.clone();
    let outcome = train_with(problem, start.clone(), &config.train, |it, s| {
        if (it + 1) % every == 0 {
            rows.push(row_for(&snapshot, it + 1, s));
        }
    })?;
    if rows.len() < 2 {
        return Err(Error::InvalidParameter(
            "convergence study recorded fewer than two rows".into(),
        ));
    }
    let slope_inducing = log_slope(&rows, |r| r.kl_inducing);
    let slope_hyper = log_slope(&rows, |r| r.kl_hyper);
    Ok(ConvergenceReport {
        reference,
        rows,
        final_state: outcome.state,
        slope_inducing,
        slope_hyper,
    })
}

fn log_slope(rows: &[ConvergenceRow], f: impl Fn(&ConvergenceRow) -> f64) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| f(r) > 0.0)
        .map(|r| (r.iter as f64, f(r).ln()))
        .collect();
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
