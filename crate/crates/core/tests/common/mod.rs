#![allow(dead_code)]

pub mod oracle;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbsgpr::elbo::VariationalState;
use vbsgpr::{HyperPosterior, HyperPrior, InducingSet, NoiseModel, NoiseParams, Problem, Variant};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(rng, lo, hi))
}

pub fn noise_params(rng: &mut ChaCha8Rng, d: usize, n_u: usize) -> NoiseParams {
    NoiseParams {
        eps_inv_lengthscales: DVector::from_fn(d, |_, _| uniform(rng, 0.5, 1.5)),
        eps_signal_std: uniform(rng, 0.3, 0.8),
        noise_std: uniform(rng, 0.2, 0.5),
        eps_inducing: random_matrix(rng, n_u, d, -1.5, 1.5),
    }
}

/// Partition `0..n` into `b` contiguous blocks of near equal size.
pub fn even_blocks(n: usize, b: usize) -> Vec<Vec<usize>> {
    (0..b).map(|i| (i * n / b..(i + 1) * n / b).collect()).collect()
}

pub struct Instance {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub blocks: usize,
    pub prior: HyperPrior,
}

impl Instance {
    pub fn new(variant: Variant, n: usize, m: usize, d: usize, blocks: usize) -> Self {
        Self {
            variant,
            n,
            m,
            d,
            blocks,
            prior: HyperPrior::standard(),
        }
    }
}

pub fn problem(inst: &Instance, seed: u64) -> Problem {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, inst.n, inst.d, -1.5, 1.5);
    let y = DVector::from_fn(inst.n, |i, _| {
        (2.0 * x[(i, 0)]).sin() + 0.3 * uniform(&mut r, -1.0, 1.0)
    });
    let z = spaced_points(&mut r, inst.m, inst.d, 0.6);
    let inducing = InducingSet::new(z, 1.0).unwrap();
    let noise = NoiseModel::new(inst.variant, noise_params(&mut r, inst.d, 3)).unwrap();
    Problem::new(&x, &y, &even_blocks(inst.n, inst.blocks), inducing, noise, inst.prior).unwrap()
}

pub fn hyper(r: &mut ChaCha8Rng, d: usize) -> HyperPosterior {
    HyperPosterior {
        ls_mean: DVector::from_fn(d, |_, _| uniform(r, 0.5, 1.5)),
        ls_var: DVector::from_fn(d, |_, _| uniform(r, 0.01, 0.3)),
        signal_mean: uniform(r, 0.6, 1.4),
        signal_var: uniform(r, 0.05, 0.3),
    }
}

pub fn state(problem: &Problem, seed: u64) -> VariationalState {
    let mut r = rng(seed);
    let m = problem.n_inducing();
    let mean = DVector::from_fn(m, |_, _| uniform(&mut r, -0.5, 0.5));
    let mut l = problem.sigma.l() * 0.7;
    for i in 0..m {
        for j in 0..i {
            l[(i, j)] += 0.05 * uniform(&mut r, -1.0, 1.0);
        }
    }
    VariationalState {
        mean,
        cov_chol: l,
        hyper: hyper(&mut r, problem.dim()),
    }
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let mut a = x.clone();
        let mut b = x.clone();
        a[k] += h;
        b[k] -= h;
        g[k] = (f(&a) - f(&b)) / (2.0 * h);
    }
    g
}

/// `|a - b| <= rel * max(|a|, |b|) + abs` for every coordinate.
pub fn close(a: &DVector<f64>, b: &DVector<f64>, rel: f64, abs: f64) -> Result<(), String> {
    for k in 0..a.len() {
        let tol = rel * a[k].abs().max(b[k].abs()) + abs;
        if (a[k] - b[k]).abs() > tol {
            return Err(format!("coordinate {k}: {} vs {} (tol {tol:e})", a[k], b[k]));
        }
    }
    Ok(())
}

/// Random points in `[-1.5, 1.5]^d` at least `min_dist` apart, so that the
/// inducing covariance stays well conditioned.
pub fn spaced_points(r: &mut ChaCha8Rng, m: usize, d: usize, min_dist: f64) -> DMatrix<f64> {
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0;
    while pts.len() < m {
        let c: Vec<f64> = (0..d).map(|_| uniform(r, -1.5, 1.5)).collect();
        tries += 1;
        let ok = pts
            .iter()
            .all(|p| p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist);
        if ok || tries > 10_000 {
            pts.push(c);
        }
    }
    DMatrix::from_fn(m, d, |i, k| pts[i][k])
}

pub fn row(a: &DMatrix<f64>, i: usize) -> Vec<f64> {
    a.row(i).iter().copied().collect()
}
