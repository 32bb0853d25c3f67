//! Monte-Carlo estimates of the kernel expectations, drawing the
//! hyperparameters directly instead of using the closed forms.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vbsgpr::kernel::{cov_ff, cov_fs, KernelParams};
use vbsgpr::HyperPosterior;

pub fn draw(h: &HyperPosterior, rng: &mut ChaCha8Rng) -> KernelParams {
    let d = h.dim();
    let mut ls = h.ls_mean.clone();
    for k in 0..d {
        let e: f64 = rng.sample(StandardNormal);
        ls[k] += h.ls_var[k].sqrt() * e;
    }
    let e: f64 = rng.sample(StandardNormal);
    KernelParams::new(ls, h.signal_mean + h.signal_var.sqrt() * e)
}

/// Running mean and standard error.
#[derive(Default, Clone, Copy, Debug)]
pub struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std_err(&self) -> f64 {
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

pub fn omega(z: &[f64], x: &[f64], h: &HyperPosterior, draws: usize, rng: &mut ChaCha8Rng) -> Moments {
    let mut m = Moments::default();
    for _ in 0..draws {
        let p = draw(h, rng);
        m.push(cov_fs(x, z, &p, 1.0));
    }
    m
}

pub fn gamma(x: &[f64], xp: &[f64], h: &HyperPosterior, draws: usize, rng: &mut ChaCha8Rng) -> Moments {
    let mut m = Moments::default();
    for _ in 0..draws {
        let p = draw(h, rng);
        m.push(cov_ff(x, xp, &p));
    }
    m
}

/// Every entry of `Σ_{x,x'} c_{xx'} E[k(z, x) k(x', z')]`.
pub fn psi_block(
    xs: &[Vec<f64>],
    c: &DMatrix<f64>,
    zs: &[Vec<f64>],
    h: &HyperPosterior,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Moments>> {
    let m = zs.len();
    let n = xs.len();
    let mut out = vec![vec![Moments::default(); m]; m];
    let mut k = DMatrix::zeros(m, n);
    for _ in 0..draws {
        let p = draw(h, rng);
        for i in 0..m {
            for a in 0..n {
                k[(i, a)] = cov_fs(&xs[a], &zs[i], &p, 1.0);
            }
        }
        let v = &k * c * k.transpose();
        for i in 0..m {
            for j in 0..m {
                out[i][j].push(v[(i, j)]);
            }
        }
    }
    out
}
