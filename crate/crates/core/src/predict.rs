//! Predictive distributions of the latent function at test inputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::nearest;
use crate::elbo::VariationalState;
use crate::error::Result;
use crate::expectations::{omega_entry, psi_point, HyperPosterior};
use crate::kernel::{cross, gram, row, InducingSet, KernelParams};
use crate::linalg::{jittered_cholesky, symmetrize, trace_prod, Factor};

/// Pointwise Gaussian predictive: latent mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl Prediction {
    pub fn empty() -> Self {
        Self {
            mean: DVector::zeros(0),
            variance: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Predictive that integrates the hyperparameters analytically, using only
/// the inducing variables.
pub fn predict_analytic(
    inducing: &InducingSet,
    sigma: &Factor,
    state: &VariationalState,
    xs: &DMatrix<f64>,
) -> Prediction {
    let p = sigma.solve_vec(&state.mean);
    let w = sigma.solve(&state.cov_chol);
    // Σ^{-1} S Σ^{-1} - Σ^{-1} + p pᵀ
    let mut a = &w * w.transpose() - sigma.inverse() + &p * p.transpose();
    symmetrize(&mut a);
    let m2 = state.hyper.signal_second_moment();
    let zs: Vec<Vec<f64>> = (0..inducing.len()).map(|i| row(&inducing.inputs, i)).collect();
    let out: Vec<(f64, f64)> = (0..xs.nrows())
        .into_par_iter()
        .map(|i| {
            let x = row(xs, i);
            let om = DVector::from_iterator(
                zs.len(),
                zs.iter().map(|z| inducing.scale * omega_entry(z, &x, &state.hyper)),
            );
            let mu = om.dot(&p);
            let psi = psi_point(&x, inducing, &state.hyper);
            let var = m2 + trace_prod(&psi, &a) - mu * mu;
            (mu, var.max(0.0))
        })
        .collect();
    Prediction {
        mean: DVector::from_iterator(out.len(), out.iter().map(|v| v.0)),
        variance: DVector::from_iterator(out.len(), out.iter().map(|v| v.1)),
    }
}

/// One training block kept for local prediction.
#[derive(Clone, Debug)]
pub struct LocalBlock {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LocalBlock {
    pub fn empty(d: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(0, d),
            targets: DVector::zeros(0),
            noise_cov: DMatrix::zeros(0, 0),
        }
    }
}

/// Training blocks with the centroids used to route test points to them.
#[derive(Clone, Debug)]
pub struct LocalBlocks {
    pub centroids: DMatrix<f64>,
    pub blocks: Vec<LocalBlock>,
}

/// Draws `(Λ, σ_f)` from the hyperparameter posterior.
pub fn sample_hyper(h: &HyperPosterior, rng: &mut ChaCha8Rng) -> KernelParams {
    let mut ls = h.ls_mean.clone();
    for k in 0..ls.len() {
        let e: f64 = rng.sample(StandardNormal);
        ls[k] += h.ls_var[k].sqrt() * e;
    }
    let e: f64 = rng.sample(StandardNormal);
    KernelParams::new(ls, h.signal_mean + h.signal_var.sqrt() * e)
}

/// Local predictive for test points that all belong to `block`, averaging
/// over `samples` hyperparameter draws.
///
/// For each draw the latent value is conditioned jointly on the inducing
/// variables and the block's targets; the result is moment-matched over the
/// draws.
pub fn predict_in_block(
    inducing: &InducingSet,
    state: &VariationalState,
    block: &LocalBlock,
    xs: &DMatrix<f64>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction> {
    let ns = xs.nrows();
    if ns == 0 {
        return Ok(Prediction::empty());
    }
    let m = inducing.len();
    let nb = block.targets.len();
    let sigma = inducing.covariance();
    let mut rhs = DVector::zeros(m + nb);
    rhs.rows_mut(0, m).copy_from(&state.mean);
    rhs.rows_mut(m, nb).copy_from(&block.targets);

    let samples = samples.max(1);
    let mut mean_acc = DVector::<f64>::zeros(ns);
    let mut sq_acc = DVector::<f64>::zeros(ns);
    let mut var_acc = DVector::<f64>::zeros(ns);
    for _ in 0..samples {
        let kp = sample_hyper(&state.hyper, rng);
        let mut joint = DMatrix::zeros(m + nb, m + nb);
        joint.view_mut((0, 0), (m, m)).copy_from(&sigma);
        if nb > 0 {
            let kbi = cross(&block.inputs, inducing, &kp);
            let kbb = gram(&block.inputs, &block.inputs, &kp) + &block.noise_cov;
            joint.view_mut((m, 0), (nb, m)).copy_from(&kbi);
            joint.view_mut((0, m), (m, nb)).copy_from(&kbi.transpose());
            joint.view_mut((m, m), (nb, nb)).copy_from(&kbb);
        }
        let scale = (inducing.scale * inducing.scale).max(kp.signal_std * kp.signal_std);
        let f = jittered_cholesky(&joint, scale, "local predictive covariance")?;
        let coef = f.solve_vec(&rhs);
        // columns: test points
        let mut kstar = DMatrix::zeros(m + nb, ns);
        kstar
            .view_mut((0, 0), (m, ns))
            .copy_from(&cross(xs, inducing, &kp).transpose());
        if nb > 0 {
            kstar
                .view_mut((m, 0), (nb, ns))
                .copy_from(&gram(&block.inputs, xs, &kp));
        }
        let v = f.solve(&kstar);
        let av = state.cov_chol.transpose() * v.rows(0, m);
        let s2 = kp.signal_std * kp.signal_std;
        for j in 0..ns {
            let mu = kstar.column(j).dot(&coef);
            let cond = s2 - kstar.column(j).dot(&v.column(j)) + av.column(j).norm_squared();
            mean_acc[j] += mu;
            sq_acc[j] += mu * mu;
            var_acc[j] += cond;
        }
    }
    let n = samples as f64;
    let mean = mean_acc / n;
    let variance = DVector::from_fn(ns, |j, _| {
        let spread = (sq_acc[j] / n - mean[j] * mean[j]).max(0.0);
        (var_acc[j] / n + spread).max(0.0)
    });
    Ok(Prediction { mean, variance })
}

/// Local predictive for arbitrary test points: each point goes to the block
/// with the nearest centroid (lowest index on ties). Draws are seeded per
/// block, so results do not depend on thread scheduling.
pub fn predict_local(
    inducing: &InducingSet,
    state: &VariationalState,
    local: &LocalBlocks,
    xs: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Prediction> {
    let n = xs.nrows();
    let nblocks = local.blocks.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); nblocks];
    for i in 0..n {
        groups[nearest(&local.centroids, &row(xs, i))].push(i);
    }
    let parts: Vec<Result<Prediction>> = groups
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let x = DMatrix::from_fn(idx.len(), xs.ncols(), |i, k| xs[(idx[i], k)]);
            let mut rng = ChaCha8Rng::seed_from_u64(block_seed(seed, b));
            predict_in_block(inducing, state, &local.blocks[b], &x, samples, &mut rng)
        })
        .collect();
    let mut mean = DVector::zeros(n);
    let mut variance = DVector::zeros(n);
    for (idx, part) in groups.iter().zip(parts) {
        let part = part?;
        for (j, &i) in idx.iter().enumerate() {
            mean[i] = part.mean[j];
            variance[i] = part.variance[j];
        }
    }
    Ok(Prediction { mean, variance })
}

fn block_seed(seed: u64, block: usize) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
