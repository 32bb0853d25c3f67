//! Squared-exponential covariances between latent outputs `f` and the
//! rotated inducing variables `s`.
//!
//! With `Λ` the diagonal matrix of inverted lengthscales:
//!
//! * `cov(f_x, f_x') = σ_f² exp(-½‖Λx - Λx'‖²)`
//! * `cov(f_x, s_z)  = ζ σ_f exp(-½‖Λx - z‖²)`
//! * `cov(s_z, s_z') = ζ² exp(-½‖z - z'‖²)`
//!
//! The last one does not depend on the hyperparameters, so `Σ_II` is
//! fixed once the inducing inputs are chosen.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{jittered_cholesky, Factor};

/// A point value of the kernel hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub inv_lengthscales: DVector<f64>,
    pub signal_std: f64,
}

impl KernelParams {
    pub fn new(inv_lengthscales: DVector<f64>, signal_std: f64) -> Self {
        Self {
            inv_lengthscales,
            signal_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.inv_lengthscales.len()
    }
}

/// Inducing inputs in the rotated space, one row per inducing variable.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingSet {
    pub inputs: DMatrix<f64>,
    pub scale: f64,
}

impl InducingSet {
    pub fn new(inputs: DMatrix<f64>, scale: f64) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidParameter("inducing set is empty".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inducing scale must be positive, got {scale}"
            )));
        }
        Ok(Self { inputs, scale })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// `Σ_II`
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.len();
        let z2 = self.scale * self.scale;
        DMatrix::from_fn(m, m, |i, j| {
            z2 * (-0.5 * sq_dist_rows(&self.inputs, i, &self.inputs, j)).exp()
        })
    }

    pub fn factor(&self) -> Result<Factor> {
        jittered_cholesky(&self.covariance(), self.scale * self.scale, "inducing covariance")
    }
}

pub(crate) fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        s += d * d;
    }
    s
}

pub fn cov_ff(x: &[f64], xp: &[f64], p: &KernelParams) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let d = p.inv_lengthscales[k] * (x[k] - xp[k]);
        s += d * d;
    }
    p.signal_std * p.signal_std * (-0.5 * s).exp()
}

pub fn cov_fs(x: &[f64], z: &[f64], p: &KernelParams, scale: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let d = p.inv_lengthscales[k] * x[k] - z[k];
        s += d * d;
    }
    scale * p.signal_std * (-0.5 * s).exp()
}

pub fn cov_ss(z: &[f64], zp: &[f64], scale: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..z.len() {
        let d = z[k] - zp[k];
        s += d * d;
    }
    scale * scale * (-0.5 * s).exp()
}

/// `K_{AB}` between the rows of `a` and `b`.
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &KernelParams) -> DMatrix<f64> {
    let sa = scale_rows(a, &p.inv_lengthscales);
    let sb = scale_rows(b, &p.inv_lengthscales);
    let s2 = p.signal_std * p.signal_std;
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        s2 * (-0.5 * sq_dist_rows(&sa, i, &sb, j)).exp()
    })
}

/// `K_{AI}`: covariance between latent values at the rows of `a` and the
/// inducing variables.
pub fn cross(a: &DMatrix<f64>, inducing: &InducingSet, p: &KernelParams) -> DMatrix<f64> {
    let sa = scale_rows(a, &p.inv_lengthscales);
    let c = inducing.scale * p.signal_std;
    DMatrix::from_fn(a.nrows(), inducing.len(), |i, j| {
        c * (-0.5 * sq_dist_rows(&sa, i, &inducing.inputs, j)).exp()
    })
}

/// Multiplies column `k` of `a` by `w[k]`.
pub fn scale_rows(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for k in 0..a.ncols() {
        out.column_mut(k).scale_mut(w[k]);
    }
    out
}

pub fn row(a: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..a.ncols()).map(|k| a[(i, k)]).collect()
}
