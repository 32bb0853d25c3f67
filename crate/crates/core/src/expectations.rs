//! Closed-form expectations of kernel quantities under the factorized
//! Gaussian posterior over inverted lengthscales and signal std.
//!
//! * `ω_{zx} = E[cov(s_z, f_x)]`
//! * `ψ_{zz'}(x, x') = E[cov(s_z, f_x) cov(f_x', s_z')]`
//! * `γ_{xx'} = E[cov(f_x, f_x')]`
//!
//! Products over input dimensions are accumulated as sums of logs, so the
//! values stay representable for large input dimension.

use std::ops::{AddAssign, MulAssign};

use nalgebra::{DMatrix, DVector};

use crate::kernel::InducingSet;

/// Posterior over the kernel hyperparameters: independent Gaussians on each
/// inverted lengthscale and on the signal std.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPosterior {
    pub ls_mean: DVector<f64>,
    pub ls_var: DVector<f64>,
    pub signal_mean: f64,
    pub signal_var: f64,
}

impl HyperPosterior {
    pub fn dim(&self) -> usize {
        self.ls_mean.len()
    }

    /// `E[σ_f²]`
    pub fn signal_second_moment(&self) -> f64 {
        self.signal_var + self.signal_mean * self.signal_mean
    }

    pub fn is_valid(&self) -> bool {
        self.ls_mean.iter().all(|v| v.is_finite())
            && self.ls_var.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.signal_mean.is_finite()
            && self.signal_var.is_finite()
            && self.signal_var >= 0.0
    }
}

/// Derivatives with respect to the fields of [`HyperPosterior`].
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGrad {
    pub ls_mean: DVector<f64>,
    pub ls_var: DVector<f64>,
    pub signal_mean: f64,
    pub signal_var: f64,
}

impl HyperGrad {
    pub fn zeros(d: usize) -> Self {
        Self {
            ls_mean: DVector::zeros(d),
            ls_var: DVector::zeros(d),
            signal_mean: 0.0,
            signal_var: 0.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut g = self.clone();
        g *= c;
        g
    }
}

impl AddAssign<&HyperGrad> for HyperGrad {
    fn add_assign(&mut self, o: &HyperGrad) {
        self.ls_mean += &o.ls_mean;
        self.ls_var += &o.ls_var;
        self.signal_mean += o.signal_mean;
        self.signal_var += o.signal_var;
    }
}

impl MulAssign<f64> for HyperGrad {
    fn mul_assign(&mut self, c: f64) {
        self.ls_mean *= c;
        self.ls_var *= c;
        self.signal_mean *= c;
        self.signal_var *= c;
    }
}

/// Unit-scale `ω_{zx}`.
pub fn omega_entry(z: &[f64], x: &[f64], h: &HyperPosterior) -> f64 {
    h.signal_mean * omega_shape(z, x, h).exp()
}

/// Log of `ω_{zx} / E[σ_f]`.
fn omega_shape(z: &[f64], x: &[f64], h: &HyperPosterior) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let u = h.ls_var[k] * x[k] * x[k] + 1.0;
        let r = x[k] * h.ls_mean[k] - z[k];
        s -= 0.5 * u.ln() + r * r / (2.0 * u);
    }
    s
}

/// `ω_{zx}` and its gradient.
pub fn omega_entry_grad(z: &[f64], x: &[f64], h: &HyperPosterior) -> (f64, HyperGrad) {
    let d = x.len();
    let shape = omega_shape(z, x, h).exp();
    let v = h.signal_mean * shape;
    let mut g = HyperGrad::zeros(d);
    for k in 0..d {
        let x2 = x[k] * x[k];
        let u = h.ls_var[k] * x2 + 1.0;
        let r = x[k] * h.ls_mean[k] - z[k];
        g.ls_mean[k] = -v * r * x[k] / u;
        g.ls_var[k] = v * (-x2 / (2.0 * u) + r * r * x2 / (2.0 * u * u));
    }
    g.signal_mean = shape;
    (v, g)
}

/// Unit-scale `ψ_{zz'}(x, x')` for a single pair of inputs.
pub fn psi_entry(z: &[f64], zp: &[f64], x: &[f64], xp: &[f64], h: &HyperPosterior) -> f64 {
    h.signal_second_moment() * psi_shape(z, zp, x, xp, h).exp()
}

fn psi_shape(z: &[f64], zp: &[f64], x: &[f64], xp: &[f64], h: &HyperPosterior) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let w = h.ls_var[k] * (x[k] * x[k] + xp[k] * xp[k]) + 1.0;
        let e = psi_exponent(z[k], zp[k], x[k], xp[k], h.ls_mean[k], h.ls_var[k]);
        s -= 0.5 * w.ln() + e / (2.0 * w);
    }
    s
}

#[inline]
fn psi_exponent(z: f64, zp: f64, x: f64, xp: f64, mean: f64, var: f64) -> f64 {
    let c = zp * x - z * xp;
    let a = x * mean - z;
    let b = xp * mean - zp;
    var * c * c + a * a + b * b
}

/// `ψ_{zz'}(x, x')` and its gradient.
pub fn psi_entry_grad(z: &[f64], zp: &[f64], x: &[f64], xp: &[f64], h: &HyperPosterior) -> (f64, HyperGrad) {
    let d = x.len();
    let m2 = h.signal_second_moment();
    let v = m2 * psi_shape(z, zp, x, xp, h).exp();
    let mut g = HyperGrad::zeros(d);
    for k in 0..d {
        let (dm, dv) = psi_log_factor_grad(z[k], zp[k], x[k], xp[k], h.ls_mean[k], h.ls_var[k]);
        g.ls_mean[k] = v * dm;
        g.ls_var[k] = v * dv;
    }
    g.signal_mean = 2.0 * h.signal_mean * v / m2;
    g.signal_var = v / m2;
    (v, g)
}

/// Derivatives of the log of one dimension's factor of `ψ`.
#[inline]
fn psi_log_factor_grad(z: f64, zp: f64, x: f64, xp: f64, mean: f64, var: f64) -> (f64, f64) {
    let a2 = x * x + xp * xp;
    let w = var * a2 + 1.0;
    let c = zp * x - z * xp;
    let ra = x * mean - z;
    let rb = xp * mean - zp;
    let e = var * c * c + ra * ra + rb * rb;
    let dm = -(ra * x + rb * xp) / w;
    let dv = -a2 / (2.0 * w) - c * c / (2.0 * w) + e * a2 / (2.0 * w * w);
    (dm, dv)
}

/// `γ_{xx'}`
pub fn gamma_entry(x: &[f64], xp: &[f64], h: &HyperPosterior) -> f64 {
    h.signal_second_moment() * gamma_shape(x, xp, h).exp()
}

fn gamma_shape(x: &[f64], xp: &[f64], h: &HyperPosterior) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let dl = x[k] - xp[k];
        let d2 = dl * dl;
        let v = h.ls_var[k] * d2 + 1.0;
        s -= 0.5 * v.ln() + h.ls_mean[k] * h.ls_mean[k] * d2 / (2.0 * v);
    }
    s
}

/// `γ_{xx'}` and its gradient.
pub fn gamma_entry_grad(x: &[f64], xp: &[f64], h: &HyperPosterior) -> (f64, HyperGrad) {
    let d = x.len();
    let m2 = h.signal_second_moment();
    let val = m2 * gamma_shape(x, xp, h).exp();
    let mut g = HyperGrad::zeros(d);
    for k in 0..d {
        let (dm, dv) = gamma_log_factor_grad(x[k] - xp[k], h.ls_mean[k], h.ls_var[k]);
        g.ls_mean[k] = val * dm;
        g.ls_var[k] = val * dv;
    }
    g.signal_mean = 2.0 * h.signal_mean * val / m2;
    g.signal_var = val / m2;
    (val, g)
}

#[inline]
fn gamma_log_factor_grad(delta: f64, mean: f64, var: f64) -> (f64, f64) {
    let d2 = delta * delta;
    let v = var * d2 + 1.0;
    let dm = -mean * d2 / v;
    let dv = -d2 / (2.0 * v) + mean * mean * d2 * d2 / (2.0 * v * v);
    (dm, dv)
}

fn row(a: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..a.ncols()).map(|k| a[(i, k)]).collect()
}

/// `Ω_{ID}` for the rows of `inputs`, including the inducing scale.
pub fn omega_block(inputs: &DMatrix<f64>, inducing: &InducingSet, h: &HyperPosterior) -> DMatrix<f64> {
    let m = inducing.len();
    let zs: Vec<Vec<f64>> = (0..m).map(|i| row(&inducing.inputs, i)).collect();
    let xs: Vec<Vec<f64>> = (0..inputs.nrows()).map(|i| row(inputs, i)).collect();
    DMatrix::from_fn(m, inputs.nrows(), |i, j| {
        inducing.scale * omega_entry(&zs[i], &xs[j], h)
    })
}

/// `Ψ^i = Σ_{x,x'} c_{xx'} ψ(x, x')` for one block, with `c` the entries of
/// the block's inverse noise covariance.
pub fn psi_block(
    inputs: &DMatrix<f64>,
    cinv: &DMatrix<f64>,
    inducing: &InducingSet,
    h: &HyperPosterior,
) -> DMatrix<f64> {
    let m = inducing.len();
    let n = inputs.nrows();
    let zs: Vec<Vec<f64>> = (0..m).map(|i| row(&inducing.inputs, i)).collect();
    let xs: Vec<Vec<f64>> = (0..n).map(|i| row(inputs, i)).collect();
    let z2 = inducing.scale * inducing.scale;
    let mut out = DMatrix::zeros(m, m);
    for a in 0..n {
        for b in 0..n {
            let c = cinv[(a, b)];
            if c == 0.0 {
                continue;
            }
            for i in 0..m {
                for j in 0..m {
                    out[(i, j)] += c * z2 * psi_entry(&zs[i], &zs[j], &xs[a], &xs[b], h);
                }
            }
        }
    }
    out
}

/// `E[K_{Ix} K_{xI}]` for a single input.
pub fn psi_point(x: &[f64], inducing: &InducingSet, h: &HyperPosterior) -> DMatrix<f64> {
    let m = inducing.len();
    let zs: Vec<Vec<f64>> = (0..m).map(|i| row(&inducing.inputs, i)).collect();
    let z2 = inducing.scale * inducing.scale;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = z2 * psi_entry(&zs[i], &zs[j], x, x, h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `Υ_i = E[K_{D_i D_i}]`
pub fn upsilon_block(inputs: &DMatrix<f64>, h: &HyperPosterior) -> DMatrix<f64> {
    let n = inputs.nrows();
    let xs: Vec<Vec<f64>> = (0..n).map(|i| row(inputs, i)).collect();
    DMatrix::from_fn(n, n, |a, b| gamma_entry(&xs[a], &xs[b], h))
}

/// Everything one block contributes to the bound and its hyperparameter
/// gradient, for fixed weights.
#[derive(Clone, Debug)]
pub struct BlockContraction {
    /// `Ψ^i`
    pub psi: DMatrix<f64>,
    /// `Ω_i C_i^{-1} y_i`
    pub omega_cy: DVector<f64>,
    /// `tr(C_i^{-1} Υ_i)`
    pub upsilon_trace: f64,
    /// Gradient of `pᵀ Ω_i C_i^{-1} y_i + tr(G Ψ^i) - ½ tr(C_i^{-1} Υ_i)`.
    pub grad: HyperGrad,
}

/// Computes [`BlockContraction`] in one pass over the block.
///
/// `p` and `g` are the weights on `Ω_i C_i^{-1} y_i` and `Ψ^i`; `g` must be
/// symmetric. When `diagonal` is set only the diagonal of `cinv` is read.
#[allow(clippy::too_many_arguments)]
pub fn contract_block(
    inputs: &DMatrix<f64>,
    cinv: &DMatrix<f64>,
    cinv_y: &DVector<f64>,
    diagonal: bool,
    inducing: &InducingSet,
    h: &HyperPosterior,
    p: &DVector<f64>,
    g: &DMatrix<f64>,
    with_grad: bool,
) -> BlockContraction {
    let n = inputs.nrows();
    let m = inducing.len();
    let d = inputs.ncols();
    let zeta = inducing.scale;
    let m2 = h.signal_second_moment();
    let mut grad = HyperGrad::zeros(d);
    let mut omega_cy = DVector::zeros(m);
    let mut psi = DMatrix::zeros(m, m);

    // residuals x_k ν_k - z_k, laid out [point][inducing][dim]
    let mut resid = vec![0.0; n * m * d];
    for a in 0..n {
        for i in 0..m {
            for k in 0..d {
                resid[(a * m + i) * d + k] = inputs[(a, k)] * h.ls_mean[k] - inducing.inputs[(i, k)];
            }
        }
    }
    let r = |a: usize, i: usize| &resid[(a * m + i) * d..(a * m + i + 1) * d];

    // Ω term
    for a in 0..n {
        let q = cinv_y[a];
        let mut logu = 0.0;
        let u: Vec<f64> = (0..d)
            .map(|k| {
                let x = inputs[(a, k)];
                let u = h.ls_var[k] * x * x + 1.0;
                logu += 0.5 * u.ln();
                u
            })
            .collect();
        for i in 0..m {
            let ri = r(a, i);
            let mut s = -logu;
            for k in 0..d {
                s -= ri[k] * ri[k] / (2.0 * u[k]);
            }
            let shape = zeta * s.exp();
            omega_cy[i] += h.signal_mean * shape * q;
            if with_grad {
                let wgt = p[i] * q * shape;
                let v = wgt * h.signal_mean;
                for k in 0..d {
                    let x = inputs[(a, k)];
                    let x2 = x * x;
                    grad.ls_mean[k] -= v * ri[k] * x / u[k];
                    grad.ls_var[k] += v * (-x2 / (2.0 * u[k]) + ri[k] * ri[k] * x2 / (2.0 * u[k] * u[k]));
                }
                grad.signal_mean += wgt;
            }
        }
    }

    // Ψ term
    let mut w = vec![0.0; d];
    let mut dm = vec![0.0; d];
    let mut dv = vec![0.0; d];
    let mut weight_sum = 0.0;
    for a in 0..n {
        let lo = if diagonal { a } else { 0 };
        let hi = a;
        for b in lo..=hi {
            let c = cinv[(a, b)];
            if c == 0.0 {
                continue;
            }
            // pairs (a, b) and (b, a) contribute transposed matrices
            let c = if a == b { c } else { 2.0 * c };
            let mut logw = 0.0;
            for k in 0..d {
                let xa = inputs[(a, k)];
                let xb = inputs[(b, k)];
                w[k] = h.ls_var[k] * (xa * xa + xb * xb) + 1.0;
                logw += 0.5 * w[k].ln();
            }
            let pref = c * zeta * zeta * m2;
            for i in 0..m {
                let ra = r(a, i);
                // a single point gives a symmetric matrix: visit j >= i only
                let j0 = if a == b { i } else { 0 };
                for j in j0..m {
                    let rb = r(b, j);
                    let mut s = -logw;
                    for k in 0..d {
                        let cr = inducing.inputs[(j, k)] * inputs[(a, k)] - inducing.inputs[(i, k)] * inputs[(b, k)];
                        let e = h.ls_var[k] * cr * cr + ra[k] * ra[k] + rb[k] * rb[k];
                        s -= e / (2.0 * w[k]);
                        if with_grad {
                            let xa = inputs[(a, k)];
                            let xb = inputs[(b, k)];
                            let a2 = xa * xa + xb * xb;
                            dm[k] = -(ra[k] * xa + rb[k] * xb) / w[k];
                            dv[k] = -a2 / (2.0 * w[k]) - cr * cr / (2.0 * w[k]) + e * a2 / (2.0 * w[k] * w[k]);
                        }
                    }
                    let v = pref * s.exp();
                    psi[(i, j)] += v;
                    let mult = if a == b && j != i {
                        psi[(j, i)] += v;
                        2.0
                    } else {
                        1.0
                    };
                    if with_grad {
                        let u = mult * g[(i, j)] * v;
                        for k in 0..d {
                            grad.ls_mean[k] += u * dm[k];
                            grad.ls_var[k] += u * dv[k];
                        }
                        weight_sum += u;
                    }
                }
            }
        }
    }
    // symmetrize: off-diagonal pairs were folded into one orientation
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (psi[(i, j)] + psi[(j, i)]);
            psi[(i, j)] = v;
            psi[(j, i)] = v;
        }
    }
    if with_grad {
        grad.signal_mean += 2.0 * h.signal_mean * weight_sum / m2;
        grad.signal_var += weight_sum / m2;
    }

    // Υ term
    let mut upsilon_trace = 0.0;
    for a in 0..n {
        let lo = if diagonal { a } else { 0 };
        for b in lo..=a {
            let c = cinv[(a, b)];
            if c == 0.0 {
                continue;
            }
            let c = if a == b { c } else { 2.0 * c };
            let mut s = 0.0;
            for k in 0..d {
                let dl = inputs[(a, k)] - inputs[(b, k)];
                let d2 = dl * dl;
                let v = h.ls_var[k] * d2 + 1.0;
                s -= 0.5 * v.ln() + h.ls_mean[k] * h.ls_mean[k] * d2 / (2.0 * v);
            }
            let val = c * m2 * s.exp();
            upsilon_trace += val;
            if with_grad && a != b {
                let u = -0.5 * val;
                for k in 0..d {
                    let (gm, gv) = gamma_log_factor_grad(inputs[(a, k)] - inputs[(b, k)], h.ls_mean[k], h.ls_var[k]);
                    grad.ls_mean[k] += u * gm;
                    grad.ls_var[k] += u * gv;
                }
            }
        }
    }
    if with_grad {
        grad.signal_mean -= h.signal_mean * upsilon_trace / m2;
        grad.signal_var -= 0.5 * upsilon_trace / m2;
    }

    BlockContraction {
        psi,
        omega_cy,
        upsilon_trace,
        grad,
    }
}
