//! Gaussian prior on the kernel hyperparameters.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::expectations::{HyperGrad, HyperPosterior};

/// Independent `N(mean, var)` priors on every inverted lengthscale and on
/// the signal std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub ls_mean: f64,
    pub ls_var: f64,
    pub signal_mean: f64,
    pub signal_var: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorPreset {
    /// `N(0, 1)` on everything.
    Standard,
    /// `N(1, 0.1)` on everything.
    Informative,
}

impl FromStr for PriorPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "standard" => Ok(PriorPreset::Standard),
            "informative" => Ok(PriorPreset::Informative),
            _ => Err(Error::InvalidParameter(format!("unknown prior preset `{s}`"))),
        }
    }
}

impl HyperPrior {
    pub fn standard() -> Self {
        Self {
            ls_mean: 0.0,
            ls_var: 1.0,
            signal_mean: 0.0,
            signal_var: 1.0,
        }
    }

    pub fn informative() -> Self {
        Self {
            ls_mean: 1.0,
            ls_var: 0.1,
            signal_mean: 1.0,
            signal_var: 0.1,
        }
    }

    pub fn from_preset(p: PriorPreset) -> Self {
        match p {
            PriorPreset::Standard => Self::standard(),
            PriorPreset::Informative => Self::informative(),
        }
    }

    /// `KL(q || p)` summed over all hyperparameters.
    pub fn kl(&self, h: &HyperPosterior) -> f64 {
        let mut s = 0.0;
        for k in 0..h.dim() {
            s += kl_1d(h.ls_mean[k], h.ls_var[k], self.ls_mean, self.ls_var);
        }
        s + kl_1d(h.signal_mean, h.signal_var, self.signal_mean, self.signal_var)
    }

    /// Gradient of `-KL(q || p)`.
    pub fn neg_kl_grad(&self, h: &HyperPosterior) -> HyperGrad {
        let d = h.dim();
        let mut g = HyperGrad::zeros(d);
        for k in 0..d {
            g.ls_mean[k] = -(h.ls_mean[k] - self.ls_mean) / self.ls_var;
            g.ls_var[k] = -0.5 / self.ls_var + 0.5 / h.ls_var[k];
        }
        g.signal_mean = -(h.signal_mean - self.signal_mean) / self.signal_var;
        g.signal_var = -0.5 / self.signal_var + 0.5 / h.signal_var;
        g
    }

    /// Parameter-dependent part of `-2 KL`.
    pub fn bracket(&self, h: &HyperPosterior) -> f64 {
        let term = |m: f64, v: f64, m0: f64, v0: f64| -(m - m0) * (m - m0) / v0 - v / v0 + v.ln();
        let mut s = 0.0;
        for k in 0..h.dim() {
            s += term(h.ls_mean[k], h.ls_var[k], self.ls_mean, self.ls_var);
        }
        s + term(h.signal_mean, h.signal_var, self.signal_mean, self.signal_var)
    }

    /// `-KL = ½ bracket + constant`
    pub fn constant(&self, d: usize) -> f64 {
        0.5 * d as f64 * (1.0 - self.ls_var.ln()) + 0.5 * (1.0 - self.signal_var.ln())
    }
}

fn kl_1d(m: f64, v: f64, m0: f64, v0: f64) -> f64 {
    0.5 * ((v0 / v).ln() + (v + (m - m0) * (m - m0)) / v0 - 1.0)
}
