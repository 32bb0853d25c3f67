//! Noise covariance blocks for the sparse approximations.
//!
//! Every variant shares the block form
//! `C_i = K^ε_{D_i D_i} - K^ε_{D_i U} (K^ε_{UU})^{-1} K^ε_{U D_i} + σ_n² I`;
//! DTC keeps only `σ_n² I`, FIC/FITC keep the diagonal and PITC/PIC the
//! full block.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram, KernelParams};
use crate::linalg::{jittered_cholesky, Factor};

/// Relative floor for the white noise standard deviation.
pub const NOISE_STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dtc,
    Fic,
    Fitc,
    Pitc,
    Pic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Isotropic,
    Diagonal,
    Block,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Dtc, Variant::Fic, Variant::Fitc, Variant::Pitc, Variant::Pic];

    pub fn structure(self) -> Structure {
        match self {
            Variant::Dtc => Structure::Isotropic,
            Variant::Fic | Variant::Fitc => Structure::Diagonal,
            Variant::Pitc | Variant::Pic => Structure::Block,
        }
    }

    /// Whether predictions condition on the training block of the test point.
    pub fn local_predictor(self) -> bool {
        self == Variant::Pic
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dtc => "dtc",
            Variant::Fic => "fic",
            Variant::Fitc => "fitc",
            Variant::Pitc => "pitc",
            Variant::Pic => "pic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dtc" => Ok(Variant::Dtc),
            "fic" => Ok(Variant::Fic),
            "fitc" => Ok(Variant::Fitc),
            "pitc" => Ok(Variant::Pitc),
            "pic" => Ok(Variant::Pic),
            _ => Err(Error::InvalidParameter(format!("unknown variant `{s}`"))),
        }
    }
}

/// Hyperparameters of the noise process. They are point values, not
/// random variables.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParams {
    pub eps_inv_lengthscales: DVector<f64>,
    pub eps_signal_std: f64,
    pub noise_std: f64,
    /// `U_ε`, one row per inducing input of the noise process.
    pub eps_inducing: DMatrix<f64>,
}

impl NoiseParams {
    pub fn isotropic(dim: usize, noise_std: f64) -> Self {
        Self {
            eps_inv_lengthscales: DVector::from_element(dim, 1.0),
            eps_signal_std: 0.0,
            noise_std,
            eps_inducing: DMatrix::zeros(0, dim),
        }
    }

    pub fn eps_kernel(&self) -> KernelParams {
        KernelParams::new(self.eps_inv_lengthscales.clone(), self.eps_signal_std)
    }

    /// Raises `noise_std` to the floor `1e-6 * output_std`.
    pub fn apply_floor(&mut self, output_std: f64) {
        let floor = NOISE_STD_FLOOR * output_std.abs().max(f64::MIN_POSITIVE);
        if self.noise_std.is_nan() || self.noise_std.abs() < floor {
            log::warn!("noise std {} raised to floor {floor:e}", self.noise_std);
            self.noise_std = floor;
        }
        self.noise_std = self.noise_std.abs();
    }
}

/// One `C_i` with its factorization.
#[derive(Clone, Debug)]
pub struct NoiseBlock {
    pub cov: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
    pub diagonal: bool,
}

impl NoiseBlock {
    pub fn len(&self) -> usize {
        self.cov.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.cov.nrows() == 0
    }
}

/// Builds noise blocks for a fixed variant and parameter set.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub variant: Variant,
    pub params: NoiseParams,
    uu: Option<Factor>,
}

impl NoiseModel {
    pub fn new(variant: Variant, params: NoiseParams) -> Result<Self> {
        if !(params.noise_std > 0.0 && params.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise std must be positive, got {}",
                params.noise_std
            )));
        }
        let uu = if variant.structure() == Structure::Isotropic || params.eps_inducing.nrows() == 0 {
            None
        } else {
            let k = params.eps_kernel();
            let kuu = gram(&params.eps_inducing, &params.eps_inducing, &k);
            let s2 = params.eps_signal_std * params.eps_signal_std;
            Some(jittered_cholesky(&kuu, s2, "noise inducing covariance")?)
        };
        Ok(Self { variant, params, uu })
    }

    /// `C_i` for the rows of `inputs`.
    pub fn block(&self, inputs: &DMatrix<f64>) -> Result<NoiseBlock> {
        let n = inputs.nrows();
        let s2 = self.params.noise_std * self.params.noise_std;
        let structure = self.variant.structure();
        if structure == Structure::Isotropic {
            return Ok(NoiseBlock {
                cov: DMatrix::from_diagonal_element(n, n, s2),
                inverse: DMatrix::from_diagonal_element(n, n, 1.0 / s2),
                log_det: n as f64 * s2.ln(),
                diagonal: true,
            });
        }
        let resid = self.residual(inputs);
        match structure {
            Structure::Diagonal => {
                let d: Vec<f64> = (0..n).map(|i| resid[(i, i)].max(0.0) + s2).collect();
                Ok(NoiseBlock {
                    cov: DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
                    inverse: DMatrix::from_diagonal(&DVector::from_iterator(n, d.iter().map(|v| 1.0 / v))),
                    log_det: d.iter().map(|v| v.ln()).sum(),
                    diagonal: true,
                })
            }
            _ => {
                let mut cov = resid;
                for i in 0..n {
                    cov[(i, i)] = cov[(i, i)].max(0.0) + s2;
                }
                let f = jittered_cholesky(&cov, s2, "noise block")?;
                Ok(NoiseBlock {
                    inverse: f.inverse(),
                    log_det: f.log_det(),
                    cov,
                    diagonal: false,
                })
            }
        }
    }

    /// `K^ε_{DD} - K^ε_{DU} (K^ε_{UU})^{-1} K^ε_{UD}`
    fn residual(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.params.eps_kernel();
        let kdd = gram(inputs, inputs, &k);
        match &self.uu {
            None => kdd,
            Some(f) => {
                let kud = gram(&self.params.eps_inducing, inputs, &k);
                let v = f.solve_lower(&kud);
                let mut r = kdd - v.transpose() * v;
                crate::linalg::symmetrize(&mut r);
                r
            }
        }
    }
}
