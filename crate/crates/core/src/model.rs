//! The trained-model artifact and its on-disk format.
//!
//! Models are stored as pretty-printed JSON with named fields. Floats are
//! written in shortest round-trip form, so loading and saving again
//! reproduces the file byte for byte.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::elbo::VariationalState;
use crate::error::{Error, Result};
use crate::expectations::HyperPosterior;
use crate::kernel::InducingSet;
use crate::noise::{NoiseModel, NoiseParams, Variant};
use crate::pipeline::FitConfig;
use crate::predict::{predict_analytic, predict_local, LocalBlock, LocalBlocks, Prediction};
use crate::prior::HyperPrior;

pub const FORMAT_NAME: &str = "vbsgpr-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub variant: Variant,
    pub normalization: Normalization,
    pub inducing: InducingSet,
    pub state: VariationalState,
    pub noise: NoiseParams,
    pub prior: HyperPrior,
    pub centroids: DMatrix<f64>,
    pub config: FitConfig,
    /// Normalized training inputs and targets per block, kept only by
    /// variants whose predictions condition on the local block.
    pub local_blocks: Option<Vec<(DMatrix<f64>, DVector<f64>)>>,
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    /// Hyperparameter draws for local prediction.
    pub samples: usize,
    pub seed: u64,
    /// Add the white-noise variance to the predictive variance.
    pub observation_noise: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            seed: 0,
            observation_noise: false,
        }
    }
}

impl ModelArtifact {
    pub fn dim(&self) -> usize {
        self.inducing.dim()
    }

    /// Predictive in normalized units.
    pub fn predict_normalized(&self, xs: &DMatrix<f64>, opts: &PredictOptions) -> Result<Prediction> {
        if xs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, got {}",
                self.dim(),
                xs.ncols()
            )));
        }
        if xs.nrows() == 0 {
            return Ok(Prediction::empty());
        }
        let mut pred = match &self.local_blocks {
            Some(blocks) if self.variant.local_predictor() => {
                let model = NoiseModel::new(self.variant, self.noise.clone())?;
                let blocks = blocks
                    .iter()
                    .map(|(x, y)| {
                        Ok(LocalBlock {
                            noise_cov: model.block(x)?.cov,
                            inputs: x.clone(),
                            targets: y.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let local = LocalBlocks {
                    centroids: self.centroids.clone(),
                    blocks,
                };
                predict_local(&self.inducing, &self.state, &local, xs, opts.samples, opts.seed)?
            }
            _ => {
                let sigma = self.inducing.factor()?;
                predict_analytic(&self.inducing, &sigma, &self.state, xs)
            }
        };
        if opts.observation_noise {
            let s2 = self.noise.noise_std * self.noise.noise_std;
            pred.variance.add_scalar_mut(s2);
        }
        Ok(pred)
    }

    /// Predictive in the units of the training file.
    pub fn predict(&self, raw: &DMatrix<f64>, opts: &PredictOptions) -> Result<Prediction> {
        if raw.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, got {}",
                self.dim(),
                raw.ncols()
            )));
        }
        let xs = self.normalization.inputs(raw);
        let p = self.predict_normalized(&xs, opts)?;
        let nz = &self.normalization;
        Ok(Prediction {
            mean: p.mean.map(|m| nz.output_mean_back(m)),
            variance: p.variance.map(|v| nz.output_var_back(v)),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::ModelFormat {
            path: None,
            message: e.to_string(),
        })?;
        f.into_artifact()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::ModelFormat { message, .. } => Error::ModelFormat {
                path: Some(path.to_path_buf()),
                message,
            },
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    variant: Variant,
    input_dim: usize,
    normalization: Normalization,
    inducing: InducingFile,
    posterior: PosteriorFile,
    noise: NoiseFile,
    prior: HyperPrior,
    partition_centroids: Vec<Vec<f64>>,
    fit_config: FitConfig,
    local_blocks: Option<Vec<BlockFile>>,
}

#[derive(Serialize, Deserialize)]
struct InducingFile {
    scale: f64,
    inputs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorFile {
    inducing_mean: Vec<f64>,
    /// Rows of the lower Cholesky factor of the inducing covariance; row `i`
    /// holds `i + 1` entries.
    inducing_cov_chol: Vec<Vec<f64>>,
    inv_lengthscale_mean: Vec<f64>,
    inv_lengthscale_var: Vec<f64>,
    signal_std_mean: f64,
    signal_std_var: f64,
}

#[derive(Serialize, Deserialize)]
struct NoiseFile {
    noise_std: f64,
    eps_signal_std: f64,
    eps_inv_lengthscales: Vec<f64>,
    eps_inducing_inputs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.iter().any(|row| row.len() != ncols) {
        return Err(Error::ModelFormat {
            path: None,
            message: format!("`{what}` rows must have {ncols} entries"),
        });
    }
    Ok(DMatrix::from_fn(r.len(), ncols, |i, k| r[i][k]))
}

impl From<&ModelArtifact> for ModelFile {
    fn from(a: &ModelArtifact) -> Self {
        let l = &a.state.cov_chol;
        ModelFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            variant: a.variant,
            input_dim: a.dim(),
            normalization: a.normalization.clone(),
            inducing: InducingFile {
                scale: a.inducing.scale,
                inputs: rows(&a.inducing.inputs),
            },
            posterior: PosteriorFile {
                inducing_mean: a.state.mean.iter().copied().collect(),
                inducing_cov_chol: (0..l.nrows()).map(|i| (0..=i).map(|j| l[(i, j)]).collect()).collect(),
                inv_lengthscale_mean: a.state.hyper.ls_mean.iter().copied().collect(),
                inv_lengthscale_var: a.state.hyper.ls_var.iter().copied().collect(),
                signal_std_mean: a.state.hyper.signal_mean,
                signal_std_var: a.state.hyper.signal_var,
            },
            noise: NoiseFile {
                noise_std: a.noise.noise_std,
                eps_signal_std: a.noise.eps_signal_std,
                eps_inv_lengthscales: a.noise.eps_inv_lengthscales.iter().copied().collect(),
                eps_inducing_inputs: rows(&a.noise.eps_inducing),
            },
            prior: a.prior,
            partition_centroids: rows(&a.centroids),
            fit_config: a.config.clone(),
            local_blocks: a.local_blocks.as_ref().map(|bs| {
                bs.iter()
                    .map(|(x, y)| BlockFile {
                        inputs: rows(x),
                        targets: y.iter().copied().collect(),
                    })
                    .collect()
            }),
        }
    }
}

impl ModelFile {
    fn into_artifact(self) -> Result<ModelArtifact> {
        let bad = |message: String| Error::ModelFormat { path: None, message };
        if self.format != FORMAT_NAME {
            return Err(bad(format!("unexpected format `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let d = self.input_dim;
        let m = self.posterior.inducing_mean.len();
        let p = &self.posterior;
        if p.inducing_cov_chol.len() != m || p.inducing_cov_chol.iter().enumerate().any(|(i, r)| r.len() != i + 1) {
            return Err(bad("`inducing_cov_chol` must be lower triangular rows".into()));
        }
        if p.inv_lengthscale_mean.len() != d || p.inv_lengthscale_var.len() != d {
            return Err(bad(format!("lengthscale posterior must have {d} entries")));
        }
        if self.normalization.dim() != d {
            return Err(bad(format!("normalization must have {d} entries")));
        }
        let cov_chol = DMatrix::from_fn(m, m, |i, j| if j <= i { p.inducing_cov_chol[i][j] } else { 0.0 });
        let inducing = InducingSet::new(
            from_rows(&self.inducing.inputs, d, "inducing.inputs")?,
            self.inducing.scale,
        )?;
        if inducing.len() != m {
            return Err(bad("inducing inputs and posterior mean differ in length".into()));
        }
        let state = VariationalState {
            mean: DVector::from_vec(p.inducing_mean.clone()),
            cov_chol,
            hyper: HyperPosterior {
                ls_mean: DVector::from_vec(p.inv_lengthscale_mean.clone()),
                ls_var: DVector::from_vec(p.inv_lengthscale_var.clone()),
                signal_mean: p.signal_std_mean,
                signal_var: p.signal_std_var,
            },
        };
        let noise = NoiseParams {
            noise_std: self.noise.noise_std,
            eps_signal_std: self.noise.eps_signal_std,
            eps_inv_lengthscales: DVector::from_vec(self.noise.eps_inv_lengthscales),
            eps_inducing: from_rows(&self.noise.eps_inducing_inputs, d, "noise.eps_inducing_inputs")?,
        };
        let local_blocks = match self.local_blocks {
            None => None,
            Some(bs) => Some(
                bs.into_iter()
                    .map(|b| {
                        let x = from_rows(&b.inputs, d, "local_blocks.inputs")?;
                        if x.nrows() != b.targets.len() {
                            return Err(bad("block inputs and targets differ in length".into()));
                        }
                        Ok((x, DVector::from_vec(b.targets)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(ModelArtifact {
            variant: self.variant,
            normalization: self.normalization,
            inducing,
            state,
            noise,
            prior: self.prior,
            centroids: from_rows(&self.partition_centroids, d, "partition_centroids")?,
            config: self.fit_config,
            local_blocks,
        })
    }
}
