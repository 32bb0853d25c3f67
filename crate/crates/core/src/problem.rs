//! Training data split into blocks, with everything about each block that
//! does not depend on the variational parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::InducingSet;
use crate::linalg::Factor;
use crate::noise::{NoiseBlock, NoiseModel, NoiseParams};
use crate::prior::HyperPrior;

#[derive(Clone, Debug)]
pub struct DataBlock {
    pub indices: Vec<usize>,
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub noise: NoiseBlock,
    /// `C_i^{-1} y_i`
    pub cinv_y: DVector<f64>,
    /// `-(n_i/2) log 2π - ½ log|C_i| - ½ y_iᵀ C_i^{-1} y_i`
    pub constant: f64,
}

impl DataBlock {
    pub fn new(indices: Vec<usize>, inputs: DMatrix<f64>, targets: DVector<f64>, noise: NoiseBlock) -> Self {
        let cinv_y = &noise.inverse * &targets;
        let n = targets.len() as f64;
        let constant = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * noise.log_det - 0.5 * targets.dot(&cinv_y);
        Self {
            indices,
            inputs,
            targets,
            noise,
            cinv_y,
            constant,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub inducing: InducingSet,
    pub sigma: Factor,
    /// `Σ_II` including any jitter used to factor it.
    pub sigma_mat: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    pub blocks: Vec<DataBlock>,
    pub noise: NoiseModel,
    pub prior: HyperPrior,
}

impl Problem {
    pub fn new(
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        partition: &[Vec<usize>],
        inducing: InducingSet,
        noise: NoiseModel,
        prior: HyperPrior,
    ) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.ncols() != inducing.dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} columns, inducing inputs {}",
                inputs.ncols(),
                inducing.dim()
            )));
        }
        let sigma = inducing.factor()?;
        let sigma_inv = sigma.inverse();
        let mut sigma_mat = inducing.covariance();
        for i in 0..sigma_mat.nrows() {
            sigma_mat[(i, i)] += sigma.jitter;
        }
        let blocks = partition
            .iter()
            .map(|idx| build_block(inputs, targets, idx, &noise))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inducing,
            sigma,
            sigma_mat,
            sigma_inv,
            blocks,
            noise,
            prior,
        })
    }

    pub fn n_points(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.inducing.dim()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.len()
    }

    /// Rebuilds every noise block after a change of noise parameters.
    pub fn set_noise(&mut self, params: NoiseParams) -> Result<()> {
        self.noise = NoiseModel::new(self.noise.variant, params)?;
        for b in self.blocks.iter_mut() {
            let nb = self.noise.block(&b.inputs)?;
            *b = DataBlock::new(std::mem::take(&mut b.indices), b.inputs.clone(), b.targets.clone(), nb);
        }
        Ok(())
    }
}

fn build_block(inputs: &DMatrix<f64>, targets: &DVector<f64>, idx: &[usize], noise: &NoiseModel) -> Result<DataBlock> {
    let d = inputs.ncols();
    let x = DMatrix::from_fn(idx.len(), d, |i, k| inputs[(idx[i], k)]);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| targets[i]));
    let nb = noise.block(&x)?;
    Ok(DataBlock::new(idx.to_vec(), x, y, nb))
}
