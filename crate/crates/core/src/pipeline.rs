//! From a normalized dataset to a trained model.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{kmeans_partition, Dataset, Partition};
use crate::elbo::VariationalState;
use crate::error::{Error, Result};
use crate::expectations::HyperPosterior;
use crate::kernel::InducingSet;
use crate::model::ModelArtifact;
use crate::noise::{NoiseModel, NoiseParams, Structure, Variant};
use crate::prior::HyperPrior;
use crate::problem::Problem;
use crate::svi::{train, TraceRow, TrainConfig};

/// Hand-set noise hyperparameters, in normalized output units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSettings {
    pub noise_std: f64,
    pub eps_signal_std: f64,
    pub eps_inv_lengthscale: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            eps_signal_std: 0.3,
            eps_inv_lengthscale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub variant: Variant,
    pub blocks: usize,
    pub inducing: usize,
    pub inducing_scale: f64,
    pub prior: HyperPrior,
    pub noise: NoiseSettings,
    pub init_ls_mean: f64,
    pub init_ls_var: f64,
    pub init_signal_var: f64,
    pub kmeans_iters: usize,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dtc,
            blocks: 10,
            inducing: 20,
            inducing_scale: 1.0,
            prior: HyperPrior::standard(),
            noise: NoiseSettings::default(),
            init_ls_mean: 1.0,
            init_ls_var: 0.1,
            init_signal_var: 0.1,
            kmeans_iters: 100,
            train: TrainConfig::default(),
        }
    }
}

/// Everything needed to start training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub problem: Problem,
    pub state: VariationalState,
    pub partition: Partition,
}

/// Partitions the data, picks inducing inputs and noise inducing inputs, and
/// builds the initial state.
pub fn prepare(data: &Dataset, config: &FitConfig) -> Result<Prepared> {
    let n = data.len();
    let d = data.dim();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if config.inducing == 0 || config.inducing > n {
        return Err(Error::InvalidParameter(format!(
            "need between 1 and {n} inducing inputs, got {}",
            config.inducing
        )));
    }
    if config.blocks == 0 || config.blocks > n {
        return Err(Error::InvalidParameter(format!(
            "need between 1 and {n} blocks, got {}",
            config.blocks
        )));
    }
    let seed = config.train.seed;
    let partition = kmeans_partition(&data.inputs, config.blocks, seed, config.kmeans_iters)?;

    let init_ls = DVector::from_element(d, config.init_ls_mean);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let picks = sample(&mut rng, n, config.inducing).into_vec();
    let z = DMatrix::from_fn(config.inducing, d, |i, k| init_ls[k] * data.inputs[(picks[i], k)]);
    let inducing = InducingSet::new(z, config.inducing_scale)?;

    let output_std = std_of(&data.outputs);
    let eps_inducing = if config.variant.structure() == Structure::Isotropic {
        DMatrix::zeros(0, d)
    } else {
        kmeans_partition(&data.inputs, config.inducing, seed.wrapping_add(2), config.kmeans_iters)?.centroids
    };
    let mut params = NoiseParams {
        eps_inv_lengthscales: DVector::from_element(d, config.noise.eps_inv_lengthscale),
        eps_signal_std: config.noise.eps_signal_std,
        noise_std: config.noise.noise_std,
        eps_inducing,
    };
    params.apply_floor(output_std);
    let noise = NoiseModel::new(config.variant, params)?;
    let problem = Problem::new(
        &data.inputs,
        &data.outputs,
        &partition.blocks,
        inducing,
        noise,
        config.prior,
    )?;

    let state = VariationalState {
        mean: DVector::zeros(config.inducing),
        cov_chol: problem.sigma.l(),
        hyper: HyperPosterior {
            ls_mean: init_ls,
            ls_var: DVector::from_element(d, config.init_ls_var),
            signal_mean: output_std,
            signal_var: config.init_signal_var,
        },
    };
    Ok(Prepared {
        problem,
        state,
        partition,
    })
}

fn std_of(y: &DVector<f64>) -> f64 {
    let n = y.len().max(1) as f64;
    let m = y.sum() / n;
    (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: ModelArtifact,
    pub trace: Vec<TraceRow>,
    pub problem: Problem,
}

/// Prepares, trains, and packages a model.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<Fitted> {
    let Prepared {
        mut problem,
        state,
        partition,
    } = prepare(data, config)?;
    fit_prepared(data, config, &mut problem, state, partition).map(|(model, trace)| Fitted { model, trace, problem })
}

fn fit_prepared(
    data: &Dataset,
    config: &FitConfig,
    problem: &mut Problem,
    state: VariationalState,
    partition: Partition,
) -> Result<(ModelArtifact, Vec<TraceRow>)> {
    let out = train(problem, state, &config.train)?;
    let local_blocks = config.variant.local_predictor().then(|| {
        problem
            .blocks
            .iter()
            .map(|b| (b.inputs.clone(), b.targets.clone()))
            .collect()
    });
    let model = ModelArtifact {
        variant: config.variant,
        normalization: data.normalization.clone(),
        inducing: problem.inducing.clone(),
        state: out.state,
        noise: problem.noise.params.clone(),
        prior: config.prior,
        centroids: partition.centroids,
        config: config.clone(),
        local_blocks,
    };
    Ok((model, out.trace))
}
