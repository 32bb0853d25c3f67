//! CSV ingestion, normalization, k-means partitioning and synthetic data.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram, row, sq_dist_rows, KernelParams};
use crate::linalg::jittered_cholesky;
use crate::noise::{NoiseModel, NoiseParams, Variant};

pub const STD_FLOOR: f64 = 1e-12;

/// Column names and the affine maps used to z-normalize inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: f64,
    pub output_std: f64,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            feature_names: (0..d).map(|k| format!("x{k}")).collect(),
            target_name: "y".into(),
            input_mean: vec![0.0; d],
            input_std: vec![1.0; d],
            output_mean: 0.0,
            output_std: 1.0,
        }
    }

    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, feature_names: Vec<String>, target_name: String) -> Self {
        let mut input_mean = Vec::with_capacity(x.ncols());
        let mut input_std = Vec::with_capacity(x.ncols());
        for k in 0..x.ncols() {
            let (m, s) = mean_std(x.column(k).iter().copied());
            if s < STD_FLOOR {
                log::warn!("column `{}` is constant; its std is floored", feature_names[k]);
            }
            input_mean.push(m);
            input_std.push(s.max(STD_FLOOR));
        }
        let (output_mean, s) = mean_std(y.iter().copied());
        if s < STD_FLOOR {
            log::warn!("target column `{target_name}` is constant; its std is floored");
        }
        Self {
            feature_names,
            target_name,
            input_mean,
            input_std,
            output_mean,
            output_std: s.max(STD_FLOOR),
        }
    }

    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| {
            (x[(i, k)] - self.input_mean[k]) / self.input_std[k]
        })
    }

    pub fn outputs(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.output_mean) / self.output_std)
    }

    pub fn output_mean_back(&self, mu: f64) -> f64 {
        mu * self.output_std + self.output_mean
    }

    pub fn output_var_back(&self, var: f64) -> f64 {
        var * self.output_std * self.output_std
    }
}

fn mean_std(it: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = it.clone().count().max(1) as f64;
    let m = it.clone().sum::<f64>() / n;
    let v = it.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Normalized training data.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn from_raw(x: &DMatrix<f64>, y: &DVector<f64>, feature_names: Vec<String>, target_name: String) -> Self {
        let normalization = Normalization::fit(x, y, feature_names, target_name);
        Self {
            inputs: normalization.inputs(x),
            outputs: normalization.outputs(y),
            normalization,
        }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Raw numeric columns read from a CSV file.
#[derive(Clone, Debug)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub inputs: DMatrix<f64>,
    pub target: Option<DVector<f64>>,
    pub rows_rejected: usize,
}

/// Reads a CSV file with a header row.
///
/// Features are the columns named in `features`, or every column other than
/// the target when `features` is `None`. Rows with an empty field are
/// skipped and counted; any other non-numeric field is an error.
pub fn read_table(
    path: &Path,
    target: Option<&str>,
    require_target: bool,
    features: Option<&[String]>,
) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let target_col = target.and_then(|t| header.iter().position(|h| h == t));
    if require_target && target_col.is_none() {
        return Err(Error::MissingColumn(target.unwrap_or("").to_string()));
    }
    let feature_cols: Vec<usize> = match features {
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| Error::DimensionMismatch(format!("input has no column `{n}` expected by the model")))
            })
            .collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&c| Some(c) != target_col).collect(),
    };
    if let Some(names) = features {
        let available = header.len() - usize::from(target_col.is_some());
        if available != names.len() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} input columns, file has {available}",
                names.len()
            )));
        }
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut rejected = 0;
    let mut n = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = r + 2;
        let field = |c: usize| -> Result<Option<f64>> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                row: row_no,
                column: header[c].clone(),
                message: e.to_string(),
            })
        };
        let mut vals = Vec::with_capacity(feature_cols.len());
        let mut missing = false;
        for &c in &feature_cols {
            match field(c)? {
                Some(v) => vals.push(v),
                None => missing = true,
            }
        }
        let yv = match target_col {
            Some(c) => match field(c)? {
                Some(v) => Some(v),
                None => {
                    missing = true;
                    None
                }
            },
            None => None,
        };
        if missing {
            rejected += 1;
            continue;
        }
        xs.extend(vals);
        if let Some(v) = yv {
            ys.push(v);
        }
        n += 1;
    }
    if rejected > 0 {
        log::warn!("{rejected} rows with missing values were skipped");
    }
    let d = feature_cols.len();
    Ok(Table {
        feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
        inputs: DMatrix::from_row_slice(n, d, &xs),
        target: target_col.map(|_| DVector::from_vec(ys)),
        rows_rejected: rejected,
    })
}

/// Reads and z-normalizes a training file.
pub fn ingest_csv(path: &Path, target: &str) -> Result<Dataset> {
    let t = read_table(path, Some(target), true, None)?;
    if t.inputs.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if t.inputs.ncols() == 0 {
        return Err(Error::DimensionMismatch("no input columns".into()));
    }
    let y = t.target.expect("target column present");
    Ok(Dataset::from_raw(&t.inputs, &y, t.feature_names, target.to_string()))
}

/// Blocks of row indices and the centroids that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub blocks: Vec<Vec<usize>>,
    pub centroids: DMatrix<f64>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x)
    }
}

pub fn nearest(centroids: &DMatrix<f64>, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..centroids.nrows() {
        let mut s = 0.0;
        for k in 0..x.len() {
            let d = x[k] - centroids[(j, k)];
            s += d * d;
        }
        if s < best_d {
            best_d = s;
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub partition: Partition,
    /// Objective after each Lloyd iteration.
    pub objective: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// refilled with the point of the largest cluster farthest from its centroid.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_rows(x, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist_rows(x, i, &centroids, c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let l = nearest(&centroids, &row(x, i));
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }
        repair_empty(x, &mut labels, &mut centroids, k);
        update_centroids(x, &labels, &mut centroids, k);
        objective.push(kmeans_objective(x, &labels, &centroids));
        if !changed {
            break;
        }
    }
    let mut blocks = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        blocks[l].push(i);
    }
    warn_on_skew(&blocks);
    Ok(KMeansFit {
        partition: Partition { blocks, centroids },
        objective,
    })
}

pub fn kmeans_partition(x: &DMatrix<f64>, k: usize, seed: u64, max_iters: usize) -> Result<Partition> {
    kmeans(x, k, seed, max_iters).map(|f| f.partition)
}

fn repair_empty(x: &DMatrix<f64>, labels: &mut [usize], centroids: &mut DMatrix<f64>, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == largest {
                let dd = sq_dist_rows(x, i, centroids, largest);
                if dd > far_d {
                    far_d = dd;
                    far = Some(i);
                }
            }
        }
        let p = far.expect("largest cluster is non-empty");
        labels[p] = empty;
        centroids.row_mut(empty).copy_from(&x.row(p));
    }
}

fn update_centroids(x: &DMatrix<f64>, labels: &[usize], centroids: &mut DMatrix<f64>, k: usize) {
    let d = x.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for c in 0..d {
            sums[(l, c)] += x[(i, c)];
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for c in 0..d {
                centroids[(j, c)] = sums[(j, c)] / counts[j] as f64;
            }
        }
    }
}

fn kmeans_objective(x: &DMatrix<f64>, labels: &[usize], centroids: &DMatrix<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist_rows(x, i, centroids, l))
        .sum()
}

fn warn_on_skew(blocks: &[Vec<usize>]) {
    let mut sizes: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    sizes.sort_unstable();
    let median = sizes[sizes.len() / 2];
    if let Some(&max) = sizes.last() {
        if max > 10 * median.max(1) {
            log::warn!("largest block has {max} points, median is {median}");
        }
    }
}

/// Random split of `0..n` into (train, test) index lists.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, k| x[(idx[i], k)])
}

pub fn select(y: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]))
}

/// Noise used when sampling synthetic outputs.
#[derive(Clone, Debug)]
pub enum SynthNoise {
    None,
    /// Noise with the covariance structure of a sparse variant, blocks from
    /// a k-means partition with the given number of blocks.
    Structured {
        variant: Variant,
        params: NoiseParams,
        blocks: usize,
    },
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub kernel: KernelParams,
    pub noise: SynthNoise,
    pub input_low: f64,
    pub input_high: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub inputs: DMatrix<f64>,
    pub latent: DVector<f64>,
    pub outputs: DVector<f64>,
    pub partition: Option<Partition>,
}

/// Draws inputs uniformly in a box and outputs from the GP prior plus noise.
pub fn synth_gp_dataset(config: &SynthConfig) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = (config.input_low, config.input_high);
    let inputs = DMatrix::from_fn(config.n, config.dim, |_, _| lo + (hi - lo) * rng.random::<f64>());
    synth_outputs(&inputs, &config.kernel, &config.noise, &mut rng)
}

/// Samples outputs at given inputs. Exact duplicate inputs share one latent
/// value.
pub fn synth_outputs(
    inputs: &DMatrix<f64>,
    kernel: &KernelParams,
    noise: &SynthNoise,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticData> {
    let n = inputs.nrows();
    let mut unique: Vec<usize> = Vec::new();
    let mut slot = vec![0usize; n];
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for i in 0..n {
        let key: Vec<u64> = row(inputs, i).iter().map(|v| v.to_bits()).collect();
        let next = unique.len();
        let s = *seen.entry(key).or_insert(next);
        if s == next {
            unique.push(i);
        }
        slot[i] = s;
    }
    let xu = select_rows(inputs, &unique);
    let k = gram(&xu, &xu, kernel);
    let l = jittered_cholesky(&k, kernel.signal_std * kernel.signal_std, "synthetic latent covariance")?.l();
    let z = DVector::from_iterator(
        unique.len(),
        (0..unique.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let fu = l * z;
    let latent = DVector::from_iterator(n, slot.iter().map(|&s| fu[s]));
    let mut outputs = latent.clone();
    let mut partition = None;
    if let SynthNoise::Structured {
        variant,
        params,
        blocks,
    } = noise
    {
        let seed = rng.random::<u64>();
        let p = kmeans_partition(inputs, *blocks, seed, 100)?;
        let model = NoiseModel::new(*variant, params.clone())?;
        for b in &p.blocks {
            let xb = select_rows(inputs, b);
            let nb = model.block(&xb)?;
            let s2 = params.noise_std * params.noise_std;
            let lb = jittered_cholesky(&nb.cov, s2, "synthetic noise block")?.l();
            let e = &lb * DVector::from_iterator(b.len(), (0..b.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            for (j, &i) in b.iter().enumerate() {
                outputs[i] += e[j];
            }
        }
        partition = Some(p);
    }
    Ok(SyntheticData {
        inputs: inputs.clone(),
        latent,
        outputs,
        partition,
    })
}
