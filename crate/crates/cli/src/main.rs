use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use vbsgpr::data::{ingest_csv, read_table};
use vbsgpr::evaluation::{convergence_study, mnlp, rmse, ConvergenceConfig, MetricReport, ReferenceConfig};
use vbsgpr::model::{ModelArtifact, PredictOptions};
use vbsgpr::pipeline::{fit, prepare, FitConfig, NoiseSettings};
use vbsgpr::svi::{Schedule, TRACE_HEADER};
use vbsgpr::{HyperPrior, PriorPreset, StepRule, TrainConfig, Variant};

#[derive(Parser)]
#[command(
    name = "vbsgpr",
    version,
    about = "Sparse GP regression with stochastic variational inference"
)]
struct Cli {
    /// Worker threads for block-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV file.
    Train(TrainCmd),
    /// Predict at the inputs of a CSV file.
    Predict(PredictCmd),
    /// Score a model on a labelled CSV file.
    Evaluate(EvaluateCmd),
    /// Compare a stochastic run against an exact-gradient reference.
    Diagnose(DiagnoseCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Dtc,
    Fic,
    Fitc,
    Pitc,
    Pic,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Dtc => Variant::Dtc,
            VariantArg::Fic => Variant::Fic,
            VariantArg::Fitc => Variant::Fitc,
            VariantArg::Pitc => Variant::Pitc,
            VariantArg::Pic => Variant::Pic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    /// N(0, 1) on every hyperparameter.
    Standard,
    /// N(1, 0.1) on every hyperparameter.
    #[value(alias = "paper")]
    Informative,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Plain,
    Adaptive,
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the target column.
    #[arg(long)]
    target: String,
    #[arg(long, value_enum, default_value = "dtc")]
    variant: VariantArg,
    /// Number of k-means blocks.
    #[arg(long, default_value_t = 10)]
    blocks: usize,
    /// Number of inducing inputs.
    #[arg(long, default_value_t = 20)]
    inducing: usize,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Blocks per mini-batch.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    step_a: f64,
    #[arg(long, default_value_t = 100.0)]
    step_tau: f64,
    #[arg(long, default_value_t = 0.75)]
    step_kappa: f64,
    #[arg(long, value_enum, default_value = "adaptive")]
    step_rule: RuleArg,
    /// Step on the raw inducing mean and covariance factor instead of
    /// coordinates relative to the inducing covariance.
    #[arg(long)]
    no_whiten: bool,
    #[arg(long, value_enum, default_value = "standard")]
    prior_preset: PriorArg,
    /// Keep noise hyperparameters fixed (default).
    #[arg(long, conflicts_with = "learn_noise")]
    fix_noise: bool,
    /// Learn noise hyperparameters by finite differences.
    #[arg(long)]
    learn_noise: bool,
    /// White noise std, in normalized output units.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Signal std of the correlated noise process.
    #[arg(long, default_value_t = 0.3)]
    eps_signal_std: f64,
    /// Inverted lengthscale of the correlated noise process.
    #[arg(long, default_value_t = 1.0)]
    eps_inv_lengthscale: f64,
    /// Prior scale of the inducing variables.
    #[arg(long, default_value_t = 1.0)]
    inducing_scale: f64,
    /// Initial inverted lengthscale mean, in normalized input units. Also
    /// sets the rotation applied to the selected inducing inputs.
    #[arg(long, default_value_t = 1.0)]
    init_inv_lengthscale: f64,
    /// Report the average of the iterates from this iteration on.
    #[arg(long)]
    average_from: Option<usize>,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        let preset = match self.prior_preset {
            PriorArg::Standard => PriorPreset::Standard,
            PriorArg::Informative => PriorPreset::Informative,
        };
        FitConfig {
            variant: self.variant.into(),
            blocks: self.blocks,
            inducing: self.inducing,
            inducing_scale: self.inducing_scale,
            prior: HyperPrior::from_preset(preset),
            noise: NoiseSettings {
                noise_std: self.noise_std,
                eps_signal_std: self.eps_signal_std,
                eps_inv_lengthscale: self.eps_inv_lengthscale,
            },
            train: TrainConfig {
                iterations: self.iters,
                batch_size: self.batch,
                schedule: Schedule {
                    a: self.step_a,
                    tau: self.step_tau,
                    kappa: self.step_kappa,
                },
                rule: match self.step_rule {
                    RuleArg::Plain => StepRule::Plain,
                    RuleArg::Adaptive => StepRule::Adaptive,
                },
                whiten: !self.no_whiten,
                seed: self.seed,
                learn_noise: self.learn_noise && !self.fix_noise,
                average_from: self.average_from,
                ..TrainConfig::default()
            },
            init_ls_mean: self.init_inv_lengthscale,
            ..FitConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    fit: FitArgs,
    /// Where to write the model.
    #[arg(long)]
    model: PathBuf,
    /// Optional per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Hyperparameter draws for the local (PIC) predictor.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include the white noise variance in the predictive variance.
    #[arg(long)]
    observation_noise: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PredictArgs {
    fn options(&self) -> PredictOptions {
        PredictOptions {
            samples: self.samples,
            seed: self.seed,
            observation_noise: self.observation_noise,
        }
    }
}

#[derive(Args)]
struct PredictCmd {
    #[command(flatten)]
    common: PredictArgs,
}

#[derive(Args)]
struct EvaluateCmd {
    #[command(flatten)]
    common: PredictArgs,
    #[arg(long)]
    target: String,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[command(flatten)]
    fit: FitArgs,
    /// Record a row every this many iterations.
    #[arg(long, default_value_t = 100)]
    every: usize,
    /// Iteration cap of the reference ascent.
    #[arg(long, default_value_t = 500)]
    reference_iters: usize,
    /// Also track the divergence from the optimum for the current
    /// hyperparameters (one full pass over the data per row).
    #[arg(long)]
    track_optimal: bool,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        log::warn!("could not configure thread pool: {e}");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<vbsgpr::Error>().is_some_and(|e| e.is_usage());
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train(c) => train(c),
        Command::Predict(c) => predict(c),
        Command::Evaluate(c) => evaluate(c),
        Command::Diagnose(c) => diagnose(c),
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn train(c: TrainCmd) -> anyhow::Result<()> {
    let data = ingest_csv(&c.fit.data, &c.fit.target)?;
    let config = c.fit.config();
    let fitted = fit(&data, &config)?;
    fitted.model.save(&c.model)?;
    if let Some(p) = &c.trace {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(TRACE_HEADER)?;
        for r in &fitted.trace {
            let mut rec = vec![r.iter.to_string(), r.seconds.to_string(), r.elbo_estimate.to_string()];
            rec.extend(r.grad_norms.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    if let Some(last) = fitted.trace.last() {
        eprintln!(
            "trained {} on {} points: {} iterations, final bound estimate {:.6}",
            config.variant,
            data.len(),
            fitted.trace.len(),
            last.elbo_estimate
        );
    }
    Ok(())
}

fn predict(c: PredictCmd) -> anyhow::Result<()> {
    let a = &c.common;
    let model = ModelArtifact::load(&a.model)?;
    let names = &model.normalization.feature_names;
    let table = read_table(&a.data, Some(&model.normalization.target_name), false, Some(names))?;
    let pred = model.predict(&table.inputs, &a.options())?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["mean", "variance"])?;
    for i in 0..pred.len() {
        w.write_record([pred.mean[i].to_string(), pred.variance[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(c: EvaluateCmd) -> anyhow::Result<()> {
    let a = &c.common;
    let model = ModelArtifact::load(&a.model)?;
    let names = &model.normalization.feature_names;
    let table = read_table(&a.data, Some(&c.target), true, Some(names))?;
    let y = table.target.expect("target column checked");
    let mut out = output(a.out.as_deref())?;
    if y.is_empty() {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MetricReport::HEADER)?;
        w.flush()?;
        return Ok(());
    }
    let t0 = Instant::now();
    let pred = model.predict(&table.inputs, &a.options())?;
    let report = MetricReport {
        variant: model.variant.to_string(),
        n_test: y.len(),
        rmse: rmse(&y, &pred.mean),
        mnlp: mnlp(&y, &pred.mean, &pred.variance),
        seconds: t0.elapsed().as_secs_f64(),
    };
    report.write_csv(&mut out)?;
    Ok(())
}

fn diagnose(c: DiagnoseCmd) -> anyhow::Result<()> {
    let data = ingest_csv(&c.fit.data, &c.fit.target)?;
    let config = c.fit.config();
    let mut prep = prepare(&data, &config)?;
    let report = convergence_study(
        &mut prep.problem,
        &prep.state,
        &ConvergenceConfig {
            train: config.train.clone(),
            reference: ReferenceConfig {
                max_iters: c.reference_iters,
                ..ReferenceConfig::default()
            },
            every: c.every,
            track_optimal: c.track_optimal,
        },
    )?;
    report.write_csv(output(c.out.as_deref())?)?;
    let (bi, bh) = report.best_ratios();
    let (fi, fh) = report.final_ratios();
    eprintln!(
        "reference: {} iterations, gradient norm {:.3e}, bound {:.6}",
        report.reference.iterations, report.reference.grad_norm, report.reference.bound
    );
    eprintln!(
        "inducing KL: final/initial {fi:.4e}, best/initial {bi:.4e}, log-slope {:.4e}",
        report.slope_inducing
    );
    eprintln!(
        "hyper KL:    final/initial {fh:.4e}, best/initial {bh:.4e}, log-slope {:.4e}",
        report.slope_hyper
    );
    Ok(())
}
