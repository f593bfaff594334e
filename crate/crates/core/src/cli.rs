//! The `bnn` command-line driver.
//!
//! Every run produces a [`Report`] that echoes the full effective
//! configuration, labelling each value by where it came from, so a report is
//! enough to rerun the experiment.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::continual::{
    run_continual, ContinualError, EvalConfig, KlWeighting, TrainConfig, Trainer,
};
use crate::gradcheck;
use crate::inference::{self, evaluate_both};
use crate::mnist_io::{self, DataError, ImageSet};
use crate::model::{ModelConfig, Variant, DEFAULT_DIMS, INIT_MU_STD, INIT_RHO};
use crate::report::{ConfigEntry, Format, Report, Results, Source};
use crate::vicore::{derive_seed, AdamConfig, NonFinite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub const DIRECT_EPOCHS: usize = 5;
pub const CONTINUAL_EPOCHS: usize = 1;
pub const DEFAULT_NOISE_IMAGES: usize = 1000;
pub const GRADCHECK_MODELS: usize = 20;
pub const GRADCHECK_DIMS: [usize; 3] = [4, 3, 2];

const EVAL_TAG: u64 = 0xE7A1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Data(_) => EXIT_DATA,
            RunError::Numeric(_) => EXIT_NUMERIC,
            RunError::Io(_) => EXIT_IO,
        }
    }
}

impl From<NonFinite> for RunError {
    fn from(e: NonFinite) -> Self {
        RunError::Numeric(e.to_string())
    }
}

impl From<ContinualError> for RunError {
    fn from(e: ContinualError) -> Self {
        RunError::Numeric(e.to_string())
    }
}

impl From<CheckpointError> for RunError {
    fn from(e: CheckpointError) -> Self {
        RunError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Generic,
    Threshold,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Generic => Variant::Generic,
            VariantArg::Threshold => Variant::LearnableActivation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Md,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
            FormatArg::Md => Format::Md,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KlArg {
    /// KL weighted 1/number_of_batches
    Epoch,
    /// full KL on every minibatch
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train on the full training set, then evaluate forced and unforced
    Train,
    /// Evaluate a checkpoint on the test set
    Eval,
    /// Sequential digit-pair protocol with the task-by-task matrix
    Continual,
    /// Abstention rate on uniform-noise images
    NoiseProbe,
    /// Finite-difference check of the analytic gradients
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Continual => "continual",
            Command::NoiseProbe => "noise-probe",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Raw command line; `None` means "not given".
#[derive(Debug, Clone, Parser)]
#[command(
    name = "bnn",
    version,
    about = "Bayesian MLP with confidence-gated prediction on split MNIST"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub train_images: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test_images: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test_labels: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    #[arg(long, global = true)]
    pub confidence_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub forced: bool,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint written by `train`, read by `eval` and `noise-probe`
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// KL weighting per minibatch
    #[arg(long, global = true, value_enum)]
    pub kl_weighting: Option<KlArg>,
    /// Number of uniform-noise images for `noise-probe`
    #[arg(long, global = true)]
    pub n_noise: Option<usize>,
    /// Use only the first N training samples
    #[arg(long, global = true)]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples
    #[arg(long, global = true)]
    pub test_limit: Option<usize>,
}

/// A value plus where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting<T> {
    pub value: T,
    pub source: Source,
}

impl<T> Setting<T> {
    fn pick(given: Option<T>, default: T, source: Source) -> Self {
        match given {
            Some(value) => Setting {
                value,
                source: Source::User,
            },
            None => Setting {
                value: default,
                source,
            },
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub variant: Setting<Variant>,
    pub seed: Setting<u64>,
    pub epochs: Setting<usize>,
    pub batch_size: Setting<usize>,
    pub lr: Setting<f64>,
    pub mc_samples: Setting<usize>,
    pub threshold: Setting<f64>,
    pub forced: bool,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub kl_weighting: Setting<KlWeighting>,
    pub n_noise: Setting<usize>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, RunError> {
        let default_epochs = match cli.command {
            Command::Continual => CONTINUAL_EPOCHS,
            _ => DIRECT_EPOCHS,
        };
        let cfg = RunConfig {
            command: cli.command,
            train_images: cli.train_images,
            train_labels: cli.train_labels,
            test_images: cli.test_images,
            test_labels: cli.test_labels,
            variant: Setting::pick(
                cli.variant.map(Into::into),
                Variant::Generic,
                Source::Assumed,
            ),
            seed: Setting::pick(cli.seed, 0, Source::Assumed),
            epochs: Setting::pick(cli.epochs, default_epochs, Source::Paper),
            batch_size: Setting::pick(
                cli.batch_size,
                crate::continual::DEFAULT_BATCH_SIZE,
                Source::Assumed,
            ),
            lr: Setting::pick(cli.lr, AdamConfig::default().lr, Source::Assumed),
            mc_samples: Setting::pick(
                cli.mc_samples,
                inference::DEFAULT_MC_SAMPLES,
                Source::Assumed,
            ),
            threshold: Setting::pick(
                cli.confidence_threshold,
                inference::DEFAULT_CONFIDENCE_THRESHOLD,
                Source::Paper,
            ),
            forced: cli.forced,
            format: cli.format.map(Into::into).unwrap_or(Format::Json),
            out: cli.out,
            checkpoint: cli.checkpoint,
            kl_weighting: Setting::pick(
                cli.kl_weighting.map(|k| match k {
                    KlArg::Epoch => KlWeighting::PerEpoch,
                    KlArg::Batch => KlWeighting::PerBatch,
                }),
                TrainConfig::default().kl_weighting,
                Source::Assumed,
            ),
            n_noise: Setting::pick(cli.n_noise, DEFAULT_NOISE_IMAGES, Source::Assumed),
            train_limit: cli.train_limit,
            test_limit: cli.test_limit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_from<I, T>(args: I) -> Result<Self, RunError>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        let cli = Cli::try_parse_from(args).map_err(|e| RunError::Config(e.to_string()))?;
        Self::from_cli(cli)
    }

    fn require(&self, name: &str, p: &Option<PathBuf>) -> Result<(), RunError> {
        match p {
            None => Err(RunError::Config(format!(
                "--{name} is required for `{}`",
                self.command.name()
            ))),
            Some(p) if !p.exists() => Err(RunError::Config(format!(
                "--{name}: {} does not exist",
                p.display()
            ))),
            Some(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let t = self.threshold.value;
        if !(t > 0.0 && t <= 1.0) {
            return Err(RunError::Config(format!(
                "--confidence-threshold must be in (0, 1], got {t}"
            )));
        }
        let positive = [
            ("epochs", self.epochs.value),
            ("batch-size", self.batch_size.value),
            ("mc-samples", self.mc_samples.value),
            ("n-noise", self.n_noise.value),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RunError::Config(format!("--{name} must be at least 1")));
            }
        }
        if !(self.lr.value.is_finite() && self.lr.value >= 0.0) {
            return Err(RunError::Config(format!(
                "--lr must be finite and >= 0, got {}",
                self.lr.value
            )));
        }
        let needs_train = matches!(self.command, Command::Train | Command::Continual);
        let needs_test = matches!(
            self.command,
            Command::Train | Command::Continual | Command::Eval
        );
        if needs_train {
            self.require("train-images", &self.train_images)?;
            self.require("train-labels", &self.train_labels)?;
        }
        if needs_test {
            self.require("test-images", &self.test_images)?;
            self.require("test-labels", &self.test_labels)?;
        }
        if matches!(self.command, Command::Eval | Command::NoiseProbe) {
            self.require("checkpoint", &self.checkpoint)?;
        }
        if self.command == Command::NoiseProbe
            && self.test_images.is_some() != self.test_labels.is_some()
        {
            return Err(RunError::Config(
                "--test-images and --test-labels go together".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.variant.value, self.seed.value)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size.value,
            adam: AdamConfig {
                lr: self.lr.value,
                ..AdamConfig::default()
            },
            kl_weighting: self.kl_weighting.value,
            seed: self.seed.value,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mc_samples: self.mc_samples.value,
            threshold: self.threshold.value,
            seed: derive_seed(self.seed.value, EVAL_TAG),
        }
    }

    /// The effective configuration, in report order.
    pub fn entries(&self) -> Vec<ConfigEntry> {
        fn e(name: &str, value: serde_json::Value, source: Source) -> ConfigEntry {
            ConfigEntry {
                name: name.into(),
                value,
                source,
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let adam = AdamConfig::default();
        let mut v = vec![
            e("command", json!(self.command.name()), Source::User),
            e(
                "variant",
                json!(self.variant.value.name()),
                self.variant.source,
            ),
            e("dims", json!(DEFAULT_DIMS), Source::Paper),
            e("seed", json!(self.seed.value), self.seed.source),
            e("eval_seed", json!(self.eval_config().seed), Source::Assumed),
            e("epochs", json!(self.epochs.value), self.epochs.source),
            e(
                "batch_size",
                json!(self.batch_size.value),
                self.batch_size.source,
            ),
            e("optimizer", json!("adam"), Source::Assumed),
            e("lr", json!(self.lr.value), self.lr.source),
            e(
                "adam_betas",
                json!([adam.beta1, adam.beta2]),
                Source::Assumed,
            ),
            e("adam_eps", json!(adam.eps), Source::Assumed),
            e("prior", json!({"mean": 0.0, "sigma": 1.0}), Source::Assumed),
            e(
                "init",
                json!({"mu_std": INIT_MU_STD, "rho": INIT_RHO, "threshold": 0.0}),
                Source::Assumed,
            ),
            e(
                "kl_weighting",
                json!(self.kl_weighting.value),
                self.kl_weighting.source,
            ),
            e("train_mc_samples", json!(1), Source::Assumed),
            e(
                "mc_samples",
                json!(self.mc_samples.value),
                self.mc_samples.source,
            ),
            e(
                "confidence_threshold",
                json!(self.threshold.value),
                self.threshold.source,
            ),
            e(
                "forced",
                json!(self.forced),
                if self.forced {
                    Source::User
                } else {
                    Source::Assumed
                },
            ),
            e(
                "train_images",
                json!(path(&self.train_images)),
                Source::User,
            ),
            e(
                "train_labels",
                json!(path(&self.train_labels)),
                Source::User,
            ),
            e("test_images", json!(path(&self.test_images)), Source::User),
            e("test_labels", json!(path(&self.test_labels)), Source::User),
            e("checkpoint", json!(path(&self.checkpoint)), Source::User),
            e("train_limit", json!(self.train_limit), Source::User),
            e("test_limit", json!(self.test_limit), Source::User),
        ];
        v.retain(|e| !e.value.is_null());
        if self.command == Command::NoiseProbe {
            v.push(e("n_noise", json!(self.n_noise.value), self.n_noise.source));
        }
        if self.command == Command::Gradcheck {
            v.push(e(
                "gradcheck_models",
                json!(GRADCHECK_MODELS),
                Source::Assumed,
            ));
            v.push(e("gradcheck_dims", json!(GRADCHECK_DIMS), Source::Assumed));
        }
        v
    }

    /// Short hex digest of the effective configuration.
    pub fn run_id(&self) -> String {
        let text = serde_json::to_string(&self.entries()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn load_set(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    limit: Option<usize>,
) -> Result<ImageSet, RunError> {
    let (Some(i), Some(l)) = (images, labels) else {
        return Err(RunError::Config("missing data path".into()));
    };
    let set = mnist_io::load_image_set(i, l)?;
    Ok(match limit {
        Some(n) => set.head(n),
        None => set,
    })
}

struct Clock {
    start: Instant,
    phases: Vec<(String, f64)>,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            phases: Vec::new(),
        }
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.phases.push((name.into(), t.elapsed().as_secs_f64()));
        out
    }

    fn finish(mut self) -> Vec<(String, f64)> {
        self.phases
            .push(("total".into(), self.start.elapsed().as_secs_f64()));
        self.phases
    }
}

/// Execute the configured pipeline and build its report (nothing is written).
pub fn execute(cfg: &RunConfig) -> Result<Report, RunError> {
    cfg.validate()?;
    let mut clock = Clock::new();
    let eval = cfg.eval_config();
    let results = match cfg.command {
        Command::Train => {
            let (train, test) = clock.time("load", || -> Result<_, RunError> {
                Ok((
                    load_set(&cfg.train_images, &cfg.train_labels, cfg.train_limit)?,
                    load_set(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?,
                ))
            })?;
            let mut trainer = Trainer::from_config(&cfg.model_config(), cfg.train_config());
            let train_stats = clock.time("train", || {
                (0..cfg.epochs.value)
                    .map(|_| trainer.train_epoch(&train))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(&trainer, path)?;
            }
            let (f, u) = clock.time("eval", || {
                evaluate_both(
                    &trainer.model,
                    &test,
                    eval.mc_samples,
                    eval.threshold,
                    eval.seed,
                )
            })?;
            Results::Eval {
                train_stats,
                records: vec![f, u],
            }
        }
        Command::Eval => {
            let (trainer, test) = clock.time("load", || -> Result<_, RunError> {
                Ok((
                    checkpoint::load(cfg.checkpoint.as_deref().expect("validated"))?,
                    load_set(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?,
                ))
            })?;
            let (f, u) = clock.time("eval", || {
                evaluate_both(
                    &trainer.model,
                    &test,
                    eval.mc_samples,
                    eval.threshold,
                    eval.seed,
                )
            })?;
            Results::Eval {
                train_stats: Vec::new(),
                records: vec![if cfg.forced { f } else { u }],
            }
        }
        Command::Continual => {
            let tasks = clock.time("load", || -> Result<_, RunError> {
                let train = load_set(&cfg.train_images, &cfg.train_labels, cfg.train_limit)?;
                let test = load_set(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?;
                Ok(mnist_io::split_tasks(&train, &test)?)
            })?;
            let matrix = clock.time("continual", || {
                run_continual(
                    &cfg.model_config(),
                    &tasks,
                    cfg.epochs.value,
                    cfg.train_config(),
                    eval,
                )
            })?;
            Results::Continual { matrix }
        }
        Command::NoiseProbe => {
            let trainer = clock.time("load", || {
                checkpoint::load(cfg.checkpoint.as_deref().expect("validated"))
            })?;
            let noise_abstention = clock.time("noise", || {
                inference::noise_probe(
                    &trainer.model,
                    cfg.n_noise.value,
                    eval.mc_samples,
                    eval.threshold,
                    eval.seed,
                )
            })?;
            let test_abstention = match (&cfg.test_images, &cfg.test_labels) {
                (Some(_), Some(_)) => {
                    let test = load_set(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?;
                    let (_, u) = clock.time("eval", || {
                        evaluate_both(
                            &trainer.model,
                            &test,
                            eval.mc_samples,
                            eval.threshold,
                            eval.seed,
                        )
                    })?;
                    Some(u.n_skipped as f64 / u.n_total as f64)
                }
                _ => None,
            };
            Results::NoiseProbe {
                n_noise: cfg.n_noise.value,
                noise_abstention,
                test_abstention,
            }
        }
        Command::Gradcheck => {
            let result = clock.time("gradcheck", || {
                gradcheck::run_suite(GRADCHECK_MODELS, cfg.seed.value, &GRADCHECK_DIMS)
            })?;
            Results::GradCheck {
                n_models: GRADCHECK_MODELS,
                dims: GRADCHECK_DIMS.to_vec(),
                result,
            }
        }
    };
    Ok(Report {
        run_id: cfg.run_id(),
        command: cfg.command.name().into(),
        config: cfg.entries(),
        results,
        timings: clock.finish(),
    })
}

fn write_out(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn summary(report: &Report) -> String {
    match &report.results {
        Results::Eval { records, .. } => records
            .iter()
            .map(|r| {
                format!(
                    "{}: skipped {}/{} accuracy {:.3}",
                    r.mode.name(),
                    r.n_skipped,
                    r.n_total,
                    r.accuracy
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
        Results::Continual { matrix } => {
            let last = matrix.rows.len();
            format!(
                "{} stages; final mean accuracy forced {:.3}, skipping allowed {:.3}",
                last,
                matrix.mean_accuracy(last, inference::Mode::Forced),
                matrix.mean_accuracy(last, inference::Mode::Unforced)
            )
        }
        Results::NoiseProbe {
            noise_abstention,
            test_abstention,
            ..
        } => match test_abstention {
            Some(t) => format!("abstention on noise {noise_abstention:.3}, on test set {t:.3}"),
            None => format!("abstention on noise {noise_abstention:.3}"),
        },
        Results::GradCheck { result, .. } => {
            format!(
                "max relative gradient error: {:e} over {} derivatives (max absolute {:e})",
                result.max_rel_error, result.n_checked, result.max_abs_error
            )
        }
    }
}

/// Execute, write the report, and map the outcome to an exit status.
pub fn run(cfg: &RunConfig) -> Result<Report, RunError> {
    let report = execute(cfg)?;
    let text = report.render(cfg.format);
    match &cfg.out {
        Some(path) => write_out(path, &text)?,
        None => print!("{text}"),
    }
    eprintln!("[{}] {}", report.run_id, summary(&report));
    if let Results::GradCheck { result, .. } = &report.results {
        if !result.passes() {
            return Err(RunError::Numeric(format!(
                "gradient check failed: max relative error {:e} >= {:e}",
                result.max_rel_error,
                gradcheck::REL_TOL
            )));
        }
    }
    Ok(report)
}

/// Entry point shared by the binary and the tests.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match RunConfig::from_cli(cli).and_then(|cfg| run(&cfg)) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("bnn: {e}");
            e.exit_code()
        }
    }
}
