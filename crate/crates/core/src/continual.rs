//! Minibatch training and the sequential digit-pair protocol.
//!
//! The model and optimizer state carry over from one task to the next; there
//! is no replay and no pull toward earlier posteriors. After each stage the
//! model is evaluated on the test sets of every task seen so far.

use serde::{Deserialize, Serialize};

use crate::inference::{evaluate_both, EvalRecord, Mode};
use crate::mnist_io::{shuffled_indices, ImageSet, TaskSplit, PIXELS};
use crate::model::{init_model, BayesMlp, ModelConfig, Variant};
use crate::vicore::{backward, derive_seed, Adam, AdamConfig, Batch, NoiseDraw, NonFinite};

pub const DEFAULT_BATCH_SIZE: usize = 128;

const SHUFFLE_TAG: u64 = 0x5AF7;
const TRAIN_NOISE_TAG: u64 = 0x7A19;

/// Read access to a training set by index. Lets callers observe exactly
/// which samples a training loop touches.
pub trait TrainSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append the pixels and label of sample `i`.
    fn fetch(&self, i: usize, pixels: &mut Vec<f64>, labels: &mut Vec<u8>);
}

impl TrainSource for ImageSet {
    fn len(&self) -> usize {
        ImageSet::len(self)
    }

    fn fetch(&self, i: usize, pixels: &mut Vec<f64>, labels: &mut Vec<u8>) {
        pixels.extend_from_slice(self.image(i));
        labels.push(self.label(i));
    }
}

/// How much of the full-dataset KL each minibatch loss carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `1 / number_of_batches`: the KL counts once per epoch.
    PerEpoch,
    /// `1`: every minibatch carries the whole KL.
    PerBatch,
}

impl KlWeighting {
    pub fn weight(self, batches: usize) -> f64 {
        match self {
            KlWeighting::PerEpoch => 1.0 / batches as f64,
            KlWeighting::PerBatch => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub kl_weighting: KlWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            kl_weighting: KlWeighting::PerBatch,
            seed: 0,
        }
    }
}

/// Per-epoch means over minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub batches: usize,
    pub kl_weight: f64,
    pub mean_loss: f64,
    pub mean_kl_term: f64,
    pub mean_nll_term: f64,
}

/// A model together with its optimizer and the counters that select the
/// shuffle order and training noise of the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: BayesMlp,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Minibatch steps taken; doubles as the index of the next training noise draw.
    pub step: u64,
    /// Epochs completed; selects the next shuffle.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(model: BayesMlp, config: TrainConfig) -> Self {
        let adam = Adam::new(config.adam, crate::vicore::Trainable::num_scalars(&model));
        Self {
            model,
            adam,
            config,
            step: 0,
            epoch: 0,
        }
    }

    pub fn from_config(model_cfg: &ModelConfig, config: TrainConfig) -> Self {
        Self::new(init_model(model_cfg), config)
    }

    /// One pass over `data` in seeded-shuffled minibatches, one posterior
    /// sample per minibatch, KL weighted per [`TrainConfig::kl_weighting`].
    pub fn train_epoch<S: TrainSource + ?Sized>(
        &mut self,
        data: &S,
    ) -> Result<EpochStats, NonFinite> {
        assert!(!data.is_empty(), "training set is empty");
        assert!(self.config.batch_size >= 1, "batch size must be positive");
        let order = shuffled_indices(
            data.len(),
            derive_seed(self.config.seed ^ self.epoch, SHUFFLE_TAG),
        );
        let batches = data.len().div_ceil(self.config.batch_size);
        let kl_weight = self.config.kl_weighting.weight(batches);
        let noise_seed = derive_seed(self.config.seed, TRAIN_NOISE_TAG);
        let n_var = self.model.num_variational();

        let mut stats = EpochStats {
            batches,
            kl_weight,
            ..EpochStats::default()
        };
        let mut pixels = Vec::with_capacity(self.config.batch_size * PIXELS);
        let mut labels = Vec::with_capacity(self.config.batch_size);
        for chunk in order.chunks(self.config.batch_size) {
            pixels.clear();
            labels.clear();
            for &i in chunk {
                data.fetch(i, &mut pixels, &mut labels);
            }
            let noise = NoiseDraw::generate(noise_seed, self.step, n_var);
            let loss = backward(
                &mut self.model,
                Batch::new(&pixels, &labels),
                &noise,
                kl_weight,
            )?;
            self.adam.step(&mut self.model);
            self.step += 1;
            stats.mean_loss += loss.loss;
            stats.mean_kl_term += loss.kl_term;
            stats.mean_nll_term += loss.nll_term;
        }
        self.model.check_finite()?;
        self.epoch += 1;
        let n = batches as f64;
        stats.mean_loss /= n;
        stats.mean_kl_term /= n;
        stats.mean_nll_term /= n;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: crate::inference::DEFAULT_MC_SAMPLES,
            threshold: crate::inference::DEFAULT_CONFIDENCE_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub variant: Variant,
    pub dims: Vec<usize>,
    pub model_seed: u64,
    pub epochs_per_task: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Evaluations after one training stage: entry `j` is task `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub train_stats: Vec<EpochStats>,
    pub forced: Vec<EvalRecord>,
    pub unforced: Vec<EvalRecord>,
}

impl StageRow {
    pub fn records(&self, mode: Mode) -> &[EvalRecord] {
        match mode {
            Mode::Forced => &self.forced,
            Mode::Unforced => &self.unforced,
        }
    }
}

/// Lower-triangular task-by-task results: row `k` (1-based) covers tasks `1..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub meta: MatrixMeta,
    pub rows: Vec<StageRow>,
}

impl EvalMatrix {
    pub fn is_lower_triangular(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(k, r)| r.stage == k + 1 && r.forced.len() == k + 1 && r.unforced.len() == k + 1)
    }

    /// Mean accuracy across the tasks of one stage.
    pub fn mean_accuracy(&self, stage: usize, mode: Mode) -> f64 {
        let recs = self.rows[stage - 1].records(mode);
        recs.iter().map(|r| r.accuracy).sum::<f64>() / recs.len() as f64
    }
}

/// Failure part-way through a run, with the rows completed before it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error} after {} completed stages", .partial.rows.len())]
pub struct ContinualError {
    pub error: NonFinite,
    pub partial: Box<EvalMatrix>,
}

/// Train on each task in order and evaluate on all tasks seen so far.
pub fn run_continual(
    cfg: &ModelConfig,
    tasks: &[TaskSplit],
    epochs_per_task: usize,
    train: TrainConfig,
    eval: EvalConfig,
) -> Result<EvalMatrix, ContinualError> {
    let train_sets: Vec<&ImageSet> = tasks.iter().map(|t| &t.train).collect();
    let test_sets: Vec<&ImageSet> = tasks.iter().map(|t| &t.test).collect();
    run_continual_on(
        cfg,
        &train_sets,
        &test_sets,
        epochs_per_task,
        train,
        eval,
        |_, _| {},
    )
}

/// [`run_continual`] over arbitrary training sources, calling `on_stage`
/// after every completed stage.
pub fn run_continual_on<S: TrainSource + ?Sized>(
    cfg: &ModelConfig,
    train_sets: &[&S],
    test_sets: &[&ImageSet],
    epochs_per_task: usize,
    train: TrainConfig,
    eval: EvalConfig,
    mut on_stage: impl FnMut(&Trainer, &StageRow),
) -> Result<EvalMatrix, ContinualError> {
    assert_eq!(
        train_sets.len(),
        test_sets.len(),
        "every task needs a test set"
    );
    assert!(epochs_per_task >= 1, "epochs_per_task must be at least 1");
    let mut matrix = EvalMatrix {
        meta: MatrixMeta {
            variant: cfg.variant,
            dims: cfg.dims.clone(),
            model_seed: cfg.seed,
            epochs_per_task,
            train,
            eval,
        },
        rows: Vec::with_capacity(train_sets.len()),
    };
    let mut trainer = Trainer::from_config(cfg, train);
    for (k, data) in train_sets.iter().enumerate() {
        let result = (|| {
            let mut stats = Vec::with_capacity(epochs_per_task);
            for _ in 0..epochs_per_task {
                stats.push(trainer.train_epoch(*data)?);
            }
            let mut row = StageRow {
                stage: k + 1,
                train_stats: stats,
                forced: Vec::with_capacity(k + 1),
                unforced: Vec::with_capacity(k + 1),
            };
            for test in &test_sets[..=k] {
                let (f, u) = evaluate_both(
                    &trainer.model,
                    test,
                    eval.mc_samples,
                    eval.threshold,
                    eval.seed,
                )?;
                row.forced.push(f);
                row.unforced.push(u);
            }
            Ok(row)
        })();
        match result {
            Ok(row) => {
                on_stage(&trainer, &row);
                matrix.rows.push(row);
            }
            Err(error) => {
                return Err(ContinualError {
                    error,
                    partial: Box::new(matrix),
                })
            }
        }
    }
    Ok(matrix)
}
