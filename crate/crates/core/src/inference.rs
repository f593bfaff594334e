//! Monte-Carlo posterior predictive, confidence-gated decisions and the
//! uniform-noise abstention probe.
//!
//! A predictive over a dataset draws `T` networks once (noise draws
//! `0..T` under the evaluation seed) and averages their softmax outputs for
//! every example. Examples are processed in fixed-size chunks that can run in
//! parallel; each example's result depends only on its own pixels and the
//! `T` shared draws, so output never depends on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mnist_io::ImageSet;
use crate::model::{BayesMlp, SampledNetwork};
use crate::vicore::{derive_seed, NoiseDraw, NonFinite};

pub const DEFAULT_MC_SAMPLES: usize = 10;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.8;

const CHUNK: usize = 256;
const NOISE_IMAGE_TAG: u64 = 0x0015_E1A6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub probs: Vec<f64>,
    pub n_samples: usize,
}

impl PredictiveDistribution {
    /// Index and value of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> (usize, f64) {
        self.probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Predict { class: usize, confidence: f64 },
    Abstain { max_prob: f64 },
}

impl Decision {
    pub fn is_abstain(&self) -> bool {
        matches!(self, Decision::Abstain { .. })
    }
}

/// Predict the argmax when its probability reaches `threshold` (inclusive),
/// otherwise abstain.
pub fn decide(pd: &PredictiveDistribution, threshold: f64) -> Decision {
    let (class, max) = pd.argmax();
    if max >= threshold {
        Decision::Predict {
            class,
            confidence: max,
        }
    } else {
        Decision::Abstain { max_prob: max }
    }
}

fn softmax_into(logits: &[f64], acc: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    for (a, &v) in acc.iter_mut().zip(logits) {
        *a += (v - max).exp() / sum;
    }
}

fn sample_networks(model: &BayesMlp, t: usize, seed: u64) -> Vec<SampledNetwork> {
    assert!(t >= 1, "need at least one Monte-Carlo sample");
    (0..t as u64)
        .map(|i| model.sample(&NoiseDraw::generate(seed, i, model.num_variational())))
        .collect()
}

fn predict_rows(
    nets: &[SampledNetwork],
    pixels: &[f64],
    dim: usize,
    classes: usize,
) -> Result<Vec<f64>, NonFinite> {
    let chunks: Vec<Result<Vec<f64>, NonFinite>> = pixels
        .par_chunks(CHUNK * dim)
        .map(|x| {
            let rows = x.len() / dim;
            let mut acc = vec![0.0; rows * classes];
            for net in nets {
                let logits = net.forward_batch(x, rows).into_logits()?;
                for (l, a) in logits
                    .chunks_exact(classes)
                    .zip(acc.chunks_exact_mut(classes))
                {
                    softmax_into(l, a);
                }
            }
            let t = nets.len() as f64;
            acc.iter_mut().for_each(|p| *p /= t);
            Ok(acc)
        })
        .collect();
    let mut out = Vec::with_capacity(pixels.len() / dim * classes);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Posterior predictive of one input from `t` Monte-Carlo samples.
pub fn predictive(
    model: &BayesMlp,
    x: &[f64],
    t: usize,
    seed: u64,
) -> Result<PredictiveDistribution, NonFinite> {
    let nets = sample_networks(model, t, seed);
    let probs = predict_rows(&nets, x, model.input_dim(), model.output_dim())?;
    Ok(PredictiveDistribution {
        probs,
        n_samples: t,
    })
}

/// Posterior predictive of every row of a row-major input matrix.
pub fn predictive_batch(
    model: &BayesMlp,
    pixels: &[f64],
    t: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>, NonFinite> {
    let nets = sample_networks(model, t, seed);
    let classes = model.output_dim();
    let probs = predict_rows(&nets, pixels, model.input_dim(), classes)?;
    Ok(probs
        .chunks_exact(classes)
        .map(|p| PredictiveDistribution {
            probs: p.to_vec(),
            n_samples: t,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forced,
    Unforced,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forced => "forced",
            Mode::Unforced => "unforced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: Mode,
    pub n_total: usize,
    pub n_skipped: usize,
    /// Correct predictions among retained samples.
    pub n_correct: usize,
    /// `n_correct / (n_total - n_skipped)`; 0 when nothing was retained.
    pub accuracy: f64,
}

impl EvalRecord {
    pub fn n_retained(&self) -> usize {
        self.n_total - self.n_skipped
    }

    fn new(mode: Mode, n_total: usize, n_skipped: usize, n_correct: usize) -> Self {
        let retained = n_total - n_skipped;
        let accuracy = if retained == 0 {
            0.0
        } else {
            n_correct as f64 / retained as f64
        };
        Self {
            mode,
            n_total,
            n_skipped,
            n_correct,
            accuracy,
        }
    }
}

/// Score a set of predictive distributions against labels in both modes.
pub fn score(
    preds: &[PredictiveDistribution],
    labels: &[u8],
    threshold: f64,
) -> (EvalRecord, EvalRecord) {
    assert_eq!(preds.len(), labels.len());
    let mut forced_correct = 0;
    let mut skipped = 0;
    let mut retained_correct = 0;
    for (pd, &y) in preds.iter().zip(labels) {
        let (class, _) = pd.argmax();
        let hit = class == y as usize;
        forced_correct += usize::from(hit);
        match decide(pd, threshold) {
            Decision::Abstain { .. } => skipped += 1,
            Decision::Predict { .. } => retained_correct += usize::from(hit),
        }
    }
    let n = preds.len();
    (
        EvalRecord::new(Mode::Forced, n, 0, forced_correct),
        EvalRecord::new(Mode::Unforced, n, skipped, retained_correct),
    )
}

/// Forced and unforced records from one shared set of predictions.
pub fn evaluate_both(
    model: &BayesMlp,
    data: &ImageSet,
    t: usize,
    threshold: f64,
    seed: u64,
) -> Result<(EvalRecord, EvalRecord), NonFinite> {
    assert!(!data.is_empty(), "evaluation set is empty");
    let preds = predictive_batch(model, data.pixels(), t, seed)?;
    Ok(score(&preds, data.labels(), threshold))
}

/// Evaluate in one mode. With `forced` the threshold is ignored.
pub fn evaluate(
    model: &BayesMlp,
    data: &ImageSet,
    t: usize,
    threshold: f64,
    forced: bool,
    seed: u64,
) -> Result<EvalRecord, NonFinite> {
    let (f, u) = evaluate_both(model, data, t, threshold, seed)?;
    Ok(if forced { f } else { u })
}

/// `n` images with pixels i.i.d. uniform on `[0, 1]`.
pub fn uniform_noise_images(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, NOISE_IMAGE_TAG));
    (0..n * dim).map(|_| rng.random::<f64>()).collect()
}

/// Fraction of uniform-noise images on which the model abstains.
pub fn noise_probe(
    model: &BayesMlp,
    n: usize,
    t: usize,
    threshold: f64,
    seed: u64,
) -> Result<f64, NonFinite> {
    assert!(n >= 1, "noise probe needs at least one image");
    let images = uniform_noise_images(n, model.input_dim(), seed);
    let preds = predictive_batch(model, &images, t, seed)?;
    Ok(abstention_fraction(&preds, threshold))
}

pub fn abstention_fraction(preds: &[PredictiveDistribution], threshold: f64) -> f64 {
    let skipped = preds
        .iter()
        .filter(|p| decide(p, threshold).is_abstain())
        .count();
    skipped as f64 / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Variant};
    use crate::vicore::VariationalParam;

    fn pd(probs: &[f64]) -> PredictiveDistribution {
        PredictiveDistribution {
            probs: probs.to_vec(),
            n_samples: 1,
        }
    }

    #[test]
    fn decide_examples() {
        let mut p = vec![0.005; 10];
        p[3] = 0.955;
        assert_eq!(
            decide(&pd(&p), 0.8),
            Decision::Predict {
                class: 3,
                confidence: 0.955
            }
        );
        assert_eq!(
            decide(&pd(&[0.1; 10]), 0.8),
            Decision::Abstain { max_prob: 0.1 }
        );
        let mut p = vec![0.2 / 9.0; 10];
        p[6] = 0.8;
        assert!(matches!(
            decide(&pd(&p), 0.8),
            Decision::Predict { class: 6, .. }
        ));
        // ties go to the lowest index
        assert!(matches!(
            decide(&pd(&[0.0, 0.5, 0.5]), 0.5),
            Decision::Predict { class: 1, .. }
        ));
    }

    #[test]
    fn degenerate_model_is_uniform() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 0).with_dims(&[6, 4, 10]));
        for p in m.params_mut() {
            *p = VariationalParam::new(0.0, -800.0);
        }
        let d = predictive(&m, &[0.3; 6], 4, 1).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(decide(&d, 0.8).is_abstain());
        assert_eq!(noise_probe(&m, 20, 2, 0.8, 5).unwrap(), 1.0);
        assert_eq!(noise_probe(&m, 20, 2, 0.0, 5).unwrap(), 0.0);
    }

    #[test]
    fn zero_sigma_makes_t_irrelevant() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 3).with_dims(&[5, 4, 3]));
        for p in m.params_mut() {
            p.rho = -800.0;
        }
        let x = [0.2, 0.4, 0.6, 0.8, 1.0];
        let a = predictive(&m, &x, 1, 9).unwrap();
        let b = predictive(&m, &x, 100, 9).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn forced_never_skips() {
        let preds = vec![pd(&[0.5, 0.5]), pd(&[0.9, 0.1]), pd(&[0.3, 0.7])];
        let (f, u) = score(&preds, &[1, 0, 1], 0.8);
        assert_eq!((f.n_skipped, f.n_correct), (0, 2));
        assert_eq!((u.n_skipped, u.n_correct), (2, 1));
        assert_eq!(u.accuracy, 1.0);
        let (_, none) = score(&preds[..1], &[0], 0.99);
        assert_eq!((none.n_retained(), none.accuracy), (0, 0.0));
    }
}
