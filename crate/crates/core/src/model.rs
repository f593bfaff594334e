//! The Bayesian MLP: variational fully connected layers with a ReLU hidden
//! stage that is optionally shifted by learnable per-neuron thresholds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{gemm, View};
use crate::vicore::{derive_seed, NoiseDraw, NonFinite, PriorSpec, Trainable, VariationalParam};

pub const DEFAULT_DIMS: [usize; 3] = [784, 400, 10];
pub const INIT_MU_STD: f64 = 0.1;
pub const INIT_RHO: f64 = -3.0;

const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain ReLU hidden activations.
    Generic,
    /// Hidden activation `relu(z - t)` with a learnable threshold `t` per neuron.
    LearnableActivation,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Generic => "generic",
            Variant::LearnableActivation => "threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub prior: PriorSpec,
    pub init_mu_std: f64,
    pub init_rho: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            dims: DEFAULT_DIMS.to_vec(),
            seed,
            prior: PriorSpec::standard(),
            init_mu_std: INIT_MU_STD,
            init_rho: INIT_RHO,
        }
    }

    pub fn with_dims(mut self, dims: &[usize]) -> Self {
        self.dims = dims.to_vec();
        self
    }
}

/// A fully connected layer with a Gaussian posterior over every weight and bias.
///
/// `weights[o * in_dim + i]` connects input `i` to output `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<VariationalParam>,
    pub biases: Vec<VariationalParam>,
    pub prior: PriorSpec,
}

impl BayesLinear {
    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &VariationalParam> {
        self.weights.iter().chain(self.biases.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut VariationalParam> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

/// Deterministic per-neuron thresholds for one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdActivation {
    pub thresholds: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ThresholdActivation {
    pub fn zeros(n: usize) -> Self {
        Self {
            thresholds: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesMlp {
    pub variant: Variant,
    pub layers: Vec<BayesLinear>,
    /// One entry per hidden layer for [`Variant::LearnableActivation`], empty otherwise.
    pub thresholds: Vec<ThresholdActivation>,
}

/// Build a model from its config; identical configs give bit-identical models.
pub fn init_model(cfg: &ModelConfig) -> BayesMlp {
    assert!(cfg.dims.len() >= 2, "need at least input and output dims");
    assert!(cfg.dims.iter().all(|&d| d > 0), "dims must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_TAG));
    let normal = Normal::new(0.0, cfg.init_mu_std).expect("init std must be finite");
    let mut draw = |n: usize| -> Vec<VariationalParam> {
        (0..n)
            .map(|_| VariationalParam::new(normal.sample(&mut rng), cfg.init_rho))
            .collect()
    };
    let layers = cfg
        .dims
        .windows(2)
        .map(|w| BayesLinear {
            in_dim: w[0],
            out_dim: w[1],
            weights: draw(w[0] * w[1]),
            biases: draw(w[1]),
            prior: cfg.prior,
        })
        .collect();
    let hidden = &cfg.dims[1..cfg.dims.len() - 1];
    let thresholds = match cfg.variant {
        Variant::Generic => Vec::new(),
        Variant::LearnableActivation => hidden
            .iter()
            .map(|&n| ThresholdActivation::zeros(n))
            .collect(),
    };
    BayesMlp {
        variant: cfg.variant,
        layers,
        thresholds,
    }
}

impl BayesMlp {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Number of variational scalars, i.e. the length of a matching [`NoiseDraw`].
    pub fn num_variational(&self) -> usize {
        self.layers.iter().map(BayesLinear::num_params).sum()
    }

    pub fn num_thresholds(&self) -> usize {
        self.thresholds.iter().map(|t| t.thresholds.len()).sum()
    }

    /// Variational scalars in noise order: layer by layer, weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &VariationalParam> {
        self.layers.iter().flat_map(BayesLinear::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut VariationalParam> {
        self.layers.iter_mut().flat_map(BayesLinear::params_mut)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(VariationalParam::zero_grad);
        for t in &mut self.thresholds {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Draw a concrete network `theta = mu + sigma * eps`.
    pub fn sample(&self, noise: &NoiseDraw) -> SampledNetwork {
        assert_eq!(
            noise.len(),
            self.num_variational(),
            "noise draw does not match the parameter count"
        );
        let mut eps = noise.epsilon.iter();
        let mut take = |ps: &[VariationalParam]| -> Vec<f64> {
            ps.iter()
                .zip(eps.by_ref())
                .map(|(p, &e)| crate::vicore::sample_param(p, e))
                .collect()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| SampledLayer {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weights: take(&l.weights),
                biases: take(&l.biases),
            })
            .collect();
        SampledNetwork {
            layers,
            thresholds: self
                .thresholds
                .iter()
                .map(|t| t.thresholds.clone())
                .collect(),
        }
    }

    /// A network at the posterior means.
    pub fn mean_network(&self) -> SampledNetwork {
        self.sample(&NoiseDraw::zeros(self.num_variational()))
    }

    pub fn check_finite(&self) -> Result<(), NonFinite> {
        let params_ok = self.params().all(|p| p.mu.is_finite() && p.rho.is_finite());
        let thresholds_ok = self
            .thresholds
            .iter()
            .all(|t| t.thresholds.iter().all(|v| v.is_finite()));
        if params_ok && thresholds_ok {
            Ok(())
        } else {
            Err(NonFinite("model parameters".into()))
        }
    }
}

/// Logits of a single input under one posterior sample.
pub fn forward(model: &BayesMlp, x: &[f64], noise: &NoiseDraw) -> Result<Vec<f64>, NonFinite> {
    let net = model.sample(noise);
    let cache = net.forward_batch(x, 1);
    cache.into_logits()
}

impl Trainable for BayesMlp {
    fn num_scalars(&self) -> usize {
        2 * self.num_variational() + self.num_thresholds()
    }

    fn visit_scalars_mut(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64)) {
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                f(&mut p.mu, &mut p.grad_mu);
                f(&mut p.rho, &mut p.grad_rho);
            }
        }
        for t in &mut self.thresholds {
            for (v, g) in t.thresholds.iter_mut().zip(t.grad.iter_mut()) {
                f(v, g);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// A point-valued network drawn from the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNetwork {
    pub layers: Vec<SampledLayer>,
    pub thresholds: Vec<Vec<f64>>,
}

/// Intermediate values of a batched forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// Input to each layer (`batch x in_dim`, row-major). `inputs[0]` is the batch.
    pub inputs: Vec<Vec<f64>>,
    /// Shifted pre-activations `z - t` of each hidden layer.
    pub shifted: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn into_logits(self) -> Result<Vec<f64>, NonFinite> {
        if self.logits.iter().all(|v| v.is_finite()) {
            Ok(self.logits)
        } else {
            Err(NonFinite("logits".into()))
        }
    }

    /// Smallest `|z - t|` over all hidden units; how close the batch sits to a ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.shifted
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl SampledNetwork {
    /// Forward `batch` row-major inputs through the network.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> ForwardCache {
        let n_layers = self.layers.len();
        assert_eq!(
            x.len(),
            batch * self.layers[0].in_dim,
            "input has wrong size"
        );
        let mut inputs = Vec::with_capacity(n_layers);
        let mut shifted = Vec::with_capacity(n_layers - 1);
        let mut current = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                z.extend_from_slice(&layer.biases);
            }
            gemm(
                View::row_major(&current, batch, layer.in_dim),
                View::transposed(&layer.weights, layer.in_dim, layer.out_dim),
                1.0,
                &mut z,
            );
            inputs.push(std::mem::take(&mut current));
            if l + 1 == n_layers {
                current = z;
                break;
            }
            if let Some(t) = self.thresholds.get(l) {
                for row in z.chunks_exact_mut(layer.out_dim) {
                    for (v, &th) in row.iter_mut().zip(t) {
                        *v -= th;
                    }
                }
            }
            current = z.iter().map(|&v| v.max(0.0)).collect();
            shifted.push(z);
        }
        ForwardCache {
            batch,
            inputs,
            shifted,
            logits: current,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_of_default_architecture() {
        let generic = init_model(&ModelConfig::new(Variant::Generic, 1));
        assert_eq!(
            generic.num_variational(),
            (784 * 400 + 400) + (400 * 10 + 10)
        );
        assert_eq!(generic.num_thresholds(), 0);
        let thr = init_model(&ModelConfig::new(Variant::LearnableActivation, 1));
        assert_eq!(thr.num_variational(), 318_010);
        assert_eq!(thr.num_thresholds(), 400);
        assert!(thr.thresholds[0].thresholds.iter().all(|&t| t == 0.0));
        assert!(thr.params().all(|p| p.sigma() > 0.0 && p.rho == INIT_RHO));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::new(Variant::Generic, 5).with_dims(&[20, 7, 3]);
        assert_eq!(init_model(&cfg), init_model(&cfg));
        let other = ModelConfig {
            seed: 6,
            ..cfg.clone()
        };
        assert_ne!(init_model(&cfg), init_model(&other));
    }

    /// 2-2-2 net, sigma = 0, checked against arithmetic done by hand.
    #[test]
    fn tiny_net_by_hand() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 0).with_dims(&[2, 2, 2]));
        let set = |ps: &mut [VariationalParam], vals: &[f64]| {
            for (p, &v) in ps.iter_mut().zip(vals) {
                *p = VariationalParam::new(v, -800.0);
            }
        };
        set(&mut m.layers[0].weights, &[1.0, -1.0, 0.5, 2.0]);
        set(&mut m.layers[0].biases, &[0.1, -3.0]);
        set(&mut m.layers[1].weights, &[1.0, 2.0, -1.0, 0.5]);
        set(&mut m.layers[1].biases, &[0.0, 1.0]);
        let noise = NoiseDraw::generate(3, 0, m.num_variational());
        let x = [0.5, 0.25];
        // h0 = relu(0.5 - 0.25 + 0.1) = 0.35 ; h1 = relu(0.25 + 0.5 - 3) = 0
        // logits = [0.35, -0.35 + 1] = [0.35, 0.65]
        let logits = forward(&m, &x, &noise).unwrap();
        assert!((logits[0] - 0.35).abs() < 1e-12);
        assert!((logits[1] - 0.65).abs() < 1e-12);
    }

    #[test]
    fn huge_thresholds_mask_hidden_layer() {
        let mut m =
            init_model(&ModelConfig::new(Variant::LearnableActivation, 2).with_dims(&[6, 5, 3]));
        m.thresholds[0]
            .thresholds
            .iter_mut()
            .for_each(|t| *t = 1e12);
        let noise = NoiseDraw::generate(1, 0, m.num_variational());
        let x = [0.2, 0.9, 0.1, 0.4, 0.0, 1.0];
        let net = m.sample(&noise);
        let cache = net.forward_batch(&x, 1);
        assert!(cache.inputs[1].iter().all(|&h| h == 0.0));
        assert_eq!(cache.logits, net.layers[1].biases);
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let m =
            init_model(&ModelConfig::new(Variant::LearnableActivation, 4).with_dims(&[5, 4, 3]));
        let noise = NoiseDraw::generate(2, 1, m.num_variational());
        let xs: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let batched = m.sample(&noise).forward_batch(&xs, 3).logits;
        for r in 0..3 {
            let single = forward(&m, &xs[r * 5..(r + 1) * 5], &noise).unwrap();
            for c in 0..3 {
                assert!((single[c] - batched[r * 3 + c]).abs() < 1e-12);
            }
        }
    }
}
