//! Mean-field Gaussian variational parameters and the closed-form and
//! sampled pieces of the variational objective.
//!
//! Every scalar weight or bias is an independent Gaussian `N(mu, sigma^2)`
//! with `sigma = softplus(rho)`. Samples are drawn pathwise,
//! `theta = mu + sigma * eps`, so gradients flow through `mu` and `rho` with
//! the noise `eps` held fixed.

mod adam;
mod elbo;

pub use adam::{Adam, AdamConfig, Slices, Trainable};
pub use elbo::{backward, elbo_loss, Batch, LossBreakdown};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `ln(sqrt(2*pi))`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("non-finite value encountered in {0}")]
pub struct NonFinite(pub String);

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `sigma > 0`.
pub fn softplus_inv(sigma: f64) -> f64 {
    if sigma > 20.0 {
        sigma + (-(-sigma).exp_m1()).ln()
    } else {
        sigma.exp_m1().ln()
    }
}

/// One scalar of the variational posterior plus its gradient accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalParam {
    pub mu: f64,
    pub rho: f64,
    pub grad_mu: f64,
    pub grad_rho: f64,
}

impl VariationalParam {
    pub fn new(mu: f64, rho: f64) -> Self {
        Self {
            mu,
            rho,
            grad_mu: 0.0,
            grad_rho: 0.0,
        }
    }

    pub fn with_sigma(mu: f64, sigma: f64) -> Self {
        Self::new(mu, softplus_inv(sigma))
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        softplus(self.rho)
    }

    pub fn zero_grad(&mut self) {
        self.grad_mu = 0.0;
        self.grad_rho = 0.0;
    }
}

/// Pathwise sample `mu + softplus(rho) * eps`.
#[inline]
pub fn sample_param(p: &VariationalParam, eps: f64) -> f64 {
    p.mu + p.sigma() * eps
}

/// A fixed Gaussian prior shared by every weight of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: f64,
    pub sigma: f64,
}

impl PriorSpec {
    pub fn new(mean: f64, sigma: f64) -> Self {
        assert!(sigma > 0.0, "prior sigma must be positive, got {sigma}");
        Self { mean, sigma }
    }

    pub fn standard() -> Self {
        Self::new(0.0, 1.0)
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::standard()
    }
}

/// Closed-form `KL(q || prior)` between two univariate Gaussians.
pub fn kl_gaussian(q: &VariationalParam, prior: &PriorSpec) -> f64 {
    let sq = q.sigma();
    let d = q.mu - prior.mean;
    (prior.sigma / sq).ln() + (sq * sq + d * d) / (2.0 * prior.sigma * prior.sigma) - 0.5
}

/// `log N(x; mean, sigma^2)`.
#[inline]
pub fn log_gaussian_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -sigma.ln() - LN_SQRT_2PI - 0.5 * z * z
}

/// Mixes a seed with a tag so that independent consumers (initialization,
/// shuffling, training noise, evaluation noise) never share a stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(tag))
}

/// Standard-normal noise for every variational scalar of a model.
///
/// Draw `index` under `seed` is a dedicated ChaCha stream, so any draw can be
/// regenerated on its own without replaying the ones before it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub seed: u64,
    pub index: u64,
    pub epsilon: Vec<f64>,
}

impl NoiseDraw {
    pub fn generate(seed: u64, index: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let epsilon = StandardNormal.sample_iter(&mut rng).take(len).collect();
        Self {
            seed,
            index,
            epsilon,
        }
    }

    /// All-zero noise: every sample collapses to the posterior mean.
    pub fn zeros(len: usize) -> Self {
        Self {
            seed: 0,
            index: 0,
            epsilon: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
    }
}
