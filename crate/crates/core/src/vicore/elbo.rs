//! The minibatch variational objective and its exact pathwise gradient.
//!
//! For one posterior sample `theta = mu + sigma * eps` the loss is
//!
//! ```text
//! kl_weight * sum_i [log q(theta_i) - log p(theta_i)] + sum_batch NLL(y | x, theta)
//! ```
//!
//! and [`elbo_loss`] averages it over the supplied noise draws. The
//! closed-form KL is reported alongside for monitoring.

use serde::{Deserialize, Serialize};

use crate::linalg::{gemm, View};
use crate::mnist_io::ImageSet;
use crate::model::BayesMlp;

use super::{kl_gaussian, log_gaussian_pdf, sigmoid, softplus, NoiseDraw, NonFinite};

/// Row-major inputs with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [u8],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [u8]) -> Self {
        assert!(
            labels.is_empty() || inputs.len().is_multiple_of(labels.len()),
            "inputs do not divide evenly into rows"
        );
        Self { inputs, labels }
    }

    pub fn from_set(set: &'a ImageSet) -> Self {
        Self::new(set.pixels(), set.labels())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean over samples of `kl_sampled + nll`; the quantity being differentiated.
    pub loss: f64,
    /// `kl_weight * KL(q || p)` in closed form.
    pub kl_term: f64,
    /// Mean over samples of `kl_weight * sum(log q - log p)`.
    pub kl_sampled: f64,
    /// Mean over samples of the summed softmax cross-entropy.
    pub nll_term: f64,
    pub n_mc: usize,
}

fn closed_form_kl(model: &BayesMlp) -> f64 {
    model
        .layers
        .iter()
        .map(|l| l.params().map(|p| kl_gaussian(p, &l.prior)).sum::<f64>())
        .sum()
}

fn sampled_log_ratio(model: &BayesMlp, noise: &NoiseDraw) -> f64 {
    let mut eps = noise.epsilon.iter();
    let mut total = 0.0;
    for layer in &model.layers {
        for (p, &e) in layer.params().zip(eps.by_ref()) {
            let sigma = softplus(p.rho);
            let theta = p.mu + sigma * e;
            total += log_gaussian_pdf(theta, p.mu, sigma)
                - log_gaussian_pdf(theta, layer.prior.mean, layer.prior.sigma);
        }
    }
    total
}

/// Summed cross-entropy, and optionally `softmax - onehot` written into `grad`.
fn softmax_nll(logits: &[f64], labels: &[u8], classes: usize, mut grad: Option<&mut [f64]>) -> f64 {
    let mut nll = 0.0;
    for (r, (row, &y)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        nll += lse - row[y as usize];
        if let Some(g) = grad.as_deref_mut() {
            let g = &mut g[r * classes..(r + 1) * classes];
            for (c, (gc, &v)) in g.iter_mut().zip(row).enumerate() {
                *gc = (v - lse).exp() - if c == y as usize { 1.0 } else { 0.0 };
            }
        }
    }
    nll
}

fn check_batch(model: &BayesMlp, batch: &Batch<'_>) {
    assert!(!batch.is_empty(), "batch must be nonempty");
    assert_eq!(
        batch.inputs.len(),
        batch.len() * model.input_dim(),
        "batch rows do not match the model input dimension"
    );
}

/// Monte-Carlo ELBO loss with one sample per entry of `noises`.
pub fn elbo_loss(
    model: &BayesMlp,
    batch: Batch<'_>,
    noises: &[NoiseDraw],
    kl_weight: f64,
) -> Result<LossBreakdown, NonFinite> {
    assert!(!noises.is_empty(), "need at least one noise draw");
    check_batch(model, &batch);
    let classes = model.output_dim();
    let mut kl_sampled = 0.0;
    let mut nll_term = 0.0;
    for noise in noises {
        let net = model.sample(noise);
        let logits = net.forward_batch(batch.inputs, batch.len()).into_logits()?;
        nll_term += softmax_nll(&logits, batch.labels, classes, None);
        if kl_weight != 0.0 {
            kl_sampled += kl_weight * sampled_log_ratio(model, noise);
        }
    }
    let n = noises.len() as f64;
    let kl_term = if kl_weight != 0.0 {
        kl_weight * closed_form_kl(model)
    } else {
        0.0
    };
    let out = LossBreakdown {
        loss: (kl_sampled + nll_term) / n,
        kl_term,
        kl_sampled: kl_sampled / n,
        nll_term: nll_term / n,
        n_mc: noises.len(),
    };
    if out.loss.is_finite() && out.kl_term.is_finite() {
        Ok(out)
    } else {
        Err(NonFinite("elbo loss".into()))
    }
}

/// Accumulate the exact gradient of the single-sample loss for `noise` into
/// every `grad_mu`, `grad_rho` and threshold gradient of `model`.
///
/// Returns the loss of that sample. Gradients add to whatever is already
/// stored; [`super::Adam::step`] clears them.
pub fn backward(
    model: &mut BayesMlp,
    batch: Batch<'_>,
    noise: &NoiseDraw,
    kl_weight: f64,
) -> Result<LossBreakdown, NonFinite> {
    check_batch(model, &batch);
    let b = batch.len();
    let net = model.sample(noise);
    let cache = net.forward_batch(batch.inputs, b);
    if !cache.logits.iter().all(|v| v.is_finite()) {
        return Err(NonFinite("logits".into()));
    }
    let classes = model.output_dim();
    let mut upstream = vec![0.0; cache.logits.len()];
    let nll = softmax_nll(&cache.logits, batch.labels, classes, Some(&mut upstream));

    // d loss / d theta for each layer, weights then biases
    let mut theta_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(net.layers.len());
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let (n_in, n_out) = (layer.in_dim, layer.out_dim);
        let mut dw = vec![0.0; n_out * n_in];
        gemm(
            View::transposed(&upstream, n_out, b),
            View::row_major(&cache.inputs[l], b, n_in),
            0.0,
            &mut dw,
        );
        let mut db = vec![0.0; n_out];
        for row in upstream.chunks_exact(n_out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        theta_grads.push((dw, db));
        if l == 0 {
            break;
        }
        let mut dinput = vec![0.0; b * n_in];
        gemm(
            View::row_major(&upstream, b, n_out),
            View::row_major(&layer.weights, n_out, n_in),
            0.0,
            &mut dinput,
        );
        for (d, &s) in dinput.iter_mut().zip(&cache.shifted[l - 1]) {
            if s <= 0.0 {
                *d = 0.0;
            }
        }
        if let Some(t) = model.thresholds.get_mut(l - 1) {
            for row in dinput.chunks_exact(n_in) {
                for (g, &d) in t.grad.iter_mut().zip(row) {
                    *g -= d;
                }
            }
        }
        upstream = dinput;
    }
    theta_grads.reverse();

    let mut eps = noise.epsilon.iter();
    let mut log_ratio = 0.0;
    for ((layer, sampled), (dw, db)) in model.layers.iter_mut().zip(&net.layers).zip(&theta_grads) {
        let prior = layer.prior;
        let inv_var = 1.0 / (prior.sigma * prior.sigma);
        let thetas = sampled.weights.iter().chain(&sampled.biases);
        let grads = dw.iter().chain(db);
        for ((p, &e), (&theta, &g)) in layer
            .weights
            .iter_mut()
            .chain(layer.biases.iter_mut())
            .zip(eps.by_ref())
            .zip(thetas.zip(grads))
        {
            let mut g_theta = g;
            let mut direct_sigma = 0.0;
            if kl_weight != 0.0 {
                let sigma = softplus(p.rho);
                // log q(theta) with theta = mu + sigma*eps is -ln(sigma) - eps^2/2 + const,
                // so its mu-dependence cancels and only -1/sigma survives for sigma.
                g_theta += kl_weight * (theta - prior.mean) * inv_var;
                direct_sigma = -kl_weight / sigma;
                log_ratio += log_gaussian_pdf(theta, p.mu, sigma)
                    - log_gaussian_pdf(theta, prior.mean, prior.sigma);
            }
            p.grad_mu += g_theta;
            p.grad_rho += sigmoid(p.rho) * (e * g_theta + direct_sigma);
        }
    }

    let kl_term = if kl_weight != 0.0 {
        kl_weight * closed_form_kl(model)
    } else {
        0.0
    };
    let kl_sampled = kl_weight * log_ratio;
    let out = LossBreakdown {
        loss: kl_sampled + nll,
        kl_term,
        kl_sampled,
        nll_term: nll,
        n_mc: 1,
    };
    let grads_finite = model
        .params()
        .all(|p| p.grad_mu.is_finite() && p.grad_rho.is_finite())
        && model
            .thresholds
            .iter()
            .all(|t| t.grad.iter().all(|g| g.is_finite()));
    if out.loss.is_finite() && grads_finite {
        Ok(out)
    } else {
        Err(NonFinite("gradients".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Variant};
    use crate::vicore::VariationalParam;

    #[test]
    fn uniform_logits_give_b_ln10() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 1).with_dims(&[3, 4, 10]));
        for p in m.params_mut() {
            *p = VariationalParam::new(0.0, -800.0);
        }
        let inputs = vec![0.5; 3 * 6];
        let labels = [0, 3, 9, 2, 2, 7];
        let noise = NoiseDraw::generate(1, 0, m.num_variational());
        let out = elbo_loss(&m, Batch::new(&inputs, &labels), &[noise], 0.0).unwrap();
        assert!((out.nll_term - 6.0 * 10f64.ln()).abs() < 1e-12);
        assert_eq!(out.kl_term, 0.0);
    }

    #[test]
    fn posterior_at_prior_has_zero_kl() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 1).with_dims(&[3, 4, 2]));
        for p in m.params_mut() {
            *p = VariationalParam::with_sigma(0.0, 1.0);
        }
        let inputs = [0.1, 0.2, 0.3];
        let noises: Vec<_> = (0..20)
            .map(|i| NoiseDraw::generate(4, i, m.num_variational()))
            .collect();
        let out = elbo_loss(&m, Batch::new(&inputs, &[1]), &noises, 1.0).unwrap();
        assert!(out.kl_term.abs() < 1e-12);
        // log q and log p coincide pointwise when q == p
        assert!(out.kl_sampled.abs() < 1e-10);
    }

    #[test]
    fn zero_input_symmetric_init_gives_equal_output_bias_grads() {
        let mut m = init_model(&ModelConfig::new(Variant::Generic, 3).with_dims(&[4, 3, 5]));
        for p in m.params_mut() {
            *p = VariationalParam::new(0.0, -3.0);
        }
        let inputs = vec![0.0; 4 * 5];
        let labels = [0, 1, 2, 3, 4];
        let noise = NoiseDraw::zeros(m.num_variational());
        backward(&mut m, Batch::new(&inputs, &labels), &noise, 0.0).unwrap();
        let g: Vec<f64> = m.layers[1].biases.iter().map(|p| p.grad_mu).collect();
        assert!(g.iter().all(|&v| (v - g[0]).abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn backward_reports_same_loss_as_elbo() {
        let mut m =
            init_model(&ModelConfig::new(Variant::LearnableActivation, 8).with_dims(&[4, 3, 2]));
        let inputs = [0.1, 0.9, 0.4, 0.3, 0.7, 0.2, 0.0, 1.0];
        let labels = [1, 0];
        let noise = NoiseDraw::generate(2, 5, m.num_variational());
        let a = elbo_loss(
            &m,
            Batch::new(&inputs, &labels),
            std::slice::from_ref(&noise),
            0.3,
        )
        .unwrap();
        let b = backward(&mut m, Batch::new(&inputs, &labels), &noise, 0.3).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!((a.kl_term - b.kl_term).abs() < 1e-12);
    }
}
