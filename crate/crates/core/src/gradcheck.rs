//! Central finite-difference check of [`backward`] against [`elbo_loss`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BayesMlp, Variant};
use crate::vicore::{
    backward, elbo_loss, Batch, NoiseDraw, NonFinite, PriorSpec, VariationalParam,
};

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// Error between an analytic and a numeric derivative: zero below the
/// absolute floor, relative to the larger magnitude above it.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// A small model with a batch, frozen noise and KL weight.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: BayesMlp,
    pub inputs: Vec<f64>,
    pub labels: Vec<u8>,
    pub noise: NoiseDraw,
    pub kl_weight: f64,
}

impl Problem {
    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.inputs, &self.labels)
    }

    /// Distance of the nearest hidden pre-activation from its ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.model
            .sample(&self.noise)
            .forward_batch(&self.inputs, self.labels.len())
            .kink_margin()
    }
}

/// A random problem whose hidden units all sit at least `min_margin` away
/// from the ReLU kink, where the loss is not differentiable.
pub fn random_problem(
    seed: u64,
    variant: Variant,
    dims: &[usize],
    batch: usize,
    min_margin: f64,
) -> Problem {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let mut model = crate::model::init_model(
            &crate::model::ModelConfig::new(variant, rng.random()).with_dims(dims),
        );
        for layer in &mut model.layers {
            layer.prior = PriorSpec::new(rng.random_range(-0.3..0.3), rng.random_range(0.5..2.0));
        }
        for p in model.params_mut() {
            *p = VariationalParam::new(rng.random_range(-1.0..1.0), rng.random_range(-3.0..0.5));
        }
        for t in &mut model.thresholds {
            t.thresholds
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let inputs = (0..batch * dims[0]).map(|_| rng.random::<f64>()).collect();
        let classes = *dims.last().expect("dims");
        let labels = (0..batch)
            .map(|_| rng.random_range(0..classes) as u8)
            .collect();
        let noise = NoiseDraw::generate(
            rng.random(),
            rng.random_range(0..1000),
            model.num_variational(),
        );
        let problem = Problem {
            model,
            inputs,
            labels,
            noise,
            kl_weight: rng.random_range(0.05..1.0),
        };
        if problem.kink_margin() >= min_margin {
            return problem;
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub n_checked: usize,
    /// Largest [`relative_error`]; zero when every difference is under the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckResult {
    pub fn merge(self, other: Self) -> Self {
        Self {
            n_checked: self.n_checked + other.n_checked,
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
        }
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

fn param_mut(m: &mut BayesMlp, layer: usize, index: usize) -> &mut VariationalParam {
    let l = &mut m.layers[layer];
    let n_w = l.weights.len();
    if index < n_w {
        &mut l.weights[index]
    } else {
        &mut l.biases[index - n_w]
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for the scalar selected by `slot`, restoring it afterwards.
fn central(
    probe: &mut BayesMlp,
    h: f64,
    slot: &dyn Fn(&mut BayesMlp) -> &mut f64,
    loss: &dyn Fn(&BayesMlp) -> Result<f64, NonFinite>,
) -> Result<f64, NonFinite> {
    let orig = *slot(probe);
    *slot(probe) = orig + h;
    let up = loss(probe);
    *slot(probe) = orig - h;
    let down = loss(probe);
    *slot(probe) = orig;
    Ok((up? - down?) / (2.0 * h))
}

/// Compare every analytic derivative (mu, rho, thresholds) with a central
/// difference of the single-sample loss under the same frozen noise.
pub fn check_problem(p: &Problem, h: f64) -> Result<GradCheckResult, NonFinite> {
    let mut analytic = p.model.clone();
    analytic.zero_grad();
    backward(&mut analytic, p.batch(), &p.noise, p.kl_weight)?;
    let noise = std::slice::from_ref(&p.noise);
    let loss = |m: &BayesMlp| elbo_loss(m, p.batch(), noise, p.kl_weight).map(|l| l.loss);

    let mut result = GradCheckResult::default();
    let mut record = |a: f64, n: f64| {
        result.n_checked += 1;
        result.max_rel_error = result.max_rel_error.max(relative_error(a, n, ABS_FLOOR));
        result.max_abs_error = result.max_abs_error.max((a - n).abs());
    };
    let mut probe = p.model.clone();
    for li in 0..probe.layers.len() {
        for pi in 0..probe.layers[li].num_params() {
            let a = *param_mut(&mut analytic, li, pi);
            let g_mu = central(&mut probe, h, &|m| &mut param_mut(m, li, pi).mu, &loss)?;
            record(a.grad_mu, g_mu);
            let g_rho = central(&mut probe, h, &|m| &mut param_mut(m, li, pi).rho, &loss)?;
            record(a.grad_rho, g_rho);
        }
    }
    for ti in 0..probe.thresholds.len() {
        for j in 0..probe.thresholds[ti].thresholds.len() {
            let numeric = central(
                &mut probe,
                h,
                &|m| &mut m.thresholds[ti].thresholds[j],
                &loss,
            )?;
            record(analytic.thresholds[ti].grad[j], numeric);
        }
    }
    Ok(result)
}

/// Check `n_models` random problems on the given dims, alternating variants.
pub fn run_suite(n_models: usize, seed: u64, dims: &[usize]) -> Result<GradCheckResult, NonFinite> {
    let mut total = GradCheckResult::default();
    for i in 0..n_models as u64 {
        let variant = if i % 2 == 0 {
            Variant::LearnableActivation
        } else {
            Variant::Generic
        };
        let p = random_problem(seed.wrapping_add(i), variant, dims, 3, 1e-2);
        total = total.merge(check_problem(&p, STEP)?);
    }
    Ok(total)
}
