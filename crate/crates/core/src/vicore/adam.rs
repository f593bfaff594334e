use serde::{Deserialize, Serialize};

/// Anything exposing a flat, stably ordered list of (value, gradient) pairs.
pub trait Trainable {
    fn num_scalars(&self) -> usize;

    /// Visit every learnable scalar together with its gradient accumulator,
    /// always in the same order.
    fn visit_scalars_mut(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Gradients are zeroed after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far; the next step uses `t + 1`.
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_scalars: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_scalars],
            v: vec![0.0; num_scalars],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut dyn Trainable) {
        assert_eq!(
            params.num_scalars(),
            self.m.len(),
            "optimizer state does not match parameter set"
        );
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_scalars_mut(&mut |value, grad| {
            let g = *grad;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
            *grad = 0.0;
            i += 1;
        });
    }
}

/// Parallel value/gradient slices as a [`Trainable`].
pub struct Slices<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

impl Trainable for Slices<'_> {
    fn num_scalars(&self) -> usize {
        self.values.len()
    }

    fn visit_scalars_mut(&mut self, f: &mut dyn FnMut(&mut f64, &mut f64)) {
        for (v, g) in self.values.iter_mut().zip(self.grads.iter_mut()) {
            f(v, g);
        }
    }
}
