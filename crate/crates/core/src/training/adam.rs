//! Adam with bias correction and decoupled weight decay.

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameter slots.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `sizes` gives the element count of each slot.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once before updating the slots.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one slot. `decay` is false for parameters excluded from weight decay.
    pub fn update(&mut self, slot: usize, values: &mut [f64], grad: &[f64], decay: bool) {
        assert!(self.t > 0, "begin_step must precede update");
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), values.len(), "slot {slot} size changed");
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut step = m_hat / (v_hat.sqrt() + c.eps);
            if decay {
                step += c.weight_decay * values[i];
            }
            values[i] -= c.lr * step;
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
