use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected network; the activation follows every layer but the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `sizes` lists input, hidden and output widths. Weights are drawn from
    /// N(0, gain/fan_in) with gain 2 before a rectifier and 1 otherwise.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if i + 1 < n_layers && activation == Activation::Relu {
                    2.0
                } else {
                    1.0
                };
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weight = Tensor::from_fn(&[fan_in, fan_out], |_| normal.sample(rng));
                Linear {
                    weight: store.add(format!("{prefix}.{i}.weight"), weight),
                    bias: store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out])),
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Maps `[rows, in_dim]` to `[rows, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[layer.weight])?;
            h = tape.add(h, params[layer.bias])?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(h)
    }
}
