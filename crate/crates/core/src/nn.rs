//! Parameterised building blocks shared by the encoders and decoders.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer `y = x Wᵀ + b`, weights stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform initialisation in `±1/sqrt(in_dim)`, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), out_dim, in_dim, scale, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden_dim, rng),
            output: Linear::new(store, &format!("{name}.fc2"), hidden_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Single LSTM cell with one fused weight over `[x ; h]`. Gate order is
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            4 * hidden_dim,
            input_dim + hidden_dim,
            scale,
            rng,
        );
        let mut bias = Tensor::zeros(1, 4 * hidden_dim);
        // forget gate starts open
        for c in hidden_dim..2 * hidden_dim {
            bias.set(0, c, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            weight,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let hidden = g.constant(Tensor::zeros(1, self.hidden_dim));
        let cell = g.constant(Tensor::zeros(1, self.hidden_dim));
        LstmState { hidden, cell }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> LstmState {
        let h = self.hidden_dim;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xh = g.concat_cols(&[x, state.hidden]);
        let gates = g.linear(xh, w, b);
        let i = g.slice_cols(gates, 0, h);
        let f = g.slice_cols(gates, h, h);
        let c_hat = g.slice_cols(gates, 2 * h, h);
        let o = g.slice_cols(gates, 3 * h, h);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.cell);
        let write = g.mul(i, c_hat);
        let cell = g.add(keep, write);
        let squashed = g.tanh(cell);
        let hidden = g.mul(o, squashed);
        LstmState { hidden, cell }
    }
}
