//! Parameterized building blocks shared by the model modules.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

/// `x · W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| (rng::uniform(rng) * 2.0 - 1.0) * a);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Small-normal initialized table (embeddings, learned tokens).
pub fn embedding(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    let m = Matrix::from_fn(rows, cols, |_, _| rng::normal(rng) * 0.02);
    store.add(name, m)
}
