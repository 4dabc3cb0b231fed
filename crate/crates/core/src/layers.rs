//! Parameterized building blocks registered in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Square-kernel, stride-1, same-padding convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Conv {
            w: store.add_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            k,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.k / 2)
    }
}

/// Per-channel affine normalization over spatial positions.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Norm {
            gamma: store.add_filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.instance_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.w"), &[n_out, n_in], n_in, rng),
            b: store.add_zeros(format!("{name}.b"), &[n_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// Element-wise affine parameters for vector normalization.
#[derive(Clone, Debug)]
pub struct VecNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl VecNorm {
    pub fn new(store: &mut ParamStore, name: &str, n: usize) -> Self {
        VecNorm {
            gamma: store.add_filled(format!("{name}.gamma"), &[n], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[n]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}
