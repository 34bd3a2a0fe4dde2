//! Parameterized layers shared by the attention kernels and Conformer blocks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ConvMode, Graph, Param, Var};
use crate::tensor::Tensor;

/// Anything that owns trainable weights.
pub trait Module {
    /// Weights in a stable order.
    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Seeded weight initializer: uniform in `±1/sqrt(fan_in)`, zero biases,
/// unit norm gains.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Param {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let rng = &mut self.rng;
        Param::new(Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Param {
        Param::new(Tensor::zeros(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> Param {
        Param::new(Tensor::ones(shape))
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: init.uniform(&[d_in, d_out], d_in),
            bias: bias.then(|| init.zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.linear(x, &g.param(&self.weight), b.as_ref())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(init: &mut Init, d: usize) -> Self {
        Self {
            gamma: init.ones(&[d]),
            beta: init.zeros(&[d]),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        g.layer_norm(x, &g.param(&self.gamma), &g.param(&self.beta))
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Depthwise temporal convolution with bias; weight `[k, c]`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init, kernel: usize, channels: usize, stride: usize) -> Self {
        Self {
            weight: init.uniform(&[kernel, channels], kernel),
            bias: init.zeros(&[channels]),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let y = g.conv1d(x, &g.param(&self.weight), self.stride, ConvMode::Depthwise)?;
        g.add_bias(&y, &g.param(&self.bias))
    }
}

impl Module for DepthwiseConv {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
