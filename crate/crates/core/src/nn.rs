//! Parameter containers for the layers the model is assembled from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Places parameter tensors on a graph, remembering the vars in the order
/// they were bound. In replay mode it hands out existing vars instead, in the
/// same order, after checking each against the tensor it stands for.
pub struct Binder<'g> {
    graph: &'g mut Graph,
    trainable: bool,
    vars: Vec<Var>,
    replay: Option<Vec<Var>>,
    mismatch: Option<String>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph, trainable: bool) -> Self {
        Binder {
            graph,
            trainable,
            vars: Vec::new(),
            replay: None,
            mismatch: None,
        }
    }

    pub fn replay(graph: &'g mut Graph, vars: &[Var]) -> Self {
        Binder {
            graph,
            trainable: false,
            vars: Vec::new(),
            replay: Some(vars.iter().rev().copied().collect()),
            mismatch: None,
        }
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        let v = match &mut self.replay {
            Some(queue) => match queue.pop() {
                Some(v) if self.graph.shape(v) == t.shape() => v,
                other => {
                    let found = other.map(|v| format!("{:?}", self.graph.shape(v)));
                    self.mismatch.get_or_insert(format!(
                        "parameter {} expects {:?}, got {}",
                        self.vars.len(),
                        t.shape(),
                        found.unwrap_or_else(|| "nothing".into())
                    ));
                    self.graph.input(t.clone())
                }
            },
            None if self.trainable => self.graph.param(t.clone()),
            None => self.graph.input(t.clone()),
        };
        self.vars.push(v);
        v
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }

    /// Like [`Self::into_vars`], failing if a replayed var did not match or
    /// was left over.
    pub fn finish(self) -> Result<Vec<Var>> {
        if let Some(m) = self.mismatch {
            return Err(Error::Shape(m));
        }
        if let Some(rest) = &self.replay {
            if !rest.is_empty() {
                return Err(Error::Shape(format!(
                    "{} vars supplied beyond the {} parameters",
                    rest.len(),
                    self.vars.len()
                )));
            }
        }
        Ok(self.vars)
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Fully connected layer: `weight [out, in]`, `bias [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.len() != weight.shape()[0] {
            return Err(Error::Shape(format!(
                "linear layer weight {:?} and bias {:?} do not agree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_out, fan_in]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// He (fan-in) normal weights, zero bias.
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Linear {
            weight: normal_tensor(&[fan_out, fan_in], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn with_std(fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: normal_tensor(&[fan_out, fan_in], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> LinearVars {
        LinearVars {
            weight: b.bind(&self.weight),
            bias: b.bind(&self.bias),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

/// 3D convolution with a cubic kernel: `weight [out, in, k, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3dVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv3d {
    pub fn he(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel.pow(3);
        let std = (2.0 / fan_in as f64).sqrt();
        Conv3d {
            weight: normal_tensor(&[out_channels, in_channels, kernel, kernel, kernel], std, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Conv3dVars {
        Conv3dVars {
            weight: b.bind(&self.weight),
            bias: b.bind(&self.bias),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl Conv3dVars {
    /// Stride 1, "same" zero padding.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.shape(self.weight)[2];
        g.conv3d(x, self.weight, self.bias, 1, k / 2)
    }
}
