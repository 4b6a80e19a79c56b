//! Layer descriptions, their parameter layouts, and graph-building helpers.

use std::collections::HashMap;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer for weight matrices and tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    LayerNorm {
        dim: usize,
    },
    EmbeddingTable {
        rows: usize,
        dim: usize,
    },
    /// Packed QKV projection, attention, and output projection.
    CausalSelfAttention {
        dim: usize,
        heads: usize,
    },
    Gelu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { input, output } if input == 0 || output == 0 => {
                Err(Error::shape("dense layer with a zero dimension"))
            }
            LayerSpec::LayerNorm { dim: 0 } => Err(Error::shape("layer norm of width 0")),
            LayerSpec::EmbeddingTable { rows, dim } if rows == 0 || dim == 0 => {
                Err(Error::shape("empty embedding table"))
            }
            LayerSpec::CausalSelfAttention { dim, heads } if heads == 0 || dim % heads != 0 => {
                Err(Error::shape(format!("attention width {dim} not divisible by {heads} heads")))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::LayerNorm { dim } => 2 * dim,
            LayerSpec::EmbeddingTable { rows, dim } => rows * dim,
            LayerSpec::CausalSelfAttention { dim, .. } => (dim * 3 * dim + 3 * dim) + (dim * dim + dim),
            LayerSpec::Gelu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => 0,
        }
    }

    /// Trailing-axis width produced from an input of width `input`.
    pub fn output_dim(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let expect = |want: usize, out: usize| {
            if input == want {
                Ok(out)
            } else {
                Err(Error::shape(format!("{self:?} expects width {want}, got {input}")))
            }
        };
        match *self {
            LayerSpec::Dense { input: i, output } => expect(i, output),
            LayerSpec::LayerNorm { dim } => expect(dim, dim),
            LayerSpec::CausalSelfAttention { dim, .. } => expect(dim, dim),
            // Input is a row index; any width is fine.
            LayerSpec::EmbeddingTable { dim, .. } => Ok(dim),
            LayerSpec::Gelu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Ok(input),
        }
    }

    /// Appends freshly initialized parameters under `prefix`.
    pub fn init<T: Float>(&self, prefix: &str, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        match *self {
            LayerSpec::Dense { input, output } => {
                params.push_normal(format!("{prefix}.weight"), &[input, output], INIT_STD, rng)?;
                params.push(format!("{prefix}.bias"), Tensor::zeros(&[output]))?;
            }
            LayerSpec::LayerNorm { dim } => {
                params.push(format!("{prefix}.gain"), Tensor::full(&[dim], T::one()))?;
                params.push(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
            }
            LayerSpec::EmbeddingTable { rows, dim } => {
                params.push_normal(format!("{prefix}.weight"), &[rows, dim], INIT_STD, rng)?;
            }
            LayerSpec::CausalSelfAttention { dim, .. } => {
                LayerSpec::Dense { input: dim, output: 3 * dim }.init(&format!("{prefix}.qkv"), params, rng)?;
                LayerSpec::Dense { input: dim, output: dim }.init(&format!("{prefix}.proj"), params, rng)?;
            }
            LayerSpec::Gelu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => {}
        }
        Ok(())
    }
}

/// Parameter set placed on a tape, addressable by name.
pub struct Bound {
    order: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    pub fn new<T: Float>(graph: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let order = params.bind(graph, trainable);
        let by_name = params.iter().map(|p| p.name.clone()).zip(order.iter().copied()).collect();
        Bound { order, by_name }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.by_name.get(name).copied().ok_or_else(|| Error::Schema(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

pub fn dense<T: Float>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm<T: Float>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// QKV projection, masked causal attention, output projection.
pub fn self_attention<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let qkv = dense(g, p, &format!("{prefix}.qkv"), x)?;
    let att = g.causal_attention(qkv, heads, key_mask)?;
    dense(g, p, &format!("{prefix}.proj"), att)
}
