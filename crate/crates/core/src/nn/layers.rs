//! Parameterised building blocks assembled from graph ops.

use super::graph::{Graph, Var};
use super::params::{site_rng, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut rng = site_rng(seed, name);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], bound, &mut rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.affine(x, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel width must be odd, got {width}")));
        }
        let bound = (6.0 / (width * (d_in + d_out)) as f64).sqrt();
        let mut rng = site_rng(seed, name);
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::uniform(&[width, d_in, d_out], bound, &mut rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { kernel, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        g.conv1d(x, k, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = site_rng(seed, name);
        let table = store.add(
            format!("{name}.table"),
            Tensor::randn(&[vocab, dim], 1.0 / (dim as f64).sqrt(), &mut rng),
        )?;
        Ok(Self { table, vocab })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(ids, shape, t)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, seed)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, seed)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, seed)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, seed)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.output.forward(g, a)
    }
}

/// Feed-forward transformer block: self-attention and a two-layer
/// convolutional feed-forward, each followed by residual add and layer norm.
#[derive(Debug, Clone)]
pub struct FftBlock {
    name: String,
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

pub struct FftBlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl FftBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: &FftBlockDims, seed: u64) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.dim, dims.heads, seed)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dims.dim)?,
            conv1: Conv1d::new(store, &format!("{name}.conv1"), dims.kernel, dims.dim, dims.ffn_dim, seed)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), 1, dims.ffn_dim, dims.dim, seed)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dims.dim)?,
            dropout: dims.dropout,
        })
    }

    /// `mask` holds one flag per `[batch, position]`; padded rows are zeroed
    /// on entry, before every convolution, and on exit.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let x = g.mask_rows(x, mask)?;
        let a = self.attention.forward(g, x, Some(mask))?;
        let a = g.dropout(a, self.dropout, &format!("{}.attn_drop", self.name))?;
        let x = g.add(x, a)?;
        let x = self.attn_norm.forward(g, x)?;
        let x = g.mask_rows(x, mask)?;

        let f = self.conv1.forward(g, x)?;
        let f = g.relu(f)?;
        let f = g.mask_rows(f, mask)?;
        let f = self.conv2.forward(g, f)?;
        let f = g.dropout(f, self.dropout, &format!("{}.ffn_drop", self.name))?;
        let x = g.add(x, f)?;
        let x = self.ffn_norm.forward(g, x)?;
        g.mask_rows(x, mask)
    }
}

/// Conv/ReLU/LayerNorm/dropout twice, then a scalar projection per position.
/// Output is `[B, L, 1]`, zero at padded positions.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    name: String,
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub output: Linear,
    pub dropout: f64,
}

impl VariancePredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        filter: usize,
        kernel: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            conv1: Conv1d::new(store, &format!("{name}.conv1"), kernel, dim, filter, seed)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), filter)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), kernel, filter, filter, seed)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), filter)?,
            output: Linear::new(store, &format!("{name}.output"), filter, 1, seed)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let x = g.mask_rows(x, mask)?;
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.dropout(h, self.dropout, &format!("{}.drop1", self.name))?;
        let h = g.mask_rows(h, mask)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.dropout(h, self.dropout, &format!("{}.drop2", self.name))?;
        let y = self.output.forward(g, h)?;
        g.mask_rows(y, mask)
    }
}
