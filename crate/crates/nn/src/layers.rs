//! Parameterized building blocks: linear maps, layer norm, attention, MLP.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Group, NodeId};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// `x · W + b` as two graph ops.
pub fn linear<T: Real>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        group: usize,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(group, &format!("{name}.weight"), xavier_uniform(rng, d_in, d_out))?;
        let bias = store.add(group, &format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        linear(g, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, group: usize, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(group, &format!("{name}.gain"), Tensor::full(&[1, d], T::one()))?;
        let bias = store.add(group, &format!("{name}.bias"), Tensor::zeros(&[1, d]))?;
        Ok(Self { gain, bias, eps: Self::EPS })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        group: usize,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NnError::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            query: Linear::new(store, group, &format!("{name}.query"), d, d, rng)?,
            key: Linear::new(store, group, &format!("{name}.key"), d, d, rng)?,
            value: Linear::new(store, group, &format!("{name}.value"), d, d, rng)?,
            output: Linear::new(store, group, &format!("{name}.output"), d, d, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        groups: &[Group],
    ) -> Result<NodeId> {
        self.forward_qkv(g, store, x, x, x, groups)
    }

    /// Returns the output node; the attention node (for inspecting weights)
    /// is the output projection's input.
    pub fn forward_qkv<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: NodeId,
        xk: NodeId,
        xv: NodeId,
        groups: &[Group],
    ) -> Result<NodeId> {
        let attended = self.attend(g, store, xq, xk, xv, groups)?;
        self.output.forward(g, store, attended)
    }

    /// Projected attention before the output projection.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: NodeId,
        xk: NodeId,
        xv: NodeId,
        groups: &[Group],
    ) -> Result<NodeId> {
        let q = self.query.forward(g, store, xq)?;
        let k = self.key.forward(g, store, xk)?;
        let v = self.value.forward(g, store, xv)?;
        g.attention(q, k, v, groups, self.heads)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        group: usize,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, group, &format!("{name}.up"), d, hidden, rng)?,
            down: Linear::new(store, group, &format!("{name}.down"), hidden, d, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}
