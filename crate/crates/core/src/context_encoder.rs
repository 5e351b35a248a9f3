//! Window-level contextualization `h_cxt`: a pre-norm transformer encoder
//! over the event embeddings of each window, with full bidirectional
//! attention and no positional encoding (order and spacing are already
//! present in the temporal slots of `h_e`).

use domus_nn::{FeedForward, Graph, Group, LayerNorm, MultiHeadAttention, NodeId, ParamStore, Real};
use rand::Rng;

use crate::error::{config_err, Result};

#[derive(Clone, Debug)]
pub struct ContextLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub layers: Vec<ContextLayer>,
    pub final_norm: LayerNorm,
}

impl ContextEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        group: usize,
        d: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(config_err("context encoder needs at least one layer"));
        }
        let layers = (0..layers)
            .map(|l| {
                Ok(ContextLayer {
                    norm1: LayerNorm::new(store, group, &format!("layer{l}.norm1"), d)?,
                    attention: MultiHeadAttention::new(store, group, &format!("layer{l}.attention"), d, heads, rng)?,
                    norm2: LayerNorm::new(store, group, &format!("layer{l}.norm2"), d)?,
                    ffn: FeedForward::new(store, group, &format!("layer{l}.ffn"), d, 4 * d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, final_norm: LayerNorm::new(store, group, "final_norm", d)? })
    }

    /// Contextualizes the rows of every window (`groups` of rows) in place
    /// of the input embeddings.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        groups: &[Group],
    ) -> Result<NodeId> {
        let mut x = x;
        for layer in &self.layers {
            let h = layer.norm1.forward(g, store, x)?;
            let h = layer.attention.forward(g, store, h, groups)?;
            x = g.add(x, h)?;
            let h = layer.norm2.forward(g, store, x)?;
            let h = layer.ffn.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        Ok(self.final_norm.forward(g, store, x)?)
    }
}

/// Mean over the rows of each window.
pub fn pool_sequence<T: Real>(g: &mut Graph<T>, rows: NodeId, groups: &[Group]) -> Result<NodeId> {
    Ok(g.group_mean(rows, groups)?)
}
