use super::graph::{Graph, Var};
use super::layers::{LayerNorm, Mlp, MultiHeadAttention};
use super::params::ParamStore;
use super::{NnError, RngState};

/// Post-norm transformer block: self-attention, optional cross-attention,
/// then a two-layer perceptron, each wrapped as `LayerNorm(x + f(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross: Option<(MultiHeadAttention, LayerNorm)>,
    pub ff: Mlp,
    pub ff_norm: LayerNorm,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, cross: bool, rng: &mut RngState) -> Self {
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng);
        let self_norm = LayerNorm::new(store, &format!("{name}.self_norm"), dim);
        let cross = cross.then(|| {
            (
                MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
                LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            )
        });
        Self {
            self_attn,
            self_norm,
            cross,
            ff: Mlp::new(store, &format!("{name}.ff"), dim, 2 * dim, dim, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Option<Var>, causal: bool) -> Result<Var, NnError> {
        let a = self.self_attn.forward(g, x, x, causal)?;
        let x = g.add(x, a)?;
        let mut x = self.self_norm.forward(g, x)?;
        if let Some((attn, norm)) = &self.cross {
            let m = memory.ok_or_else(|| NnError::Contract("cross-attention block needs memory".into()))?;
            let c = attn.forward(g, x, m, false)?;
            let y = g.add(x, c)?;
            x = norm.forward(g, y)?;
        }
        let f = self.ff.forward(g, x)?;
        let y = g.add(x, f)?;
        self.ff_norm.forward(g, y)
    }
}
