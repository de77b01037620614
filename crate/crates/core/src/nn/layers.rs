use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{NnError, RngState, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

/// `y = activation(x W^T + b)` with `W` stored as `out_dim x in_dim`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FeedForwardLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Self {
        assert!(in_dim >= 1 && out_dim >= 1, "layer dims must be positive");
        let weight = store.add_glorot(format!("{name}.weight"), out_dim, in_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        feed_forward(g, self, x)
    }

    /// Pre-activation `x W^T` without bias, for callers that assemble
    /// a concatenated input block by block.
    pub fn weight_block(&self, g: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let w = g.param(self.weight);
        let wb = g.slice_cols(w, start, len)?;
        g.matmul_nt(x, wb)
    }
}

pub fn feed_forward(g: &mut Graph, layer: &FeedForwardLayer, x: Var) -> Result<Var, NnError> {
    let xs = g.value(x).shape().to_vec();
    if *xs.last().expect("rank >= 1") != layer.in_dim {
        return Err(NnError::Dimension(format!(
            "feed_forward: input shape {xs:?} vs weight shape [{}, {}]",
            layer.out_dim, layer.in_dim
        )));
    }
    let w = g.param(layer.weight);
    let b = g.param(layer.bias);
    let y = g.matmul_nt(x, w)?;
    let y = g.add_row(y, b)?;
    Ok(match layer.activation {
        Activation::Identity => y,
        Activation::Relu => g.relu(y),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), &[dim], 1.0),
            shift: store.add_zeros(format!("{name}.shift"), &[dim]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.layer_norm(x, gain, shift, self.eps)
    }
}

/// Two-layer perceptron: linear, relu, linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: FeedForwardLayer,
    /// Further `hidden x hidden` ReLU layers after `hidden`.
    pub mid: Vec<FeedForwardLayer>,
    pub out: FeedForwardLayer,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        Self::deep(store, name, in_dim, hidden, out_dim, 1, rng)
    }

    /// Perceptron with `hidden_layers >= 1` ReLU layers of width `hidden`.
    pub fn deep(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        hidden_layers: usize,
        rng: &mut RngState,
    ) -> Self {
        let first = FeedForwardLayer::new(store, &format!("{name}.0"), in_dim, hidden, Activation::Relu, rng);
        let mid = (1..hidden_layers.max(1))
            .map(|k| FeedForwardLayer::new(store, &format!("{name}.h{k}"), hidden, hidden, Activation::Relu, rng))
            .collect();
        Self {
            hidden: first,
            mid,
            out: FeedForwardLayer::new(store, &format!("{name}.1"), hidden, out_dim, Activation::Identity, rng),
        }
    }

    /// The layers between `hidden` and `out`.
    pub fn forward_mid(&self, g: &mut Graph, mut h: Var) -> Result<Var, NnError> {
        for l in &self.mid {
            h = l.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.hidden.forward(g, x)?;
        let h = self.forward_mid(g, h)?;
        self.out.forward(g, h)
    }
}

/// Row lookup into an embedding table.
pub fn embed(g: &mut Graph, table: ParamId, index: usize) -> Result<Var, NnError> {
    embed_many(g, table, &[index])
}

pub fn embed_many(g: &mut Graph, table: ParamId, indices: &[usize]) -> Result<Var, NnError> {
    let rows = g.params().value(table).rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(NnError::Vocabulary {
            table: g.params().get(table).name.clone(),
            index: bad,
            rows,
        });
    }
    let t = g.param(table);
    g.gather_rows(t, indices)
}

pub fn add_embedding(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut RngState,
) -> ParamId {
    let a = (1.0 / dim as f64).sqrt() * 3f64.sqrt();
    let data = (0..rows * dim).map(|_| rng.uniform(-a, a)).collect();
    store.add(name, Tensor::matrix(rows, dim, data).expect("positive dims"))
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: FeedForwardLayer,
    pub key: FeedForwardLayer,
    pub value: FeedForwardLayer,
    pub out: FeedForwardLayer,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngState) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let mk = |store: &mut ParamStore, n: &str, rng: &mut RngState| {
            FeedForwardLayer::new(store, &format!("{name}.{n}"), dim, dim, Activation::Identity, rng)
        };
        Self {
            query: mk(store, "q", rng),
            key: mk(store, "k", rng),
            value: mk(store, "v", rng),
            out: mk(store, "o", rng),
            heads,
            dim,
        }
    }

    /// `queries` is `n x dim`, `memory` is `m x dim`. With `causal`, query
    /// row `i` only sees memory rows `0..=i`.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, causal: bool) -> Result<Var, NnError> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let n = g.value(q).rows();
        let m = g.value(k).rows();
        let hd = self.dim / self.heads;
        let mask = if causal {
            let mut t = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in (i + 1)..m {
                    t.data_mut()[i * m + j] = -1e30;
                }
            }
            Some(g.constant(t))
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, 1.0 / (hd as f64).sqrt());
            if let Some(mask) = mask {
                s = g.add(s, mask)?;
            }
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, cat)
    }
}
