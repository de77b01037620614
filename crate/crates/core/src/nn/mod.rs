//! Deterministic 64-bit differentiable-computation substrate.

mod block;
pub mod checkpoint;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod rng;
mod tensor;

pub use block::TransformerBlock;
pub use graph::{Graph, Var};
pub use layers::{add_embedding, embed, embed_many, feed_forward, Activation, FeedForwardLayer, LayerNorm, Mlp, MultiHeadAttention};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{hex as hex_digest, Gradients, ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, RngState};
pub use tensor::{argmax, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("vocabulary error: index {index} out of range for table {table} with {rows} rows")]
    Vocabulary { table: String, index: usize, rows: usize },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.is_empty() {
        return Err(NnError::Dimension("softmax of empty vector".into()));
    }
    let mut v = logits.to_vec();
    graph::softmax_in_place(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12);
        let s = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    fn ln(store: &mut ParamStore, n: usize) -> LayerNorm {
        LayerNorm::new(store, "ln", n)
    }

    fn run_ln(x: Vec<f64>) -> Vec<f64> {
        let mut s = ParamStore::new();
        let l = ln(&mut s, x.len());
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::from_vec(x));
        let y = l.forward(&mut g, v).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_examples() {
        // var 1, eps 1e-5 -> each entry scaled by 1/sqrt(1 + 1e-5)
        let y = run_ln(vec![1.0, -1.0]);
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - k).abs() < 1e-15 && (y[1] + k).abs() < 1e-15);
        assert_eq!(run_ln(vec![3.5, 3.5, 3.5]), vec![0.0, 0.0, 0.0]);
        let y = run_ln(vec![2.0, 4.0]);
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_short_vectors() {
        let mut s = ParamStore::new();
        let l = ln(&mut s, 1);
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::from_vec(vec![1.0]));
        assert!(matches!(l.forward(&mut g, v), Err(NnError::Dimension(_))));
    }

    #[test]
    fn backward_linear_case_and_unused_parameter() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::from_vec(vec![3.0]));
        let unused = s.add("unused", Tensor::from_vec(vec![1.0]));
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_vec(vec![2.0]));
        let wv = g.param(w);
        let y = g.mul(wv, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new(&s);
        let v = g.param(w);
        assert!(matches!(g.backward(v), Err(NnError::Contract(_))));
    }
}
