use serde::{Deserialize, Serialize};

use super::FullAnswer;
use crate::error::{Error, Result};
use crate::nn::{
    add_embedding, argmax, embed_many, Activation, FeedForwardLayer, Graph, Mlp, NnError, ParamId, ParamStore,
    RngState, Tensor, TransformerBlock, Var,
};
use crate::worldgen::{Vocab, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerConfig {
    pub heads: usize,
    pub layers: usize,
    /// Answer token budget, end marker excluded.
    pub max_len: usize,
    pub max_steps: usize,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            layers: 2,
            max_len: 16,
            max_steps: 5,
        }
    }
}

/// Autoregressive decoder attending over one memory row per reasoning step.
///
/// Memory row `m` is `MLP(h_m ⊕ i_m) + step[m]`.
#[derive(Clone, Debug)]
pub struct AnswerDecoder {
    pub dim: usize,
    pub cfg: AnswerConfig,
    pub token: ParamId,
    pub position: ParamId,
    pub step: ParamId,
    pub memory: Mlp,
    pub blocks: Vec<TransformerBlock>,
    pub out: FeedForwardLayer,
}

impl AnswerDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, dim: usize, cfg: AnswerConfig, rng: &mut RngState) -> Self {
        let blocks = (0..cfg.layers)
            .map(|l| TransformerBlock::new(store, &format!("{prefix}.dec{l}"), dim, cfg.heads, true, rng))
            .collect();
        Self {
            dim,
            token: add_embedding(store, &format!("{prefix}.token"), vocab.len(), dim, rng),
            position: add_embedding(store, &format!("{prefix}.position"), cfg.max_len + 1, dim, rng),
            step: add_embedding(store, &format!("{prefix}.step"), cfg.max_steps, dim, rng),
            memory: Mlp::new(store, &format!("{prefix}.memory"), 2 * dim, 2 * dim, dim, rng),
            blocks,
            out: FeedForwardLayer::new(store, &format!("{prefix}.out"), dim, vocab.len(), Activation::Identity, rng),
            cfg,
        }
    }

    /// `M x D` memory from per-step histories and instruction vectors.
    pub fn memory(&self, g: &mut Graph, histories: &[Var], instructions: &[Var]) -> Result<Var> {
        if histories.is_empty() || histories.len() != instructions.len() {
            return Err(Error::Nn(NnError::Dimension(format!(
                "{} histories for {} instructions",
                histories.len(),
                instructions.len()
            ))));
        }
        if histories.len() > self.cfg.max_steps {
            return Err(Error::Program(format!("{} steps exceed {}", histories.len(), self.cfg.max_steps)));
        }
        let h = g.concat_rows(histories)?;
        let i = g.concat_rows(instructions)?;
        let x = g.concat_cols(&[h, i])?;
        let m = self.memory.forward(g, x)?;
        let steps: Vec<usize> = (0..histories.len()).collect();
        let s = embed_many(g, self.step, &steps)?;
        Ok(g.add(m, s)?)
    }

    fn logits(&self, g: &mut Graph, memory: Var, prev: &[usize]) -> Result<Var> {
        let e = embed_many(g, self.token, prev)?;
        let positions: Vec<usize> = (0..prev.len()).collect();
        let p = embed_many(g, self.position, &positions)?;
        let mut x = g.add(e, p)?;
        for b in &self.blocks {
            x = b.forward(g, x, Some(memory), true)?;
        }
        Ok(self.out.forward(g, x)?)
    }

    /// Teacher-forced cross-entropy; `target` excludes the end marker.
    pub fn loss(&self, g: &mut Graph, vocab: &Vocab, memory: Var, target: &[String]) -> Result<Var> {
        if target.len() > self.cfg.max_len {
            return Err(Error::Data(format!(
                "answer of {} tokens exceeds max_len {}",
                target.len(),
                self.cfg.max_len
            )));
        }
        let mut ids: Vec<usize> = target.iter().map(|t| vocab.encode(t)).collect();
        let mut prev = vec![vocab.encode(BOS)];
        prev.extend_from_slice(&ids);
        ids.push(vocab.encode(EOS));
        let l = self.logits(g, memory, &prev)?;
        Ok(g.cross_entropy(l, &ids)?)
    }

    /// Greedy decoding until the end marker or `max_len` tokens.
    pub fn generate(&self, g: &mut Graph, vocab: &Vocab, memory: Var) -> Result<Vec<String>> {
        let eos = vocab.encode(EOS);
        let mut prev = vec![vocab.encode(BOS)];
        let mut out = Vec::new();
        while out.len() < self.cfg.max_len {
            let l = self.logits(g, memory, &prev)?;
            let t = argmax(g.value(l).row(prev.len() - 1));
            if t == eos {
                break;
            }
            out.push(vocab.token(t).to_string());
            prev.push(t);
        }
        Ok(out)
    }
}

/// Full answer for stored per-step histories and instruction vectors.
pub fn generate_answer(
    store: &ParamStore,
    decoder: &AnswerDecoder,
    vocab: &Vocab,
    histories: &[Tensor],
    instructions: &[Tensor],
) -> Result<FullAnswer> {
    let mut g = Graph::new(store);
    let h: Vec<Var> = histories.iter().map(|t| g.constant(t.clone())).collect();
    let i: Vec<Var> = instructions.iter().map(|t| g.constant(t.clone())).collect();
    let m = decoder.memory(&mut g, &h, &i)?;
    Ok(FullAnswer::from_tokens(decoder.generate(&mut g, vocab, m)?))
}
