use serde::{Deserialize, Serialize};

use super::InstructionProgram;
use crate::error::{Error, Result};
use crate::nn::{
    add_embedding, argmax, embed_many, Activation, FeedForwardLayer, Graph, LayerNorm, Mlp, MultiHeadAttention,
    NnError, ParamId, ParamStore, RngState, Tensor, TransformerBlock, Var,
};
use crate::worldgen::{Vocab, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadConfig {
    pub heads: usize,
    pub layers: usize,
    pub max_steps: usize,
    pub max_question_len: usize,
    /// Token budget of one decoded instruction, end marker excluded.
    pub max_text_len: usize,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            layers: 2,
            max_steps: 5,
            max_question_len: 40,
            max_text_len: 4,
        }
    }
}

/// Question encoder with a step-wise attention readout and stop classifier.
#[derive(Clone, Debug)]
pub struct QuestionParser {
    pub dim: usize,
    pub cfg: ReadConfig,
    pub token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub step: ParamId,
    pub prev: FeedForwardLayer,
    pub read_attn: MultiHeadAttention,
    pub read_norm: LayerNorm,
    pub read_ff: Mlp,
    pub read_ff_norm: LayerNorm,
    pub stop: Mlp,
    /// Embeds gold instruction tokens when reading is bypassed.
    pub gold: Mlp,
    pub gold_norm: LayerNorm,
}

/// Width of the gold-instruction embedder input, in tokens.
const GOLD_SLOTS: usize = 3;

impl QuestionParser {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, dim: usize, cfg: ReadConfig, rng: &mut RngState) -> Self {
        let blocks = (0..cfg.layers)
            .map(|l| TransformerBlock::new(store, &format!("{prefix}.enc{l}"), dim, cfg.heads, false, rng))
            .collect();
        Self {
            dim,
            token: add_embedding(store, &format!("{prefix}.token"), vocab.len(), dim, rng),
            position: add_embedding(store, &format!("{prefix}.position"), cfg.max_question_len, dim, rng),
            blocks,
            step: add_embedding(store, &format!("{prefix}.step"), cfg.max_steps, dim, rng),
            prev: FeedForwardLayer::new(store, &format!("{prefix}.prev"), dim, dim, Activation::Identity, rng),
            read_attn: MultiHeadAttention::new(store, &format!("{prefix}.read"), dim, cfg.heads, rng),
            read_norm: LayerNorm::new(store, &format!("{prefix}.read_norm"), dim),
            read_ff: Mlp::new(store, &format!("{prefix}.read_ff"), dim, 2 * dim, dim, rng),
            read_ff_norm: LayerNorm::new(store, &format!("{prefix}.read_ff_norm"), dim),
            stop: Mlp::new(store, &format!("{prefix}.stop"), dim, dim, 2, rng),
            gold: Mlp::new(store, &format!("{prefix}.gold"), GOLD_SLOTS * dim, 2 * dim, dim, rng),
            gold_norm: LayerNorm::new(store, &format!("{prefix}.gold_norm"), dim),
            cfg,
        }
    }

    pub fn token_ids(&self, vocab: &Vocab, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Nn(NnError::Contract("empty question".into())));
        }
        if tokens.len() > self.cfg.max_question_len {
            return Err(Error::Nn(NnError::Contract(format!(
                "question of {} tokens exceeds {}",
                tokens.len(),
                self.cfg.max_question_len
            ))));
        }
        Ok(tokens.iter().map(|t| vocab.encode(t)).collect())
    }

    /// Contextual token vectors, `Q x D`.
    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = embed_many(g, self.token, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = embed_many(g, self.position, &positions)?;
        let mut x = g.add(t, p)?;
        for b in &self.blocks {
            x = b.forward(g, x, None, false)?;
        }
        Ok(x)
    }

    /// Instruction vector `m` (0-based) from the encoded question and the
    /// previous instruction vector.
    pub fn step_vector(&self, g: &mut Graph, encoded: Var, m: usize, prev: Option<Var>) -> Result<Var> {
        let mut q = embed_many(g, self.step, &[m])?;
        if let Some(p) = prev {
            let p = self.prev.forward(g, p)?;
            q = g.add(q, p)?;
        }
        let a = self.read_attn.forward(g, q, encoded, false)?;
        let x = g.add(q, a)?;
        let x = self.read_norm.forward(g, x)?;
        let f = self.read_ff.forward(g, x)?;
        let y = g.add(x, f)?;
        Ok(self.read_ff_norm.forward(g, y)?)
    }

    /// Logits `(continue, stop)` after an instruction vector.
    pub fn stop_logits(&self, g: &mut Graph, iv: Var) -> Result<Var> {
        Ok(self.stop.forward(g, iv)?)
    }

    /// Exactly `steps` instruction vectors with their stop logits.
    pub fn parse_fixed(&self, g: &mut Graph, ids: &[usize], steps: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        if steps == 0 || steps > self.cfg.max_steps {
            return Err(Error::Program(format!("{steps} steps outside 1..={}", self.cfg.max_steps)));
        }
        let enc = self.encode(g, ids)?;
        let mut ivs = Vec::with_capacity(steps);
        let mut stops = Vec::with_capacity(steps);
        for m in 0..steps {
            let iv = self.step_vector(g, enc, m, ivs.last().copied())?;
            stops.push(self.stop_logits(g, iv)?);
            ivs.push(iv);
        }
        Ok((ivs, stops))
    }

    /// Greedy parse: emits vectors until the stop classifier fires or the
    /// step budget is used up.
    pub fn parse_question(&self, g: &mut Graph, ids: &[usize]) -> Result<Vec<Var>> {
        let enc = self.encode(g, ids)?;
        let mut ivs: Vec<Var> = Vec::new();
        for m in 0..self.cfg.max_steps {
            let iv = self.step_vector(g, enc, m, ivs.last().copied())?;
            ivs.push(iv);
            let s = self.stop_logits(g, iv)?;
            if argmax(g.value(s).data()) == 1 {
                break;
            }
        }
        Ok(ivs)
    }

    /// Instruction vectors computed from the gold program text.
    pub fn embed_gold_program(&self, g: &mut Graph, vocab: &Vocab, program: &InstructionProgram) -> Result<Vec<Var>> {
        let pad = vocab.encode(PAD);
        program
            .steps
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = s.tokens().iter().map(|t| vocab.encode(t)).collect();
                ids.resize(GOLD_SLOTS, pad);
                let e = embed_many(g, self.token, &ids)?;
                let rows: Vec<Var> = (0..GOLD_SLOTS)
                    .map(|r| g.gather_rows(e, &[r]))
                    .collect::<Result<_, _>>()?;
                let x = g.concat_cols(&rows)?;
                let y = self.gold.forward(g, x)?;
                Ok(self.gold_norm.forward(g, y)?)
            })
            .collect()
    }
}

/// Supervision for the reading step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldTargets {
    /// Token ids of each canonical instruction followed by the end marker.
    pub steps: Vec<Vec<usize>>,
    /// `1` at the last step, `0` before.
    pub stop: Vec<usize>,
}

pub fn encode_gold_program(program: &InstructionProgram, vocab: &Vocab) -> Result<GoldTargets> {
    program.check_structure(usize::MAX)?;
    let eos = vocab.encode(EOS);
    let m = program.len();
    Ok(GoldTargets {
        steps: program
            .steps
            .iter()
            .map(|s| s.tokens().iter().map(|t| vocab.encode(t)).chain([eos]).collect())
            .collect(),
        stop: (0..m).map(|i| (i + 1 == m) as usize).collect(),
    })
}

/// Greedy text decoder from one instruction vector to canonical tokens.
#[derive(Clone, Debug)]
pub struct InstructionDecoder {
    pub dim: usize,
    pub max_len: usize,
    pub token: ParamId,
    pub position: ParamId,
    pub mlp: Mlp,
}

impl InstructionDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, dim: usize, max_len: usize, rng: &mut RngState) -> Self {
        Self {
            dim,
            max_len,
            token: add_embedding(store, &format!("{prefix}.token"), vocab.len(), dim, rng),
            position: add_embedding(store, &format!("{prefix}.position"), max_len + 1, dim, rng),
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), 3 * dim, 2 * dim, vocab.len(), rng),
        }
    }

    fn logits(&self, g: &mut Graph, iv: Var, prev: &[usize]) -> Result<Var> {
        let t = prev.len();
        let ivs = g.gather_rows(iv, &vec![0; t])?;
        let e = embed_many(g, self.token, prev)?;
        let positions: Vec<usize> = (0..t).collect();
        let p = embed_many(g, self.position, &positions)?;
        let x = g.concat_cols(&[ivs, e, p])?;
        Ok(self.mlp.forward(g, x)?)
    }

    /// Teacher-forced cross-entropy of `target` (which ends with the end marker).
    pub fn loss(&self, g: &mut Graph, vocab: &Vocab, iv: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() || target.len() > self.max_len + 1 {
            return Err(Error::Nn(NnError::Dimension(format!(
                "instruction target of {} tokens, limit {}",
                target.len(),
                self.max_len + 1
            ))));
        }
        let mut prev = vec![vocab.encode(BOS)];
        prev.extend_from_slice(&target[..target.len() - 1]);
        let l = self.logits(g, iv, &prev)?;
        Ok(g.cross_entropy(l, target)?)
    }

    pub fn decode_var(&self, g: &mut Graph, vocab: &Vocab, iv: Var) -> Result<String> {
        let eos = vocab.encode(EOS);
        let mut prev = vec![vocab.encode(BOS)];
        let mut out: Vec<String> = Vec::new();
        while out.len() < self.max_len {
            let l = self.logits(g, iv, &prev)?;
            let last = g.value(l).row(prev.len() - 1).to_vec();
            let t = argmax(&last);
            if t == eos {
                break;
            }
            out.push(vocab.token(t).to_string());
            prev.push(t);
        }
        Ok(out.join(" "))
    }
}

/// Text of one instruction vector, decoded greedily.
pub fn decode_instruction(store: &ParamStore, decoder: &InstructionDecoder, vocab: &Vocab, iv: &Tensor) -> Result<String> {
    let mut g = Graph::new(store);
    let v = g.constant(iv.clone());
    decoder.decode_var(&mut g, vocab, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::Instruction;
    use crate::nn::{Optimizer, OptimizerConfig};
    use crate::worldgen::WorldSchema;

    fn prog(lines: &[&str]) -> InstructionProgram {
        InstructionProgram::new(lines.iter().map(|l| Instruction::parse(l).unwrap()).collect())
    }

    fn setup() -> (ParamStore, QuestionParser, InstructionDecoder, Vocab) {
        let vocab = WorldSchema::default().vocab();
        let mut store = ParamStore::new();
        let mut rng = RngState::new(4);
        let p = QuestionParser::new(&mut store, "read", &vocab, 16, ReadConfig::default(), &mut rng);
        let d = InstructionDecoder::new(&mut store, "read.text", &vocab, 16, 4, &mut rng);
        (store, p, d, vocab)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn parse_shapes_and_determinism() {
        let (store, p, _, vocab) = setup();
        let ids = p.token_ids(&vocab, &toks("is there a red cube ?")).unwrap();
        let run = || {
            let mut g = Graph::new(&store);
            let v = p.parse_question(&mut g, &ids).unwrap();
            v.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>()
        };
        let a = run();
        assert!(!a.is_empty() && a.len() <= 5);
        assert!(a.iter().all(|t| t.shape() == [1, 16] && t.is_finite()));
        assert_eq!(a, run());
        assert!(p.token_ids(&vocab, &[]).is_err());
        // unknown words map to [UNK]
        let ids = p.token_ids(&vocab, &toks("is there a unicorn ?")).unwrap();
        assert_eq!(ids[3], vocab.encode(crate::worldgen::UNK));
    }

    #[test]
    fn gold_targets() {
        let vocab = WorldSchema::default().vocab();
        let t = encode_gold_program(&prog(&["select dog", "exist"]), &vocab).unwrap();
        assert_eq!(t.stop, vec![0, 1]);
        let one = encode_gold_program(&InstructionProgram::new(vec![Instruction::Exist]), &vocab);
        assert!(matches!(one, Err(Error::Program(m)) if m.contains("select")));
        let t = encode_gold_program(&prog(&["select cube", "filter color red", "query material"]), &vocab).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.steps[1].len(), 4);
        let again = encode_gold_program(&prog(&["select cube", "filter color red", "query material"]), &vocab).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn untrained_decoder_terminates_within_budget() {
        let (store, _, d, vocab) = setup();
        let mut rng = RngState::new(2);
        for _ in 0..20 {
            let iv = Tensor::matrix(1, 16, (0..16).map(|_| rng.normal()).collect()).unwrap();
            let s = decode_instruction(&store, &d, &vocab, &iv).unwrap();
            assert!(s.split_whitespace().count() <= 4);
        }
    }

    #[test]
    fn decoder_learns_a_fixed_mapping() {
        let (mut store, _, d, vocab) = setup();
        let targets = ["select girl", "relate holding fwd", "exist"];
        let mut rng = RngState::new(8);
        let ivs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::matrix(1, 16, (0..16).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &store);
        for _ in 0..150 {
            for (iv, t) in ivs.iter().zip(targets) {
                let ids: Vec<usize> = t.split(' ').map(|w| vocab.encode(w)).chain([vocab.encode(EOS)]).collect();
                let mut g = Graph::new(&store);
                let v = g.constant(iv.clone());
                let l = d.loss(&mut g, &vocab, v, &ids).unwrap();
                let grads = g.backward(l).unwrap();
                drop(g);
                store.accumulate(&grads, 1.0);
                opt.step(&mut store).unwrap();
            }
        }
        for (iv, t) in ivs.iter().zip(targets) {
            assert_eq!(decode_instruction(&store, &d, &vocab, iv).unwrap(), t);
        }
    }
}
