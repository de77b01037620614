use serde::{Deserialize, Serialize};

use super::{Mode, Model};
use crate::answer_gen::FullAnswer;
use crate::error::{Error, Result};
use crate::exec_engine::{execute, traversal_loss, ExecTrace};
use crate::instruction::encode_gold_program;
use crate::nn::{Graph, RngState, Tensor, Var};
use crate::scene_graph::{set_prediction_loss, SymbolicScene};
use crate::worldgen::QuestionRecord;

/// Unweighted per-module losses and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub look: f64,
    pub read: f64,
    pub think: f64,
    pub answer: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.look += s * other.look;
        self.read += s * other.read;
        self.think += s * other.think;
        self.answer += s * other.answer;
        self.total += s * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.look, self.read, self.think, self.answer, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct ExampleLoss {
    pub total: Var,
    pub parts: LossParts,
}

fn check_supervision(q: &QuestionRecord) -> Result<()> {
    if q.program.is_empty() {
        return Err(Error::Data("program".into()));
    }
    if q.bitmaps.len() != q.program.len() {
        return Err(Error::Data("bitmaps".into()));
    }
    if q.full_answer.is_empty() {
        return Err(Error::Data("full_answer".into()));
    }
    if q.tokens.is_empty() {
        return Err(Error::Data("tokens".into()));
    }
    Ok(())
}

fn accumulate(g: &mut Graph, acc: Option<Var>, x: Var) -> Result<Var> {
    Ok(match acc {
        Some(a) => g.add(a, x)?,
        None => x,
    })
}

fn scalar(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0])
}

/// Weighted four-module loss of one question. With `gold_feed`, gold
/// program vectors drive the engine and the parser is pulled towards them
/// by mean squared error.
pub fn example_loss(
    model: &Model,
    g: &mut Graph,
    scene: &SymbolicScene,
    q: &QuestionRecord,
    rng: &mut RngState,
    gold_feed: bool,
) -> Result<ExampleLoss> {
    check_supervision(q)?;
    let cfg = &model.cfg;
    let w = &cfg.weights;
    let look_cfg = cfg.effective_look();
    let enc = model.encoder.encode(g, scene, &model.schema, &look_cfg, rng)?;

    let look = if cfg.mode != Mode::VisualOracle && w.look > 0.0 {
        let logits = model.heads.forward(g, enc.objects, enc.edges)?;
        Some(set_prediction_loss(g, &logits, scene, &model.schema, look_cfg.lambda_box)?.0)
    } else {
        None
    };

    let gold = encode_gold_program(&q.program, &model.vocab)?;
    let steps = q.program.len();
    let mut read: Option<Var> = None;
    let ivs = if cfg.mode == Mode::ReadingOracle {
        let ivs = model.parser.embed_gold_program(g, &model.vocab, &q.program)?;
        if w.read > 0.0 {
            for (iv, t) in ivs.iter().zip(&gold.steps) {
                let l = model.instruction_decoder.loss(g, &model.vocab, *iv, t)?;
                read = Some(accumulate(g, read, l)?);
            }
        }
        ivs
    } else {
        let ids = model.parser.token_ids(&model.vocab, &q.tokens)?;
        let (parsed, stops) = model.parser.parse_fixed(g, &ids, steps)?;
        let fed = if gold_feed {
            let gold_ivs = model.parser.embed_gold_program(g, &model.vocab, &q.program)?;
            if w.read > 0.0 {
                for ((p, gv), t) in parsed.iter().zip(&gold_ivs).zip(&gold.steps) {
                    let target = g.value(*gv).clone();
                    let target = g.constant(target);
                    let d = g.sub(*p, target)?;
                    let sq = g.mul(d, d)?;
                    let l = g.sum(sq);
                    let l = g.scale(l, 1.0 / model.cfg.dim as f64);
                    read = Some(accumulate(g, read, l)?);
                    let l = model.instruction_decoder.loss(g, &model.vocab, *gv, t)?;
                    read = Some(accumulate(g, read, l)?);
                }
            }
            gold_ivs
        } else {
            parsed.clone()
        };
        if w.read > 0.0 {
            for ((iv, s), (t, stop)) in parsed.iter().zip(&stops).zip(gold.steps.iter().zip(&gold.stop)) {
                let l = model.instruction_decoder.loss(g, &model.vocab, *iv, t)?;
                read = Some(accumulate(g, read, l)?);
                let l = g.cross_entropy(*s, &[*stop])?;
                read = Some(accumulate(g, read, l)?);
            }
        }
        fed
    };

    let exec = execute(g, &model.engine, enc.objects, enc.edges, &ivs)?;
    let think = if w.think > 0.0 {
        let bits: Vec<Vec<usize>> = q.bitmaps.iter().map(|b| enc.slot_bits(b)).collect();
        Some(traversal_loss(g, &exec, &bits)?)
    } else {
        None
    };

    let answer = if w.answer > 0.0 {
        let histories: Vec<Var> = exec.iter().map(|s| s.history).collect();
        let mem = model.answer.memory(g, &histories, &ivs)?;
        Some(model.answer.loss(g, &model.vocab, mem, &q.full_answer)?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for (v, weight) in [(look, w.look), (read, w.read), (think, w.think), (answer, w.answer)] {
        if let Some(v) = v {
            let s = g.scale(v, weight);
            total = Some(accumulate(g, total, s)?);
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::zeros(&[1, 1])),
    };
    let parts = LossParts {
        look: scalar(g, look),
        read: scalar(g, read),
        think: scalar(g, think),
        answer: scalar(g, answer),
        total: g.value(total).data()[0],
    };
    Ok(ExampleLoss { total, parts })
}

/// Everything the model produces for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub instructions: Vec<Tensor>,
    /// Slot-level trace.
    pub trace: ExecTrace,
    pub slot_to_object: Vec<Option<usize>>,
    /// Active set per step, indexed like `scene.objects`.
    pub object_bitmaps: Vec<Vec<bool>>,
    pub answer: FullAnswer,
}

/// Free-running inference: greedy parse (or gold bypass in reading-oracle
/// mode), traversal, greedy answer generation.
pub fn infer(model: &Model, scene: &SymbolicScene, q: &QuestionRecord, rng: &mut RngState) -> Result<Inference> {
    let look_cfg = model.cfg.effective_look();
    let mut g = Graph::new(&model.store);
    let enc = model.encoder.encode(&mut g, scene, &model.schema, &look_cfg, rng)?;
    let ivs = if model.cfg.mode == Mode::ReadingOracle {
        model.parser.embed_gold_program(&mut g, &model.vocab, &q.program)?
    } else {
        let ids = model.parser.token_ids(&model.vocab, &q.tokens)?;
        model.parser.parse_question(&mut g, &ids)?
    };
    let exec = execute(&mut g, &model.engine, enc.objects, enc.edges, &ivs)?;
    let histories: Vec<Var> = exec.iter().map(|s| s.history).collect();
    let mem = model.answer.memory(&mut g, &histories, &ivs)?;
    let answer = FullAnswer::from_tokens(model.answer.generate(&mut g, &model.vocab, mem)?);
    let trace = ExecTrace::from_steps(&g, &exec);
    let object_bitmaps = trace
        .states
        .iter()
        .map(|s| {
            let mut b = vec![false; scene.objects.len()];
            for (slot, obj) in enc.slot_to_object.iter().enumerate() {
                if let Some(p) = obj {
                    b[*p] = s.bitmap[slot];
                }
            }
            b
        })
        .collect();
    Ok(Inference {
        instructions: ivs.iter().map(|v| g.value(*v).clone()).collect(),
        trace,
        slot_to_object: enc.slot_to_object,
        object_bitmaps,
        answer,
    })
}
