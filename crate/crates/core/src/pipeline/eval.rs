use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{infer, Model};
use crate::answer_gen::{score, Prediction, TypeMetrics};
use crate::error::{Error, Result};
use crate::instruction::decode_instruction;
use crate::nn::RngState;
use crate::perturb::{drop_table_csv, perturbation_report, references, CueLexicons, DropRow, MaskKind};
use crate::scene_graph::SymbolicScene;
use crate::worldgen::{QuestionRecord, Split};

/// Evaluation-time scene ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    StripAttributes,
    StripRelations,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::StripAttributes => "strip_attributes",
            Self::StripRelations => "strip_relations",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "strip_attributes" => Ok(Self::StripAttributes),
            "strip_relations" => Ok(Self::StripRelations),
            other => Err(Error::Config(format!("unknown ablation {other}"))),
        }
    }

    pub fn apply(self, scene: &SymbolicScene) -> SymbolicScene {
        match self {
            Self::None => scene.clone(),
            Self::StripAttributes => scene.without_attributes(),
            Self::StripRelations => scene.without_relations(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n: usize,
    pub short_acc: f64,
    pub full_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub split: String,
    pub ablation: String,
    pub n: usize,
    pub short_acc: f64,
    pub full_acc: f64,
    pub by_type: BTreeMap<String, TypeMetrics>,
    /// Questions whose every predicted step bitmap equals the oracle's.
    pub bitmap_exact: f64,
    /// Mean per-step intersection over union against the oracle bitmaps.
    pub bitmap_iou: f64,
    /// Questions with a relate step.
    pub relate: SubsetMetrics,
    /// Questions naming an attribute value.
    pub attribute: SubsetMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDetail {
    pub prediction: Prediction,
    pub object_bitmaps: Vec<Vec<bool>>,
}

fn eval_rng(model: &Model, question_id: &str) -> RngState {
    RngState::derive(model.cfg.seed, &format!("eval/{question_id}"))
}

/// Free-running predictions for `questions`, whose scenes come from `split`.
pub fn predict(model: &Model, split: &Split, questions: &[QuestionRecord], ablation: Ablation) -> Result<Vec<PredictionDetail>> {
    let index: BTreeMap<&str, &SymbolicScene> = split.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    questions
        .iter()
        .map(|q| {
            let scene = index
                .get(q.scene_id.as_str())
                .ok_or_else(|| Error::Data(format!("scene {} of {}", q.scene_id, q.question_id)))?;
            let scene = ablation.apply(scene);
            let inf = infer(model, &scene, q, &mut eval_rng(model, &q.question_id))?;
            Ok(PredictionDetail {
                prediction: Prediction {
                    question_id: q.question_id.clone(),
                    short_answer: inf.answer.short_answer.clone(),
                    full_answer: inf.answer.tokens,
                },
                object_bitmaps: inf.object_bitmaps,
            })
        })
        .collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exact-match flag and mean IoU of predicted step bitmaps against gold.
/// Missing predicted steps count as empty sets.
pub fn bitmap_agreement(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> (bool, f64) {
    let exact = pred == gold;
    if gold.is_empty() {
        return (exact, 1.0);
    }
    let total: f64 = gold
        .iter()
        .enumerate()
        .map(|(m, g)| match pred.get(m) {
            Some(p) => iou(p, g),
            None => iou(&vec![false; g.len()], g),
        })
        .sum();
    (exact, total / gold.len() as f64)
}

fn subset(questions: &[QuestionRecord], preds: &[Prediction], keep: impl Fn(&QuestionRecord) -> bool) -> Result<SubsetMetrics> {
    let (qs, ps): (Vec<QuestionRecord>, Vec<Prediction>) = questions
        .iter()
        .zip(preds)
        .filter(|(q, _)| keep(q))
        .map(|(q, p)| (q.clone(), p.clone()))
        .unzip();
    let m = score(&ps, &references(&qs))?;
    Ok(SubsetMetrics {
        n: m.n,
        short_acc: m.short_acc,
        full_acc: m.full_acc,
    })
}

pub fn evaluate_questions(
    model: &Model,
    split: &Split,
    questions: &[QuestionRecord],
    split_name: &str,
    ablation: Ablation,
) -> Result<EvalReport> {
    let details = predict(model, split, questions, ablation)?;
    let preds: Vec<Prediction> = details.iter().map(|d| d.prediction.clone()).collect();
    let m = score(&preds, &references(questions))?;
    let (mut exact, mut iou_sum) = (0usize, 0.0);
    for (d, q) in details.iter().zip(questions) {
        let (e, i) = bitmap_agreement(&d.object_bitmaps, &q.bitmaps);
        exact += e as usize;
        iou_sum += i;
    }
    let n = questions.len();
    let frac = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(EvalReport {
        mode: model.cfg.mode.name().into(),
        split: split_name.into(),
        ablation: ablation.name().into(),
        n,
        short_acc: m.short_acc,
        full_acc: m.full_acc,
        by_type: m.by_type,
        bitmap_exact: frac(exact as f64),
        bitmap_iou: frac(iou_sum),
        relate: subset(questions, &preds, |q| q.program.has_relate())?,
        attribute: subset(questions, &preds, |q| q.program.has_attribute_value())?,
    })
}

pub fn evaluate_split(model: &Model, split: &Split, split_name: &str, ablation: Ablation) -> Result<EvalReport> {
    evaluate_questions(model, split, &split.questions, split_name, ablation)
}

/// Drop rows for attribute masking on attribute questions and verb and
/// preposition masking on relate questions.
pub fn perturbation_rows(model: &Model, split: &Split, lex: &CueLexicons) -> Result<Vec<DropRow>> {
    perturbation_report(
        &split.questions,
        lex,
        &[
            (MaskKind::Attributes, "attribute"),
            (MaskKind::Attributes, "all"),
            (MaskKind::VbPrpn, "relate"),
            (MaskKind::VbPrpn, "all"),
        ],
        |qs| Ok(predict(model, split, qs, Ablation::None)?.into_iter().map(|d| d.prediction).collect()),
    )
}

/// Scene ablation rows as drop rows over relate and attribute subsets.
pub fn ablation_rows(clean: &EvalReport, stripped_attr: &EvalReport, stripped_rel: &EvalReport) -> Vec<DropRow> {
    let pct = |x: f64| 100.0 * x;
    vec![
        DropRow::new("strip_attributes", "attribute", clean.attribute.n, pct(clean.attribute.short_acc), pct(stripped_attr.attribute.short_acc)),
        DropRow::new("strip_attributes", "all", clean.n, pct(clean.short_acc), pct(stripped_attr.short_acc)),
        DropRow::new("strip_relations", "relate", clean.relate.n, pct(clean.relate.short_acc), pct(stripped_rel.relate.short_acc)),
        DropRow::new("strip_relations", "all", clean.n, pct(clean.short_acc), pct(stripped_rel.short_acc)),
    ]
}

/// Clean and ablated evaluations plus the perturbation drop table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub mode: String,
    pub split: String,
    /// Whether copulas were masked as verbs.
    pub mask_copulas: bool,
    pub evaluations: Vec<EvalReport>,
    pub scene_ablation: Vec<DropRow>,
    pub perturbation: Vec<DropRow>,
}

impl FullReport {
    pub fn drop_table_csv(&self) -> String {
        let rows: Vec<DropRow> = self.scene_ablation.iter().chain(&self.perturbation).cloned().collect();
        drop_table_csv(&rows)
    }
}

pub fn full_report(model: &Model, split: &Split, split_name: &str, lex: &CueLexicons) -> Result<FullReport> {
    let clean = evaluate_split(model, split, split_name, Ablation::None)?;
    let attr = evaluate_split(model, split, split_name, Ablation::StripAttributes)?;
    let rel = evaluate_split(model, split, split_name, Ablation::StripRelations)?;
    let scene_ablation = ablation_rows(&clean, &attr, &rel);
    let perturbation = perturbation_rows(model, split, lex)?;
    Ok(FullReport {
        mode: model.cfg.mode.name().into(),
        split: split_name.into(),
        mask_copulas: lex.mask_copulas,
        evaluations: vec![clean, attr, rel],
        scene_ablation,
        perturbation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveObject {
    pub id: usize,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainStep {
    pub step: usize,
    pub instruction: String,
    pub active: Vec<ActiveObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainTrace {
    pub question_id: String,
    pub question: String,
    pub steps: Vec<ExplainStep>,
    pub full_answer: String,
    pub short_answer: String,
}

/// Per-step decoded instruction, active objects and final answer.
pub fn run_explain(model: &Model, split: &Split, question_id: &str) -> Result<ExplainTrace> {
    let q = split
        .questions
        .iter()
        .find(|q| q.question_id == question_id)
        .ok_or_else(|| Error::UnknownQuestion(question_id.into()))?;
    let scene = split
        .scene_of(q)
        .ok_or_else(|| Error::Data(format!("scene {} of {}", q.scene_id, q.question_id)))?;
    let inf = infer(model, scene, q, &mut eval_rng(model, question_id))?;
    let steps = inf
        .instructions
        .iter()
        .zip(&inf.object_bitmaps)
        .enumerate()
        .map(|(m, (iv, bits))| {
            Ok(ExplainStep {
                step: m + 1,
                instruction: decode_instruction(&model.store, &model.instruction_decoder, &model.vocab, iv)?,
                active: scene
                    .objects
                    .iter()
                    .zip(bits)
                    .filter(|(_, b)| **b)
                    .map(|(o, _)| ActiveObject {
                        id: o.id,
                        category: o.category.clone(),
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExplainTrace {
        question_id: q.question_id.clone(),
        question: crate::instruction::surface(&q.tokens),
        steps,
        full_answer: inf.answer.text(),
        short_answer: inf.answer.short_answer,
    })
}
