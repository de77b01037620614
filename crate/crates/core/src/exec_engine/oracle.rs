//! Exact symbolic executor defining ground-truth traversal bitmaps and
//! short answers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::instruction::{Direction, Instruction, InstructionProgram};
use crate::scene_graph::SymbolicScene;
use crate::worldgen::WorldSchema;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    /// One bitmap per step, indexed by position in `scene.objects`.
    pub bitmaps: Vec<Vec<bool>>,
    pub short_answer: String,
}

pub const NONE_ANSWER: &str = "none";

/// Runs `program` on `scene`. Terminal steps keep the active set, so the last
/// bitmap is the set the answer is read from.
pub fn oracle_execute(scene: &SymbolicScene, program: &InstructionProgram, schema: &WorldSchema) -> Result<OracleResult> {
    program.validate(schema, usize::MAX)?;
    let n = scene.objects.len();
    let mut active = vec![false; n];
    let mut bitmaps = Vec::with_capacity(program.len());
    let mut answer = String::new();
    for step in &program.steps {
        match step {
            Instruction::Select(c) => {
                active = scene.objects.iter().map(|o| &o.category == c).collect();
            }
            Instruction::FilterAttr { metaconcept, value } => {
                for (a, o) in active.iter_mut().zip(&scene.objects) {
                    *a = *a && o.attributes.get(metaconcept) == Some(value);
                }
            }
            Instruction::Relate {
                predicate,
                direction,
            } => {
                let mut next = vec![false; n];
                for r in scene.relations.iter().filter(|r| &r.1 == predicate) {
                    let (Some(s), Some(t)) = (scene.position(r.0), scene.position(r.2)) else {
                        continue;
                    };
                    match direction {
                        Direction::Forward if active[s] => next[t] = true,
                        Direction::Backward if active[t] => next[s] = true,
                        _ => {}
                    }
                }
                active = next;
            }
            Instruction::Exist => {
                answer = yes_no(active.iter().any(|&a| a));
            }
            Instruction::QueryAttr(m) => {
                answer = lowest_id_active(scene, &active)
                    .and_then(|i| scene.objects[i].attributes.get(m).cloned())
                    .unwrap_or_else(|| NONE_ANSWER.to_string());
            }
            Instruction::VerifyAttr { metaconcept, value } => {
                answer = yes_no(
                    lowest_id_active(scene, &active)
                        .is_some_and(|i| scene.objects[i].attributes.get(metaconcept) == Some(value)),
                );
            }
        }
        bitmaps.push(active.clone());
    }
    Ok(OracleResult {
        bitmaps,
        short_answer: answer,
    })
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn lowest_id_active(scene: &SymbolicScene, active: &[bool]) -> Option<usize> {
    (0..scene.objects.len())
        .filter(|&i| active[i])
        .min_by_key(|&i| scene.objects[i].id)
}
