use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::WorldSchema;
use crate::exec_engine::oracle_execute;
use crate::instruction::{Direction, Instruction, InstructionProgram};
use crate::nn::RngState;
use crate::scene_graph::{Relation, SymbolicObject, SymbolicScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an ordered pair carries a relation.
    pub relation_density: f64,
    /// Probability that an object lacks a given metaconcept.
    pub missing_attribute_prob: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            relation_density: 0.15,
            missing_attribute_prob: 0.0,
        }
    }
}

pub fn sample_scene(schema: &WorldSchema, rng: &mut RngState, cfg: &SceneSampler, scene_id: &str) -> SymbolicScene {
    assert!(cfg.min_objects >= 1 && cfg.min_objects <= cfg.max_objects);
    let n = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let mut objects = Vec::with_capacity(n);
    for id in 0..n {
        let category = rng.choose(&schema.categories).expect("categories").clone();
        let mut attributes = BTreeMap::new();
        for m in &schema.metaconcepts {
            if !rng.bernoulli(cfg.missing_attribute_prob) {
                attributes.insert(m.name.clone(), rng.choose(&m.values).expect("values").clone());
            }
        }
        let w = rng.uniform(0.05, 0.3);
        let h = rng.uniform(0.05, 0.3);
        let x = rng.uniform(0.0, 1.0 - w);
        let y = rng.uniform(0.0, 1.0 - h);
        objects.push(SymbolicObject {
            id,
            category,
            attributes,
            bbox: [x, y, w, h],
        });
    }
    let mut relations = Vec::new();
    for s in 0..n {
        for o in 0..n {
            if s != o && rng.bernoulli(cfg.relation_density) {
                let p = rng.choose(&schema.predicates).expect("predicates").clone();
                relations.push(Relation(s, p, o));
            }
        }
    }
    SymbolicScene {
        scene_id: scene_id.to_string(),
        objects,
        relations,
    }
}

/// Proportions of generated question kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeMix {
    pub exist: f64,
    pub query: f64,
    pub verify: f64,
    /// Fraction of programs that traverse a relation.
    pub relate: f64,
    /// Fraction of EXIST programs whose answer is "no".
    pub negative_fraction: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        Self {
            exist: 0.4,
            query: 0.3,
            verify: 0.3,
            relate: 0.4,
            negative_fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Sampled,
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Exist,
    Query,
    Verify,
}

fn active_set(scene: &SymbolicScene, steps: &[Instruction], schema: &WorldSchema) -> Vec<bool> {
    let mut probe = steps.to_vec();
    probe.push(Instruction::Exist);
    let r = oracle_execute(scene, &InstructionProgram::new(probe), schema).expect("generated program is valid");
    r.bitmaps.last().cloned().unwrap_or_default()
}

/// Appends filters on `target`'s attribute values that strictly shrink the
/// active set until only `target` remains or `budget` filters are used.
fn narrow_to(
    scene: &SymbolicScene,
    schema: &WorldSchema,
    steps: &mut Vec<Instruction>,
    target: usize,
    budget: usize,
    rng: &mut RngState,
) -> bool {
    let mut used = 0;
    loop {
        let active = active_set(scene, steps, schema);
        let count = active.iter().filter(|&&a| a).count();
        if count == 1 {
            return true;
        }
        if used == budget {
            return false;
        }
        let mut options: Vec<Instruction> = Vec::new();
        for (m, v) in &scene.objects[target].attributes {
            let remaining = (0..scene.objects.len())
                .filter(|&i| active[i] && scene.objects[i].attributes.get(m) == Some(v))
                .count();
            if remaining < count {
                options.push(Instruction::FilterAttr {
                    metaconcept: m.clone(),
                    value: v.clone(),
                });
            }
        }
        match rng.choose(&options) {
            Some(f) => {
                steps.push(f.clone());
                used += 1;
            }
            None => return false,
        }
    }
}

fn filtered_metaconcepts(steps: &[Instruction], since: usize) -> BTreeSet<String> {
    steps[since..]
        .iter()
        .filter_map(|s| match s {
            Instruction::FilterAttr { metaconcept, .. } => Some(metaconcept.clone()),
            _ => None,
        })
        .collect()
}

/// Draws one program with a well-defined oracle answer on `scene`.
///
/// Returns the program and whether it is answerable, i.e. QUERY/VERIFY read
/// a unique object and no terminal falls back to `none`.
pub fn sample_program_for(
    scene: &SymbolicScene,
    schema: &WorldSchema,
    rng: &mut RngState,
    mix: &TypeMix,
    max_steps: usize,
) -> (InstructionProgram, bool) {
    sample_program_with(scene, schema, rng, mix, max_steps, Polarity::Sampled)
}

pub fn sample_program_with(
    scene: &SymbolicScene,
    schema: &WorldSchema,
    rng: &mut RngState,
    mix: &TypeMix,
    max_steps: usize,
    polarity: Polarity,
) -> (InstructionProgram, bool) {
    assert!(max_steps >= 2, "programs need at least select + terminal");
    assert!(!scene.objects.is_empty(), "cannot ask about an empty scene");
    let total = mix.exist + mix.query + mix.verify;
    for _attempt in 0..64 {
        let u = rng.unit() * total;
        let kind = if u < mix.exist {
            Kind::Exist
        } else if u < mix.exist + mix.query {
            Kind::Query
        } else {
            Kind::Verify
        };
        let relate = !scene.relations.is_empty() && rng.bernoulli(mix.relate);
        let mut steps: Vec<Instruction> = Vec::new();
        let target;
        if relate {
            let r = rng.choose(&scene.relations).expect("non-empty").clone();
            let (s, t) = (scene.position(r.0).expect("valid"), scene.position(r.2).expect("valid"));
            let dir = if rng.bernoulli(0.5) { Direction::Forward } else { Direction::Backward };
            let (anchor, tgt) = match dir {
                Direction::Forward => (s, t),
                Direction::Backward => (t, s),
            };
            steps.push(Instruction::Select(scene.objects[anchor].category.clone()));
            // reserve relate + terminal
            if !narrow_to(scene, schema, &mut steps, anchor, max_steps.saturating_sub(3), rng) {
                continue;
            }
            steps.push(Instruction::Relate {
                predicate: r.1.clone(),
                direction: dir,
            });
            target = tgt;
        } else {
            target = rng.below(scene.objects.len());
            steps.push(Instruction::Select(scene.objects[target].category.clone()));
        }
        let target_start = steps.len();
        let room = max_steps - 1 - steps.len();
        match kind {
            Kind::Query | Kind::Verify => {
                if !narrow_to(scene, schema, &mut steps, target, room, rng) {
                    continue;
                }
            }
            Kind::Exist => {
                if room > 0 && rng.bernoulli(0.5) {
                    narrow_to(scene, schema, &mut steps, target, 1, rng);
                }
            }
        }
        let attrs = &scene.objects[target].attributes;
        match kind {
            Kind::Exist => {
                let negative = match polarity {
                    Polarity::Sampled => rng.bernoulli(mix.negative_fraction),
                    Polarity::Positive => false,
                    Polarity::Negative => true,
                };
                if negative && !make_negative(scene, schema, &mut steps, rng) {
                    continue;
                }
                steps.push(Instruction::Exist);
            }
            Kind::Query => {
                let used = filtered_metaconcepts(&steps, target_start);
                let fresh: Vec<&String> = attrs.keys().filter(|m| !used.contains(*m)).collect();
                let pool: Vec<&String> = if fresh.is_empty() { attrs.keys().collect() } else { fresh };
                let Some(m) = rng.choose(&pool) else { continue };
                steps.push(Instruction::QueryAttr((*m).clone()));
            }
            Kind::Verify => {
                let used = filtered_metaconcepts(&steps, target_start);
                let fresh: Vec<&String> = attrs.keys().filter(|m| !used.contains(*m)).collect();
                let pool: Vec<&String> = if fresh.is_empty() { attrs.keys().collect() } else { fresh };
                let Some(m) = rng.choose(&pool) else { continue };
                let m = (*m).clone();
                let truth = attrs[&m].clone();
                let keep = match polarity {
                    Polarity::Sampled => rng.bernoulli(0.5),
                    Polarity::Positive => true,
                    Polarity::Negative => false,
                };
                let value = if keep {
                    truth
                } else {
                    let mi = schema.metaconcept_index(&m).expect("schema metaconcept");
                    let others: Vec<&String> =
                        schema.metaconcepts[mi].values.iter().filter(|v| **v != truth).collect();
                    (*rng.choose(&others).expect("two or more values")).clone()
                };
                steps.push(Instruction::VerifyAttr { metaconcept: m, value });
            }
        }
        let program = InstructionProgram::new(steps);
        debug_assert!(program.validate(schema, max_steps).is_ok());
        let result = oracle_execute(scene, &program, schema).expect("valid program");
        let before = result.bitmaps[result.bitmaps.len() - 1].iter().filter(|&&a| a).count();
        let answerable = result.short_answer != crate::exec_engine::NONE_ANSWER
            && (kind == Kind::Exist || before == 1);
        return (program, answerable);
    }
    // Degenerate scene (e.g. indistinguishable twins): plain existence question.
    let c = scene.objects[0].category.clone();
    (
        InstructionProgram::new(vec![Instruction::Select(c), Instruction::Exist]),
        true,
    )
}

/// Rewrites one argument of the prefix to a schema label absent from the
/// scene, so the final active set is empty.
fn make_negative(scene: &SymbolicScene, schema: &WorldSchema, steps: &mut [Instruction], rng: &mut RngState) -> bool {
    let present_cats: BTreeSet<&str> = scene.objects.iter().map(|o| o.category.as_str()).collect();
    let present_preds: BTreeSet<&str> = scene.relations.iter().map(|r| r.1.as_str()).collect();
    let mut options: Vec<(usize, Instruction)> = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        match s {
            Instruction::Select(_) => {
                for c in schema.categories.iter().filter(|c| !present_cats.contains(c.as_str())) {
                    options.push((i, Instruction::Select(c.clone())));
                }
            }
            Instruction::FilterAttr { metaconcept, .. } => {
                let mi = schema.metaconcept_index(metaconcept).expect("schema metaconcept");
                let present: BTreeSet<&str> = scene
                    .objects
                    .iter()
                    .filter_map(|o| o.attributes.get(metaconcept).map(|v| v.as_str()))
                    .collect();
                for v in schema.metaconcepts[mi].values.iter().filter(|v| !present.contains(v.as_str())) {
                    options.push((
                        i,
                        Instruction::FilterAttr {
                            metaconcept: metaconcept.clone(),
                            value: v.clone(),
                        },
                    ));
                }
            }
            Instruction::Relate { direction, .. } => {
                for p in schema.predicates.iter().filter(|p| !present_preds.contains(p.as_str())) {
                    options.push((
                        i,
                        Instruction::Relate {
                            predicate: p.clone(),
                            direction: *direction,
                        },
                    ));
                }
            }
            _ => {}
        }
    }
    match rng.choose(&options) {
        Some((i, s)) => {
            steps[*i] = s.clone();
            true
        }
        None => false,
    }
}
