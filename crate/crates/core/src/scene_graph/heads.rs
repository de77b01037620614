use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{hungarian_match, ordered_pairs, pair_index, Matching, Relation, SymbolicObject, SymbolicScene, VectorSceneGraph};
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax, Activation, FeedForwardLayer, Graph, ParamStore, RngState, Tensor, Var};
use crate::worldgen::WorldSchema;

/// Decoders from slot and edge vectors back to symbols.
#[derive(Clone, Debug)]
pub struct SceneGraphHeads {
    /// Categories plus "no object".
    pub category: FeedForwardLayer,
    /// Per metaconcept: values plus "unspecified".
    pub attributes: Vec<FeedForwardLayer>,
    pub bbox: FeedForwardLayer,
    /// Predicates plus "no relation".
    pub relation: FeedForwardLayer,
}

/// Logits of every head for one scene.
#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub category: Var,
    pub attributes: Vec<Var>,
    pub bbox: Var,
    pub relation: Var,
}

impl SceneGraphHeads {
    pub fn new(store: &mut ParamStore, prefix: &str, schema: &WorldSchema, dim: usize, rng: &mut RngState) -> Self {
        let ff = |store: &mut ParamStore, name: &str, out: usize, rng: &mut RngState| {
            FeedForwardLayer::new(store, &format!("{prefix}.{name}"), dim, out, Activation::Identity, rng)
        };
        Self {
            category: ff(store, "category", schema.categories.len() + 1, rng),
            attributes: schema
                .metaconcepts
                .iter()
                .map(|m| ff(store, &format!("attr.{}", m.name), m.values.len() + 1, rng))
                .collect(),
            bbox: ff(store, "box", 4, rng),
            relation: ff(store, "relation", schema.predicates.len() + 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, objects: Var, edges: Var) -> Result<HeadLogits> {
        let attributes = self
            .attributes
            .iter()
            .map(|h| h.forward(g, objects))
            .collect::<Result<Vec<_>, _>>()?;
        let relation = if g.value(edges).rows() == 0 {
            edges
        } else {
            self.relation.forward(g, edges)?
        };
        Ok(HeadLogits {
            category: self.category.forward(g, objects)?,
            attributes,
            bbox: self.bbox.forward(g, objects)?,
            relation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub category: Vec<f64>,
    pub attributes: Vec<Vec<f64>>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedGraph {
    pub slots: Vec<SlotPrediction>,
    /// Distributions in edge-table order.
    pub relations: Vec<Vec<f64>>,
    /// Argmax readout; object ids are slot indices.
    pub readout: SymbolicScene,
}

fn rows_softmax(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..t.rows()).map(|r| Ok(softmax(t.row(r))?)).collect()
}

/// Per-slot and per-edge distributions plus the symbolic readout, which drops
/// "no object" slots, "unspecified" attributes and "no relation" edges.
pub fn predict_graph(
    store: &ParamStore,
    heads: &SceneGraphHeads,
    vsg: &VectorSceneGraph,
    schema: &WorldSchema,
) -> Result<PredictedGraph> {
    if heads.category.out_dim != schema.categories.len() + 1
        || heads.relation.out_dim != schema.predicates.len() + 1
        || heads.attributes.len() != schema.metaconcepts.len()
    {
        return Err(Error::Schema("heads do not match the world schema".into()));
    }
    let mut g = Graph::new(store);
    let o = g.constant(vsg.objects.clone());
    let e = g.constant(vsg.edges.clone());
    let logits = heads.forward(&mut g, o, e)?;
    let cats = rows_softmax(g.value(logits.category))?;
    let attrs = logits
        .attributes
        .iter()
        .map(|&a| rows_softmax(g.value(a)))
        .collect::<Result<Vec<_>>>()?;
    let boxes = g.value(logits.bbox).clone();
    let relations = if vsg.slot_count < 2 {
        Vec::new()
    } else {
        rows_softmax(g.value(logits.relation))?
    };
    let n = vsg.slot_count;
    let slots: Vec<SlotPrediction> = (0..n)
        .map(|s| SlotPrediction {
            category: cats[s].clone(),
            attributes: attrs.iter().map(|a| a[s].clone()).collect(),
            bbox: boxes.row(s).try_into().expect("4 box coordinates"),
        })
        .collect();
    let mut objects = Vec::new();
    for (s, p) in slots.iter().enumerate() {
        let c = argmax(&p.category);
        if c == schema.categories.len() {
            continue;
        }
        let mut attributes = BTreeMap::new();
        for (mi, m) in schema.metaconcepts.iter().enumerate() {
            let v = argmax(&p.attributes[mi]);
            if v < m.values.len() {
                attributes.insert(m.name.clone(), m.values[v].clone());
            }
        }
        objects.push(SymbolicObject {
            id: s,
            category: schema.categories[c].clone(),
            attributes,
            bbox: p.bbox.map(|x| x.clamp(0.0, 1.0)),
        });
    }
    let kept: Vec<usize> = objects.iter().map(|o| o.id).collect();
    let mut rels = Vec::new();
    for (i, j) in ordered_pairs(n) {
        if kept.contains(&i) && kept.contains(&j) {
            let r = argmax(&relations[pair_index(n, i, j)]);
            if r < schema.predicates.len() {
                rels.push(Relation(i, schema.predicates[r].clone(), j));
            }
        }
    }
    Ok(PredictedGraph {
        slots,
        relations,
        readout: SymbolicScene {
            scene_id: String::new(),
            objects,
            relations: rels,
        },
    })
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Matching cost `-log p(category) + lambda_box * (L1 + L2^2)(box)`, slots
/// by objects. The squared term removes the exact ties L1 alone has between
/// objects of one category when predicted boxes lie outside both targets.
pub fn matching_cost(category_logits: &Tensor, boxes: &Tensor, scene: &SymbolicScene, schema: &WorldSchema, lambda_box: f64) -> Result<Vec<Vec<f64>>> {
    let targets = scene
        .objects
        .iter()
        .map(|o| schema.category_index(&o.category).ok_or_else(|| Error::Schema(format!("unknown category {}", o.category))))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..category_logits.rows())
        .map(|s| {
            let lp = log_softmax_row(category_logits.row(s));
            scene
                .objects
                .iter()
                .zip(&targets)
                .map(|(o, &c)| {
                    let (l1, l2): (f64, f64) = boxes
                        .row(s)
                        .iter()
                        .zip(&o.bbox)
                        .fold((0.0, 0.0), |(a1, a2), (a, b)| (a1 + (a - b).abs(), a2 + (a - b) * (a - b)));
                    -lp[c] + lambda_box * (l1 + l2)
                })
                .collect()
        })
        .collect())
}

/// Set loss: optimal matching, then category, attribute and box terms for
/// matched slots, "no object" for the rest, and relation terms over matched
/// pairs with "no relation" where the scene has none.
pub fn set_prediction_loss(
    g: &mut Graph,
    logits: &HeadLogits,
    scene: &SymbolicScene,
    schema: &WorldSchema,
    lambda_box: f64,
) -> Result<(Var, Matching)> {
    let n = g.value(logits.category).rows();
    if scene.objects.len() > n {
        return Err(Error::Capacity {
            objects: scene.objects.len(),
            slots: n,
        });
    }
    let cost = matching_cost(g.value(logits.category), g.value(logits.bbox), scene, schema, lambda_box)?;
    let matching = hungarian_match(&cost)?;
    let no_object = schema.categories.len();
    let cat_targets: Vec<usize> = matching
        .assignment
        .iter()
        .map(|a| match a {
            Some(t) => schema.category_index(&scene.objects[*t].category).expect("checked above"),
            None => no_object,
        })
        .collect();
    let mut loss = g.cross_entropy(logits.category, &cat_targets)?;
    let matched: Vec<(usize, usize)> = matching
        .assignment
        .iter()
        .enumerate()
        .filter_map(|(s, a)| a.map(|t| (s, t)))
        .collect();
    if !matched.is_empty() {
        let slots: Vec<usize> = matched.iter().map(|m| m.0).collect();
        for (mi, m) in schema.metaconcepts.iter().enumerate() {
            let targets: Vec<usize> = matched
                .iter()
                .map(|&(_, t)| match scene.objects[t].attributes.get(&m.name) {
                    Some(v) => schema.value_index(mi, v).unwrap_or(m.values.len()),
                    None => m.values.len(),
                })
                .collect();
            let rows = g.gather_rows(logits.attributes[mi], &slots)?;
            let ce = g.cross_entropy(rows, &targets)?;
            loss = g.add(loss, ce)?;
        }
        if lambda_box != 0.0 {
            let pred = g.gather_rows(logits.bbox, &slots)?;
            let gold: Vec<f64> = matched.iter().flat_map(|&(_, t)| scene.objects[t].bbox).collect();
            let gold = g.constant(Tensor::matrix(matched.len(), 4, gold)?);
            let d = g.sub(pred, gold)?;
            let d = g.abs(d);
            let l1 = g.sum(d);
            let l1 = g.scale(l1, lambda_box);
            loss = g.add(loss, l1)?;
        }
        if matched.len() >= 2 {
            let none = schema.predicates.len();
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for &(s1, t1) in &matched {
                for &(s2, t2) in &matched {
                    if s1 != s2 {
                        rows.push(pair_index(n, s1, s2));
                        targets.push(
                            scene
                                .predicate_between(t1, t2)
                                .and_then(|p| schema.predicate_index(p))
                                .unwrap_or(none),
                        );
                    }
                }
            }
            let r = g.gather_rows(logits.relation, &rows)?;
            let ce = g.cross_entropy(r, &targets)?;
            loss = g.add(loss, ce)?;
        }
    }
    Ok((loss, matching))
}
