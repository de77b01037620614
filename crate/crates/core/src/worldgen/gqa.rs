//! Conversion of GQA-style scene-graph JSON into symbolic scenes.
//!
//! Objects whose name is not a schema category are dropped together with
//! their relations. Attributes and relation names outside the schema are
//! ignored. Multi-word relation names are matched with spaces replaced by
//! underscores.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::WorldSchema;
use crate::error::Result;
use crate::scene_graph::{Relation, SymbolicObject, SymbolicScene};

#[derive(Deserialize)]
struct GqaRelation {
    name: String,
    object: String,
}

#[derive(Deserialize)]
struct GqaObject {
    name: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    relations: Vec<GqaRelation>,
}

#[derive(Deserialize)]
struct GqaImage {
    width: f64,
    height: f64,
    objects: BTreeMap<String, GqaObject>,
}

pub fn scenes_from_gqa(json: &str, schema: &WorldSchema) -> Result<Vec<SymbolicScene>> {
    let images: BTreeMap<String, GqaImage> = serde_json::from_str(json)?;
    let mut out = Vec::with_capacity(images.len());
    for (image_id, img) in images {
        let kept: Vec<(&String, &GqaObject)> = img
            .objects
            .iter()
            .filter(|(_, o)| schema.category_index(&o.name).is_some())
            .collect();
        let new_id: BTreeMap<&str, usize> = kept.iter().enumerate().map(|(i, (k, _))| (k.as_str(), i)).collect();
        let mut objects = Vec::with_capacity(kept.len());
        let mut relations = Vec::new();
        for (i, (_, o)) in kept.iter().enumerate() {
            let mut attributes = BTreeMap::new();
            for a in &o.attributes {
                if let Some(m) = schema.metaconcept_of_value(a) {
                    attributes
                        .entry(schema.metaconcepts[m].name.clone())
                        .or_insert_with(|| a.clone());
                }
            }
            let clamp = |v: f64| v.clamp(0.0, 1.0);
            let x = clamp(o.x / img.width);
            let y = clamp(o.y / img.height);
            let w = clamp(o.w / img.width).min(1.0 - x).max(1e-6);
            let h = clamp(o.h / img.height).min(1.0 - y).max(1e-6);
            objects.push(SymbolicObject {
                id: i,
                category: o.name.clone(),
                attributes,
                bbox: [x, y, w, h],
            });
            for r in &o.relations {
                let name = r.name.replace(' ', "_");
                let Some(&j) = new_id.get(r.object.as_str()) else { continue };
                if j == i || schema.predicate_index(&name).is_none() {
                    continue;
                }
                if relations.iter().any(|x: &Relation| x.0 == i && x.2 == j) {
                    continue;
                }
                relations.push(Relation(i, name, j));
            }
        }
        out.push(SymbolicScene {
            scene_id: image_id,
            objects,
            relations,
        });
    }
    Ok(out)
}
