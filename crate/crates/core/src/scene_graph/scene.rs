use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::WorldSchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolicObject {
    pub id: usize,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Normalized `(x, y, w, h)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Directed labeled edge `subject --predicate--> object`, by object id.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation(pub usize, pub String, pub usize);

impl Relation {
    pub fn subject(&self) -> usize {
        self.0
    }
    pub fn predicate(&self) -> &str {
        &self.1
    }
    pub fn object(&self) -> usize {
        self.2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolicScene {
    pub scene_id: String,
    pub objects: Vec<SymbolicObject>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

impl SymbolicScene {
    /// Position of the object with `id` in `objects`.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    /// Predicate of the ordered pair `(subject, object)` by position.
    pub fn predicate_between(&self, subject: usize, object: usize) -> Option<&str> {
        let (s, o) = (self.objects[subject].id, self.objects[object].id);
        self.relations
            .iter()
            .find(|r| r.0 == s && r.2 == o)
            .map(|r| r.1.as_str())
    }

    pub fn validate(&self, schema: &WorldSchema) -> Result<()> {
        let err = |m: String| Err(Error::Schema(format!("scene {}: {m}", self.scene_id)));
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return err(format!("duplicate object id {}", o.id));
            }
            if schema.category_index(&o.category).is_none() {
                return err(format!("unknown category {}", o.category));
            }
            for (k, v) in &o.attributes {
                let Some(m) = schema.metaconcept_index(k) else {
                    return err(format!("unknown metaconcept {k}"));
                };
                if schema.value_index(m, v).is_none() {
                    return err(format!("value {v} not in metaconcept {k}"));
                }
            }
            let [x, y, w, h] = o.bbox;
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(unit(x) && unit(y) && unit(w) && unit(h)) || w <= 0.0 || h <= 0.0 {
                return err(format!("object {} has invalid box {:?}", o.id, o.bbox));
            }
        }
        let mut pairs = BTreeSet::new();
        for r in &self.relations {
            if !ids.contains(&r.0) || !ids.contains(&r.2) {
                return err(format!("relation {r:?} references a missing object"));
            }
            if r.0 == r.2 {
                return err(format!("self relation on object {}", r.0));
            }
            if schema.predicate_index(&r.1).is_none() {
                return err(format!("unknown predicate {}", r.1));
            }
            if !pairs.insert((r.0, r.2)) {
                return err(format!("more than one predicate for pair ({}, {})", r.0, r.2));
            }
        }
        Ok(())
    }

    /// Copy with every attribute removed.
    pub fn without_attributes(&self) -> Self {
        let mut s = self.clone();
        s.objects.iter_mut().for_each(|o| o.attributes.clear());
        s
    }

    /// Copy with every relation removed.
    pub fn without_relations(&self) -> Self {
        let mut s = self.clone();
        s.relations.clear();
        s
    }
}
