use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metaconcept {
    pub name: String,
    pub values: Vec<String>,
}

/// Label inventory of a synthetic world.
///
/// Every label is a single lowercase token and labels never collide across
/// kinds, so canonical instruction text and question tokens can be mapped
/// back to schema entries unambiguously.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSchema {
    pub categories: Vec<String>,
    pub metaconcepts: Vec<Metaconcept>,
    pub predicates: Vec<String>,
}

impl Default for WorldSchema {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            categories: s(&["girl", "boy", "dog", "cat", "cube", "sphere", "hamburger", "table"]),
            metaconcepts: vec![
                Metaconcept {
                    name: "color".into(),
                    values: s(&["red", "blue", "green", "yellow", "pink"]),
                },
                Metaconcept {
                    name: "material".into(),
                    values: s(&["metal", "wood", "plastic"]),
                },
                Metaconcept {
                    name: "size".into(),
                    values: s(&["small", "large"]),
                },
            ],
            predicates: s(&["holding", "wearing", "on", "near", "behind", "under"]),
        }
    }
}

/// Words used by the question and answer templates; schema labels may not
/// reuse them.
pub const TEMPLATE_WORDS: &[&str] = &[
    "is", "there", "a", "any", "what", "which", "the", "thing", "?", "yes", "no", ",", ".", "of",
    "not", "none", "select", "filter", "relate", "exist", "query", "verify", "fwd", "bwd",
];

impl WorldSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut check = |label: &str, kind: &str| -> Result<()> {
            if label.is_empty()
                || label.chars().any(|c| c.is_whitespace() || c.is_uppercase())
                || label.starts_with('[')
            {
                return Err(Error::Schema(format!(
                    "{kind} label {label:?} must be one lowercase token"
                )));
            }
            if TEMPLATE_WORDS.contains(&label) {
                return Err(Error::Schema(format!("{kind} label {label:?} is a template word")));
            }
            if !seen.insert(label.to_string()) {
                return Err(Error::Schema(format!("duplicate label {label:?}")));
            }
            Ok(())
        };
        if self.categories.is_empty() || self.predicates.is_empty() || self.metaconcepts.is_empty() {
            return Err(Error::Schema("schema needs categories, metaconcepts and predicates".into()));
        }
        for c in &self.categories {
            check(c, "category")?;
        }
        for p in &self.predicates {
            check(p, "predicate")?;
        }
        for m in &self.metaconcepts {
            check(&m.name, "metaconcept")?;
            if m.values.len() < 2 {
                return Err(Error::Schema(format!(
                    "metaconcept {} needs at least 2 values",
                    m.name
                )));
            }
            for v in &m.values {
                check(v, "attribute value")?;
            }
        }
        Ok(())
    }

    pub fn category_index(&self, c: &str) -> Option<usize> {
        self.categories.iter().position(|x| x == c)
    }

    pub fn predicate_index(&self, p: &str) -> Option<usize> {
        self.predicates.iter().position(|x| x == p)
    }

    pub fn metaconcept_index(&self, m: &str) -> Option<usize> {
        self.metaconcepts.iter().position(|x| x.name == m)
    }

    pub fn value_index(&self, metaconcept: usize, v: &str) -> Option<usize> {
        self.metaconcepts[metaconcept].values.iter().position(|x| x == v)
    }

    /// Metaconcept that owns an attribute value.
    pub fn metaconcept_of_value(&self, v: &str) -> Option<usize> {
        self.metaconcepts.iter().position(|m| m.values.iter().any(|x| x == v))
    }

    /// Every attribute value token, in schema order.
    pub fn attribute_lexicon(&self) -> Vec<String> {
        self.metaconcepts.iter().flat_map(|m| m.values.iter().cloned()).collect()
    }

    /// Every label of every kind, in schema order.
    pub fn all_labels(&self) -> Vec<String> {
        let mut out = self.categories.clone();
        for m in &self.metaconcepts {
            out.push(m.name.clone());
            out.extend(m.values.iter().cloned());
        }
        out.extend(self.predicates.iter().cloned());
        out
    }

    /// Shared token vocabulary: specials, template words, then schema labels.
    pub fn vocab(&self) -> Vocab {
        let specials = [PAD, UNK, MASK, BOS, EOS].iter().map(|s| s.to_string());
        let words = TEMPLATE_WORDS.iter().map(|s| s.to_string());
        Vocab::new(specials.chain(words).chain(self.all_labels()))
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        crate::nn::hex_digest(&Sha256::digest(bytes))
    }
}

/// Token vocabulary with an `[UNK]` fallback.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";

impl Vocab {
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        assert!(v.index.contains_key(UNK), "vocabulary needs {UNK}");
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, t: &str) -> Option<usize> {
        self.index.get(t).copied()
    }

    pub fn encode(&self, t: &str) -> usize {
        self.get(t).unwrap_or(self.index[UNK])
    }

    pub fn token(&self, i: usize) -> &str {
        self.tokens.get(i).map(|s| s.as_str()).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid_and_sized() {
        let s = WorldSchema::default();
        s.validate().unwrap();
        assert_eq!(s.categories.len(), 8);
        let sizes: Vec<usize> = s.metaconcepts.iter().map(|m| m.values.len()).collect();
        assert_eq!(sizes, vec![5, 3, 2]);
        assert_eq!(s.predicates.len(), 6);
        assert_eq!(s.attribute_lexicon().len(), 10);
    }

    #[test]
    fn rejects_collisions_and_short_metaconcepts() {
        let mut s = WorldSchema::default();
        s.categories.push("red".into());
        assert!(s.validate().is_err());
        let mut s = WorldSchema::default();
        s.metaconcepts[2].values.truncate(1);
        assert!(s.validate().is_err());
        let mut s = WorldSchema::default();
        s.predicates.push("the".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = WorldSchema::default();
        let back: WorldSchema = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn vocab_falls_back_to_unk() {
        let v = Vocab::new(["[UNK]".to_string(), "a".to_string(), "a".to_string()]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode("zzz"), 0);
        assert_eq!(v.token(1), "a");
    }
}
