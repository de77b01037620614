use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::WorldSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One reasoning step over a scene graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Select(String),
    FilterAttr { metaconcept: String, value: String },
    Relate { predicate: String, direction: Direction },
    Exist,
    QueryAttr(String),
    VerifyAttr { metaconcept: String, value: String },
}

impl Instruction {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Exist | Self::QueryAttr(_) | Self::VerifyAttr { .. })
    }

    pub fn opcode(&self) -> &'static str {
        match self {
            Self::Select(_) => "select",
            Self::FilterAttr { .. } => "filter",
            Self::Relate { .. } => "relate",
            Self::Exist => "exist",
            Self::QueryAttr(_) => "query",
            Self::VerifyAttr { .. } => "verify",
        }
    }

    /// Canonical lowercase token form, e.g. `["relate", "holding", "fwd"]`.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![self.opcode().to_string()];
        match self {
            Self::Select(c) => out.push(c.clone()),
            Self::FilterAttr { metaconcept, value } | Self::VerifyAttr { metaconcept, value } => {
                out.push(metaconcept.clone());
                out.push(value.clone());
            }
            Self::Relate {
                predicate,
                direction,
            } => {
                out.push(predicate.clone());
                out.push(
                    match direction {
                        Direction::Forward => "fwd",
                        Direction::Backward => "bwd",
                    }
                    .into(),
                );
            }
            Self::Exist => {}
            Self::QueryAttr(m) => out.push(m.clone()),
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Program(format!("cannot parse instruction {text:?}"));
        let s = |x: &str| x.to_string();
        Ok(match toks.as_slice() {
            ["select", c] => Self::Select(s(c)),
            ["filter", m, v] => Self::FilterAttr {
                metaconcept: s(m),
                value: s(v),
            },
            ["relate", p, d] => Self::Relate {
                predicate: s(p),
                direction: match *d {
                    "fwd" => Direction::Forward,
                    "bwd" => Direction::Backward,
                    _ => return Err(bad()),
                },
            },
            ["exist"] => Self::Exist,
            ["query", m] => Self::QueryAttr(s(m)),
            ["verify", m, v] => Self::VerifyAttr {
                metaconcept: s(m),
                value: s(v),
            },
            _ => return Err(bad()),
        })
    }

    /// Checks every argument against the schema.
    pub fn validate(&self, schema: &WorldSchema) -> Result<()> {
        let fail = |m: String| Err(Error::Schema(m));
        match self {
            Self::Select(c) if schema.category_index(c).is_none() => fail(format!("unknown category {c}")),
            Self::FilterAttr { metaconcept, value } | Self::VerifyAttr { metaconcept, value } => {
                match schema.metaconcept_index(metaconcept) {
                    None => fail(format!("unknown metaconcept {metaconcept}")),
                    Some(m) if schema.value_index(m, value).is_none() => {
                        fail(format!("value {value} not in metaconcept {metaconcept}"))
                    }
                    _ => Ok(()),
                }
            }
            Self::Relate { predicate, .. } if schema.predicate_index(predicate).is_none() => {
                fail(format!("unknown predicate {predicate}"))
            }
            Self::QueryAttr(m) if schema.metaconcept_index(m).is_none() => {
                fail(format!("unknown metaconcept {m}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

impl Serialize for Instruction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Instruction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Ordered reasoning steps; serializes as a list of canonical strings.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionProgram {
    pub steps: Vec<Instruction>,
}

impl InstructionProgram {
    pub fn new(steps: Vec<Instruction>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal(&self) -> Option<&Instruction> {
        self.steps.last().filter(|s| s.is_terminal())
    }

    pub fn question_type(&self) -> &'static str {
        self.terminal().map(|t| t.opcode()).unwrap_or("invalid")
    }

    pub fn has_relate(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, Instruction::Relate { .. }))
    }

    /// True when some step carries an attribute value argument.
    pub fn has_attribute_value(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s, Instruction::FilterAttr { .. } | Instruction::VerifyAttr { .. }))
    }

    /// Structural invariants: non-empty, starts with SELECT, at most
    /// `max_steps`, exactly one terminal which is last.
    pub fn check_structure(&self, max_steps: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::Program(m.to_string()));
        if self.steps.is_empty() {
            return fail("program has no steps");
        }
        if self.steps.len() > max_steps {
            return Err(Error::Program(format!(
                "program has {} steps, limit is {max_steps}",
                self.steps.len()
            )));
        }
        if !matches!(self.steps[0], Instruction::Select(_)) {
            return fail("first step must be select");
        }
        if self.steps.iter().skip(1).any(|s| matches!(s, Instruction::Select(_))) {
            return fail("select may only appear as the first step");
        }
        let terminals = self.steps.iter().filter(|s| s.is_terminal()).count();
        if terminals != 1 || !self.steps.last().is_some_and(|s| s.is_terminal()) {
            return fail("exactly one terminal step is required, at the end");
        }
        Ok(())
    }

    pub fn validate(&self, schema: &WorldSchema, max_steps: usize) -> Result<()> {
        self.check_structure(max_steps)?;
        for s in &self.steps {
            s.validate(schema)?;
        }
        Ok(())
    }

    pub fn canonical(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn prog(lines: &[&str]) -> InstructionProgram {
        InstructionProgram::new(lines.iter().map(|l| Instruction::parse(l).unwrap()).collect())
    }

    #[test]
    fn canonical_text_examples() {
        assert_eq!(Instruction::Select("girl".into()).to_string(), "select girl");
        let r = Instruction::Relate {
            predicate: "holding".into(),
            direction: Direction::Forward,
        };
        assert_eq!(r.to_string(), "relate holding fwd");
        assert_eq!(Instruction::parse("relate holding fwd").unwrap(), r);
    }

    #[test]
    fn text_form_is_a_bijection_over_the_schema() {
        let schema = WorldSchema::default();
        let mut all = vec![Instruction::Exist];
        for c in &schema.categories {
            all.push(Instruction::Select(c.clone()));
        }
        for m in &schema.metaconcepts {
            all.push(Instruction::QueryAttr(m.name.clone()));
            for v in &m.values {
                all.push(Instruction::FilterAttr {
                    metaconcept: m.name.clone(),
                    value: v.clone(),
                });
                all.push(Instruction::VerifyAttr {
                    metaconcept: m.name.clone(),
                    value: v.clone(),
                });
            }
        }
        for p in &schema.predicates {
            for d in [Direction::Forward, Direction::Backward] {
                all.push(Instruction::Relate {
                    predicate: p.clone(),
                    direction: d,
                });
            }
        }
        let texts: std::collections::HashSet<String> = all.iter().map(|i| i.to_string()).collect();
        assert_eq!(texts.len(), all.len());
        for i in &all {
            i.validate(&schema).unwrap();
            assert_eq!(&Instruction::parse(&i.to_string()).unwrap(), i);
        }
    }

    #[test]
    fn structure_violations_are_reported() {
        assert!(prog(&["select cube", "filter color red", "query material"])
            .check_structure(5)
            .is_ok());
        let e = prog(&["filter color red", "exist"]).check_structure(5).unwrap_err();
        assert!(e.to_string().contains("first step"));
        assert!(prog(&["select cube", "exist", "exist"]).check_structure(5).is_err());
        assert!(prog(&["select cube", "exist", "filter color red"]).check_structure(5).is_err());
        assert!(prog(&["select cube"]).check_structure(5).is_err());
        assert!(prog(&["select cube", "select dog", "exist"]).check_structure(5).is_err());
        let long = prog(&["select cube", "filter color red", "filter size small", "filter material metal", "filter color red", "exist"]);
        assert!(long.check_structure(5).is_err());
    }

    #[test]
    fn schema_violations_are_reported() {
        let schema = WorldSchema::default();
        assert!(prog(&["select unicorn", "exist"]).validate(&schema, 5).is_err());
        assert!(prog(&["select cube", "filter color metal", "exist"]).validate(&schema, 5).is_err());
        assert!(prog(&["select cube", "relate eating fwd", "exist"]).validate(&schema, 5).is_err());
    }

    #[test]
    fn program_serializes_as_canonical_strings() {
        let p = prog(&["select girl", "relate holding fwd", "exist"]);
        let j = serde_json::to_string(&p).unwrap();
        assert_eq!(j, r#"["select girl","relate holding fwd","exist"]"#);
        assert_eq!(serde_json::from_str::<InstructionProgram>(&j).unwrap(), p);
    }
}
