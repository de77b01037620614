//! Template grammar shared by questions and full answers.
//!
//! Noun phrases are built left to right over the program prefix:
//!
//! ```text
//! select c               ->  c
//! filter m v             ->  v <np>
//! relate p fwd           ->  thing the <np> is p
//! relate p bwd           ->  thing p the <np>
//! ```
//!
//! Questions:
//!
//! ```text
//! exist                  ->  is there a|any <np> ?
//! query m                ->  what|which m is the <np> ?
//! verify m v             ->  is the <np> v ?
//! ```

use serde::{Deserialize, Serialize};

use super::dsl::{Direction, Instruction, InstructionProgram};
use crate::nn::RngState;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub tokens: Vec<String>,
    pub question_type: String,
}

impl Question {
    /// Sentence form: first letter capitalized, punctuation attached.
    pub fn surface(&self) -> String {
        surface(&self.tokens)
    }
}

pub fn surface(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && !matches!(t.as_str(), "?" | "." | ",") {
            out.push(' ');
        }
        out.push_str(t);
    }
    let mut cs = out.chars();
    match cs.next() {
        Some(c) => c.to_uppercase().chain(cs).collect(),
        None => out,
    }
}

/// Noun phrase for the non-terminal prefix of a program, without article.
pub fn describe(program: &InstructionProgram) -> Vec<String> {
    let mut np: Vec<String> = vec!["thing".into()];
    for step in &program.steps {
        match step {
            Instruction::Select(c) => np = vec![c.clone()],
            Instruction::FilterAttr { value, .. } => np.insert(0, value.clone()),
            Instruction::Relate {
                predicate,
                direction: Direction::Forward,
            } => {
                let mut next = vec!["thing".to_string(), "the".into()];
                next.extend(np);
                next.push("is".into());
                next.push(predicate.clone());
                np = next;
            }
            Instruction::Relate {
                predicate,
                direction: Direction::Backward,
            } => {
                let mut next = vec!["thing".to_string(), predicate.clone(), "the".into()];
                next.extend(np);
                np = next;
            }
            _ => {}
        }
    }
    np
}

/// English question for a program. The seed only picks between synonymous
/// openers, so the same program and seed always give the same tokens.
pub fn render_question(program: &InstructionProgram, question_id: &str, rng: &mut RngState) -> Question {
    let np = describe(program);
    let w = |s: &str| s.to_string();
    let tokens = match program.terminal() {
        Some(Instruction::QueryAttr(m)) => {
            let opener = if rng.bernoulli(0.5) { "what" } else { "which" };
            let mut t = vec![w(opener), m.clone(), w("is"), w("the")];
            t.extend(np);
            t.push(w("?"));
            t
        }
        Some(Instruction::VerifyAttr { value, .. }) => {
            let mut t = vec![w("is"), w("the")];
            t.extend(np);
            t.push(value.clone());
            t.push(w("?"));
            t
        }
        _ => {
            let article = if rng.bernoulli(0.5) { "a" } else { "any" };
            let mut t = vec![w("is"), w("there"), w(article)];
            t.extend(np);
            t.push(w("?"));
            t
        }
    };
    Question {
        question_id: question_id.to_string(),
        tokens,
        question_type: program.question_type().to_string(),
    }
}
