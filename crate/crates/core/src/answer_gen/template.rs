use serde::{Deserialize, Serialize};

use crate::exec_engine::OracleResult;
use crate::instruction::{describe, Instruction, InstructionProgram};
use crate::scene_graph::SymbolicScene;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullAnswer {
    pub tokens: Vec<String>,
    pub short_answer: String,
}

impl FullAnswer {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let short_answer = short_answer_of(&tokens);
        Self {
            tokens,
            short_answer,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// First template slot: a leading `yes`/`no`, otherwise the value right
/// before the closing period of `the <m> of the <np> is <value> .`.
pub fn short_answer_of(tokens: &[String]) -> String {
    match tokens.first().map(|s| s.as_str()) {
        Some(t @ ("yes" | "no")) => t.to_string(),
        Some(_) => {
            let body = match tokens.last().map(|s| s.as_str()) {
                Some(".") => &tokens[..tokens.len() - 1],
                _ => tokens,
            };
            body.last().cloned().unwrap_or_default()
        }
        None => String::new(),
    }
}

pub fn render_full_answer(program: &InstructionProgram, result: &OracleResult, _scene: &SymbolicScene) -> FullAnswer {
    let desc = describe(program);
    let w = |s: &str| s.to_string();
    let yes = result.short_answer == "yes";
    let mut t: Vec<String> = Vec::new();
    match program.terminal() {
        Some(Instruction::QueryAttr(m)) => {
            t.extend([w("the"), m.clone(), w("of"), w("the")]);
            t.extend(desc);
            t.extend([w("is"), result.short_answer.clone(), w(".")]);
        }
        Some(Instruction::VerifyAttr { value, .. }) => {
            if yes {
                t.extend([w("yes"), w(","), w("the")]);
                t.extend(desc);
                t.extend([w("is"), value.clone(), w(".")]);
            } else {
                t.extend([w("no"), w(","), w("the")]);
                t.extend(desc);
                t.extend([w("is"), w("not"), value.clone(), w(".")]);
            }
        }
        _ => {
            if yes {
                t.extend([w("yes"), w(","), w("there"), w("is"), w("a")]);
            } else {
                t.extend([w("no"), w(","), w("there"), w("is"), w("no")]);
            }
            t.extend(desc);
            t.push(w("."));
        }
    }
    FullAnswer {
        short_answer: short_answer_of(&t),
        tokens: t,
    }
}
