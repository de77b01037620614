//! Cue-stripping of questions by masking attribute tokens or verbs and
//! prepositions, plus the before/after drop table.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer_gen::{score, Prediction, Reference};
use crate::error::{Error, Result};
use crate::worldgen::{QuestionRecord, WorldSchema, MASK};

const VERBS: &str = include_str!("../../data/lexicons/verbs.txt");
const PREPOSITIONS: &str = include_str!("../../data/lexicons/prepositions.txt");
const COPULAS: &str = include_str!("../../data/lexicons/copulas.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Attributes,
    VbPrpn,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Attributes => "attributes",
            Self::VbPrpn => "vb_prpn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(Self::Attributes),
            "vb_prpn" => Ok(Self::VbPrpn),
            other => Err(Error::Config(format!("unknown mask kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueLexicons {
    pub attributes: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    pub copulas: BTreeSet<String>,
    /// Whether copulas count as verbs.
    pub mask_copulas: bool,
}

fn word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#') && l != MASK)
        .collect()
}

impl CueLexicons {
    /// Shipped verb, preposition and copula lists with the schema's
    /// attribute values.
    pub fn for_schema(schema: &WorldSchema) -> Self {
        Self {
            attributes: schema.attribute_lexicon().into_iter().collect(),
            verbs: word_list(VERBS),
            prepositions: word_list(PREPOSITIONS),
            copulas: word_list(COPULAS),
            mask_copulas: false,
        }
    }

    /// Reads `attributes.txt`, `verbs.txt`, `prepositions.txt` and
    /// `copulas.txt` from `dir`, one lowercase token per line.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<BTreeSet<String>> {
            let p = dir.join(name);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            Ok(word_list(&text))
        };
        Ok(Self {
            attributes: read("attributes.txt")?,
            verbs: read("verbs.txt")?,
            prepositions: read("prepositions.txt")?,
            copulas: read("copulas.txt")?,
            mask_copulas: false,
        })
    }

    fn known_verb(&self, stem: &str) -> bool {
        !stem.is_empty() && self.verbs.contains(stem)
    }

    /// Lexicon hit or an inflection (`-ing`, `-ed`, `-s`) of one.
    pub fn is_verb(&self, t: &str) -> bool {
        if self.copulas.contains(t) {
            return self.mask_copulas;
        }
        if self.known_verb(t) {
            return true;
        }
        let undouble = |s: &str| -> Option<String> {
            let b = s.as_bytes();
            (b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2]).then(|| s[..s.len() - 1].to_string())
        };
        for suffix in ["ing", "ed"] {
            if let Some(stem) = t.strip_suffix(suffix) {
                if self.known_verb(stem) || self.known_verb(&format!("{stem}e")) {
                    return true;
                }
                if undouble(stem).is_some_and(|s| self.known_verb(&s)) {
                    return true;
                }
                if let Some(s) = stem.strip_suffix('i') {
                    if self.known_verb(&format!("{s}y")) {
                        return true;
                    }
                }
            }
        }
        if let Some(s) = t.strip_suffix("ies") {
            if self.known_verb(&format!("{s}y")) {
                return true;
            }
        }
        if let Some(s) = t.strip_suffix("es") {
            if self.known_verb(s) {
                return true;
            }
        }
        t.strip_suffix('s').is_some_and(|s| self.known_verb(s))
    }

    pub fn is_preposition(&self, t: &str) -> bool {
        self.prepositions.contains(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedQuestion {
    pub tokens: Vec<String>,
    pub mask_kind: MaskKind,
    pub masked_positions: Vec<usize>,
}

fn mask_where(tokens: &[String], kind: MaskKind, hit: impl Fn(&str) -> bool) -> MaskedQuestion {
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if t != MASK && hit(t) {
            out[i] = MASK.to_string();
            positions.push(i);
        }
    }
    MaskedQuestion {
        tokens: out,
        mask_kind: kind,
        masked_positions: positions,
    }
}

pub fn mask_attributes(tokens: &[String], lex: &CueLexicons) -> MaskedQuestion {
    mask_where(tokens, MaskKind::Attributes, |t| lex.attributes.contains(t))
}

pub fn mask_vb_prpn(tokens: &[String], lex: &CueLexicons) -> MaskedQuestion {
    mask_where(tokens, MaskKind::VbPrpn, |t| lex.is_verb(t) || lex.is_preposition(t))
}

pub fn mask(tokens: &[String], kind: MaskKind, lex: &CueLexicons) -> MaskedQuestion {
    match kind {
        MaskKind::Attributes => mask_attributes(tokens, lex),
        MaskKind::VbPrpn => mask_vb_prpn(tokens, lex),
    }
}

/// Masks the `tokens` field of each JSON object, keeping every other field
/// and adding `mask_kind` and `masked_positions`.
pub fn mask_json_line(line: &str, kind: MaskKind, lex: &CueLexicons) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    let tokens: Vec<String> = serde_json::from_value(
        v.get("tokens")
            .cloned()
            .ok_or_else(|| Error::Data("tokens".into()))?,
    )?;
    let m = mask(&tokens, kind, lex);
    let obj = v.as_object_mut().ok_or_else(|| Error::Data("question record must be an object".into()))?;
    obj.insert("tokens".into(), serde_json::to_value(&m.tokens)?);
    obj.insert("mask_kind".into(), serde_json::to_value(kind)?);
    obj.insert("masked_positions".into(), serde_json::to_value(&m.masked_positions)?);
    Ok(v)
}

/// Accuracy before and after masking, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub mask: String,
    pub subset: String,
    pub n: usize,
    pub from: f64,
    pub to: f64,
    pub drop: f64,
}

impl DropRow {
    pub fn new(mask: &str, subset: &str, n: usize, from: f64, to: f64) -> Self {
        Self {
            mask: mask.into(),
            subset: subset.into(),
            n,
            from,
            to,
            drop: from - to,
        }
    }

    /// `drop (from → to)` with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2} ({:.2} → {:.2})", self.drop, self.from, self.to)
    }
}

impl fmt::Display for DropRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}: {}", self.mask, self.subset, self.cell())
    }
}

/// Subset of questions a drop row is computed over.
pub fn subset_filter(name: &str) -> Result<fn(&QuestionRecord) -> bool> {
    Ok(match name {
        "all" => |_| true,
        "relate" => |q| q.program.has_relate(),
        "attribute" => |q| q.program.has_attribute_value(),
        other => return Err(Error::Config(format!("unknown subset {other}"))),
    })
}

pub fn references(questions: &[QuestionRecord]) -> Vec<Reference> {
    questions
        .iter()
        .map(|q| Reference {
            question_id: q.question_id.clone(),
            question_type: q.question_type.clone(),
            full_answer: q.full_answer.clone(),
            short_answer: q.short_answer.clone(),
        })
        .collect()
}

/// Short-answer accuracy in percent over the questions selected by `keep`.
pub fn subset_accuracy(questions: &[QuestionRecord], predictions: &[Prediction], keep: fn(&QuestionRecord) -> bool) -> Result<(usize, f64)> {
    let ids: BTreeSet<&str> = questions.iter().filter(|q| keep(q)).map(|q| q.question_id.as_str()).collect();
    let qs: Vec<QuestionRecord> = questions.iter().filter(|q| keep(q)).cloned().collect();
    let ps: Vec<Prediction> = predictions
        .iter()
        .filter(|p| ids.contains(p.question_id.as_str()))
        .cloned()
        .collect();
    let m = score(&ps, &references(&qs))?;
    Ok((m.n, 100.0 * m.short_acc))
}

/// Drop table: for each `(mask, subset)` pair, accuracy of `predict` on the
/// subset before and after masking.
pub fn perturbation_report<F>(
    questions: &[QuestionRecord],
    lex: &CueLexicons,
    rows: &[(MaskKind, &str)],
    mut predict: F,
) -> Result<Vec<DropRow>>
where
    F: FnMut(&[QuestionRecord]) -> Result<Vec<Prediction>>,
{
    let clean = predict(questions)?;
    let mut out = Vec::new();
    let mut cache: Vec<(MaskKind, Vec<Prediction>)> = Vec::new();
    for &(kind, subset) in rows {
        let keep = subset_filter(subset)?;
        if !cache.iter().any(|(k, _)| *k == kind) {
            let masked: Vec<QuestionRecord> = questions
                .iter()
                .map(|q| QuestionRecord {
                    tokens: mask(&q.tokens, kind, lex).tokens,
                    ..q.clone()
                })
                .collect();
            cache.push((kind, predict(&masked)?));
        }
        let after = &cache.iter().find(|(k, _)| *k == kind).expect("cached").1;
        let (n, from) = subset_accuracy(questions, &clean, keep)?;
        let (_, to) = subset_accuracy(questions, after, keep)?;
        out.push(DropRow::new(kind.name(), subset, n, from, to));
    }
    Ok(out)
}

pub fn drop_table_csv(rows: &[DropRow]) -> String {
    let mut s = String::from("mask,subset,n,from,to,drop,cell\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2},\"{}\"\n",
            r.mask,
            r.subset,
            r.n,
            r.from,
            r.to,
            r.drop,
            r.cell()
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn lex() -> CueLexicons {
        CueLexicons::for_schema(&WorldSchema::default())
    }

    #[test]
    fn attribute_masking() {
        let m = mask_attributes(&toks("is there a red cube ?"), &lex());
        assert_eq!(m.tokens.join(" "), "is there a [MASK] cube ?");
        assert_eq!(m.masked_positions, vec![3]);
        let plain = toks("is there a dog ?");
        let m = mask_attributes(&plain, &lex());
        assert_eq!(m.tokens, plain);
        assert!(m.masked_positions.is_empty());
        let once = mask_attributes(&toks("is the small cube red ?"), &lex());
        let twice = mask_attributes(&once.tokens, &lex());
        assert_eq!(once.tokens, twice.tokens);
    }

    #[test]
    fn verb_and_preposition_masking() {
        let m = mask_vb_prpn(&toks("what is the girl holding ?"), &lex());
        assert_eq!(m.tokens.join(" "), "what is the girl [MASK] ?");
        let plain = toks("is there a dog ?");
        assert_eq!(mask_vb_prpn(&plain, &lex()).tokens, plain);
        assert_eq!(mask_vb_prpn(&toks("on in at"), &lex()).tokens.join(" "), "[MASK] [MASK] [MASK]");
        let mut with_copulas = lex();
        with_copulas.mask_copulas = true;
        assert_eq!(mask_vb_prpn(&toks("is it"), &with_copulas).tokens[0], MASK);
    }

    #[test]
    fn stem_rules() {
        let l = lex();
        for w in ["holding", "wearing", "riding", "sitting", "carried", "holds", "carries", "used"] {
            assert!(l.is_verb(w), "{w}");
        }
        for w in ["thing", "is", "this", "red", "dog"] {
            assert!(!l.is_verb(w), "{w}");
        }
    }

    #[test]
    fn masks_commute_and_keep_length() {
        let l = lex();
        let q = toks("is the red thing behind the girl holding a small cube ?");
        let ab = mask_vb_prpn(&mask_attributes(&q, &l).tokens, &l).tokens;
        let ba = mask_attributes(&mask_vb_prpn(&q, &l).tokens, &l).tokens;
        assert_eq!(ab, ba);
        assert_eq!(ab.len(), q.len());
        for (a, b) in ab.iter().zip(&q) {
            assert!(a == b || a == MASK);
        }
    }

    #[test]
    fn drop_arithmetic() {
        let r = DropRow::new("vb_prpn", "relate", 10, 54.48, 28.28);
        assert_eq!(r.cell(), "26.20 (54.48 → 28.28)");
        let back = DropRow::new("vb_prpn", "relate", 10, 28.28, 54.48);
        assert!((r.drop + back.drop).abs() < 1e-12);
    }

    #[test]
    fn json_lines_keep_fields() {
        let line = r#"{"question_id":"q","scene_id":"s","tokens":["is","there","a","red","cube","?"],"extra":1}"#;
        let v = mask_json_line(line, MaskKind::Attributes, &lex()).unwrap();
        assert_eq!(v["extra"], 1);
        assert_eq!(v["tokens"][3], MASK);
        assert_eq!(v["mask_kind"], "attributes");
        assert_eq!(v["masked_positions"], serde_json::json!([3]));
    }

    #[test]
    fn shipped_attribute_list_matches_default_schema() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/lexicons");
        let loaded = CueLexicons::load(&dir).unwrap();
        assert_eq!(loaded, lex());
    }

    #[test]
    fn attribute_tokens_iff_value_argument() {
        use crate::worldgen::{build_dataset, GenConfig};
        let d = build_dataset(
            &WorldSchema::default(),
            &GenConfig {
                train: 400,
                valid: 0,
                testdev: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let l = lex();
        for q in &d.train.questions {
            let has_tok = q.tokens.iter().any(|t| l.attributes.contains(t));
            assert_eq!(has_tok, q.program.has_attribute_value(), "{:?}", q.tokens);
        }
    }
}
