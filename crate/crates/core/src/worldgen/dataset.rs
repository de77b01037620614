use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{sample_program_with, sample_scene, Polarity, SceneSampler, TypeMix, WorldSchema};
use crate::answer_gen::render_full_answer;
use crate::error::{Error, Result};
use crate::exec_engine::oracle_execute;
use crate::instruction::{render_question, InstructionProgram};
use crate::nn::RngState;
use crate::scene_graph::SymbolicScene;

pub const SPLITS: [&str; 3] = ["train", "valid", "testdev"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// Question counts per split.
    pub train: usize,
    pub valid: usize,
    pub testdev: usize,
    pub questions_per_scene: usize,
    pub max_steps: usize,
    /// Upper bound on the share of either answer among yes/no questions.
    pub answer_cap: f64,
    pub scene: SceneSampler,
    pub mix: TypeMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 2000,
            valid: 500,
            testdev: 500,
            questions_per_scene: 4,
            max_steps: 5,
            answer_cap: 0.6,
            scene: SceneSampler::default(),
            mix: TypeMix::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub scene_id: String,
    pub question_type: String,
    pub tokens: Vec<String>,
    pub program: InstructionProgram,
    pub short_answer: String,
    pub full_answer: Vec<String>,
    /// Oracle active set after each step, indexed like `scene.objects`.
    pub bitmaps: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub scenes: Vec<SymbolicScene>,
    pub questions: Vec<QuestionRecord>,
}

impl Split {
    pub fn scene_of(&self, q: &QuestionRecord) -> Option<&SymbolicScene> {
        self.scenes.iter().find(|s| s.scene_id == q.scene_id)
    }

    /// Scenes in the order of `questions`, resolved once.
    pub fn scene_indices(&self) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&str, usize> =
            self.scenes.iter().enumerate().map(|(i, s)| (s.scene_id.as_str(), i)).collect();
        self.questions
            .iter()
            .map(|q| {
                index
                    .get(q.scene_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("question {} refers to unknown scene {}", q.question_id, q.scene_id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: WorldSchema,
    pub train: Split,
    pub valid: Split,
    pub testdev: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "testdev" => Ok(&self.testdev),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Default)]
struct Balance {
    yes: usize,
    no: usize,
}

impl Balance {
    fn polarity(&self, cap: f64) -> Polarity {
        let n = (self.yes + self.no + 1) as f64;
        if (self.yes + 1) as f64 > cap * n {
            Polarity::Negative
        } else if (self.no + 1) as f64 > cap * n {
            Polarity::Positive
        } else {
            Polarity::Sampled
        }
    }

    fn record(&mut self, answer: &str) {
        match answer {
            "yes" => self.yes += 1,
            "no" => self.no += 1,
            _ => {}
        }
    }
}

fn build_split(schema: &WorldSchema, cfg: &GenConfig, name: &str, count: usize) -> Result<Split> {
    let mut split = Split::default();
    let mut balance = Balance::default();
    let mut k = 0;
    while split.questions.len() < count {
        let scene_id = format!("{name}-s{k:05}");
        let mut rng = RngState::derive(cfg.seed, &scene_id);
        let scene = sample_scene(schema, &mut rng, &cfg.scene, &scene_id);
        let want = cfg.questions_per_scene.min(count - split.questions.len());
        let mut seen = BTreeSet::new();
        let mut made = 0;
        for _ in 0..want * 8 {
            if made == want {
                break;
            }
            let (program, ok) =
                sample_program_with(&scene, schema, &mut rng, &cfg.mix, cfg.max_steps, balance.polarity(cfg.answer_cap));
            if !ok || !seen.insert(program.canonical()) {
                continue;
            }
            let result = oracle_execute(&scene, &program, schema)?;
            let full = render_full_answer(&program, &result, &scene);
            if full.short_answer != result.short_answer {
                return Err(Error::Data(format!(
                    "template answer {} disagrees with oracle {} for {:?}",
                    full.short_answer,
                    result.short_answer,
                    program.canonical()
                )));
            }
            let qid = format!("{scene_id}-q{made}");
            let question = render_question(&program, &qid, &mut rng);
            balance.record(&result.short_answer);
            split.questions.push(QuestionRecord {
                question_id: qid,
                scene_id: scene_id.clone(),
                question_type: question.question_type,
                tokens: question.tokens,
                program,
                short_answer: result.short_answer,
                full_answer: full.tokens,
                bitmaps: result.bitmaps,
            });
            made += 1;
        }
        if made > 0 {
            split.scenes.push(scene);
        }
        k += 1;
    }
    Ok(split)
}

/// Generates all three splits. Scene ids carry the split name, so splits
/// never share a scene.
pub fn build_dataset(schema: &WorldSchema, cfg: &GenConfig) -> Result<Dataset> {
    schema.validate()?;
    if cfg.scene.max_objects == 0 || cfg.scene.min_objects == 0 || cfg.scene.min_objects > cfg.scene.max_objects {
        return Err(Error::Config(format!(
            "object range [{}, {}] is empty",
            cfg.scene.min_objects, cfg.scene.max_objects
        )));
    }
    if cfg.max_steps < 2 {
        return Err(Error::Config("max_steps must be at least 2".into()));
    }
    Ok(Dataset {
        schema: schema.clone(),
        train: build_split(schema, cfg, "train", cfg.train)?,
        valid: build_split(schema, cfg, "valid", cfg.valid)?,
        testdev: build_split(schema, cfg, "testdev", cfg.testdev)?,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Writes `schema.json` plus `<split>_scenes.jsonl` and
/// `<split>_questions.jsonl` for every split.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&data.schema)? + "\n")?;
    for name in SPLITS {
        let split = data.split(name)?;
        write_jsonl(&dir.join(format!("{name}_scenes.jsonl")), &split.scenes)?;
        write_jsonl(&dir.join(format!("{name}_questions.jsonl")), &split.questions)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema = WorldSchema::load(&dir.join("schema.json"))?;
    let load = |name: &str| -> Result<Split> {
        let split = Split {
            scenes: read_jsonl(&dir.join(format!("{name}_scenes.jsonl")))?,
            questions: read_jsonl(&dir.join(format!("{name}_questions.jsonl")))?,
        };
        for s in &split.scenes {
            s.validate(&schema)?;
        }
        split.scene_indices()?;
        Ok(split)
    };
    Ok(Dataset {
        train: load("train")?,
        valid: load("valid")?,
        testdev: load("testdev")?,
        schema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            train: 120,
            valid: 40,
            testdev: 40,
            ..Default::default()
        }
    }

    #[test]
    fn exact_counts_and_disjoint_scenes() {
        let d = build_dataset(&WorldSchema::default(), &small()).unwrap();
        assert_eq!(d.train.questions.len(), 120);
        assert_eq!(d.valid.questions.len(), 40);
        assert_eq!(d.testdev.questions.len(), 40);
        let ids = |s: &Split| s.scenes.iter().map(|x| x.scene_id.clone()).collect::<BTreeSet<_>>();
        assert!(ids(&d.train).is_disjoint(&ids(&d.valid)));
        assert!(ids(&d.train).is_disjoint(&ids(&d.testdev)));
        assert!(ids(&d.valid).is_disjoint(&ids(&d.testdev)));
    }

    #[test]
    fn yes_no_balance_respects_cap() {
        let d = build_dataset(&WorldSchema::default(), &small()).unwrap();
        for split in [&d.train, &d.valid, &d.testdev] {
            let yes = split.questions.iter().filter(|q| q.short_answer == "yes").count();
            let no = split.questions.iter().filter(|q| q.short_answer == "no").count();
            let n = (yes + no) as f64;
            assert!(yes as f64 <= 0.6 * n + 1.0 && no as f64 <= 0.6 * n + 1.0, "{yes} {no}");
        }
    }

    #[test]
    fn round_trip_through_files() {
        let d = build_dataset(&WorldSchema::default(), &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn rejects_empty_object_range() {
        let mut cfg = small();
        cfg.scene.max_objects = 0;
        assert!(matches!(build_dataset(&WorldSchema::default(), &cfg), Err(Error::Config(_))));
    }
}
