use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Mode, PipelineConfig};
use crate::answer_gen::AnswerDecoder;
use crate::error::{Error, Result};
use crate::exec_engine::ExecEngine;
use crate::instruction::{InstructionDecoder, QuestionParser};
use crate::nn::checkpoint::{read_archive, write_archive};
use crate::nn::{ParamStore, RngState};
use crate::scene_graph::{SceneEncoder, SceneGraphHeads};
use crate::worldgen::{Vocab, WorldSchema};

const FORMAT: &str = "lrta-model/1";

/// All four modules with their shared parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub schema: WorldSchema,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: SceneEncoder,
    pub heads: SceneGraphHeads,
    pub parser: QuestionParser,
    pub instruction_decoder: InstructionDecoder,
    pub engine: ExecEngine,
    pub answer: AnswerDecoder,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, schema: &WorldSchema) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        let vocab = schema.vocab();
        let mut store = ParamStore::new();
        let mut rng = RngState::derive(cfg.seed, "init");
        let d = cfg.dim;
        let encoder = SceneEncoder::new(&mut store, "look.embed", schema, d, &mut rng);
        let heads = SceneGraphHeads::new(&mut store, "look.heads", schema, d, &mut rng);
        let parser = QuestionParser::new(&mut store, "read.parser", &vocab, d, cfg.read.clone(), &mut rng);
        let instruction_decoder =
            InstructionDecoder::new(&mut store, "read.text", &vocab, d, cfg.read.max_text_len, &mut rng);
        let engine = ExecEngine::with_depth(&mut store, "think", d, cfg.engine_hidden, cfg.engine_layers, &mut rng);
        let answer = AnswerDecoder::new(&mut store, "answer", &vocab, d, cfg.answer.clone(), &mut rng);
        if cfg.mode == Mode::VisualOracle {
            store.set_frozen_prefix("look.heads", true);
        }
        Ok(Self {
            cfg: cfg.clone(),
            schema: schema.clone(),
            vocab,
            store,
            encoder,
            heads,
            parser,
            instruction_decoder,
            engine,
            answer,
        })
    }

    fn manifest(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format": FORMAT,
            "schema_fingerprint": self.schema.fingerprint(),
            "schema": self.schema,
            "config": self.cfg,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let w = BufWriter::new(fs::File::create(path)?);
        write_archive(w, &self.manifest()?, &self.store)?;
        Ok(())
    }

    /// Loads a checkpoint; `world` must match the schema it was trained on.
    pub fn load(path: &Path, world: &WorldSchema) -> Result<Self> {
        let r = BufReader::new(fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        let archive = read_archive(r)?;
        let m = &archive.manifest;
        if m["format"] != FORMAT {
            return Err(Error::Version(format!("checkpoint format {}", m["format"])));
        }
        let stored = m["schema_fingerprint"].as_str().unwrap_or_default();
        if stored != world.fingerprint() {
            return Err(Error::Version(format!(
                "checkpoint schema {stored} does not match world {}",
                world.fingerprint()
            )));
        }
        let cfg: PipelineConfig = serde_json::from_value(m["config"].clone())?;
        let mut model = Self::new(&cfg, world)?;
        model.store.load_values(&archive.tensors)?;
        Ok(model)
    }
}
