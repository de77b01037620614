use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_split, example_loss, Ablation, LossParts, Model, PipelineConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, Optimizer, RngState};
use crate::worldgen::{Dataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-question means.
    pub loss: LossParts,
    pub valid_short_acc: f64,
    pub valid_full_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// `0` when no epoch improved on the initial model.
    pub best_epoch: usize,
    pub best_valid_short_acc: f64,
}

impl TrainLog {
    /// The log with timing removed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut l = self.clone();
        l.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
        l
    }
}

/// Mean losses of one pass over `split` with the parameters frozen in place.
pub fn mean_loss(model: &Model, split: &Split, epoch: usize, gold_feed: bool) -> Result<LossParts> {
    let idx = split.scene_indices()?;
    let mut acc = LossParts::default();
    let n = split.questions.len().max(1) as f64;
    for (q, &s) in split.questions.iter().zip(&idx) {
        let mut rng = RngState::derive(model.cfg.seed, &format!("train/{epoch}/{}", q.question_id));
        let mut g = Graph::new(&model.store);
        let l = example_loss(model, &mut g, &split.scenes[s], q, &mut rng, gold_feed)?;
        acc.add_scaled(&l.parts, 1.0 / n);
    }
    Ok(acc)
}

/// Learning-rate multiplier for a 1-based epoch.
pub fn lr_factor(cfg: &PipelineConfig, epoch: usize) -> f64 {
    if cfg.epochs < 2 {
        return 1.0;
    }
    let t = (epoch.saturating_sub(1)) as f64 / (cfg.epochs - 1) as f64;
    1.0 - (1.0 - cfg.lr_final_fraction) * t.min(1.0)
}

/// Runs `cfg.epochs` epochs of minibatch training on `data.train` and
/// returns the parameters with the best validation short-answer accuracy.
pub fn train(cfg: &PipelineConfig, data: &Dataset) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(cfg, &data.schema)?;
    train_model(&mut model, data)
}

pub fn train_model(model: &mut Model, data: &Dataset) -> Result<(Model, TrainLog)> {
    train_model_with(model, data, &mut |_| {})
}

/// As [`train_model`], calling `on_epoch` after every epoch.
pub fn train_model_with(
    model: &mut Model,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Model, TrainLog)> {
    let cfg = model.cfg.clone();
    let split = &data.train;
    let idx = split.scene_indices()?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.store);
    let mut best = model.clone();
    let mut best_score = (-1.0, -1.0);
    let mut log = TrainLog {
        mode: cfg.mode.name().into(),
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_short_acc: 0.0,
    };
    if !data.valid.questions.is_empty() {
        let m = evaluate_split(model, &data.valid, "valid", Ablation::None)?;
        best_score = (m.short_acc, m.full_acc);
        log.best_valid_short_acc = m.short_acc;
    }
    let n = split.questions.len();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let gold_feed = epoch <= cfg.curriculum_epochs;
        opt.config.learning_rate = cfg.optimizer.learning_rate * lr_factor(&cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        RngState::derive(cfg.seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut sums = LossParts::default();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let q = &split.questions[i];
                let mut rng = RngState::derive(cfg.seed, &format!("train/{epoch}/{}", q.question_id));
                let mut g = Graph::new(&model.store);
                let l = example_loss(model, &mut g, &split.scenes[idx[i]], q, &mut rng, gold_feed)?;
                if !l.parts.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                let grads = g.backward(l.total)?;
                drop(g);
                model.store.accumulate(&grads, scale);
                sums.add_scaled(&l.parts, 1.0 / n as f64);
            }
            opt.step(&mut model.store).map_err(|_| Error::NonFiniteLoss { epoch, batch })?;
        }
        let (vs, vf) = if data.valid.questions.is_empty() {
            (0.0, 0.0)
        } else {
            let m = evaluate_split(model, &data.valid, "valid", Ablation::None)?;
            (m.short_acc, m.full_acc)
        };
        if (vs, vf) > best_score {
            best_score = (vs, vf);
            best = model.clone();
            log.best_epoch = epoch;
            log.best_valid_short_acc = vs;
        }
        let e = EpochLog {
            epoch,
            loss: sums,
            valid_short_acc: vs,
            valid_full_acc: vf,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        log.epochs.push(e);
    }
    if data.valid.questions.is_empty() {
        best = model.clone();
        log.best_epoch = cfg.epochs;
    }
    Ok((best, log))
}

/// Trains and writes `model.ckpt` and `train_log.json` into `out_dir`.
pub fn train_to_dir(
    cfg: &PipelineConfig,
    data: &Dataset,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(cfg, &data.schema)?;
    let (model, log) = train_model_with(&mut model, data, on_epoch)?;
    std::fs::create_dir_all(out_dir)?;
    model.save(&out_dir.join("model.ckpt"))?;
    std::fs::write(out_dir.join("train_log.json"), serde_json::to_string_pretty(&log)? + "\n")?;
    Ok((model, log))
}
