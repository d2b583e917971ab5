//! Two-stage training: stage A supervises the low-resolution pipeline
//! through a temporary LR head; stage B freezes everything before the
//! restoration stage and fine-tunes restoration plus decoder at high
//! resolution.
//!
//! Because the pre-restore groups are frozen in stage B, their output per
//! sample is constant; it is computed once and cached, which makes stage B
//! independent of encoder cost.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::Dataset;
use crate::restore::{
    decode, decode_lr, forward_to_neck, restore, BoundVars, PipelineModel,
};
use crate::scenegen::derive_rng;
use crate::tensorcore::checkpoint;
use crate::tensorcore::{Adam, Tape};

const SALT_EPOCH_A: u64 = 0xA000;
const SALT_EPOCH_B: u64 = 0xB000;
pub const SALT_INIT: u64 = 0x1717;
pub const SALT_HEAD: u64 = 0x4EAD;

/// Groups frozen during stage B (everything before restoration, plus the
/// retired stage-A head).
pub const PRE_RESTORE_GROUPS: [&str; 3] = ["encoder", "fuser", "neck"];

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn improved(&self) -> bool {
        match (self.epoch_losses.first(), self.epoch_losses.last()) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        }
    }
}

pub fn bind_groups(model: &PipelineModel, tape: &mut Tape, groups: &[&str]) -> BoundVars {
    let mut vars = BoundVars::new();
    for &g in groups {
        if let Some(ps) = model.groups.get(g) {
            for p in ps {
                vars.insert(p.name.clone(), tape.leaf(p.tensor.clone(), p.trainable));
            }
        }
    }
    vars
}

fn accumulate(
    acc: &mut HashMap<String, Vec<f64>>,
    vars: &BoundVars,
    grads: &crate::tensorcore::tape::Grads,
    scale: f64,
) {
    for (name, &var) in vars {
        let g = grads.of(var);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(&g) {
            *s += v * scale;
        }
    }
}

fn numeric_context(e: Error, stage: &str, step: usize, lr: f64) -> Error {
    match e {
        Error::Numeric(msg) => {
            Error::Numeric(format!("{stage} step {step} (lr {lr}): {msg}"))
        }
        other => other,
    }
}

fn check_finite(loss: f64, stage: &str, step: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{stage} loss became non-finite at step {step} (lr {lr}); aborting"
        )))
    }
}

/// Stage A: train encoder, fuser, neck, and the temporary LR head against
/// low-resolution labels.
pub fn train_stage_a(
    cfg: &ExperimentConfig,
    model: &mut PipelineModel,
    train: &Dataset,
) -> Result<TrainReport> {
    for g in ["restore", "decoder"] {
        model.set_group_trainable(g, false)?;
    }
    for g in ["encoder", "fuser", "neck", "lr_head"] {
        model.set_group_trainable(g, true)?;
    }
    let stage = cfg.training.stage_a;
    let mut opt = Adam::new(stage.lr);
    let mut losses = Vec::with_capacity(stage.epochs);
    let mut step = 0usize;
    let arch = model.arch.clone();
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(&mut derive_rng(cfg.dataset.seed, SALT_EPOCH_A + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.training.batch) {
            let mut gacc: HashMap<String, Vec<f64>> = HashMap::new();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let sample = &train.samples[i];
                let mut tape = Tape::new();
                let vars =
                    bind_groups(model, &mut tape, &["encoder", "fuser", "neck", "lr_head"]);
                let feat = forward_to_neck(&mut tape, &vars, &arch, &sample.inputs)?;
                let logits = decode_lr(&mut tape, &vars, feat)?;
                let loss = tape
                    .sigmoid_focal_loss(logits, &sample.gt_lr, cfg.loss.gamma, cfg.loss.alpha)
                    .map_err(|e| numeric_context(e, "stage A", step, stage.lr))?;
                let lv = tape.val(loss).item()?;
                check_finite(lv, "stage A", step, stage.lr)?;
                batch_loss += lv;
                let grads = tape.backward(loss)?;
                accumulate(&mut gacc, &vars, &grads, 1.0 / chunk.len() as f64);
            }
            let mut params = model.params_mut();
            opt.step(&mut params, &gacc)?;
            step += 1;
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainReport { epoch_losses: losses })
}

/// Stage B: freeze everything before restoration, cache the frozen LR
/// features, and train restoration + decoder against high-resolution labels.
pub fn train_stage_b(
    cfg: &ExperimentConfig,
    model: &mut PipelineModel,
    train: &Dataset,
) -> Result<TrainReport> {
    for g in PRE_RESTORE_GROUPS {
        model.set_group_trainable(g, false)?;
    }
    model.set_group_trainable("lr_head", false)?;
    for g in ["restore", "decoder"] {
        model.set_group_trainable(g, true)?;
    }
    let pre_hashes: Vec<(String, u64)> = PRE_RESTORE_GROUPS
        .iter()
        .map(|&g| (g.to_string(), model.group_hash(g)))
        .collect();

    // Frozen groups make the pre-restore features constant per sample.
    let arch = model.arch.clone();
    let mut cached = Vec::with_capacity(train.samples.len());
    for sample in &train.samples {
        let mut tape = Tape::new();
        let vars = bind_groups(model, &mut tape, &PRE_RESTORE_GROUPS);
        let feat = forward_to_neck(&mut tape, &vars, &arch, &sample.inputs)?;
        cached.push(tape.val(feat).clone());
    }

    let stage = cfg.training.stage_b;
    let mut opt = Adam::new(stage.lr);
    let mut losses = Vec::with_capacity(stage.epochs);
    let mut step = 0usize;
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(&mut derive_rng(cfg.dataset.seed, SALT_EPOCH_B + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.training.batch) {
            let mut gacc: HashMap<String, Vec<f64>> = HashMap::new();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let sample = &train.samples[i];
                let mut tape = Tape::new();
                let vars = bind_groups(model, &mut tape, &["restore", "decoder"]);
                let feat = tape.constant(cached[i].clone());
                let hr = restore(&mut tape, &vars, &arch, feat)?;
                let logits = decode(&mut tape, &vars, hr)?;
                if tape.val(logits).shape() != sample.gt_hr.shape() {
                    return Err(Error::Config(format!(
                        "stage B emits {:?}, ground truth is {:?}",
                        tape.val(logits).shape(),
                        sample.gt_hr.shape()
                    )));
                }
                let loss = tape
                    .sigmoid_focal_loss(logits, &sample.gt_hr, cfg.loss.gamma, cfg.loss.alpha)
                    .map_err(|e| numeric_context(e, "stage B", step, stage.lr))?;
                let lv = tape.val(loss).item()?;
                check_finite(lv, "stage B", step, stage.lr)?;
                batch_loss += lv;
                let grads = tape.backward(loss)?;
                accumulate(&mut gacc, &vars, &grads, 1.0 / chunk.len() as f64);
            }
            let mut params = model.params_mut();
            opt.step(&mut params, &gacc)?;
            step += 1;
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }

    for (g, before) in &pre_hashes {
        if model.group_hash(g) != *before {
            return Err(Error::Usage(format!("frozen group '{g}' changed during stage B")));
        }
    }
    Ok(TrainReport { epoch_losses: losses })
}

pub fn save_model(path: &Path, model: &PipelineModel) -> Result<()> {
    checkpoint::save(path, &model.params())
}

pub fn load_model(path: &Path, model: &mut PipelineModel) -> Result<()> {
    model.load_values(&checkpoint::load(path)?)
}
