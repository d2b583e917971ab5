//! Global-count mIoU evaluation.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::Dataset;
use crate::harness::train::bind_groups;
use crate::restore::{decode_lr, forward_full, forward_to_neck, PipelineModel, GROUPS};
use crate::tensorcore::Tape;

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_class: Vec<f64>,
    pub miou: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSpace {
    /// Full pipeline against high-resolution ground truth.
    Hr,
    /// Pre-restore features through the LR head against LR labels.
    Lr,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// IoU per class over dataset-global intersection/union counts; a class
/// absent from both prediction and ground truth scores 1.
pub fn eval_miou(
    cfg: &ExperimentConfig,
    model: &PipelineModel,
    ds: &Dataset,
    space: EvalSpace,
) -> Result<EvalResult> {
    let classes = model.arch.classes;
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let start = Instant::now();
    let arch = model.arch.clone();
    for sample in &ds.samples {
        let mut tape = Tape::new();
        let vars = bind_groups(model, &mut tape, &GROUPS);
        let (logits, gt) = match space {
            EvalSpace::Hr => {
                (forward_full(&mut tape, &vars, &arch, &sample.inputs)?, &sample.gt_hr)
            }
            EvalSpace::Lr => {
                let feat = forward_to_neck(&mut tape, &vars, &arch, &sample.inputs)?;
                (decode_lr(&mut tape, &vars, feat)?, &sample.gt_lr)
            }
        };
        let lv = tape.val(logits);
        if lv.shape() != gt.shape() {
            return Err(Error::Config(format!(
                "prediction {:?} vs ground truth {:?}: model and dataset scopes disagree",
                lv.shape(),
                gt.shape()
            )));
        }
        for (i, (&l, &t)) in lv.data().iter().zip(gt.data()).enumerate() {
            let c = i % classes;
            let p = sigmoid(l) > cfg.eval.threshold;
            let g = t > 0.5;
            if p && g {
                inter[c] += 1;
            }
            if p || g {
                union[c] += 1;
            }
        }
    }
    let per_class: Vec<f64> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .collect();
    let miou = per_class.iter().sum::<f64>() / classes as f64;
    Ok(EvalResult { per_class, miou, wall_secs: start.elapsed().as_secs_f64() })
}
