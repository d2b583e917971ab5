//! CLI command implementations. Every command echoes its configuration and
//! writes deterministic artifacts under the output directory.

use std::path::Path;
use std::time::Instant;

use crate::costmodel::{estimate, measure_peak, sweep_msa, SensorDims};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{build_dataset, ground_truth, scene_for, Split};
use crate::harness::eval::{eval_miou, EvalSpace};
use crate::harness::render::{side_by_side, write_ppm};
use crate::harness::train::{
    bind_groups, load_model, save_model, train_stage_a, train_stage_b, TrainReport, SALT_HEAD,
    SALT_INIT,
};
use crate::restore::{forward_full, neck, ArchConfig, PipelineModel, UpsampleMethod};
use crate::scenegen::{derive_rng, save_map_pgm, CLASS_NAMES};
use crate::tensorcore::fdcheck::random_tensor;
use crate::tensorcore::{Parameter, Tape, Tensor};

fn sensor_dims(cfg: &ExperimentConfig) -> Result<SensorDims> {
    let lr = cfg.lr_scope()?;
    Ok(SensorDims::for_lr_grid(lr.depth(), lr.width(), cfg.camera.img_h, cfg.camera.img_w))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn snapshot(model: &PipelineModel) -> Vec<Parameter> {
    model
        .params()
        .iter()
        .map(|p| Parameter::new(p.name.clone(), p.tensor.clone()))
        .collect()
}

fn train_log_csv(stages: &[(&str, &TrainReport)]) -> String {
    let mut out = String::from("stage,epoch,loss\n");
    for (name, rep) in stages {
        for (e, l) in rep.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{name},{e},{l:.6}\n"));
        }
    }
    out
}

fn eval_csv(per_class: &[f64], miou: f64) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("extra");
        out.push_str(&format!("{name},{iou:.6}\n"));
    }
    out.push_str(&format!("miou,{miou:.6}\n"));
    out
}

/// Write every scene's vector form and high-resolution rasters.
pub fn cmd_gen_scenes(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let total = cfg.dataset.n_train + cfg.dataset.n_val;
    let mut index = String::from("index,seed,split\n");
    for i in 0..total {
        let scene = scene_for(cfg, i)?;
        let split = if i < cfg.dataset.n_train { "train" } else { "val" };
        index.push_str(&format!("{i},{},{split}\n", scene.seed));
        scene.save(&out_dir.join(format!("scene_{i:03}.txt")))?;
        let (hr, _) = ground_truth(cfg, &scene)?;
        save_map_pgm(&hr, out_dir, &format!("scene_{i:03}"))?;
    }
    write_text(&out_dir.join("scenes.csv"), &index)?;
    Ok(format!("wrote {total} scenes to {}", out_dir.display()))
}

/// Full two-stage training run; saves both checkpoints and the loss log.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let start = Instant::now();
    let train = build_dataset(cfg, Split::Train)?;
    let val = build_dataset(cfg, Split::Val)?;
    let mut model =
        PipelineModel::new(cfg.arch.clone(), &mut derive_rng(cfg.dataset.seed, SALT_INIT))?;
    let rep_a = train_stage_a(cfg, &mut model, &train)?;
    save_model(&out_dir.join("stage_a.bin"), &model)?;
    model.reinit_head(cfg.arch.upsample, &mut derive_rng(cfg.dataset.seed, SALT_HEAD));
    let rep_b = train_stage_b(cfg, &mut model, &train)?;
    save_model(&out_dir.join("model.bin"), &model)?;
    write_text(
        &out_dir.join("train_log.csv"),
        &train_log_csv(&[("a", &rep_a), ("b", &rep_b)]),
    )?;
    let ev = eval_miou(cfg, &model, &val, EvalSpace::Hr)?;
    write_text(&out_dir.join("eval.csv"), &eval_csv(&ev.per_class, ev.miou))?;
    Ok(format!(
        "trained in {:.1} s, val mIoU {:.4}",
        start.elapsed().as_secs_f64(),
        ev.miou
    ))
}

/// Evaluate the saved final checkpoint on the validation split.
pub fn cmd_eval(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let val = build_dataset(cfg, Split::Val)?;
    let mut model =
        PipelineModel::new(cfg.arch.clone(), &mut derive_rng(cfg.dataset.seed, SALT_INIT))?;
    load_model(&out_dir.join("model.bin"), &mut model)?;
    let ev = eval_miou(cfg, &model, &val, EvalSpace::Hr)?;
    write_text(&out_dir.join("eval.csv"), &eval_csv(&ev.per_class, ev.miou))?;
    Ok(format!("val mIoU {:.4} ({:.1} s)", ev.miou, ev.wall_secs))
}

pub const COMPARE_METHODS: [UpsampleMethod; 5] = [
    UpsampleMethod::Nearest,
    UpsampleMethod::Bilinear,
    UpsampleMethod::Bicubic,
    UpsampleMethod::Deconvolution,
    UpsampleMethod::Restore,
];

/// Shared stage-A checkpoint, one stage-B run per upsampling method.
pub fn cmd_compare_upsamplers(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let start = Instant::now();
    let train = build_dataset(cfg, Split::Train)?;
    let val = build_dataset(cfg, Split::Val)?;
    let dims = sensor_dims(cfg)?;
    let lr = cfg.lr_scope()?;

    let mut base =
        PipelineModel::new(cfg.arch.clone(), &mut derive_rng(cfg.dataset.seed, SALT_INIT))?;
    train_stage_a(cfg, &mut base, &train)?;
    save_model(&out_dir.join("stage_a.bin"), &base)?;
    let stage_a = snapshot(&base);

    let mut csv = String::from("method,miou,params,act_bytes,flops\n");
    for method in COMPARE_METHODS {
        let arch = ArchConfig { upsample: method, ..cfg.arch.clone() };
        let mut model =
            PipelineModel::new(arch.clone(), &mut derive_rng(cfg.dataset.seed, SALT_HEAD))?;
        model.load_groups(&stage_a, &["encoder", "fuser", "neck", "lr_head"])?;
        train_stage_b(cfg, &mut model, &train)?;
        let ev = eval_miou(cfg, &model, &val, EvalSpace::Hr)?;
        let cost = estimate(&arch, (lr.depth(), lr.width()), &dims, cfg.bytes_per_elem);
        csv.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            method.name(),
            ev.miou,
            cost.totals.params,
            cost.cache.act_bytes,
            cost.totals.flops
        ));
        save_model(&out_dir.join(format!("compare_{}.bin", method.name())), &model)?;
    }
    write_text(&out_dir.join("compare_upsamplers.csv"), &csv)?;
    Ok(format!(
        "compared {} methods in {:.1} s",
        COMPARE_METHODS.len(),
        start.elapsed().as_secs_f64()
    ))
}

pub const SWEEP_SCALES: [usize; 4] = [1, 2, 4, 8];

/// End-to-end training at each restoration factor, plus the
/// restoration-free baseline row.
pub fn cmd_sweep_scale(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let start = Instant::now();
    let mut rows: Vec<(usize, UpsampleMethod)> =
        SWEEP_SCALES.iter().map(|&s| (s, UpsampleMethod::Restore)).collect();
    rows.push((1, UpsampleMethod::None));

    let mut csv = String::from("scale,method,miou,act_bytes,attn_slope_ratio\n");
    for (s, method) in rows {
        let mut c = cfg.clone();
        c.arch.scale = s;
        c.arch.upsample = method;
        // Iso-compute budgets: a factor-s working grid cuts per-epoch cost by
        // roughly s^2 (s^4 in attention), so coarser rows get proportionally
        // more epochs, capped at 4x to bound total runtime. The configured
        // epoch counts apply verbatim to the s = 1 rows.
        let budget = (s * s).min(4);
        c.training.stage_a.epochs = cfg.training.stage_a.epochs * budget;
        c.training.stage_b.epochs = cfg.training.stage_b.epochs * budget;
        c.validate()?;
        let train = build_dataset(&c, Split::Train)?;
        let val = build_dataset(&c, Split::Val)?;
        let mut model =
            PipelineModel::new(c.arch.clone(), &mut derive_rng(c.dataset.seed, SALT_INIT))?;
        train_stage_a(&c, &mut model, &train)?;
        model.reinit_head(method, &mut derive_rng(c.dataset.seed, SALT_HEAD));
        train_stage_b(&c, &mut model, &train)?;
        let ev = eval_miou(&c, &model, &val, EvalSpace::Hr)?;
        let lr = c.lr_scope()?;
        let cost = estimate(
            &c.arch,
            (lr.depth(), lr.width()),
            &sensor_dims(&c)?,
            c.bytes_per_elem,
        );
        csv.push_str(&format!(
            "{s},{},{:.6},{},{}\n",
            method.name(),
            ev.miou,
            cost.cache.act_bytes,
            crate::costmodel::attention_slope_ratio(s)
        ));
    }
    write_text(&out_dir.join("sweep_scale.csv"), &csv)?;
    Ok(format!("scale sweep done in {:.1} s", start.elapsed().as_secs_f64()))
}

pub const SWEEP_MSA_LAYERS: [usize; 5] = [0, 1, 2, 4, 8];

/// Measured peak live bytes of a neck-only forward/backward with `k`
/// attention layers on the given grid.
pub fn measure_neck_peak(arch: &ArchConfig, grid: (usize, usize), layers: usize) -> Result<usize> {
    let mut a = arch.clone();
    a.msa_layers = layers;
    let model = PipelineModel::new(a.clone(), &mut derive_rng(0xF1C, SALT_INIT))?;
    let input = random_tensor(&[grid.0, grid.1, a.c_f], 0x5EED);
    measure_peak(move |mem| {
        let mut tape = Tape::with_tracker(mem);
        let vars = bind_groups(&model, &mut tape, &["neck"]);
        let x = tape.constant(input);
        let out = neck(&mut tape, &vars, &a, x)?;
        let loss = tape.sum(out);
        tape.backward(loss)?;
        Ok(())
    })
}

/// Least-squares slope of y over x.
pub fn slope(points: &[(usize, usize)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let num: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 as f64 - my)).sum();
    let den: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    num / den
}

/// Analytic and measured attention-memory series for restoration-last vs
/// restoration-first orderings.
pub fn cmd_sweep_msa(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let lr = cfg.lr_scope()?;
    let s = cfg.arch.scale;
    let lr_dims = (lr.depth(), lr.width());
    let hr_dims = (lr.depth() * s, lr.width() * s);
    let analytic = sweep_msa(&cfg.arch, lr_dims, &sensor_dims(cfg)?, &SWEEP_MSA_LAYERS);
    let mut csv = String::from(
        "layers,act_last,act_first,attn_last,attn_first,peak_last,peak_first\n",
    );
    for p in &analytic {
        let peak_last = measure_neck_peak(&cfg.arch, lr_dims, p.layers)?;
        let peak_first = measure_neck_peak(&cfg.arch, hr_dims, p.layers)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.layers,
            p.act_restore_last,
            p.act_restore_first,
            p.attn_elems_last,
            p.attn_elems_first,
            peak_last,
            peak_first
        ));
    }
    write_text(&out_dir.join("sweep_msa.csv"), &csv)?;
    Ok(format!("attention sweep over {:?} layers", SWEEP_MSA_LAYERS))
}

/// Analytic cost table for the configured pipeline.
pub fn cmd_cost_report(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let lr = cfg.lr_scope()?;
    let report = estimate(
        &cfg.arch,
        (lr.depth(), lr.width()),
        &sensor_dims(cfg)?,
        cfg.bytes_per_elem,
    );
    write_text(&out_dir.join("cost_report.csv"), &report.to_csv())?;
    Ok(format!(
        "totals: {} params, {} activation bytes, {} flops",
        report.totals.params, report.cache.act_bytes, report.totals.flops
    ))
}

/// Side-by-side ground truth vs prediction for the first validation scene.
pub fn cmd_render(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.echo_to(out_dir)?;
    let val = build_dataset(cfg, Split::Val)?;
    let sample = val
        .samples
        .first()
        .ok_or_else(|| Error::Config("render needs at least one validation scene".into()))?;
    let mut model =
        PipelineModel::new(cfg.arch.clone(), &mut derive_rng(cfg.dataset.seed, SALT_INIT))?;
    load_model(&out_dir.join("model.bin"), &mut model)?;
    let mut tape = Tape::new();
    let vars = bind_groups(&model, &mut tape, &crate::restore::GROUPS);
    let logits = forward_full(&mut tape, &vars, &model.arch, &sample.inputs)?;
    let lv = tape.val(logits);
    let mut pred = Tensor::zeros(lv.shape());
    for (o, &l) in pred.data_mut().iter_mut().zip(lv.data()) {
        *o = if 1.0 / (1.0 + (-l).exp()) > cfg.eval.threshold { 1.0 } else { 0.0 };
    }
    let (h, w, rgb) = side_by_side(&sample.gt_hr, &pred)?;
    write_ppm(&out_dir.join("render.ppm"), h, w, &rgb)?;
    Ok(format!("rendered {}x{} comparison", w, h))
}
