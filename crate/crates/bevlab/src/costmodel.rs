//! Analytic parameter / activation / flop accounting for the pipeline,
//! mirrored against measured live-tensor peaks.
//!
//! The accounting walks the same layer inventory the model builder uses, so
//! per-stage parameter counts are exact. Activation counts cover every
//! intermediate tensor a forward pass materializes; the cache row aggregates
//! them, which is the quantity that diverges when attention runs on the
//! high-resolution grid.

use std::cell::RefCell;
use std::rc::Rc;

use serde::Serialize;

use crate::error::Result;
use crate::restore::{ArchConfig, RestoreWidth, UpsampleMethod};
use crate::tensorcore::{MemCounter, SharedMemCounter};

/// Input raster sizes feeding the encoders. The voxel grid runs at twice the
/// working BEV resolution.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SensorDims {
    pub voxel_d: usize,
    pub voxel_w: usize,
    pub img_h: usize,
    pub img_w: usize,
}

impl SensorDims {
    pub fn for_lr_grid(lr_d: usize, lr_w: usize, img_h: usize, img_w: usize) -> Self {
        SensorDims { voxel_d: 2 * lr_d, voxel_w: 2 * lr_w, img_h, img_w }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub stage: String,
    pub params: usize,
    pub act_elems: usize,
    pub act_bytes: usize,
    pub flops: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    /// encoder (sensors + view transform + fusion), neck, restore, decoder.
    pub rows: Vec<CostRow>,
    /// Activation aggregate: tensors a forward pass keeps alive, excluding
    /// model weights.
    pub cache: CostRow,
    pub totals: CostRow,
    pub bytes_per_elem: usize,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    params: usize,
    act: usize,
    flops: usize,
}

impl Acc {
    /// 3x3-style conv layer: `relu` adds a second activation buffer.
    fn conv(&mut self, kh: usize, kw: usize, cin: usize, cout: usize, ho: usize, wo: usize, relu: bool) {
        self.params += kh * kw * cin * cout + cout;
        self.flops += 2 * kh * kw * cin * cout * ho * wo;
        self.act += ho * wo * cout * if relu { 2 } else { 1 };
    }

    fn row(self, stage: &str, bytes_per_elem: usize) -> CostRow {
        CostRow {
            stage: stage.into(),
            params: self.params,
            act_elems: self.act,
            act_bytes: self.act * bytes_per_elem,
            flops: self.flops,
        }
    }
}

/// Output edge of a stride-`s` pad-1 3x3 conv.
fn conv_out(h: usize, s: usize) -> usize {
    (h + 2 - 3) / s + 1
}

/// Elements of the per-head attention matrices for one layer on an `hw`-token
/// grid. This is the term whose growth rate scales with the fourth power of
/// the restoration factor.
pub fn attention_matrix_elems(hw: usize, heads: usize) -> usize {
    heads * hw * hw
}

/// Full activation footprint of one attention layer: attention matrices plus
/// the q, k, v and output token maps.
pub fn msa_layer_act(hw: usize, c: usize, heads: usize) -> usize {
    attention_matrix_elems(hw, heads) + 4 * hw * c
}

pub fn msa_layer_params(c: usize) -> usize {
    4 * (c * c + c)
}

pub fn msa_layer_flops(hw: usize, c: usize) -> usize {
    // 4 1x1 projections + QK^T + AV.
    4 * 2 * hw * c * c + 4 * hw * hw * c
}

/// Predicted attention-activation growth ratio between a grid restored by
/// factor `s` and the unrestored grid.
pub fn attention_slope_ratio(s: usize) -> usize {
    s * s * s * s
}

fn encoder_acc(arch: &ArchConfig, lr: (usize, usize), sensors: &SensorDims) -> Acc {
    let mut a = Acc::default();
    let (d, w) = lr;
    // LiDAR pillars: strides 1, 2, 1 from the double-resolution voxel grid.
    let (vd, vw) = (sensors.voxel_d, sensors.voxel_w);
    a.conv(3, 3, 2 * arch.z_bins, arch.c_p, vd, vw, true);
    a.conv(3, 3, arch.c_p, arch.c_p, conv_out(vd, 2), conv_out(vw, 2), true);
    a.conv(3, 3, arch.c_p, arch.c_p, conv_out(vd, 2), conv_out(vw, 2), true);
    // Camera: strides 2, 2, 1 down to the feature grid.
    let (h1, w1) = (conv_out(sensors.img_h, 2), conv_out(sensors.img_w, 2));
    let (h2, w2) = (conv_out(h1, 2), conv_out(w1, 2));
    a.conv(3, 3, 3, arch.c_i, h1, w1, true);
    a.conv(3, 3, arch.c_i, arch.c_i, h2, w2, true);
    a.conv(3, 3, arch.c_i, arch.c_i + arch.depth_bins, h2, w2, false);
    // Split + relu on the feature half.
    a.act += h2 * w2 * (2 * arch.c_i + arch.depth_bins);
    // View transform: depth softmax weights plus the splatted BEV grid.
    let b = arch.depth_bins;
    a.act += h2 * w2 * b + d * w * arch.c_i;
    a.flops += h2 * w2 * b * (5 + 2 * arch.c_i);
    // Fusion: concat buffer + 3x3 conv + relu.
    a.act += d * w * (arch.c_p + arch.c_i);
    a.conv(3, 3, arch.c_p + arch.c_i, arch.c_f, d, w, true);
    a
}

fn neck_acc(arch: &ArchConfig, lr: (usize, usize)) -> Acc {
    let mut a = Acc::default();
    let (d, w) = lr;
    a.conv(3, 3, arch.c_f, arch.c, d, w, true);
    a.conv(3, 3, arch.c, arch.c, d, w, false);
    // residual add + relu
    a.act += 2 * d * w * arch.c;
    let hw = d * w;
    a.params += arch.msa_layers * msa_layer_params(arch.c);
    a.act += arch.msa_layers * msa_layer_act(hw, arch.c, arch.heads);
    a.flops += arch.msa_layers * msa_layer_flops(hw, arch.c);
    a
}

fn restore_acc(arch: &ArchConfig, lr: (usize, usize)) -> Acc {
    let mut a = Acc::default();
    let (d, w) = lr;
    let s = arch.scale;
    match arch.upsample {
        UpsampleMethod::Restore => {
            a.conv(3, 3, arch.c, arch.c, d, w, true);
            let kb = match arch.restore_width {
                RestoreWidth::Normal => 3,
                RestoreWidth::Small => 1,
            };
            // bias-free expansion conv
            a.conv(kb, kb, arch.c, s * s * arch.c, d, w, false);
            a.params -= s * s * arch.c;
            // shuffle output
            a.act += s * d * s * w * arch.c;
        }
        UpsampleMethod::Deconvolution => {
            a.conv(3, 3, arch.c, arch.c, d, w, true);
            a.params += s * s * arch.c * arch.c;
            a.flops += 2 * s * s * arch.c * arch.c * d * w;
            a.act += s * d * s * w * arch.c;
        }
        UpsampleMethod::Nearest | UpsampleMethod::Bilinear | UpsampleMethod::Bicubic => {
            let taps = match arch.upsample {
                UpsampleMethod::Nearest => 1,
                UpsampleMethod::Bilinear => 2,
                _ => 4,
            };
            a.act += s * d * s * w * arch.c;
            a.flops += 2 * taps * taps * s * d * s * w * arch.c;
        }
        UpsampleMethod::None => {}
    }
    a
}

fn decoder_acc(arch: &ArchConfig, lr: (usize, usize)) -> Acc {
    let mut a = Acc::default();
    let s = if arch.upsample == UpsampleMethod::None { 1 } else { arch.scale };
    let (d, w) = (lr.0 * s, lr.1 * s);
    a.conv(3, 3, arch.c, arch.c, d, w, true);
    a.conv(3, 3, arch.c, arch.classes, d, w, false);
    a
}

/// Analytic cost of the deployed pipeline (the low-resolution training head
/// is not part of it).
pub fn estimate(
    arch: &ArchConfig,
    lr_dims: (usize, usize),
    sensors: &SensorDims,
    bytes_per_elem: usize,
) -> CostReport {
    let accs = [
        ("encoder", encoder_acc(arch, lr_dims, sensors)),
        ("neck", neck_acc(arch, lr_dims)),
        ("restore", restore_acc(arch, lr_dims)),
        ("decoder", decoder_acc(arch, lr_dims)),
    ];
    let mut total = Acc::default();
    let rows: Vec<CostRow> = accs
        .iter()
        .map(|(name, a)| {
            total.params += a.params;
            total.act += a.act;
            total.flops += a.flops;
            a.row(name, bytes_per_elem)
        })
        .collect();
    let cache = Acc { params: 0, act: total.act, flops: 0 }.row("cache", bytes_per_elem);
    let totals = total.row("total", bytes_per_elem);
    CostReport { rows, cache, totals, bytes_per_elem }
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,params,act_elems,act_bytes,flops\n");
        for r in self.rows.iter().chain([&self.cache, &self.totals]) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage, r.params, r.act_elems, r.act_bytes, r.flops
            ));
        }
        out
    }

    pub fn row(&self, stage: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }
}

/// One point of the attention-depth sweep: activation footprints when
/// attention runs on the working grid (restoration last) versus on the
/// restored grid (restoration first).
#[derive(Debug, Clone, Serialize)]
pub struct MsaSweepPoint {
    pub layers: usize,
    pub act_restore_last: usize,
    pub act_restore_first: usize,
    pub attn_elems_last: usize,
    pub attn_elems_first: usize,
}

/// Analytic series over attention depth for both orderings.
pub fn sweep_msa(
    arch: &ArchConfig,
    lr_dims: (usize, usize),
    sensors: &SensorDims,
    layer_counts: &[usize],
) -> Vec<MsaSweepPoint> {
    let s = arch.scale;
    let hw_lr = lr_dims.0 * lr_dims.1;
    let hw_hr = hw_lr * s * s;
    layer_counts
        .iter()
        .map(|&k| {
            let mut a = arch.clone();
            a.msa_layers = k;
            let last = estimate(&a, lr_dims, sensors, 1);
            // Restoration-first: identical pipeline, but every attention
            // layer runs on the restored grid.
            let base = estimate(
                &ArchConfig { msa_layers: 0, ..a.clone() },
                lr_dims,
                sensors,
                1,
            );
            let first_act =
                base.cache.act_elems + k * msa_layer_act(hw_hr, a.c, a.heads);
            MsaSweepPoint {
                layers: k,
                act_restore_last: last.cache.act_elems,
                act_restore_first: first_act,
                attn_elems_last: k * attention_matrix_elems(hw_lr, a.heads),
                attn_elems_first: k * attention_matrix_elems(hw_hr, a.heads),
            }
        })
        .collect()
}

/// Run a closure against a fresh live-bytes tracker and report the peak.
pub fn measure_peak<F>(f: F) -> Result<usize>
where
    F: FnOnce(SharedMemCounter) -> Result<()>,
{
    let mem: SharedMemCounter = Rc::new(RefCell::new(MemCounter::default()));
    f(mem.clone())?;
    let peak = mem.borrow().peak_bytes;
    Ok(peak)
}
