//! Pipeline model: encoder, fuser, neck, restoration operator, decoder.
//!
//! Parameters live in named groups so training stages can freeze or reinit
//! whole groups. Forward passes are free functions over a bound var map,
//! which keeps the tape the single owner of all values.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensors::{camera_backbone, lidar_backbone, BackboneVars};
use crate::tensorcore::msa::{msa_layer, MsaVars};
use crate::tensorcore::tape::InterpMethod;
use crate::tensorcore::tensor::Tensor;
use crate::tensorcore::{Parameter, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    /// Learnable: conv + sub-pixel (pixel shuffle) restoration.
    Restore,
    Nearest,
    Bilinear,
    Bicubic,
    /// Learnable: single stride-s transposed convolution.
    Deconvolution,
    /// Stay at low resolution (the restoration-free baseline).
    None,
}

impl UpsampleMethod {
    pub const ALL: [UpsampleMethod; 6] = [
        UpsampleMethod::Restore,
        UpsampleMethod::Nearest,
        UpsampleMethod::Bilinear,
        UpsampleMethod::Bicubic,
        UpsampleMethod::Deconvolution,
        UpsampleMethod::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpsampleMethod::Restore => "restore",
            UpsampleMethod::Nearest => "nearest",
            UpsampleMethod::Bilinear => "bilinear",
            UpsampleMethod::Bicubic => "bicubic",
            UpsampleMethod::Deconvolution => "deconvolution",
            UpsampleMethod::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreWidth {
    /// 3x3 expansion conv before the shuffle.
    Normal,
    /// 1x1 expansion conv (cheap variant).
    Small,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Restoration factor between the working BEV grid and the output grid.
    pub scale: usize,
    /// Camera image feature channels.
    pub c_i: usize,
    /// LiDAR pillar feature channels.
    pub c_p: usize,
    /// Fused BEV channels.
    pub c_f: usize,
    /// Neck output channels (the restoration operand).
    pub c: usize,
    pub msa_layers: usize,
    pub heads: usize,
    pub upsample: UpsampleMethod,
    pub restore_width: RestoreWidth,
    pub classes: usize,
    /// LiDAR height bins; the flattened grid has 2 channels per bin.
    pub z_bins: usize,
    /// Camera depth bins predicted by the backbone.
    pub depth_bins: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            scale: 4,
            c_i: 8,
            c_p: 8,
            c_f: 24,
            c: 16,
            msa_layers: 2,
            heads: 2,
            upsample: UpsampleMethod::Restore,
            restore_width: RestoreWidth::Normal,
            classes: 4,
            z_bins: 4,
            depth_bins: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!("scale {} not in {{1, 2, 4, 8}}", self.scale)));
        }
        for (name, v) in [
            ("c_i", self.c_i),
            ("c_p", self.c_p),
            ("c_f", self.c_f),
            ("c", self.c),
            ("classes", self.classes),
            ("z_bins", self.z_bins),
            ("depth_bins", self.depth_bins),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "c = {} not divisible by heads = {}",
                self.c, self.heads
            )));
        }
        Ok(())
    }
}

pub const GROUPS: [&str; 6] = ["encoder", "fuser", "neck", "restore", "decoder", "lr_head"];

/// All model parameters, keyed by group then ordered by insertion.
pub struct PipelineModel {
    pub arch: ArchConfig,
    pub groups: BTreeMap<String, Vec<Parameter>>,
}

fn conv_pair(
    group: &mut Vec<Parameter>,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) {
    group.push(Parameter::he_init(
        format!("{name}.w"),
        &[kh, kw, cin, cout],
        kh * kw * cin,
        rng,
    ));
    group.push(Parameter::zeros(format!("{name}.b"), &[cout]));
}

impl PipelineModel {
    pub fn new(arch: ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut groups: BTreeMap<String, Vec<Parameter>> = BTreeMap::new();

        let mut enc = Vec::new();
        conv_pair(&mut enc, "encoder.lidar0", 3, 3, 2 * arch.z_bins, arch.c_p, rng);
        conv_pair(&mut enc, "encoder.lidar1", 3, 3, arch.c_p, arch.c_p, rng);
        conv_pair(&mut enc, "encoder.lidar2", 3, 3, arch.c_p, arch.c_p, rng);
        conv_pair(&mut enc, "encoder.cam0", 3, 3, 3, arch.c_i, rng);
        conv_pair(&mut enc, "encoder.cam1", 3, 3, arch.c_i, arch.c_i, rng);
        conv_pair(&mut enc, "encoder.cam2", 3, 3, arch.c_i, arch.c_i + arch.depth_bins, rng);
        groups.insert("encoder".into(), enc);

        let mut fus = Vec::new();
        conv_pair(&mut fus, "fuser.fuse", 3, 3, arch.c_p + arch.c_i, arch.c_f, rng);
        groups.insert("fuser".into(), fus);

        let mut neck = Vec::new();
        conv_pair(&mut neck, "neck.conv1", 3, 3, arch.c_f, arch.c, rng);
        conv_pair(&mut neck, "neck.conv2", 3, 3, arch.c, arch.c, rng);
        for k in 0..arch.msa_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                neck.push(Parameter::he_init(
                    format!("neck.msa{k}.{proj}"),
                    &[1, 1, arch.c, arch.c],
                    arch.c,
                    rng,
                ));
                neck.push(Parameter::zeros(
                    format!("neck.msa{k}.{}", proj.replace('w', "b")),
                    &[arch.c],
                ));
            }
        }
        groups.insert("neck".into(), neck);

        groups.insert("restore".into(), Self::restore_params(&arch, rng));

        let mut dec = Vec::new();
        conv_pair(&mut dec, "decoder.conv1", 3, 3, arch.c, arch.c, rng);
        conv_pair(&mut dec, "decoder.conv2", 3, 3, arch.c, arch.classes, rng);
        groups.insert("decoder".into(), dec);

        let mut lrh = Vec::new();
        conv_pair(&mut lrh, "lr_head.conv1", 3, 3, arch.c, arch.c, rng);
        conv_pair(&mut lrh, "lr_head.conv2", 3, 3, arch.c, arch.classes, rng);
        groups.insert("lr_head".into(), lrh);

        Ok(PipelineModel { arch, groups })
    }

    fn restore_params(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Vec<Parameter> {
        let s = arch.scale;
        let mut g = Vec::new();
        match arch.upsample {
            UpsampleMethod::Restore => {
                conv_pair(&mut g, "restore.conv_a", 3, 3, arch.c, arch.c, rng);
                let kb = match arch.restore_width {
                    RestoreWidth::Normal => 3,
                    RestoreWidth::Small => 1,
                };
                // The expansion conv is bias-free so that, at the narrow
                // width, restore and the transposed-conv baseline span the
                // same function class.
                g.push(Parameter::he_init(
                    "restore.conv_b.w",
                    &[kb, kb, arch.c, s * s * arch.c],
                    kb * kb * arch.c,
                    rng,
                ));
            }
            UpsampleMethod::Deconvolution => {
                conv_pair(&mut g, "restore.conv_a", 3, 3, arch.c, arch.c, rng);
                // Draw a 1x1 expansion kernel and transpose it into the
                // stride-s deconvolution layout. Both heads therefore start
                // from the same function, which keeps the comparison between
                // the two learned upsamplers about parameterization rather
                // than initialization luck.
                let w1x1 = Parameter::he_init(
                    "restore.conv_b.w",
                    &[1, 1, arch.c, s * s * arch.c],
                    arch.c,
                    rng,
                );
                let k = equivalent_deconv_kernel(&w1x1.tensor, s)
                    .expect("expansion kernel shape matches the shuffle factor");
                g.push(Parameter::new("restore.deconv.w", k));
            }
            _ => {}
        }
        g
    }

    /// Replace the restore and decoder groups with fresh initializations,
    /// optionally switching the upsample method.
    pub fn reinit_head(&mut self, upsample: UpsampleMethod, rng: &mut ChaCha8Rng) {
        self.arch.upsample = upsample;
        let arch = self.arch.clone();
        self.groups.insert("restore".into(), Self::restore_params(&arch, rng));
        let mut dec = Vec::new();
        conv_pair(&mut dec, "decoder.conv1", 3, 3, arch.c, arch.c, rng);
        conv_pair(&mut dec, "decoder.conv2", 3, 3, arch.c, arch.classes, rng);
        self.groups.insert("decoder".into(), dec);
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::Usage(format!("no parameter group '{group}'")))?;
        for p in g {
            p.trainable = trainable;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.groups.values().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.groups.values_mut().flatten().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn group_param_count(&self, group: &str) -> usize {
        self.groups
            .get(group)
            .map(|g| g.iter().map(|p| p.tensor.len()).sum())
            .unwrap_or(0)
    }

    /// Order-independent content hash of one group's values, for verifying
    /// that frozen groups never move.
    pub fn group_hash(&self, group: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        if let Some(g) = self.groups.get(group) {
            for p in g {
                p.name.hash(&mut h);
                for v in p.tensor.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Put every parameter on the tape, honoring each parameter's trainable
    /// flag, and return name -> var.
    pub fn bind(&self, tape: &mut Tape) -> HashMap<String, Var> {
        let mut vars = HashMap::new();
        for p in self.params() {
            vars.insert(p.name.clone(), tape.leaf(p.tensor.clone(), p.trainable));
        }
        vars
    }

    /// Copy values into the named groups only; every parameter of those
    /// groups must be present in `loaded` with matching shape. Other groups
    /// (e.g. a differently shaped restoration head) are left untouched.
    pub fn load_groups(&mut self, loaded: &[Parameter], groups: &[&str]) -> Result<()> {
        let by_name: HashMap<&str, &Parameter> =
            loaded.iter().map(|p| (p.name.as_str(), p)).collect();
        for &g in groups {
            let group = self
                .groups
                .get_mut(g)
                .ok_or_else(|| Error::Usage(format!("no parameter group '{g}'")))?;
            for p in group {
                let src = by_name
                    .get(p.name.as_str())
                    .ok_or_else(|| Error::Parse(format!("checkpoint missing '{}'", p.name)))?;
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::Shape(format!(
                        "checkpoint '{}': {:?} vs expected {:?}",
                        p.name,
                        src.tensor.shape(),
                        p.tensor.shape()
                    )));
                }
                p.tensor = src.tensor.clone();
            }
        }
        Ok(())
    }

    /// Copy loaded parameter values into matching names; errors on any
    /// missing or shape-mismatched name.
    pub fn load_values(&mut self, loaded: &[Parameter]) -> Result<()> {
        let by_name: HashMap<&str, &Parameter> =
            loaded.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in self.params_mut() {
            let src = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint missing '{}'", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint '{}': {:?} vs expected {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

pub type BoundVars = HashMap<String, Var>;

fn get(vars: &BoundVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Usage(format!("unbound parameter '{name}'")))
}

fn backbone_vars(vars: &BoundVars, names: &[(&str, usize)]) -> Result<BackboneVars> {
    let mut convs = Vec::with_capacity(names.len());
    for &(name, stride) in names {
        convs.push((
            get(vars, &format!("{name}.w"))?,
            get(vars, &format!("{name}.b"))?,
            stride,
        ));
    }
    Ok(BackboneVars { convs })
}

/// LiDAR pillar encoder: flattened voxel grid at 2x the working resolution
/// down to the working BEV grid.
pub fn encode_lidar(tape: &mut Tape, vars: &BoundVars, x: Var) -> Result<Var> {
    let bb = backbone_vars(
        vars,
        &[("encoder.lidar0", 1), ("encoder.lidar1", 2), ("encoder.lidar2", 1)],
    )?;
    lidar_backbone(tape, x, &bb)
}

/// Camera encoder: image to (feature grid, depth logits) at 1/4 image
/// resolution.
pub fn encode_camera(tape: &mut Tape, vars: &BoundVars, arch: &ArchConfig, img: Var) -> Result<(Var, Var)> {
    let bb = backbone_vars(
        vars,
        &[("encoder.cam0", 2), ("encoder.cam1", 2), ("encoder.cam2", 1)],
    )?;
    camera_backbone(tape, img, &bb, arch.c_i)
}

/// Channel-concat fusion of the two BEV feature maps, then a 3x3 conv.
pub fn fuse(tape: &mut Tape, vars: &BoundVars, lidar_bev: Var, camera_bev: Var) -> Result<Var> {
    let cat = tape.concat_last(lidar_bev, camera_bev)?;
    let h = tape.conv2d(cat, get(vars, "fuser.fuse.w")?, Some(get(vars, "fuser.fuse.b")?), 1, 1)?;
    Ok(tape.relu(h))
}

/// BEV enhancement: residual conv block plus `msa_layers` attention layers,
/// all at the working (low) resolution.
pub fn neck(tape: &mut Tape, vars: &BoundVars, arch: &ArchConfig, x: Var) -> Result<Var> {
    let y1 = tape.conv2d(x, get(vars, "neck.conv1.w")?, Some(get(vars, "neck.conv1.b")?), 1, 1)?;
    let y1 = tape.relu(y1);
    let y2 = tape.conv2d(y1, get(vars, "neck.conv2.w")?, Some(get(vars, "neck.conv2.b")?), 1, 1)?;
    let sum = tape.add(y1, y2)?;
    let mut h = tape.relu(sum);
    for k in 0..arch.msa_layers {
        let m = MsaVars {
            wq: get(vars, &format!("neck.msa{k}.wq"))?,
            bq: get(vars, &format!("neck.msa{k}.bq"))?,
            wk: get(vars, &format!("neck.msa{k}.wk"))?,
            bk: get(vars, &format!("neck.msa{k}.bk"))?,
            wv: get(vars, &format!("neck.msa{k}.wv"))?,
            bv: get(vars, &format!("neck.msa{k}.bv"))?,
            wo: get(vars, &format!("neck.msa{k}.wo"))?,
            bo: get(vars, &format!("neck.msa{k}.bo"))?,
        };
        h = msa_layer(tape, h, &m, arch.heads)?;
    }
    Ok(h)
}

/// Resolution restoration by the configured method: (h, w, C) to
/// (s*h, s*w, C), or unchanged for `None`.
pub fn restore(tape: &mut Tape, vars: &BoundVars, arch: &ArchConfig, x: Var) -> Result<Var> {
    let s = arch.scale;
    match arch.upsample {
        UpsampleMethod::Restore => {
            let h = tape.conv2d(
                x,
                get(vars, "restore.conv_a.w")?,
                Some(get(vars, "restore.conv_a.b")?),
                1,
                1,
            )?;
            let h = tape.relu(h);
            let pad = match arch.restore_width {
                RestoreWidth::Normal => 1,
                RestoreWidth::Small => 0,
            };
            let h = tape.conv2d(h, get(vars, "restore.conv_b.w")?, None, 1, pad)?;
            tape.pixel_shuffle(h, s)
        }
        UpsampleMethod::Deconvolution => {
            let h = tape.conv2d(
                x,
                get(vars, "restore.conv_a.w")?,
                Some(get(vars, "restore.conv_a.b")?),
                1,
                1,
            )?;
            let h = tape.relu(h);
            tape.conv_transpose2d(h, get(vars, "restore.deconv.w")?, s)
        }
        UpsampleMethod::Nearest => tape.interp_upsample(x, s, InterpMethod::Nearest),
        UpsampleMethod::Bilinear => tape.interp_upsample(x, s, InterpMethod::Bilinear),
        UpsampleMethod::Bicubic => tape.interp_upsample(x, s, InterpMethod::Bicubic),
        UpsampleMethod::None => Ok(x),
    }
}

/// High-resolution segmentation head; emits per-class logits.
pub fn decode(tape: &mut Tape, vars: &BoundVars, x: Var) -> Result<Var> {
    let h = tape.conv2d(x, get(vars, "decoder.conv1.w")?, Some(get(vars, "decoder.conv1.b")?), 1, 1)?;
    let h = tape.relu(h);
    tape.conv2d(h, get(vars, "decoder.conv2.w")?, Some(get(vars, "decoder.conv2.b")?), 1, 1)
}

/// Low-resolution auxiliary head used to train everything before the
/// restoration stage.
pub fn decode_lr(tape: &mut Tape, vars: &BoundVars, x: Var) -> Result<Var> {
    let h = tape.conv2d(x, get(vars, "lr_head.conv1.w")?, Some(get(vars, "lr_head.conv1.b")?), 1, 1)?;
    let h = tape.relu(h);
    tape.conv2d(h, get(vars, "lr_head.conv2.w")?, Some(get(vars, "lr_head.conv2.b")?), 1, 1)
}

/// Sensor tensors plus the precomputed view-transform scatter table.
pub struct SampleInputs {
    pub lidar: Tensor,
    pub camera: Tensor,
    pub splat_targets: Rc<Vec<Option<usize>>>,
    /// Working BEV grid (depth, width).
    pub lr_dims: (usize, usize),
}

/// Everything before restoration: encode both sensors, splat the camera
/// features, fuse, enhance. Output lives on the working LR grid.
pub fn forward_to_neck(
    tape: &mut Tape,
    vars: &BoundVars,
    arch: &ArchConfig,
    inputs: &SampleInputs,
) -> Result<Var> {
    let lidar_in = tape.constant(inputs.lidar.clone());
    let camera_in = tape.constant(inputs.camera.clone());
    let lidar_bev = encode_lidar(tape, vars, lidar_in)?;
    let (ld, lw, _) = tape.val(lidar_bev).dims3()?;
    if (ld, lw) != inputs.lr_dims {
        return Err(Error::Shape(format!(
            "lidar encoder emitted {ld}x{lw}, working grid is {}x{}",
            inputs.lr_dims.0, inputs.lr_dims.1
        )));
    }
    let (cam_feat, depth_logits) = encode_camera(tape, vars, arch, camera_in)?;
    let cam_bev = tape.lift_splat(cam_feat, depth_logits, inputs.splat_targets.clone(), inputs.lr_dims)?;
    let fused = fuse(tape, vars, lidar_bev, cam_bev)?;
    neck(tape, vars, arch, fused)
}

/// Full pipeline to high-resolution class logits.
pub fn forward_full(
    tape: &mut Tape,
    vars: &BoundVars,
    arch: &ArchConfig,
    inputs: &SampleInputs,
) -> Result<Var> {
    let lr = forward_to_neck(tape, vars, arch, inputs)?;
    let hr = restore(tape, vars, arch, lr)?;
    decode(tape, vars, hr)
}

/// Transposed-conv kernel exactly equivalent to `pixel_shuffle(conv1x1(x))`:
/// K[dy, dx, ci, co] = W[0, 0, ci, co*s^2 + dy*s + dx].
pub fn equivalent_deconv_kernel(w1x1: &Tensor, s: usize) -> Result<Tensor> {
    let ws = w1x1.shape();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 1 || s == 0 || ws[3] % (s * s) != 0 {
        return Err(Error::Shape(format!(
            "equivalent_deconv_kernel: weights {ws:?} incompatible with s = {s}"
        )));
    }
    let (cin, cexp) = (ws[2], ws[3]);
    let cout = cexp / (s * s);
    let mut k = Tensor::zeros(&[s, s, cin, cout]);
    for dy in 0..s {
        for dx in 0..s {
            for ci in 0..cin {
                for co in 0..cout {
                    let src = ci * cexp + co * s * s + dy * s + dx;
                    let dst = ((dy * s + dx) * cin + ci) * cout + co;
                    k.data_mut()[dst] = w1x1.data()[src];
                }
            }
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::fdcheck::random_tensor;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn arch_with(scale: usize, upsample: UpsampleMethod) -> ArchConfig {
        ArchConfig { scale, upsample, c: 4, c_f: 6, c_i: 4, c_p: 4, msa_layers: 1, heads: 2, ..ArchConfig::default() }
    }

    fn test_inputs(arch: &ArchConfig) -> SampleInputs {
        // 16x16 voxel grid -> 8x8 working grid; 16x16 image -> 4x4 features.
        let lidar = random_tensor(&[16, 16, 2 * arch.z_bins], 10);
        let camera = random_tensor(&[16, 16, 3], 11);
        let n = 4 * 4 * arch.depth_bins;
        let targets: Vec<Option<usize>> = (0..n).map(|i| Some(i % 64)).collect();
        SampleInputs {
            lidar,
            camera,
            splat_targets: Rc::new(targets),
            lr_dims: (8, 8),
        }
    }

    #[test]
    fn full_forward_shape_laws() {
        for &s in &[1usize, 2, 4, 8] {
            for method in UpsampleMethod::ALL {
                let arch = arch_with(s, method);
                let model = PipelineModel::new(arch.clone(), &mut rng(1)).unwrap();
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape);
                let inputs = test_inputs(&arch);
                let out = forward_full(&mut tape, &vars, &arch, &inputs).unwrap();
                let (h, w, c) = tape.val(out).dims3().unwrap();
                let want = if method == UpsampleMethod::None { 8 } else { 8 * s };
                assert_eq!(
                    (h, w, c),
                    (want, want, arch.classes),
                    "scale {s} method {}",
                    method.name()
                );
            }
        }
    }

    #[test]
    fn lr_head_matches_working_grid() {
        let arch = arch_with(4, UpsampleMethod::Restore);
        let model = PipelineModel::new(arch.clone(), &mut rng(2)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let inputs = test_inputs(&arch);
        let lr = forward_to_neck(&mut tape, &vars, &arch, &inputs).unwrap();
        let logits = decode_lr(&mut tape, &vars, lr).unwrap();
        assert_eq!(tape.val(logits).shape(), &[8, 8, arch.classes]);
    }

    #[test]
    fn shuffle_and_equivalent_deconv_agree() {
        for &s in &[2usize, 4] {
            for trial in 0..100u64 {
                let c = 3;
                let x = random_tensor(&[5, 4, c], 1000 + trial);
                let w = random_tensor(&[1, 1, c, s * s * c], 2000 + trial);
                let k = equivalent_deconv_kernel(&w, s).unwrap();
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let wv = tape.constant(w);
                let kv = tape.constant(k);
                let a = tape.conv2d(xv, wv, None, 1, 0).unwrap();
                let a = tape.pixel_shuffle(a, s).unwrap();
                let b = tape.conv_transpose2d(xv, kv, s).unwrap();
                assert_eq!(tape.val(a).shape(), tape.val(b).shape());
                for (p, q) in tape.val(a).data().iter().zip(tape.val(b).data()) {
                    assert!((p - q).abs() <= 1e-12, "s = {s} trial {trial}");
                }
            }
        }
    }

    #[test]
    fn identity_lift_kernel_reproduces_nearest() {
        // W[0,0,ci,co*s^2+k] = delta(ci, co) makes shuffle(conv1x1) replicate
        // each cell s x s, which is exactly nearest upsampling.
        let (s, c) = (3usize, 2usize);
        let mut w = Tensor::zeros(&[1, 1, c, s * s * c]);
        for ci in 0..c {
            for k in 0..s * s {
                w.data_mut()[ci * (s * s * c) + ci * s * s + k] = 1.0;
            }
        }
        let x = random_tensor(&[4, 4, c], 99);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let lifted = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        let lifted = tape.pixel_shuffle(lifted, s).unwrap();
        let near = tape.interp_upsample(xv, s, InterpMethod::Nearest).unwrap();
        for (a, b) in tape.val(lifted).data().iter().zip(tape.val(near).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_groups_get_zero_gradients() {
        let arch = arch_with(2, UpsampleMethod::Restore);
        let mut model = PipelineModel::new(arch.clone(), &mut rng(3)).unwrap();
        for g in ["encoder", "fuser", "neck"] {
            model.set_group_trainable(g, false).unwrap();
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let inputs = test_inputs(&arch);
        let out = forward_full(&mut tape, &vars, &arch, &inputs).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        for g in ["encoder", "fuser", "neck"] {
            for p in &model.groups[g] {
                assert!(
                    grads.of(vars[&p.name]).iter().all(|&v| v == 0.0),
                    "{} leaked gradient",
                    p.name
                );
            }
        }
        // The live head still learns.
        let restore_w = grads.of(vars["restore.conv_b.w"]);
        assert!(restore_w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fuse_picks_constructed_channel() {
        // Fuse kernel = center-tap selector of concat channel 5 (the second
        // camera channel) into every output channel; fused output must equal
        // relu of that channel.
        let arch = ArchConfig { c_p: 4, c_i: 4, c_f: 2, ..ArchConfig::default() };
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&[4, 4, 4], 7));
        let b = tape.constant(random_tensor(&[4, 4, 4], 8));
        let mut w = Tensor::zeros(&[3, 3, 8, 2]);
        for co in 0..2 {
            // center tap (dy = 1, dx = 1), input channel 5
            w.data_mut()[((1 * 3 + 1) * 8 + 5) * 2 + co] = 1.0;
        }
        let mut vars = BoundVars::new();
        vars.insert("fuser.fuse.w".into(), tape.constant(w));
        vars.insert("fuser.fuse.b".into(), tape.constant(Tensor::zeros(&[2])));
        let fused = fuse(&mut tape, &vars, a, b).unwrap();
        let _ = arch;
        for y in 0..4 {
            for x in 0..4 {
                let want = tape.val(b).at3(y, x, 1).max(0.0);
                for co in 0..2 {
                    assert!((tape.val(fused).at3(y, x, co) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reinit_head_swaps_method_and_params() {
        let arch = arch_with(4, UpsampleMethod::Restore);
        let mut model = PipelineModel::new(arch, &mut rng(5)).unwrap();
        let old_decoder = model.group_hash("decoder");
        model.reinit_head(UpsampleMethod::Deconvolution, &mut rng(6));
        assert_eq!(model.arch.upsample, UpsampleMethod::Deconvolution);
        let names: Vec<&str> =
            model.groups["restore"].iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["restore.conv_a.w", "restore.conv_a.b", "restore.deconv.w"]);
        assert_ne!(model.group_hash("decoder"), old_decoder);
    }

    #[test]
    fn load_values_round_trip() {
        let arch = arch_with(2, UpsampleMethod::Restore);
        let src = PipelineModel::new(arch.clone(), &mut rng(8)).unwrap();
        let mut dst = PipelineModel::new(arch, &mut rng(9)).unwrap();
        assert_ne!(src.group_hash("neck"), dst.group_hash("neck"));
        let owned: Vec<Parameter> = src
            .params()
            .iter()
            .map(|p| Parameter::new(p.name.clone(), p.tensor.clone()))
            .collect();
        dst.load_values(&owned).unwrap();
        for g in GROUPS {
            assert_eq!(src.group_hash(g), dst.group_hash(g), "group {g}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ArchConfig { scale: 3, ..ArchConfig::default() }.validate().is_err());
        assert!(ArchConfig { c: 6, heads: 4, ..ArchConfig::default() }.validate().is_err());
        assert!(ArchConfig { classes: 0, ..ArchConfig::default() }.validate().is_err());
    }
}
