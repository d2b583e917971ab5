//! Synthetic dataset assembly: scene, sensors, and ground truth per sample.

use std::rc::Rc;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::restore::SampleInputs;
use crate::scenegen::{
    generate_scene, lr_label, mix, rasterize, simulate_camera, simulate_lidar, SemanticMap,
    VectorScene,
};
use crate::sensors::{flatten_z, lift_splat_targets, voxelize};
use crate::tensorcore::Tensor;

pub const SALT_SCENE: u64 = 0x5CE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

pub struct Sample {
    pub inputs: SampleInputs,
    pub gt_hr: Tensor,
    pub gt_lr: Tensor,
    pub scene_seed: u64,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Output edge of one stride-2 pad-1 3x3 conv.
fn half(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Camera feature-grid size after the two stride-2 backbone convs.
pub fn feature_grid(img_h: usize, img_w: usize) -> (usize, usize) {
    (half(half(img_h)), half(half(img_w)))
}

pub fn scene_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    mix(cfg.dataset.seed, SALT_SCENE.wrapping_add(index as u64))
}

pub fn scene_for(cfg: &ExperimentConfig, index: usize) -> Result<VectorScene> {
    generate_scene(scene_seed(cfg, index), &cfg.dataset.scene)
}

pub fn ground_truth(cfg: &ExperimentConfig, scene: &VectorScene) -> Result<(SemanticMap, SemanticMap)> {
    let hr = rasterize(scene, &cfg.scope);
    let lr = lr_label(&hr, cfg.arch.scale, cfg.label_policy)?;
    Ok((hr, lr))
}

pub fn build_dataset(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let (from, count) = match split {
        Split::Train => (0, cfg.dataset.n_train),
        Split::Val => (cfg.dataset.n_train, cfg.dataset.n_val),
    };
    let lr_scope = cfg.lr_scope()?;
    let voxel_scope = cfg.voxel_scope()?;
    let cam = cfg.camera.model();
    let (fh, fw) = feature_grid(cfg.camera.img_h, cfg.camera.img_w);
    let targets: Rc<Vec<Option<usize>>> = lift_splat_targets(&cam, fh, fw, 4, &lr_scope);
    let lr_dims = (lr_scope.depth(), lr_scope.width());

    let mut samples = Vec::with_capacity(count);
    for i in from..from + count {
        let scene = scene_for(cfg, i)?;
        let (hr, lr) = ground_truth(cfg, &scene)?;
        let pc = simulate_lidar(&scene, (0.0, 0.0, 0.0), &cfg.dataset.scene, &cfg.dataset.lidar);
        let vg = voxelize(&pc, &voxel_scope, cfg.z)?;
        let lidar = flatten_z(&vg);
        let camera = simulate_camera(&scene, &cam)?;
        samples.push(Sample {
            inputs: SampleInputs {
                lidar,
                camera,
                splat_targets: targets.clone(),
                lr_dims,
            },
            gt_hr: hr.to_tensor(),
            gt_lr: lr.to_tensor(),
            scene_seed: scene.seed,
        });
    }
    Ok(Dataset { samples })
}
