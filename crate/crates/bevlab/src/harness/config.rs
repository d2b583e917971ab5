//! Experiment configuration: one JSON document drives every command, and
//! every random draw derives from its single seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bevgrid::{downscale_scope, BevScope};
use crate::error::{Error, Result};
use crate::restore::ArchConfig;
use crate::scenegen::{LabelPolicy, LidarParams, SceneParams};
use crate::sensors::{CameraModel, ZConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub lidar: LidarParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 64,
            n_val: 16,
            seed: 7,
            scene: SceneParams::default(),
            lidar: LidarParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { epochs: 30, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub stage_a: StageConfig,
    pub stage_b: StageConfig,
    pub batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage_a: StageConfig::default(),
            stage_b: StageConfig::default(),
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5 }
    }
}

/// Fixed forward camera: at `height` meters over the origin, looking along
/// +y, pitched down by `pitch_deg`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub img_h: usize,
    pub img_w: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
    pub pitch_deg: f64,
    pub depth_bins: Vec<f64>,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            img_h: 32,
            img_w: 32,
            fx: 16.0,
            fy: 16.0,
            cx: 16.0,
            cy: 16.0,
            height: 6.0,
            pitch_deg: 35.0,
            depth_bins: vec![4.0, 8.0, 14.0, 22.0],
        }
    }
}

impl CameraRig {
    pub fn model(&self) -> CameraModel {
        let t = self.pitch_deg.to_radians();
        CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            // camera x -> world x, camera z (forward) -> +y pitched down,
            // camera y (down) -> toward the ground.
            rot: [
                [1.0, 0.0, 0.0],
                [0.0, -t.sin(), t.cos()],
                [0.0, -t.cos(), -t.sin()],
            ],
            pos: [0.0, 0.0, self.height],
            width: self.img_w,
            height: self.img_h,
            depth_bins: self.depth_bins.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// High-resolution output scope.
    pub scope: BevScope,
    pub arch: ArchConfig,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub camera: CameraRig,
    pub z: ZConfig,
    pub label_policy: LabelPolicy,
    pub bytes_per_elem: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scope: BevScope::square(-16.0, 16.0, 0.5).expect("default scope"),
            arch: ArchConfig::default(),
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            camera: CameraRig::default(),
            z: ZConfig::default(),
            label_policy: LabelPolicy::Majority,
            bytes_per_elem: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scope.validate()?;
        self.arch.validate()?;
        let s = self.arch.scale;
        if self.scope.width() % s != 0 || self.scope.depth() % s != 0 {
            return Err(Error::Config(format!(
                "HR grid {}x{} not divisible by scale {s}",
                self.scope.depth(),
                self.scope.width()
            )));
        }
        if self.camera.depth_bins.len() != self.arch.depth_bins {
            return Err(Error::Config(format!(
                "camera rig has {} depth bins, arch expects {}",
                self.camera.depth_bins.len(),
                self.arch.depth_bins
            )));
        }
        if self.z.z_bins != self.arch.z_bins {
            return Err(Error::Config(format!(
                "voxel config has {} z bins, arch expects {}",
                self.z.z_bins, self.arch.z_bins
            )));
        }
        if self.training.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.training.stage_a.lr > 0.0 && self.training.stage_b.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.camera.model().validate()?;
        Ok(())
    }

    /// Working (low-resolution) BEV scope.
    pub fn lr_scope(&self) -> Result<BevScope> {
        downscale_scope(&self.scope, self.arch.scale)
    }

    /// Voxelization scope: same extent at twice the working resolution.
    pub fn voxel_scope(&self) -> Result<BevScope> {
        let lr = self.lr_scope()?;
        BevScope::new(lr.lb_x, lr.ub_x, lr.lb_y, lr.ub_y, lr.r_x / 2.0, lr.r_y / 2.0)
    }

    /// Write the exact configuration driving a command next to its outputs.
    pub fn echo_to(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(out_dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}
