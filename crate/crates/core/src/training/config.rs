use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::PerturbationSpec;
use crate::fields::FieldConfig;
use crate::renderer::RenderConfig;

/// Stair-cased exponential decay: `initial · factor^⌊epoch / every⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StairDecay {
    pub initial: f64,
    pub factor: f64,
    pub every: u64,
}

impl StairDecay {
    pub const FIELD: Self = Self { initial: 1e-3, factor: 0.997, every: 100 };
    pub const CAMERA: Self = Self { initial: 1e-3, factor: 0.9, every: 10 };

    pub fn at(&self, epoch: u64) -> f64 {
        let tiers = epoch / self.every.max(1);
        self.initial * self.factor.powi(tiers.min(i32::MAX as u64) as i32)
    }

    /// Same as [`at`](Self::at) with every rate multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { initial: self.initial * s, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrKind {
    Field,
    Camera,
}

/// Default learning rate at `epoch`: field `0.001·0.997^⌊e/100⌋`, pose and
/// focal `0.001·0.9^⌊e/10⌋`.
pub fn lr_at(epoch: u64, which: LrKind) -> f64 {
    match which {
        LrKind::Field => StairDecay::FIELD.at(epoch),
        LrKind::Camera => StairDecay::CAMERA.at(epoch),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Total epochs `N_all`.
    pub epochs: u64,
    /// Static-phase epochs `N_s`; defaults to half of `epochs`.
    pub static_epochs: Option<u64>,
    /// Camera-refinement epochs `N_c`; defaults to 60% of `epochs`.
    pub camera_epochs: Option<u64>,
    /// Pixels sampled per image per epoch (without replacement).
    pub rays_per_image: usize,
    pub field_lr: StairDecay,
    pub pose_lr: StairDecay,
    pub focal_lr: StairDecay,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            static_epochs: None,
            camera_epochs: None,
            rays_per_image: 4096,
            field_lr: StairDecay::FIELD,
            pose_lr: StairDecay::CAMERA,
            focal_lr: StairDecay::CAMERA,
        }
    }
}

impl ScheduleConfig {
    pub fn n_static(&self) -> u64 {
        self.static_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn n_camera(&self) -> u64 {
        self.camera_epochs.unwrap_or(self.epochs * 3 / 5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub shared_intrinsics: bool,
    pub learn_skew: bool,
    pub learn_principal: bool,
    /// Start from origin-facing cameras with `f = width` instead of the
    /// dataset cameras.
    pub pose_free: bool,
    pub perturb: Option<PerturbationSpec>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            shared_intrinsics: false,
            learn_skew: false,
            learn_principal: true,
            pose_free: false,
            perturb: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub precision: Precision,
    /// Take scene center and radius for point normalization from the
    /// dataset manifest.
    pub scene_from_dataset: bool,
    pub schedule: ScheduleConfig,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub camera: CameraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seed: 0,
            precision: Precision::F64,
            scene_from_dataset: true,
            schedule: ScheduleConfig::default(),
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    /// Parses TOML; errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.schedule;
        if s.n_static() > s.epochs {
            return bad(format!("static_epochs {} exceeds epochs {}", s.n_static(), s.epochs));
        }
        if s.n_camera() > s.epochs {
            return bad(format!("camera_epochs {} exceeds epochs {}", s.n_camera(), s.epochs));
        }
        if s.rays_per_image == 0 {
            return bad("rays_per_image must be positive".into());
        }
        for (name, d) in [("field_lr", s.field_lr), ("pose_lr", s.pose_lr), ("focal_lr", s.focal_lr)] {
            if !(d.initial >= 0.0 && d.factor > 0.0 && d.initial.is_finite()) {
                return bad(format!("{name} needs initial >= 0 and factor > 0"));
            }
        }
        if self.render.samples == 0 {
            return bad("render.samples must be positive".into());
        }
        if !(self.render.near < self.render.far) {
            return bad("render.near must be below render.far".into());
        }
        if let Some(p) = &self.camera.perturb {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.field.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
