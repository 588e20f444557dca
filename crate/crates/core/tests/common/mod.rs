//! Desk-scale datasets and training presets shared by the integration tests.
#![allow(dead_code)]

use nerfcam::camera::{PerturbationSpec, SignPattern};
use nerfcam::dataio::Dataset;
use nerfcam::encoding::EncodingConfig;
use nerfcam::fields::{FieldConfig, FusionStrategy};
use nerfcam::synthscene::{generate_dataset, AnalyticScene, DatasetSpec, Rig};
use nerfcam::training::{ScheduleConfig, StairDecay, TrainConfig};

/// 8-view ring around the three-blob scene, 64×64, last view held out.
pub fn ring_dataset() -> Dataset {
    generate_dataset(&AnalyticScene::three_blobs(), &DatasetSpec::default()).expect("ring dataset")
}

/// Four training cameras on a circle of radius [`FORWARD_RADIUS`] plus the
/// held-out center camera, all looking down `-z`.
pub fn forward_dataset() -> Dataset {
    let spec = DatasetSpec { n_views: 5, ring_radius: FORWARD_RADIUS, rig: Rig::ForwardFacing, ..DatasetSpec::default() };
    generate_dataset(&AnalyticScene::forward_facing(), &spec).expect("forward-facing dataset")
}

pub const FORWARD_RADIUS: f64 = 0.5;

/// Tiny dynamic dataset: moving blobs, 3 views × 2 timesteps, 16×16.
pub fn tiny_dynamic_dataset() -> Dataset {
    let spec = DatasetSpec { n_views: 3, width: 16, height: 16, n_timesteps: 2, oracle_samples: 64, ..DatasetSpec::default() };
    generate_dataset(&AnalyticScene::moving_blobs(), &spec).expect("tiny dataset")
}

/// Small single-band field; the full-size defaults are far too slow on a CPU.
pub fn desk_field() -> FieldConfig {
    FieldConfig {
        width: 32,
        density_depth: 3,
        color_depth: 2,
        deform_depth: 2,
        feature_dim: 16,
        position: EncodingConfig { bands: 1, per_band: 4, init_noise: 0.05 },
        direction: EncodingConfig { bands: 1, per_band: 2, init_noise: 0.05 },
        time: EncodingConfig { bands: 1, per_band: 2, init_noise: 0.05 },
        warm_bands: 1,
        fusion: FusionStrategy::StaticOnly,
        ..FieldConfig::default()
    }
}

fn desk(epochs: u64, field_every: u64, pose: StairDecay, focal: StairDecay) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.schedule = ScheduleConfig {
        epochs,
        static_epochs: Some(epochs),
        camera_epochs: Some(epochs),
        rays_per_image: 128,
        field_lr: StairDecay { initial: 5e-3, factor: 0.9, every: field_every },
        pose_lr: pose,
        focal_lr: focal,
    };
    cfg.field = desk_field();
    cfg.render.samples = 32;
    cfg
}

const OFF: StairDecay = StairDecay { initial: 0.0, factor: 1.0, every: 1 };

/// Extrinsic refinement from a 10° / 10% perturbation.
pub fn pose_config(epochs: u64) -> TrainConfig {
    let mut cfg = desk(epochs, 90, StairDecay { initial: 3e-3, factor: 1.0, every: 1 }, OFF);
    cfg.camera.perturb = Some(PerturbationSpec {
        rotation_deg: 10.0,
        translation_frac: 0.1,
        seed: 1,
        ..PerturbationSpec::default()
    });
    cfg
}

/// Focal refinement from +25 % focal lengths with true extrinsics.
pub fn focal_config(epochs: u64) -> TrainConfig {
    let mut cfg = desk(epochs, 40, OFF, StairDecay { initial: 0.3, factor: 1.0, every: 1 });
    cfg.camera.perturb = Some(PerturbationSpec {
        intrinsic_frac: 0.25,
        sign: SignPattern::Positive,
        seed: 1,
        ..PerturbationSpec::default()
    });
    cfg.camera.learn_principal = false;
    cfg
}

/// Pose-free start on the forward-facing rig with one shared focal length.
pub fn pose_free_config(epochs: u64) -> TrainConfig {
    let mut cfg = desk(
        epochs,
        80,
        StairDecay { initial: 3e-3, factor: 0.9, every: 100 },
        StairDecay { initial: 0.3, factor: 0.9, every: 100 },
    );
    cfg.camera.pose_free = true;
    cfg.camera.shared_intrinsics = true;
    cfg
}

/// The same run with cameras frozen at their starting values.
pub fn frozen(mut cfg: TrainConfig) -> TrainConfig {
    cfg.schedule.camera_epochs = Some(0);
    cfg
}
