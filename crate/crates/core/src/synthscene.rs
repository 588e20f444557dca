//! Analytic Gaussian-blob scenes, an independent reference renderer and
//! dataset generation with exact cameras.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::camera::{Camera, Extrinsics, Intrinsics};
use crate::dataio::{save_dataset, DataError, Dataset, Frame, Manifest};
use crate::fields::{FieldSample, RadianceField};
use crate::raster::Image;
use crate::scalar::Real;

/// Densities below this are treated as empty space when mixing colors.
pub const EMPTY_DENSITY: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub peak: f64,
    pub color: [f64; 3],
    /// World units per unit time, active over `t ∈ [0, 1]`.
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl Blob {
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * t.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub blobs: Vec<Blob>,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("blob {0}: radius must be positive and density non-negative")]
    BadBlob(usize),
    #[error("blob {0} leaves the scene box during t ∈ [0, 1]")]
    OutsideBox(usize),
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, b) in self.blobs.iter().enumerate() {
            if !(b.radius > 0.0) || !(b.peak >= 0.0) {
                return Err(SceneError::BadBlob(i));
            }
            for t in [0.0, 1.0] {
                let c = b.center_at(t);
                if (0..3).any(|k| c[k] < self.bbox_min[k] || c[k] > self.bbox_max[k]) {
                    return Err(SceneError::OutsideBox(i));
                }
            }
        }
        Ok(())
    }

    /// Three colored blobs around the origin.
    pub fn three_blobs() -> Self {
        Self {
            blobs: vec![
                Blob { center: [0.45, 0.0, 0.1], radius: 0.32, peak: 12.0, color: [0.9, 0.2, 0.15], velocity: [0.0; 3] },
                Blob { center: [-0.4, 0.25, -0.2], radius: 0.28, peak: 12.0, color: [0.15, 0.85, 0.25], velocity: [0.0; 3] },
                Blob { center: [0.0, -0.35, -0.45], radius: 0.3, peak: 12.0, color: [0.2, 0.3, 0.95], velocity: [0.0; 3] },
            ],
            bbox_min: [-1.2; 3],
            bbox_max: [1.2; 3],
            background: [0.0; 3],
        }
    }

    /// [`three_blobs`](Self::three_blobs) with the first blob moving.
    pub fn moving_blobs() -> Self {
        let mut s = Self::three_blobs();
        s.blobs[0].velocity = [-0.3, 0.3, 0.0];
        s
    }

    /// Blobs spread in front of cameras looking down `-z` from near the
    /// origin, for forward-facing captures.
    pub fn forward_facing() -> Self {
        Self {
            blobs: vec![
                Blob { center: [0.35, 0.25, -2.3], radius: 0.22, peak: 14.0, color: [0.9, 0.25, 0.15], velocity: [0.0; 3] },
                Blob { center: [-0.45, 0.3, -3.2], radius: 0.3, peak: 12.0, color: [0.2, 0.85, 0.3], velocity: [0.0; 3] },
                Blob { center: [0.1, -0.4, -2.8], radius: 0.25, peak: 12.0, color: [0.25, 0.35, 0.95], velocity: [0.0; 3] },
                Blob { center: [-0.1, 0.05, -4.6], radius: 0.6, peak: 5.0, color: [0.85, 0.8, 0.3], velocity: [0.0; 3] },
            ],
            bbox_min: [-2.0, -2.0, -6.0],
            bbox_max: [2.0, 2.0, -1.5],
            background: [0.0; 3],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|k| 0.5 * (self.bbox_min[k] + self.bbox_max[k]))
    }

    /// Half the box diagonal.
    pub fn radius(&self) -> f64 {
        let d: f64 = (0..3).map(|k| (self.bbox_max[k] - self.bbox_min[k]).powi(2)).sum();
        0.5 * d.sqrt()
    }
}

/// `σ = Σ peak·exp(-|x - c(t)|² / 2r²)`, color the density-weighted mix of
/// blob colors (background where σ is negligible).
pub fn scene_density_color(scene: &AnalyticScene, x: [f64; 3], t: f64) -> (f64, [f64; 3]) {
    let x = Vector3::from(x);
    let mut sigma = 0.0;
    let mut mix = [0.0; 3];
    for b in &scene.blobs {
        let d2 = (x - b.center_at(t)).norm_squared();
        let s = b.peak * (-d2 / (2.0 * b.radius * b.radius)).exp();
        sigma += s;
        for k in 0..3 {
            mix[k] += s * b.color[k];
        }
    }
    if sigma < EMPTY_DENSITY {
        (sigma, scene.background)
    } else {
        (sigma, mix.map(|m| m / sigma))
    }
}

/// Reference renderer: its own back-projection and a midpoint-rule
/// transmittance product, sharing nothing with the differentiable path.
pub fn oracle_render(scene: &AnalyticScene, camera: &Camera, near: f64, far: f64, n: usize, time: f64) -> Image {
    let k = camera.intrinsics.matrix();
    let k_inv = k.try_inverse().expect("intrinsic matrix is invertible");
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let r = camera.extrinsics.rotation_matrix();
    let origin = camera.extrinsics.center();
    let h = (far - near) / n as f64;
    let (w, ht) = (camera.width, camera.height);
    let data: Vec<f64> = (0..ht)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..w).flat_map(move |u| {
                // image coordinates have y down and look along +z; the camera
                // frame has y up and looks along -z
                let pix = Vector3::new(f64::from(u) + 0.5, f64::from(v) + 0.5, 1.0);
                let dir = (r * flip * (k_inv * pix)).normalize();
                let mut transmit = 1.0;
                let mut rgb = [0.0; 3];
                for i in 0..n {
                    let t = near + (i as f64 + 0.5) * h;
                    let p = origin + dir * t;
                    let (sigma, c) = scene_density_color(scene, [p.x, p.y, p.z], time);
                    let a = 1.0 - (-sigma * h).exp();
                    for ch in 0..3 {
                        rgb[ch] += transmit * a * c[ch];
                    }
                    transmit *= 1.0 - a;
                }
                (0..3).map(move |ch| rgb[ch] + transmit * scene.background[ch])
            })
        })
        .collect();
    Image::new(w, ht, data)
}

/// The analytic scene as a tape-level field, so the differentiable renderer
/// (and its camera gradients) can be driven without any network.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticField {
    pub scene: AnalyticScene,
}

impl<T: Real> RadianceField<T> for AnalyticField {
    fn query(
        &self,
        tape: &mut Tape<T>,
        _store: &ParamStore<T>,
        points: Var,
        _dirs: Var,
        times: Var,
    ) -> Result<FieldSample, AutodiffError> {
        let p = tape.shape(points)[0];
        // one time per batch; the renderer never mixes times in a query
        let t = tape.value(times).data().first().map_or(0.0, |x| x.as_f64());
        let mut sigma: Option<Var> = None;
        let mut mix: Option<Var> = None;
        for b in &self.scene.blobs {
            let c = b.center_at(t);
            let c = tape.constant(Tensor::vector(&[T::lit(c.x), T::lit(c.y), T::lit(c.z)]));
            let diff = tape.sub(points, c)?;
            let sq = tape.mul(diff, diff)?;
            let d2 = tape.sum_axis(sq, 1)?;
            let e = tape.scale(d2, T::lit(-1.0 / (2.0 * b.radius * b.radius)));
            let e = tape.exp(e);
            let s = tape.scale(e, T::lit(b.peak));
            let col = tape.constant(Tensor::vector(&b.color.map(T::lit)));
            let sc = tape.mul(s, col)?;
            sigma = Some(match sigma {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            mix = Some(match mix {
                Some(acc) => tape.add(acc, sc)?,
                None => sc,
            });
        }
        let (sigma, mix) = match (sigma, mix) {
            (Some(s), Some(m)) => (s, m),
            _ => {
                let bg = Tensor::new(vec![1, 3], self.scene.background.map(T::lit).to_vec())?;
                let bg = tape.constant(bg);
                let zeros = tape.constant(Tensor::zeros(&[p, 3]));
                return Ok(FieldSample {
                    sigma: tape.constant(Tensor::zeros(&[p, 1])),
                    rgb: tape.add(zeros, bg)?,
                    blend: None,
                });
            }
        };
        let denom = tape.clamp_min(sigma, T::lit(EMPTY_DENSITY));
        let rgb = tape.div(mix, denom)?;
        Ok(FieldSample { sigma, rgb, blend: None })
    }
}

/// Cameras on a horizontal ring around `target`, all looking at it.
pub fn ring_cameras(
    n: usize,
    radius: f64,
    elevation: f64,
    target: [f64; 3],
    width: u32,
    height: u32,
    focal: f64,
    phase: f64,
) -> Vec<Camera> {
    let target = Vector3::from(target);
    (0..n)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / n as f64;
            let horiz = radius * elevation.cos();
            let eye = target + Vector3::new(horiz * a.sin(), radius * elevation.sin(), horiz * a.cos());
            Camera {
                intrinsics: Intrinsics {
                    fx: focal,
                    fy: focal,
                    cx: f64::from(width) / 2.0,
                    cy: f64::from(height) / 2.0,
                    s: 0.0,
                },
                extrinsics: Extrinsics::look_at(eye, target, Vector3::y()),
                width,
                height,
            }
        })
        .collect()
}

/// Identity-rotation cameras on a circle of `radius` in the `z = 0` plane,
/// plus one camera at the circle's center, all looking down `-z`.
pub fn forward_facing_cameras(n: usize, radius: f64, width: u32, height: u32, focal: f64) -> Vec<Camera> {
    let mut cams: Vec<Camera> = (0..n)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / n as f64;
            Camera {
                intrinsics: Intrinsics {
                    fx: focal,
                    fy: focal,
                    cx: f64::from(width) / 2.0,
                    cy: f64::from(height) / 2.0,
                    s: 0.0,
                },
                extrinsics: Extrinsics {
                    rotation: [0.0; 3],
                    translation: [radius * a.cos(), radius * a.sin(), 0.0],
                },
                width,
                height,
            }
        })
        .collect();
    let mut center = cams[0];
    center.extrinsics.translation = [0.0; 3];
    cams.push(center);
    cams
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rig {
    /// Cameras on a ring looking at the scene center; the last view is held
    /// out.
    Ring,
    /// Translated identity-rotation cameras plus a held-out center camera.
    ForwardFacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_views: usize,
    pub ring_radius: f64,
    /// Ring elevation, radians.
    pub elevation: f64,
    pub width: u32,
    pub height: u32,
    pub n_timesteps: usize,
    pub seed: u64,
    /// Focal length in pixels; `None` uses 1.2 × width.
    pub focal: Option<f64>,
    pub rig: Rig,
    /// Quadrature samples of the reference renderer.
    pub oracle_samples: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_views: 8,
            ring_radius: 4.0,
            elevation: 0.35,
            width: 64,
            height: 64,
            n_timesteps: 1,
            seed: 0,
            focal: None,
            rig: Rig::Ring,
            oracle_samples: 512,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("a dataset needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("n_timesteps must be at least 1")]
    NoTimesteps,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Cameras, near/far and held-out views for `spec` around `scene`.
pub fn dataset_cameras(scene: &AnalyticScene, spec: &DatasetSpec) -> (Vec<Camera>, f64, f64, Vec<usize>) {
    let focal = spec.focal.unwrap_or(1.2 * f64::from(spec.width));
    let extent = scene.radius();
    match spec.rig {
        Rig::Ring => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU / spec.n_views as f64);
            let cams = ring_cameras(
                spec.n_views,
                spec.ring_radius,
                spec.elevation,
                scene.center(),
                spec.width,
                spec.height,
                focal,
                phase,
            );
            let near = (spec.ring_radius - extent).max(0.1);
            let far = spec.ring_radius + extent;
            (cams, near, far, vec![spec.n_views - 1])
        }
        Rig::ForwardFacing => {
            let cams = forward_facing_cameras(spec.n_views - 1, spec.ring_radius, spec.width, spec.height, focal);
            let depth = -scene.center()[2];
            let half = 0.5 * (scene.bbox_max[2] - scene.bbox_min[2]);
            (cams, (depth - half).max(0.1), depth + half, vec![spec.n_views - 1])
        }
    }
}

/// Renders every view at every timestep with the reference renderer.
pub fn generate_dataset(scene: &AnalyticScene, spec: &DatasetSpec) -> Result<Dataset, SynthError> {
    if spec.n_views < 2 {
        return Err(SynthError::TooFewViews(spec.n_views));
    }
    if spec.n_timesteps == 0 {
        return Err(SynthError::NoTimesteps);
    }
    scene.validate()?;
    let (cameras, near, far, holdout) = dataset_cameras(scene, spec);
    let mut frames = Vec::new();
    let mut images = Vec::new();
    for (view, cam) in cameras.iter().enumerate() {
        for ti in 0..spec.n_timesteps {
            let time = if spec.n_timesteps > 1 {
                ti as f64 / (spec.n_timesteps - 1) as f64
            } else {
                0.0
            };
            let img = oracle_render(scene, cam, near, far, spec.oracle_samples, time).quantized();
            frames.push(Frame {
                view,
                time_index: ti,
                time,
                file: format!("images/v{view:03}_t{ti:03}.png"),
            });
            images.push(img);
        }
    }
    let manifest = Manifest {
        version: crate::dataio::MANIFEST_VERSION,
        width: spec.width,
        height: spec.height,
        near,
        far,
        n_views: cameras.len(),
        n_timesteps: spec.n_timesteps,
        holdout,
        background: scene.background,
        scene_center: scene.center(),
        scene_radius: scene.radius(),
        frames,
    };
    Ok(Dataset::new(manifest, images, Some(cameras)))
}

/// [`generate_dataset`] followed by writing it under `dir`.
pub fn make_dataset(scene: &AnalyticScene, spec: &DatasetSpec, dir: &Path) -> Result<Dataset, SynthError> {
    let ds = generate_dataset(scene, spec)?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}
