use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{axis_angle, axis_rotation, Camera};

/// How the sign of each perturbation is chosen per view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignPattern {
    #[default]
    Random,
    Positive,
    Negative,
    /// `+` on even views, `-` on odd views.
    Alternating,
}

impl SignPattern {
    fn sign(self, view: usize, rng: &mut impl Rng) -> f64 {
        match self {
            Self::Random => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Positive => 1.0,
            Self::Negative => -1.0,
            Self::Alternating => {
                if view % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Geodesic size of the rotation offset, degrees.
    #[serde(default)]
    pub rotation_deg: f64,
    /// Translation offset as a fraction of the scene scale.
    #[serde(default)]
    pub translation_frac: f64,
    /// Relative focal change.
    #[serde(default)]
    pub intrinsic_frac: f64,
    #[serde(default)]
    pub sign: SignPattern,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the scale derived from the camera centers.
    #[serde(default)]
    pub scene_scale: Option<f64>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_frac: 0.0,
            intrinsic_frac: 0.0,
            sign: SignPattern::Random,
            seed: 0,
            scene_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PerturbError {
    #[error("perturbation {what} = {value} outside [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
}

impl PerturbationSpec {
    pub fn is_zero(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation_frac == 0.0 && self.intrinsic_frac == 0.0
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let check = |what, value: f64, hi| {
            if (0.0..=hi).contains(&value) {
                Ok(())
            } else {
                Err(PerturbError::OutOfRange { what, value, lo: 0.0, hi })
            }
        };
        check("rotation_deg", self.rotation_deg, 180.0)?;
        check("translation_frac", self.translation_frac, 1.0)?;
        check("intrinsic_frac", self.intrinsic_frac, 1.0)
    }

    /// Parses `rot=5deg,trans=0.05,focal=0.25,sign=positive,seed=3`.
    /// Percentages (`trans=5%`) are accepted for fractions.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut spec = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let number = |v: &str| -> Result<f64, String> {
                let v = v.trim();
                let (v, scale) = if let Some(p) = v.strip_suffix('%') {
                    (p, 0.01)
                } else if let Some(d) = v.strip_suffix("deg") {
                    (d, 1.0)
                } else {
                    (v, 1.0)
                };
                v.trim()
                    .parse::<f64>()
                    .map(|x| x * scale)
                    .map_err(|e| format!("bad number {v:?}: {e}"))
            };
            match key.trim() {
                "rot" | "rotation" => spec.rotation_deg = number(value)?,
                "trans" | "translation" => spec.translation_frac = number(value)?,
                "focal" | "intr" | "intrinsics" => spec.intrinsic_frac = number(value)?,
                "seed" => spec.seed = value.trim().parse().map_err(|e| format!("bad seed: {e}"))?,
                "scale" => spec.scene_scale = Some(number(value)?),
                "sign" => {
                    spec.sign = match value.trim() {
                        "random" => SignPattern::Random,
                        "positive" | "+" => SignPattern::Positive,
                        "negative" | "-" => SignPattern::Negative,
                        "alternating" => SignPattern::Alternating,
                        other => return Err(format!("unknown sign pattern {other:?}")),
                    }
                }
                other => return Err(format!("unknown perturbation key {other:?}")),
            }
        }
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// Perturbed cameras plus the untouched originals they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedCameras {
    pub cameras: Vec<Camera>,
    pub ground_truth: Vec<Camera>,
}

/// Mean distance of camera centers from their centroid; 1 when the centers
/// coincide.
pub fn scene_scale(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.extrinsics.center()).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let mean = centers.iter().map(|c| (c - centroid).norm()).sum::<f64>() / centers.len() as f64;
    if mean > 1e-9 {
        mean
    } else {
        1.0
    }
}

/// Applies `spec` to every camera: rotation composed with a random-axis
/// rotation of exactly `rotation_deg`, the center moved along a random unit
/// direction by `translation_frac · scale`, focal lengths multiplied by
/// `1 ± intrinsic_frac`.
pub fn perturb_cameras(cameras: &[Camera], spec: &PerturbationSpec) -> Result<PerturbedCameras, PerturbError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.scene_scale.unwrap_or_else(|| scene_scale(cameras));
    let mut out = cameras.to_vec();
    for (i, cam) in out.iter_mut().enumerate() {
        // draw everything unconditionally so views stay aligned across specs
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let s_rot = spec.sign.sign(i, &mut rng);
        let s_trans = spec.sign.sign(i, &mut rng);
        let s_focal = spec.sign.sign(i, &mut rng);

        if spec.rotation_deg > 0.0 {
            let delta = axis_rotation(Vector3::from(axis), s_rot * spec.rotation_deg.to_radians());
            let r = cam.extrinsics.rotation_matrix() * delta;
            cam.extrinsics.rotation = axis_angle(&r);
        }
        if spec.translation_frac > 0.0 {
            let offset = Vector3::from(dir) * (s_trans * spec.translation_frac * scale);
            for (t, o) in cam.extrinsics.translation.iter_mut().zip(offset.iter()) {
                *t += o;
            }
        }
        if spec.intrinsic_frac > 0.0 {
            let m = 1.0 + s_focal * spec.intrinsic_frac;
            cam.intrinsics.fx *= m;
            cam.intrinsics.fy *= m;
        }
    }
    Ok(PerturbedCameras {
        cameras: out,
        ground_truth: cameras.to_vec(),
    })
}
