//! Pinhole cameras: intrinsic matrix, axis-angle extrinsics, differentiable
//! ray generation, pose-free defaults and controlled perturbation.
//!
//! Extrinsics are world-from-camera: `rotation` maps camera-frame directions
//! to world directions and `translation` is the camera center. Cameras look
//! down their local `-z` axis with `+y` up; pixel centers sit at `u + 0.5`.

mod io;
mod perturb;
mod rotation;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Real;

pub use io::{read_cameras, read_cameras_str, write_cameras, write_cameras_string, CameraIoError};
pub use perturb::{perturb_cameras, PerturbError, scene_scale, PerturbationSpec, PerturbedCameras, SignPattern};
pub use rotation::{
    axis_angle, axis_rotation, canonicalize_axis_angle, euler_to_axis_angle, geodesic_distance,
    hat, rotation_matrix, so3_exp, SERIES_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub s: f64,
}

impl Intrinsics {
    /// `[[fx, s, cx], [0, fy, cy], [0, 0, 1]]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.s, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Axis-angle, radians.
    pub rotation: [f64; 3],
    /// Camera center in world units.
    pub translation: [f64; 3],
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(self.rotation)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// 4x4 world-from-camera transform.
    pub fn transform(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center());
        m
    }

    pub fn from_transform(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        Self {
            rotation: axis_angle(&r),
            translation: [m[(0, 3)], m[(1, 3)], m[(2, 3)]],
        }
    }

    /// Camera placed at `eye` looking at `target`, with `up` roughly up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let r = Matrix3::from_columns(&[right, true_up, back]);
        Self {
            rotation: axis_angle(&r),
            translation: [eye.x, eye.y, eye.z],
        }
    }
}

/// One pinhole view with plain values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub width: u32,
    pub height: u32,
}

/// Pose-free startup: identity rotation at the origin (looking down `-z`),
/// focal length equal to the image width, principal point at the center.
pub fn default_cameras(n_views: usize, width: u32, height: u32) -> Vec<Camera> {
    let w = f64::from(width);
    (0..n_views.max(1))
        .map(|_| Camera {
            intrinsics: Intrinsics {
                fx: w,
                fy: w,
                cx: w / 2.0,
                cy: f64::from(height) / 2.0,
                s: 0.0,
            },
            extrinsics: Extrinsics::identity(),
            width,
            height,
        })
        .collect()
}

/// Parameter handles for one learnable camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntrinsicParams {
    /// `[fx, fy]`.
    pub focal: ParamId,
    /// `[cx, cy]`.
    pub principal: ParamId,
    /// `[s]`.
    pub skew: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtrinsicParams {
    /// Axis-angle `[3]`.
    pub rotation: ParamId,
    /// Camera center `[3]`.
    pub translation: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CameraParams {
    pub intrinsics: IntrinsicParams,
    pub extrinsics: ExtrinsicParams,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RigOptions {
    /// Tie focal length and principal point across all views.
    pub shared_intrinsics: bool,
    /// Let the skew coefficient receive gradients.
    pub learn_skew: bool,
    /// Keep the principal point at its starting value.
    #[serde(default)]
    pub fix_principal: bool,
}

/// Learnable cameras for every view of a dataset, registered in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub views: Vec<CameraParams>,
    pub options: RigOptions,
}

impl CameraRig {
    /// Registers `cameras` as parameters named `camera.<view>.*`. With shared
    /// intrinsics the first camera's intrinsics are used for all views.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        cameras: &[Camera],
        options: RigOptions,
    ) -> Result<Self, AutodiffError> {
        let mut views = Vec::with_capacity(cameras.len());
        let mut shared: Option<IntrinsicParams> = None;
        for (i, cam) in cameras.iter().enumerate() {
            let intr = match shared {
                Some(s) => s,
                None => {
                    let prefix = if options.shared_intrinsics {
                        "camera.shared".to_string()
                    } else {
                        format!("camera.{i}")
                    };
                    let k = cam.intrinsics;
                    let ip = IntrinsicParams {
                        focal: store.insert(
                            format!("{prefix}.focal"),
                            ParamGroup::Focal,
                            Tensor::vector(&[T::lit(k.fx), T::lit(k.fy)]),
                        )?,
                        principal: store.insert(
                            format!("{prefix}.principal"),
                            ParamGroup::Focal,
                            Tensor::vector(&[T::lit(k.cx), T::lit(k.cy)]),
                        )?,
                        skew: store.insert(
                            format!("{prefix}.skew"),
                            ParamGroup::Skew,
                            Tensor::vector(&[T::lit(k.s)]),
                        )?,
                    };
                    store.set_requires_grad(ip.skew, options.learn_skew);
                    store.set_requires_grad(ip.principal, !options.fix_principal);
                    if options.shared_intrinsics {
                        shared = Some(ip);
                    }
                    ip
                }
            };
            let e = cam.extrinsics;
            let ep = ExtrinsicParams {
                rotation: store.insert(
                    format!("camera.{i}.rotation"),
                    ParamGroup::Pose,
                    Tensor::vector(&e.rotation.map(T::lit)),
                )?,
                translation: store.insert(
                    format!("camera.{i}.translation"),
                    ParamGroup::Pose,
                    Tensor::vector(&e.translation.map(T::lit)),
                )?,
            };
            views.push(CameraParams {
                intrinsics: intr,
                extrinsics: ep,
                width: cam.width,
                height: cam.height,
            });
        }
        Ok(Self { views, options })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Current parameter values as plain cameras.
    pub fn cameras<T: Real>(&self, store: &ParamStore<T>) -> Vec<Camera> {
        self.views.iter().map(|v| camera_from_params(store, v)).collect()
    }

    /// Overwrites all camera parameters with `cameras`.
    pub fn set_cameras<T: Real>(&self, store: &mut ParamStore<T>, cameras: &[Camera]) -> Result<(), AutodiffError> {
        if cameras.len() != self.views.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "expected {} cameras, got {}",
                self.views.len(),
                cameras.len()
            )));
        }
        for (v, c) in self.views.iter().zip(cameras) {
            let k = c.intrinsics;
            store.set_value(v.intrinsics.focal, Tensor::vector(&[T::lit(k.fx), T::lit(k.fy)]))?;
            store.set_value(v.intrinsics.principal, Tensor::vector(&[T::lit(k.cx), T::lit(k.cy)]))?;
            store.set_value(v.intrinsics.skew, Tensor::vector(&[T::lit(k.s)]))?;
            store.set_value(v.extrinsics.rotation, Tensor::vector(&c.extrinsics.rotation.map(T::lit)))?;
            store.set_value(
                v.extrinsics.translation,
                Tensor::vector(&c.extrinsics.translation.map(T::lit)),
            )?;
        }
        Ok(())
    }

    fn collect(&self, pick: impl Fn(&CameraParams) -> [Option<ParamId>; 2]) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.views.iter().flat_map(|v| pick(v).into_iter().flatten()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Rotation and translation parameters.
    pub fn pose_params(&self) -> Vec<ParamId> {
        self.collect(|v| [Some(v.extrinsics.rotation), Some(v.extrinsics.translation)])
    }

    /// Focal length and principal point parameters.
    pub fn focal_params(&self) -> Vec<ParamId> {
        self.collect(|v| [Some(v.intrinsics.focal), Some(v.intrinsics.principal)])
    }

    pub fn principal_params(&self) -> Vec<ParamId> {
        self.collect(|v| [Some(v.intrinsics.principal), None])
    }

    pub fn skew_params(&self) -> Vec<ParamId> {
        self.collect(|v| [Some(v.intrinsics.skew), None])
    }

    pub fn rotation_params(&self) -> Vec<ParamId> {
        self.collect(|v| [Some(v.extrinsics.rotation), None])
    }

    /// Keeps every axis-angle norm within `[0, π]`.
    pub fn canonicalize<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.rotation_params() {
            canonicalize_axis_angle(store.value_mut(id).data_mut());
        }
    }
}

pub fn camera_from_params<T: Real>(store: &ParamStore<T>, v: &CameraParams) -> Camera {
    let vals = |id: ParamId| -> Vec<f64> { store.value(id).data().iter().map(|x| x.as_f64()).collect() };
    let (f, c, s) = (vals(v.intrinsics.focal), vals(v.intrinsics.principal), vals(v.intrinsics.skew));
    let (r, t) = (vals(v.extrinsics.rotation), vals(v.extrinsics.translation));
    Camera {
        intrinsics: Intrinsics {
            fx: f[0],
            fy: f[1],
            cx: c[0],
            cy: c[1],
            s: s[0],
        },
        extrinsics: Extrinsics {
            rotation: [r[0], r[1], r[2]],
            translation: [t[0], t[1], t[2]],
        },
        width: v.width,
        height: v.height,
    }
}

/// Camera quantities placed on a tape, either as parameters or constants.
#[derive(Clone, Copy, Debug)]
pub struct CameraVars {
    /// `[2]`: fx, fy.
    pub focal: Var,
    /// `[2]`: cx, cy.
    pub principal: Var,
    /// `[1]`.
    pub skew: Var,
    /// `[3]` axis-angle.
    pub rotation: Var,
    /// `[3]` center.
    pub translation: Var,
}

impl CameraVars {
    pub fn from_params<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &CameraParams) -> Self {
        Self {
            focal: tape.param(store, p.intrinsics.focal),
            principal: tape.param(store, p.intrinsics.principal),
            skew: tape.param(store, p.intrinsics.skew),
            rotation: tape.param(store, p.extrinsics.rotation),
            translation: tape.param(store, p.extrinsics.translation),
        }
    }

    pub fn constant<T: Real>(tape: &mut Tape<T>, cam: &Camera) -> Self {
        let k = cam.intrinsics;
        let e = cam.extrinsics;
        Self {
            focal: tape.constant(Tensor::vector(&[T::lit(k.fx), T::lit(k.fy)])),
            principal: tape.constant(Tensor::vector(&[T::lit(k.cx), T::lit(k.cy)])),
            skew: tape.constant(Tensor::vector(&[T::lit(k.s)])),
            rotation: tape.constant(Tensor::vector(&e.rotation.map(T::lit))),
            translation: tape.constant(Tensor::vector(&e.translation.map(T::lit))),
        }
    }
}

/// Intrinsic matrix `K` as a `[3,3]` variable, differentiable in all five
/// entries.
pub fn intrinsics_matrix<T: Real>(tape: &mut Tape<T>, cam: &CameraVars) -> Result<Var, AutodiffError> {
    // columns pick fx, fy, cx, cy, s out of the stacked [5] vector
    let mut basis = vec![T::zero(); 9 * 5];
    for (entry, col) in [(0usize, 0usize), (4, 1), (2, 2), (5, 3), (1, 4)] {
        basis[entry * 5 + col] = T::one();
    }
    let basis = tape.constant(Tensor::new(vec![9, 5], basis)?);
    let stacked = tape.concat(&[cam.focal, cam.principal, cam.skew], 0)?;
    let flat = tape.matmul(basis, stacked)?;
    let mut corner = Tensor::zeros(&[9]);
    corner.data_mut()[8] = T::one();
    let corner = tape.constant(corner);
    let flat = tape.add(flat, corner)?;
    tape.reshape(flat, &[3, 3])
}

/// A single ray with plain values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub pixel: (u32, u32),
    pub view: usize,
    pub time: f64,
}

/// Rays for a batch of pixels of one view, recorded on a tape.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// `[B, 3]`.
    pub origins: Var,
    /// `[B, 3]`, unit norm.
    pub directions: Var,
    pub near: f64,
    pub far: f64,
    pub pixels: Vec<(u32, u32)>,
    pub view: usize,
    pub time: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn rays<T: Real>(&self, tape: &Tape<T>) -> Vec<Ray> {
        let o = tape.value(self.origins).data();
        let d = tape.value(self.directions).data();
        let get = |s: &[T], i: usize| [s[3 * i].as_f64(), s[3 * i + 1].as_f64(), s[3 * i + 2].as_f64()];
        (0..self.len())
            .map(|i| Ray {
                origin: get(o, i),
                direction: get(d, i),
                near: self.near,
                far: self.far,
                pixel: self.pixels[i],
                view: self.view,
                time: self.time,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RayError {
    #[error("pixel ({u}, {v}) outside a {width}x{height} image")]
    OutOfBounds { u: u32, v: u32, width: u32, height: u32 },
    #[error("near {near} must be below far {far}")]
    DepthRange { near: f64, far: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Pinhole back-projection of `pixels` through a camera. Directions are
/// `R · ((u + 0.5 - cx - s·y)/fx, -y, -1)` with `y = (v + 0.5 - cy)/fy`,
/// normalized; origins are the camera center.
#[allow(clippy::too_many_arguments)]
pub fn generate_rays<T: Real>(
    tape: &mut Tape<T>,
    cam: &CameraVars,
    pixels: &[(u32, u32)],
    width: u32,
    height: u32,
    near: f64,
    far: f64,
    time: f64,
    view: usize,
) -> Result<RayBatch, RayError> {
    if near >= far {
        return Err(RayError::DepthRange { near, far });
    }
    if let Some(&(u, v)) = pixels.iter().find(|&&(u, v)| u >= width || v >= height) {
        return Err(RayError::OutOfBounds { u, v, width, height });
    }
    let b = pixels.len();
    if b == 0 {
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        return Ok(RayBatch {
            origins: empty,
            directions: empty,
            near,
            far,
            pixels: Vec::new(),
            view,
            time,
        });
    }
    let half = T::lit(0.5);
    let us = Tensor::new(
        vec![b, 1],
        pixels.iter().map(|&(u, _)| T::lit(f64::from(u)) + half).collect(),
    )?;
    let vs = Tensor::new(
        vec![b, 1],
        pixels.iter().map(|&(_, v)| T::lit(f64::from(v)) + half).collect(),
    )?;
    let us = tape.constant(us);
    let vs = tape.constant(vs);
    let fx = tape.slice(cam.focal, 0, 0, 1)?;
    let fy = tape.slice(cam.focal, 0, 1, 1)?;
    let cx = tape.slice(cam.principal, 0, 0, 1)?;
    let cy = tape.slice(cam.principal, 0, 1, 1)?;

    let dy = tape.sub(vs, cy)?;
    let y = tape.div(dy, fy)?;
    let sy = tape.mul(cam.skew, y)?;
    let dx = tape.sub(us, cx)?;
    let dx = tape.sub(dx, sy)?;
    let x = tape.div(dx, fx)?;
    let neg_y = tape.neg(y);
    let minus_one = tape.constant(Tensor::full(&[b, 1], -T::one()));
    let local = tape.concat(&[x, neg_y, minus_one], 1)?;

    let r = so3_exp(tape, cam.rotation)?;
    let rt = tape.transpose(r)?;
    let world = tape.matmul(local, rt)?;
    let sq = tape.mul(world, world)?;
    let norm2 = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(norm2);
    let directions = tape.div(world, norm)?;
    let origins = tape.broadcast_to(cam.translation, &[b, 3])?;
    Ok(RayBatch {
        origins,
        directions,
        near,
        far,
        pixels: pixels.to_vec(),
        view,
        time,
    })
}
