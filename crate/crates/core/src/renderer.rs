//! Stratified sampling along rays and emission-absorption compositing,
//! recorded on the tape so gradients reach field and camera parameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::camera::{generate_rays, Camera, CameraVars, Ray, RayError};
use crate::fields::RadianceField;
use crate::raster::Image;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Samples per ray.
    pub samples: usize,
    /// Jitter depths inside their bins during training.
    pub jitter: bool,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            jitter: true,
            background: [0.0; 3],
            near: 0.1,
            far: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("render batch is empty")]
    EmptyBatch,
    #[error("samples per ray must be at least 1")]
    NoSamples,
    #[error("non-finite field output ({what}) at batch entry {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error(transparent)]
    Ray(#[from] RayError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Depths and interval widths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    /// Neighbor gaps; the last interval runs to `far`.
    pub deltas: Vec<f64>,
    pub points: Vec<[f64; 3]>,
}

fn bin_depths(near: f64, far: f64, n: usize, mut jitter: Option<&mut impl Rng>) -> Vec<f64> {
    let h = (far - near) / n as f64;
    (0..n)
        .map(|k| {
            let off = match jitter.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            near + (k as f64 + off) * h
        })
        .collect()
}

fn deltas_of(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| if i + 1 < n { depths[i + 1] - depths[i] } else { far - depths[i] })
        .collect()
}

/// One depth per equal-width bin of `[near, far]`: uniform inside the bin
/// when `jitter`, at the bin center otherwise.
pub fn stratified_samples(ray: &Ray, n: usize, rng: &mut impl Rng, jitter: bool) -> RaySamples {
    let depths = bin_depths(ray.near, ray.far, n, if jitter { Some(rng) } else { None });
    let deltas = deltas_of(&depths, ray.far);
    let points = depths
        .iter()
        .map(|&t| std::array::from_fn(|k| ray.origin[k] + t * ray.direction[k]))
        .collect();
    RaySamples { depths, deltas, points }
}

/// Composited values for a batch of rays.
#[derive(Clone, Copy, Debug)]
pub struct RenderOutput {
    /// `[B,3]`.
    pub rgb: Var,
    /// `[B,N]`.
    pub weights: Var,
    /// `[B,1]`, `Σ w_i`.
    pub opacity: Var,
    /// `[B,1]`, `Σ w_i t_i`.
    pub depth: Var,
}

/// Emission-absorption quadrature: `α = 1 - exp(-σδ)`,
/// `T_i = exp(-Σ_{j<i} σ_j δ_j)`, `w = Tα`, `rgb = Σ w c + (1 - A) bg`.
/// Shapes: `sigma, deltas, depths: [B,N]`, `colors: [B,N,3]`.
pub fn composite<T: Real>(
    tape: &mut Tape<T>,
    sigma: Var,
    colors: Var,
    deltas: Var,
    depths: Var,
    background: [f64; 3],
) -> Result<RenderOutput, AutodiffError> {
    let shape = tape.shape(sigma).to_vec();
    let (b, n) = match shape[..] {
        [b, n] => (b, n),
        _ => {
            return Err(AutodiffError::ShapeMismatch {
                op: "composite",
                lhs: shape,
                rhs: vec![0, 0],
            })
        }
    };
    let sd = tape.mul(sigma, deltas)?;
    let neg = tape.neg(sd);
    let survive = tape.exp(neg);
    let alpha = tape.neg(survive);
    let alpha = tape.add_scalar(alpha, T::one());
    let acc = tape.cumsum_exclusive(sd, 1)?;
    let acc = tape.neg(acc);
    let trans = tape.exp(acc);
    let weights = tape.mul(trans, alpha)?;

    let w3 = tape.reshape(weights, &[b, n, 1])?;
    let wc = tape.mul(w3, colors)?;
    let rgb = tape.sum_axis(wc, 1)?;
    let rgb = tape.reshape(rgb, &[b, 3])?;
    let opacity = tape.sum_axis(weights, 1)?;
    let wd = tape.mul(weights, depths)?;
    let depth = tape.sum_axis(wd, 1)?;

    let rgb = if background.iter().any(|&c| c != 0.0) {
        let clear = tape.neg(opacity);
        let clear = tape.add_scalar(clear, T::one());
        let bg = tape.constant(Tensor::vector(&background.map(T::lit)));
        let fill = tape.mul(clear, bg)?;
        tape.add(rgb, fill)?
    } else {
        rgb
    };
    Ok(RenderOutput {
        rgb,
        weights,
        opacity,
        depth,
    })
}

/// Samples along already generated rays, queries `field`, and composites.
/// `origins, dirs: [B,3]`; depths are drawn per ray from `rng` when
/// `cfg.jitter`.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real, F: RadianceField<T> + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    field: &F,
    origins: Var,
    dirs: Var,
    time: f64,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RenderOutput, RenderError> {
    let b = tape.shape(origins)[0];
    let n = cfg.samples;
    if b == 0 {
        return Err(RenderError::EmptyBatch);
    }
    if n == 0 {
        return Err(RenderError::NoSamples);
    }
    let mut depths = Vec::with_capacity(b * n);
    let mut deltas = Vec::with_capacity(b * n);
    for _ in 0..b {
        let d = bin_depths(cfg.near, cfg.far, n, if cfg.jitter { Some(&mut *rng) } else { None });
        deltas.extend(deltas_of(&d, cfg.far));
        depths.extend(d);
    }
    let lit = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let depths = tape.constant(Tensor::new(vec![b, n], lit(depths))?);
    let deltas = tape.constant(Tensor::new(vec![b, n], lit(deltas))?);

    let o = tape.reshape(origins, &[b, 1, 3])?;
    let d = tape.reshape(dirs, &[b, 1, 3])?;
    let t = tape.reshape(depths, &[b, n, 1])?;
    let td = tape.mul(t, d)?;
    let pts = tape.add(o, td)?;
    let pts = tape.reshape(pts, &[b * n, 3])?;
    let d_all = tape.broadcast_to(d, &[b, n, 3])?;
    let d_all = tape.reshape(d_all, &[b * n, 3])?;
    let times = tape.constant(Tensor::full(&[b * n, 1], T::lit(time)));

    let sample = field.query(tape, store, pts, d_all, times)?;
    check_finite(tape, sample.sigma, "density", n)?;
    check_finite(tape, sample.rgb, "color", 3 * n)?;
    let sigma = tape.reshape(sample.sigma, &[b, n])?;
    let colors = tape.reshape(sample.rgb, &[b, n, 3])?;
    Ok(composite(tape, sigma, colors, deltas, depths, cfg.background)?)
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, what: &'static str, per_ray: usize) -> Result<(), RenderError> {
    match tape.value(v).data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(RenderError::NonFinite { what, index: i / per_ray }),
        None => Ok(()),
    }
}

/// Renders `pixels` of one view: ray generation, sampling, field query and
/// compositing. Colors come back in the order of `pixels`.
#[allow(clippy::too_many_arguments)]
pub fn render_pixels<T: Real, F: RadianceField<T> + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    field: &F,
    camera: &CameraVars,
    pixels: &[(u32, u32)],
    width: u32,
    height: u32,
    time: f64,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RenderOutput, RenderError> {
    if pixels.is_empty() {
        return Err(RenderError::EmptyBatch);
    }
    let rays = generate_rays(tape, camera, pixels, width, height, cfg.near, cfg.far, time, 0)?;
    render_rays(tape, store, field, rays.origins, rays.directions, time, cfg, rng)
}

/// Full-image render with fixed cameras and no gradients. Rows are rendered
/// in independent chunks, in parallel.
pub fn render_image<T: Real, F: RadianceField<T> + Sync + ?Sized>(
    store: &ParamStore<T>,
    field: &F,
    camera: &Camera,
    time: f64,
    cfg: &RenderConfig,
    chunk: usize,
) -> Result<Image, RenderError> {
    let cfg = RenderConfig { jitter: false, ..*cfg };
    let coords: Vec<(u32, u32)> = (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect();
    let parts: Vec<Result<Vec<f64>, RenderError>> = coords
        .par_chunks(chunk.max(1))
        .map(|px| {
            let mut tape = Tape::no_grad();
            let vars = CameraVars::constant(&mut tape, camera);
            // no jitter, so the rng is never consulted
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let out = render_pixels(&mut tape, store, field, &vars, px, camera.width, camera.height, time, &cfg, &mut rng)?;
            Ok(tape.value(out.rgb).data().iter().map(|x| x.as_f64()).collect())
        })
        .collect();
    let mut data = Vec::with_capacity(coords.len() * 3);
    for p in parts {
        data.extend(p?);
    }
    Ok(Image::new(camera.width, camera.height, data))
}
