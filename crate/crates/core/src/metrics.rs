//! Image metrics (PSNR, SSIM) and camera metrics (trajectory error after
//! similarity alignment, focal error in pixels).

use nalgebra::{Matrix3, Vector3};

use crate::camera::{geodesic_distance, Camera};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("SSIM needs images of at least {min}x{min}, got {width}x{height}")]
    TooSmall { width: u32, height: u32, min: usize },
    #[error("camera counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("need at least one camera")]
    Empty,
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch((a.width, a.height), (b.width, b.height)))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// `-10 log10(MSE)` for MSE; `+∞` when the MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM with an 11×11 Gaussian window (σ = 1.5),
/// averaged over channels and valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall { width: a.width, height: a.height, min: SSIM_WINDOW });
    }
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            // exact 1 when the windows coincide, whatever the rounding
            total += if num == den { 1.0 } else { num / den };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    /// Maps a camera: its center is transformed, its orientation rotated.
    pub fn apply_camera(&self, cam: &Camera) -> Camera {
        let mut out = *cam;
        let c = self.apply(&cam.extrinsics.center());
        out.extrinsics.translation = [c.x, c.y, c.z];
        out.extrinsics.rotation = crate::camera::axis_angle(&(self.rotation * cam.extrinsics.rotation_matrix()));
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Closed-form least-squares similarity (with or without scale) mapping
/// `src` onto `dst`. Returns `None` when the source points coincide.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Option<Similarity> {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s: f64 = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    if var_s < 1e-18 {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    Some(Similarity { scale, rotation, translation })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryError {
    pub ate_rmse: f64,
    pub translation_errors: Vec<f64>,
    /// Geodesic rotation error per view after alignment, degrees.
    pub rotation_errors_deg: Vec<f64>,
    /// Maps estimated cameras onto the ground truth.
    pub alignment: Similarity,
    /// Set when the alignment had to fall back (few or coincident cameras).
    pub warning: Option<String>,
}

impl TrajectoryError {
    pub fn mean_rotation_error_deg(&self) -> f64 {
        self.rotation_errors_deg.iter().sum::<f64>() / self.rotation_errors_deg.len().max(1) as f64
    }

    pub fn max_rotation_error_deg(&self) -> f64 {
        self.rotation_errors_deg.iter().copied().fold(0.0, f64::max)
    }
}

/// Aligns estimated camera centers to ground truth with a similarity
/// transform, then reports the RMSE of center distances and per-view
/// rotation errors. Fewer than three cameras fall back to a rigid fit;
/// coincident estimates fall back to a translation-only fit.
pub fn ate(estimated: &[Camera], truth: &[Camera]) -> Result<TrajectoryError, MetricError> {
    if estimated.len() != truth.len() {
        return Err(MetricError::CountMismatch(estimated.len(), truth.len()));
    }
    if estimated.is_empty() {
        return Err(MetricError::Empty);
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|c| c.extrinsics.center()).collect();
    let dst: Vec<Vector3<f64>> = truth.iter().map(|c| c.extrinsics.center()).collect();
    let mut warning = None;
    let with_scale = if src.len() < 3 {
        warning = Some(format!("{} cameras: rigid alignment without scale", src.len()));
        false
    } else {
        true
    };
    let alignment = match umeyama(&src, &dst, with_scale) {
        Some(s) => s,
        None => {
            warning = Some("estimated camera centers coincide: translation-only alignment".into());
            let n = src.len() as f64;
            let shift = dst.iter().sum::<Vector3<f64>>() / n - src.iter().sum::<Vector3<f64>>() / n;
            Similarity { translation: shift, ..Similarity::identity() }
        }
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let translation_errors: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (alignment.apply(s) - d).norm()).collect();
    let ate_rmse = (translation_errors.iter().map(|e| e * e).sum::<f64>() / src.len() as f64).sqrt();
    let rotation_errors_deg = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            let aligned = alignment.rotation * e.extrinsics.rotation_matrix();
            geodesic_distance(&aligned, &t.extrinsics.rotation_matrix()).to_degrees()
        })
        .collect();
    Ok(TrajectoryError {
        ate_rmse,
        translation_errors,
        rotation_errors_deg,
        alignment,
        warning,
    })
}

/// Mean over views of `(|fx - f̂x| + |fy - f̂y|) / 2`.
pub fn focal_error_px(estimated: &[Camera], truth: &[Camera]) -> Result<f64, MetricError> {
    if estimated.len() != truth.len() {
        return Err(MetricError::CountMismatch(estimated.len(), truth.len()));
    }
    if estimated.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| 0.5 * ((e.intrinsics.fx - t.intrinsics.fx).abs() + (e.intrinsics.fy - t.intrinsics.fy).abs()))
        .sum();
    Ok(total / estimated.len() as f64)
}
