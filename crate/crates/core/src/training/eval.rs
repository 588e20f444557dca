//! Held-out view evaluation.
//!
//! Held-out cameras are not optimized, so their ground-truth poses are
//! mapped into the estimated frame with the inverse of the similarity that
//! aligns the estimated training cameras to the ground truth. Their
//! intrinsics get the mean correction learned on the training views
//! (focal ratio, principal-point and skew offset).

use std::path::Path;

use crate::camera::Camera;
use crate::metrics::{ate, psnr, ssim, TrajectoryError};
use crate::raster::Image;
use crate::renderer::render_image;
use crate::scalar::Real;

use super::{TrainError, Trainer};

const RENDER_CHUNK: usize = 1024;

#[derive(Clone, Debug)]
pub struct ViewEval {
    pub view: usize,
    pub time_index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub render: Image,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub views: Vec<ViewEval>,
    pub trajectory: Option<TrajectoryError>,
    pub focal_err_px: Option<f64>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.views.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.views.iter().map(|v| v.ssim))
    }

    pub fn ate_rmse(&self) -> Option<f64> {
        self.trajectory.as_ref().map(|t| t.ate_rmse)
    }

    pub fn rot_err_deg(&self) -> Option<f64> {
        self.trajectory.as_ref().map(TrajectoryError::mean_rotation_error_deg)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl<T: Real> Trainer<T> {
    /// Held-out cameras expressed in the frame of the estimated cameras, by
    /// view. `None` without ground truth.
    ///
    /// With shared intrinsics a held-out view is another shot from the same
    /// camera, so it takes the learned intrinsics. Per-view intrinsics say
    /// nothing about an unseen camera, which keeps its own calibration.
    pub fn holdout_cameras(&self) -> Result<Option<Vec<(usize, Camera)>>, TrainError> {
        let (Some(all), Some(truth)) = (&self.dataset().cameras, self.ground_truth()) else {
            return Ok(None);
        };
        let est = self.cameras();
        let to_est = ate(&est, truth)?.alignment.inverse();
        let shared = self.config.camera.shared_intrinsics;
        let n = est.len() as f64;
        let avg = |f: &dyn Fn(&Camera, &Camera) -> f64| est.iter().zip(truth).map(|(e, t)| f(e, t)).sum::<f64>() / n;
        let rx = avg(&|e, t| e.intrinsics.fx / t.intrinsics.fx);
        let ry = avg(&|e, t| e.intrinsics.fy / t.intrinsics.fy);
        let dcx = avg(&|e, t| e.intrinsics.cx - t.intrinsics.cx);
        let dcy = avg(&|e, t| e.intrinsics.cy - t.intrinsics.cy);
        let ds = avg(&|e, t| e.intrinsics.s - t.intrinsics.s);
        Ok(Some(
            self.dataset()
                .holdout_views()
                .into_iter()
                .map(|v| {
                    let mut cam = to_est.apply_camera(&all[v]);
                    if !shared {
                        return (v, cam);
                    }
                    let k = &mut cam.intrinsics;
                    k.fx *= rx;
                    k.fy *= ry;
                    k.cx += dcx;
                    k.cy += dcy;
                    k.s += ds;
                    (v, cam)
                })
                .collect(),
        ))
    }

    /// Renders every held-out frame and scores it, plus camera errors on
    /// the training views. Renders are quantized to 8 bits before scoring.
    pub fn evaluate(&self) -> Result<EvalReport, TrainError> {
        let errs = self.camera_errors()?;
        let mut views = Vec::new();
        match self.holdout_cameras()? {
            None => log::warn!("dataset has no ground-truth cameras; held-out views are not scored"),
            Some(cams) => {
                let ds = self.dataset();
                for f in ds.holdout_frames() {
                    let frame = &ds.manifest.frames[f];
                    let cam = cams.iter().find(|(v, _)| *v == frame.view).expect("holdout view").1;
                    let render = render_image(&self.store, &self.field, &cam, frame.time, &self.render, RENDER_CHUNK)
                        .map_err(TrainError::Render)?
                        .quantized();
                    views.push(ViewEval {
                        view: frame.view,
                        time_index: frame.time_index,
                        psnr: psnr(&render, &ds.images[f])?,
                        ssim: ssim(&render, &ds.images[f])?,
                        render,
                    });
                }
            }
        }
        let (trajectory, focal_err_px) = match errs {
            Some((t, f)) => (Some(t), Some(f)),
            None => (None, None),
        };
        Ok(EvalReport { views, trajectory, focal_err_px })
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the evaluation table: one row per held-out frame plus a `mean`
/// row. Columns `scene, view, psnr, ssim, lpips, ate_rmse, rot_err_deg,
/// focal_err_px`; `lpips` is always empty. With a baseline, `delta_*`
/// columns hold `ours − baseline`. Infinite PSNR is written as `inf`.
pub fn write_eval_csv(
    path: &Path,
    scene: &str,
    report: &EvalReport,
    baseline: Option<&EvalReport>,
) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["scene", "view", "psnr", "ssim", "lpips", "ate_rmse", "rot_err_deg", "focal_err_px"];
    if baseline.is_some() {
        header.extend(["delta_psnr", "delta_ssim", "delta_ate_rmse", "delta_rot_err_deg", "delta_focal_err_px"]);
    }
    w.write_record(&header).map_err(csv_err)?;

    type Row = (String, f64, f64);
    let rows = |r: &EvalReport| -> Vec<Row> {
        let mut v: Vec<Row> = r
            .views
            .iter()
            .map(|e| (format!("v{:03}_t{:03}", e.view, e.time_index), e.psnr, e.ssim))
            .collect();
        v.push(("mean".into(), r.mean_psnr(), r.mean_ssim()));
        v
    };
    let ours = rows(report);
    let base = baseline.map(rows);
    let cam = |r: &EvalReport| [r.ate_rmse(), r.rot_err_deg(), r.focal_err_px];
    let ours_cam = cam(report);
    for (i, (view, p, s)) in ours.iter().enumerate() {
        let mut rec = vec![scene.to_string(), view.clone(), p.to_string(), s.to_string(), String::new()];
        rec.extend(ours_cam.iter().map(|x| opt(*x)));
        if let (Some(base), Some(b)) = (&base, baseline) {
            let (bp, bs) = base.get(i).map(|r| (r.1, r.2)).unwrap_or((f64::NAN, f64::NAN));
            rec.push(delta(*p, bp));
            rec.push(delta(*s, bs));
            for (o, bc) in ours_cam.iter().zip(cam(b)) {
                rec.push(opt(o.zip(bc).map(|(o, b)| o - b)));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

// Equal values (including two infinities) give exactly 0.
fn delta(a: f64, b: f64) -> String {
    if a == b {
        "0".into()
    } else {
        (a - b).to_string()
    }
}
