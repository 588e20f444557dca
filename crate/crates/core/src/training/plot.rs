//! Minimal line plots of training traces, written as PNG.

use std::path::{Path, PathBuf};

use crate::dataio::write_png;
use crate::raster::Image;

use super::{EpochRecord, TrainError};

const MARGIN: u32 = 8;
const AXIS: [f64; 3] = [0.3, 0.3, 0.3];
const LINE: [f64; 3] = [0.1, 0.3, 0.8];

/// Rasterizes `points` as a polyline on a white canvas with a frame. Axes
/// are scaled to the data range; non-finite points are dropped.
pub fn line_plot(points: &[(f64, f64)], width: u32, height: u32) -> Image {
    let mut img = Image::filled(width, height, [1.0; 3]);
    let (x0, y0) = (MARGIN, MARGIN);
    let (x1, y1) = (width.saturating_sub(MARGIN + 1), height.saturating_sub(MARGIN + 1));
    if x1 <= x0 || y1 <= y0 {
        return img;
    }
    for x in x0..=x1 {
        img.set_pixel(x, y0, AXIS);
        img.set_pixel(x, y1, AXIS);
    }
    for y in y0..=y1 {
        img.set_pixel(x0, y, AXIS);
        img.set_pixel(x1, y, AXIS);
    }
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        return img;
    }
    let range = |it: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (xl, xh) = range(&mut pts.iter().map(|p| p.0));
    let (yl, yh) = range(&mut pts.iter().map(|p| p.1));
    let to_px = |(x, y): (f64, f64)| {
        let u = f64::from(x0) + (x - xl) / (xh - xl) * f64::from(x1 - x0);
        let v = f64::from(y1) - (y - yl) / (yh - yl) * f64::from(y1 - y0);
        (u, v)
    };
    let mut prev = to_px(pts[0]);
    for &p in &pts {
        let cur = to_px(p);
        let steps = ((cur.0 - prev.0).abs().max((cur.1 - prev.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let a = s as f64 / steps as f64;
            let u = (prev.0 + a * (cur.0 - prev.0)).round() as u32;
            let v = (prev.1 + a * (cur.1 - prev.1)).round() as u32;
            img.set_pixel(u.min(width - 1), v.min(height - 1), LINE);
        }
        prev = cur;
    }
    img
}

/// Writes `loss.png` (log10 of the loss) and, when camera errors were
/// logged, `ate.png` and `focal.png` into `dir`. Returns the written paths.
pub fn write_trace_plots(records: &[EpochRecord], dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    let mut emit = |name: &str, pts: Vec<(f64, f64)>| -> Result<(), TrainError> {
        if pts.is_empty() {
            return Ok(());
        }
        let path = dir.join(name);
        write_png(&line_plot(&pts, 320, 200), &path)?;
        out.push(path);
        Ok(())
    };
    emit("loss.png", records.iter().map(|r| (r.epoch as f64, r.loss.log10())).collect())?;
    emit("ate.png", records.iter().filter_map(|r| r.ate.map(|a| (r.epoch as f64, a))).collect())?;
    emit(
        "focal.png",
        records.iter().filter_map(|r| r.focal_err_px.map(|f| (r.epoch as f64, f))).collect(),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_draws_frame_and_line() {
        let img = line_plot(&[(0.0, 0.0), (1.0, 1.0)], 64, 48);
        assert_eq!(img.pixel(MARGIN, MARGIN), AXIS);
        // the diagonal ends at the top-right corner of the frame
        let ink = img.coords().into_iter().filter(|&(u, v)| img.pixel(u, v) == LINE).count();
        assert!(ink > 30);
        let flat = line_plot(&[(0.0, 2.0), (1.0, 2.0), (2.0, f64::NAN)], 64, 48);
        assert!(flat.coords().into_iter().any(|(u, v)| flat.pixel(u, v) == LINE));
    }
}
