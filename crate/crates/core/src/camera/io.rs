//! Camera JSON: one entry per frame with a 4x4 world-from-camera
//! `transform_matrix`, intrinsics and image size. Readers also accept a
//! top-level `intrinsics` block shared by frames that omit their own.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{Camera, Extrinsics, Intrinsics};

#[derive(Debug, thiserror::Error)]
pub enum CameraIoError {
    #[error("reading cameras from {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed camera JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("frame {frame}: missing {field} and no shared intrinsics block")]
    Missing { frame: usize, field: &'static str },
    #[error("frame {frame}: transform_matrix is not a rigid 4x4 transform")]
    BadTransform { frame: usize },
}

#[derive(Serialize, Deserialize, Default, Clone, Copy)]
struct IntrinsicBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    fx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct Frame {
    transform_matrix: [[f64; 4]; 4],
    #[serde(flatten)]
    intrinsics: IntrinsicBlock,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<IntrinsicBlock>,
    frames: Vec<Frame>,
}

pub fn write_cameras_string(cameras: &[Camera]) -> String {
    let frames = cameras
        .iter()
        .map(|c| {
            let m = c.extrinsics.transform();
            let mut rows = [[0.0; 4]; 4];
            for (r, row) in rows.iter_mut().enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = m[(r, k)];
                }
            }
            let k = c.intrinsics;
            Frame {
                transform_matrix: rows,
                intrinsics: IntrinsicBlock {
                    fx: Some(k.fx),
                    fy: Some(k.fy),
                    cx: Some(k.cx),
                    cy: Some(k.cy),
                    s: Some(k.s),
                    width: Some(c.width),
                    height: Some(c.height),
                },
            }
        })
        .collect();
    let file = CameraFile { intrinsics: None, frames };
    serde_json::to_string_pretty(&file).expect("camera JSON serialization cannot fail")
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<(), CameraIoError> {
    std::fs::write(path, write_cameras_string(cameras)).map_err(|source| CameraIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_cameras_str(text: &str) -> Result<Vec<Camera>, CameraIoError> {
    let file: CameraFile = serde_json::from_str(text)?;
    let shared = file.intrinsics.unwrap_or_default();
    file.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pick = |own: Option<f64>, fallback: Option<f64>, field| {
                own.or(fallback).ok_or(CameraIoError::Missing { frame: i, field })
            };
            let k = &f.intrinsics;
            let width = k.width.or(shared.width).ok_or(CameraIoError::Missing { frame: i, field: "width" })?;
            let height = k.height.or(shared.height).ok_or(CameraIoError::Missing { frame: i, field: "height" })?;
            let fx = pick(k.fx, shared.fx, "fx")?;
            let intrinsics = Intrinsics {
                fx,
                fy: k.fy.or(shared.fy).unwrap_or(fx),
                cx: k.cx.or(shared.cx).unwrap_or(f64::from(width) / 2.0),
                cy: k.cy.or(shared.cy).unwrap_or(f64::from(height) / 2.0),
                s: k.s.or(shared.s).unwrap_or(0.0),
            };
            let m = Matrix4::from_fn(|r, c| f.transform_matrix[r][c]);
            let rot = m.fixed_view::<3, 3>(0, 0);
            let ortho = (rot.transpose() * rot - nalgebra::Matrix3::identity()).abs().max();
            if !m.iter().all(|x| x.is_finite()) || ortho > 1e-6 || (rot.determinant() - 1.0).abs() > 1e-6 {
                return Err(CameraIoError::BadTransform { frame: i });
            }
            Ok(Camera {
                intrinsics,
                extrinsics: Extrinsics::from_transform(&m),
                width,
                height,
            })
        })
        .collect()
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>, CameraIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| CameraIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_cameras_str(&text)
}
