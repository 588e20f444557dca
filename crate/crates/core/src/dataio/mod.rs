//! Dataset directories and checkpoint files.
//!
//! A dataset directory holds `manifest.json`, an optional `cameras.json`
//! and `images/v{view}_t{time}.png`. Its content hash is the SHA-256 of the
//! manifest bytes followed by every image file's bytes in frame order.

mod checkpoint;

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{read_cameras, write_cameras_string, Camera, CameraIoError};
use crate::raster::Image;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    OptimizerSnapshot, SlotSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub view: usize,
    pub time_index: usize,
    /// Normalized time in `[0, 1]`.
    pub time: f64,
    /// Path relative to the dataset root.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    pub n_views: usize,
    pub n_timesteps: usize,
    /// Views excluded from training.
    pub holdout: Vec<usize>,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default)]
    pub scene_center: [f64; 3],
    #[serde(default = "one")]
    pub scene_radius: f64,
    pub frames: Vec<Frame>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset has no manifest.json at {0}")]
    MissingManifest(PathBuf),
    #[error("manifest frame {frame} references missing image {path}")]
    MissingFrame { frame: usize, path: PathBuf },
    #[error("{path}: image is {got:?}, manifest says {expected:?}")]
    DimensionMismatch { path: PathBuf, expected: (u32, u32), got: (u32, u32) },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("manifest lists {expected} views but cameras.json has {got}")]
    CameraCount { expected: usize, got: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Camera(#[from] CameraIoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Images indexed by frame, optional ground-truth cameras and a content hash.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// One image per manifest frame, same order.
    pub images: Vec<Image>,
    /// Per-view cameras when known.
    pub cameras: Option<Vec<Camera>>,
    pub hash: String,
}

impl Manifest {
    fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::Manifest("image size must be positive".into()));
        }
        if !(self.near < self.far) || !(self.near >= 0.0) {
            return Err(DataError::Manifest(format!("need 0 <= near < far, got {} and {}", self.near, self.far)));
        }
        if let Some(f) = self.frames.iter().find(|f| f.view >= self.n_views) {
            return Err(DataError::Manifest(format!("frame {} has view {} >= n_views", f.file, f.view)));
        }
        if let Some(h) = self.holdout.iter().find(|&&h| h >= self.n_views) {
            return Err(DataError::Manifest(format!("holdout view {h} >= n_views")));
        }
        Ok(())
    }
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.to_rgb8()).expect("buffer size matches");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), image::ImageOutputFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    let img = image::load_from_memory(bytes).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(Image::from_rgb8(rgb.width(), rgb.height(), rgb.as_raw()))
}

pub fn write_png(img: &Image, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, encode_png(img)).map_err(io_err(path))
}

pub fn read_png(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_png(&bytes, path)
}

fn content_hash<'a>(manifest: &[u8], images: impl Iterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    for img in images {
        h.update(img);
    }
    hex::encode(h.finalize())
}

impl Dataset {
    /// Builds an in-memory dataset; images are quantized to 8 bits so the
    /// result matches what a save/load round trip produces.
    pub fn new(manifest: Manifest, images: Vec<Image>, cameras: Option<Vec<Camera>>) -> Self {
        let images: Vec<Image> = images.iter().map(Image::quantized).collect();
        let pngs: Vec<Vec<u8>> = images.par_iter().map(encode_png).collect();
        let hash = content_hash(&manifest.to_bytes(), pngs.iter().map(Vec::as_slice));
        Self {
            manifest,
            images,
            cameras,
            hash,
        }
    }

    /// Indices of frames whose view is not held out.
    pub fn train_frames(&self) -> Vec<usize> {
        self.frame_indices(|v| !self.manifest.holdout.contains(&v))
    }

    pub fn holdout_frames(&self) -> Vec<usize> {
        self.frame_indices(|v| self.manifest.holdout.contains(&v))
    }

    fn frame_indices(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.manifest.frames.len())
            .filter(|&i| keep(self.manifest.frames[i].view))
            .collect()
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.manifest.n_views).filter(|v| !self.manifest.holdout.contains(v)).collect()
    }

    pub fn holdout_views(&self) -> Vec<usize> {
        self.manifest.holdout.clone()
    }

    /// Ground-truth cameras of the given views.
    pub fn cameras_of(&self, views: &[usize]) -> Option<Vec<Camera>> {
        self.cameras.as_ref().map(|c| views.iter().map(|&v| c[v]).collect())
    }
}

/// Writes `manifest.json`, `cameras.json` (when cameras are known) and the
/// PNG frames under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (frame, img) in ds.manifest.frames.iter().zip(&ds.images) {
        write_png(img, &dir.join(&frame.file))?;
    }
    if let Some(cams) = &ds.cameras {
        let path = dir.join("cameras.json");
        std::fs::write(&path, write_cameras_string(cams)).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, ds.manifest.to_bytes()).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join("manifest.json");
    if !mpath.is_file() {
        return Err(DataError::MissingManifest(dir.to_path_buf()));
    }
    let mbytes = std::fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes).map_err(|source| DataError::Json {
        path: mpath.clone(),
        source,
    })?;
    manifest.validate()?;

    let mut raw = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let path = dir.join(&f.file);
        if !path.is_file() {
            return Err(DataError::MissingFrame { frame: i, path });
        }
        raw.push((path.clone(), std::fs::read(&path).map_err(io_err(&path))?));
    }
    let images = raw
        .par_iter()
        .map(|(path, bytes)| {
            let img = decode_png(bytes, path)?;
            if (img.width, img.height) != (manifest.width, manifest.height) {
                return Err(DataError::DimensionMismatch {
                    path: path.clone(),
                    expected: (manifest.width, manifest.height),
                    got: (img.width, img.height),
                });
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let cpath = dir.join("cameras.json");
    let cameras = if cpath.is_file() {
        let cams = read_cameras(&cpath)?;
        if cams.len() != manifest.n_views {
            return Err(DataError::CameraCount {
                expected: manifest.n_views,
                got: cams.len(),
            });
        }
        Some(cams)
    } else {
        None
    };
    let hash = content_hash(&mbytes, raw.iter().map(|(_, b)| b.as_slice()));
    Ok(Dataset {
        manifest,
        images,
        cameras,
        hash,
    })
}
