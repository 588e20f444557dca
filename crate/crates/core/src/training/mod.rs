//! Scheduled joint optimization of the radiance field and the cameras.
//!
//! Epoch `i` (1-based) samples a fixed number of pixels from every training
//! image, renders them, and takes one optimizer step on the mean photometric
//! loss:
//!
//! * the field optimizer steps the static branch while `i <= N_s` and the
//!   dynamic branch afterwards;
//! * while `i <= N_c` the band gates (field optimizer), the poses (pose
//!   optimizer) and the intrinsics (focal optimizer) are stepped as well,
//!   and rotations are re-canonicalized after the pose step.
//!
//! Both conditions are checked independently, so the phases may overlap.

mod ablation;
mod config;
mod eval;
mod plot;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, AutodiffError, Moments, ParamId, ParamStore, Tape, Tensor, Var};
use crate::camera::{default_cameras, perturb_cameras, Camera, CameraRig, CameraVars, PerturbError, RigOptions};
use crate::dataio::{Checkpoint, CheckpointError, DataError, Dataset, OptimizerSnapshot, SlotSnapshot};
use crate::fields::{FieldError, NerfField};
use crate::metrics::{ate, focal_error_px, psnr_from_mse, MetricError, TrajectoryError};
use crate::renderer::{render_pixels, RenderConfig, RenderError};
use crate::scalar::Real;

pub use ablation::{run_ablation, AblationArm, AblationPlan, AblationRow, PerturbClass};
pub use config::{
    lr_at, CameraConfig, ConfigError, LrKind, Precision, ScheduleConfig, StairDecay, TrainConfig,
};
pub use eval::{write_eval_csv, EvalReport, ViewEval};
pub use plot::{line_plot, write_trace_plots};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Render(RenderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset has no training frames")]
    NoTrainingFrames,
    #[error("dataset has no cameras; use pose_free to start from default cameras")]
    NoCameras,
    #[error("parameter {0} is owned by more than one optimizer")]
    SharedParameter(String),
    #[error("checkpoint holds {found} cameras but the dataset has {expected} training views")]
    CameraCount { expected: usize, found: usize },
    #[error("checkpoint optimizer state does not match: {0}")]
    OptimizerState(String),
    #[error("non-finite loss at epoch {epoch} (loss {loss}); parameter norms: {}", format_norms(.norms))]
    NonFinite { epoch: u64, loss: f64, norms: Vec<(String, f64)> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms.iter().map(|(n, v)| format!("{n}={v:.4e}")).collect::<Vec<_>>().join(", ")
}

impl TrainError {
    /// Numerical aborts, as opposed to bad input or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite { .. } | Self::Render(RenderError::NonFinite { .. }))
    }
}

/// Mean squared error over every channel of every pixel of `pred` and `gt`
/// (both `[B, 3]`, or any equal shapes).
pub fn photometric_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var, AutodiffError> {
    let (ps, gs) = (tape.shape(pred).to_vec(), tape.shape(gt).to_vec());
    if ps != gs {
        return Err(AutodiffError::ShapeMismatch { op: "photometric_loss", lhs: ps, rhs: gs });
    }
    if ps.iter().product::<usize>() == 0 {
        return Err(AutodiffError::InvalidArgument("photometric loss of an empty batch".into()));
    }
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// The three Adam optimizers with disjoint parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBank<T> {
    /// Static and dynamic branches plus the band gates.
    pub field: AdamState<T>,
    /// Rotations and translations.
    pub pose: AdamState<T>,
    /// Focal lengths, principal points unless fixed, and skew when learned.
    pub focal: AdamState<T>,
}

impl<T: Real> OptimizerBank<T> {
    pub fn new(store: &ParamStore<T>, field: &NerfField, rig: &CameraRig) -> Result<Self, TrainError> {
        let mut fp = field.static_params();
        fp.extend(field.dynamic_params());
        fp.extend(field.gate_params());
        let pp = rig.pose_params();
        let mut cp = rig.focal_params();
        if rig.options.fix_principal {
            let fixed = rig.principal_params();
            cp.retain(|id| !fixed.contains(id));
        }
        if rig.options.learn_skew {
            cp.extend(rig.skew_params());
        }
        let mut seen = BTreeSet::new();
        for id in fp.iter().chain(&pp).chain(&cp) {
            if !seen.insert(*id) {
                return Err(TrainError::SharedParameter(store.name(*id).to_string()));
            }
        }
        Ok(Self {
            field: AdamState::new("field", store, &fp),
            pose: AdamState::new("pose", store, &pp),
            focal: AdamState::new("focal", store, &cp),
        })
    }

    pub fn all(&self) -> [&AdamState<T>; 3] {
        [&self.field, &self.pose, &self.focal]
    }

    fn all_mut(&mut self) -> [&mut AdamState<T>; 3] {
        [&mut self.field, &mut self.pose, &mut self.focal]
    }

    /// Which optimizer, if any, owns `id`.
    pub fn owner(&self, id: ParamId) -> Option<&str> {
        self.all().into_iter().find(|o| o.owns(id)).map(|o| o.name.as_str())
    }

    pub fn snapshot(&self, store: &ParamStore<T>) -> Vec<OptimizerSnapshot<T>> {
        self.all()
            .into_iter()
            .map(|o| OptimizerSnapshot {
                name: o.name.clone(),
                steps: o.steps,
                slots: o
                    .params()
                    .map(|id| {
                        let m = o.moments(id).expect("owned");
                        SlotSnapshot {
                            param: store.name(id).to_string(),
                            t: m.t,
                            m: m.m.clone(),
                            v: m.v.clone(),
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Restores moments and step counts; validates everything before
    /// changing anything.
    pub fn restore(&mut self, store: &ParamStore<T>, snaps: &[OptimizerSnapshot<T>]) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::OptimizerState(m));
        let mut plan = Vec::new();
        for (k, opt) in self.all().into_iter().enumerate() {
            let Some(snap) = snaps.iter().find(|s| s.name == opt.name) else {
                return bad(format!("missing optimizer {}", opt.name));
            };
            let owned: BTreeSet<&str> = opt.params().map(|id| store.name(id)).collect();
            let stored: BTreeSet<&str> = snap.slots.iter().map(|s| s.param.as_str()).collect();
            if owned != stored {
                return bad(format!("optimizer {} covers different parameters", opt.name));
            }
            for s in &snap.slots {
                let id = store.id(&s.param).expect("name checked above");
                let shape = store.value(id).shape();
                if s.m.shape() != shape || s.v.shape() != shape {
                    return bad(format!("moments of {} have the wrong shape", s.param));
                }
                plan.push((k, id, s));
            }
        }
        let steps: Vec<u64> = self
            .all()
            .iter()
            .map(|o| snaps.iter().find(|s| s.name == o.name).expect("checked").steps)
            .collect();
        let mut opts = self.all_mut();
        for (k, id, s) in plan {
            opts[k].set_moments(
                id,
                Moments {
                    m: s.m.clone(),
                    v: s.v.clone(),
                    t: s.t,
                },
            )?;
        }
        for (o, s) in opts.iter_mut().zip(steps) {
            o.steps = s;
        }
        Ok(())
    }
}

/// One row of the per-epoch log. Epoch 0 is the state before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub psnr_train: f64,
    pub lr_field: f64,
    pub lr_cam: f64,
    pub ate: Option<f64>,
    pub focal_err_px: Option<f64>,
}

pub fn write_log(records: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Which parameter sets epoch `epoch` (1-based) steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub static_branch: bool,
    pub dynamic_branch: bool,
    pub cameras: bool,
}

impl Phase {
    pub fn at(epoch: u64, schedule: &ScheduleConfig) -> Self {
        let stat = epoch <= schedule.n_static();
        Self {
            static_branch: stat,
            dynamic_branch: !stat,
            cameras: epoch <= schedule.n_camera(),
        }
    }
}

/// Field, cameras, optimizers and training data.
pub struct Trainer<T> {
    /// Configuration as given; serialized into checkpoints.
    pub config: TrainConfig,
    pub store: ParamStore<T>,
    pub field: NerfField,
    /// Learnable cameras of the training views, in `train_views` order.
    pub rig: CameraRig,
    pub optimizers: OptimizerBank<T>,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochRecord>,
    /// Effective render settings (near/far from the dataset when enabled).
    pub render: RenderConfig,
    dataset: Dataset,
    train_views: Vec<usize>,
    train_frames: Vec<usize>,
    /// Rig index of every entry of `train_frames`.
    frame_camera: Vec<usize>,
    truth: Option<Vec<Camera>>,
}

impl<T: Real> Trainer<T> {
    /// Registers a freshly initialized field and the starting cameras:
    /// default cameras when `pose_free`, otherwise the dataset cameras with
    /// the optional perturbation applied.
    pub fn new(config: TrainConfig, dataset: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        let train_frames = dataset.train_frames();
        if train_frames.is_empty() {
            return Err(TrainError::NoTrainingFrames);
        }
        let m = &dataset.manifest;
        let train_views = dataset.train_views();
        let rig_index: HashMap<usize, usize> = train_views.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let frame_camera = train_frames.iter().map(|&f| rig_index[&m.frames[f].view]).collect();
        let truth = dataset.cameras_of(&train_views);

        let mut start = if config.camera.pose_free {
            default_cameras(train_views.len(), m.width, m.height)
        } else {
            truth.clone().ok_or(TrainError::NoCameras)?
        };
        if let Some(p) = config.camera.perturb.filter(|p| !p.is_zero()) {
            start = perturb_cameras(&start, &p)?.cameras;
        }

        let mut field_cfg = config.field.clone();
        let mut render = config.render;
        if config.scene_from_dataset {
            field_cfg.scene_center = m.scene_center;
            field_cfg.scene_radius = m.scene_radius;
            render.near = m.near;
            render.far = m.far;
            render.background = m.background;
        }

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = NerfField::register(&mut store, &field_cfg, &mut rng)?;
        let rig = CameraRig::register(
            &mut store,
            &start,
            RigOptions {
                shared_intrinsics: config.camera.shared_intrinsics,
                learn_skew: config.camera.learn_skew,
                fix_principal: !config.camera.learn_principal,
            },
        )?;
        let optimizers = OptimizerBank::new(&store, &field, &rig)?;
        Ok(Self {
            config,
            store,
            field,
            rig,
            optimizers,
            epoch: 0,
            history: Vec::new(),
            render,
            dataset,
            train_views,
            train_frames,
            frame_camera,
            truth,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn train_views(&self) -> &[usize] {
        &self.train_views
    }

    /// Current estimate of the training cameras.
    pub fn cameras(&self) -> Vec<Camera> {
        self.rig.cameras(&self.store)
    }

    /// Ground-truth training cameras, when the dataset has them.
    pub fn ground_truth(&self) -> Option<&[Camera]> {
        self.truth.as_deref()
    }

    /// Trajectory and focal error of the current cameras against ground truth.
    pub fn camera_errors(&self) -> Result<Option<(TrajectoryError, f64)>, TrainError> {
        let Some(truth) = &self.truth else { return Ok(None) };
        let est = self.cameras();
        Ok(Some((ate(&est, truth)?, focal_error_px(&est, truth)?)))
    }

    /// Learning rates (field, pose, focal) used by epoch `epoch` (1-based).
    pub fn learning_rates(&self, epoch: u64) -> (f64, f64, f64) {
        let s = &self.config.schedule;
        let e = epoch.saturating_sub(1);
        (s.field_lr.at(e), s.pose_lr.at(e), s.focal_lr.at(e))
    }

    // Per (epoch, image) stream, so results do not depend on thread count.
    fn image_rng(&self, epoch: u64, image: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((epoch << 24) | image as u64);
        rng
    }

    fn non_finite(&self, epoch: u64, loss: f64) -> TrainError {
        TrainError::NonFinite { epoch, loss, norms: self.store.norms() }
    }

    /// Mean photometric loss of epoch `epoch`'s pixel sample and, when
    /// `grad`, the parameter gradients of that loss reduced in image order.
    fn epoch_loss(&self, epoch: u64, grad: bool) -> Result<(f64, Vec<(ParamId, Tensor<T>)>), TrainError> {
        let m = &self.dataset.manifest;
        let (w, h) = (m.width, m.height);
        let n_img = self.train_frames.len();
        let per_image: Vec<Result<(f64, Vec<(ParamId, Tensor<T>)>), TrainError>> = (0..n_img)
            .into_par_iter()
            .map(|k| {
                let frame = &m.frames[self.train_frames[k]];
                let img = &self.dataset.images[self.train_frames[k]];
                let mut rng = self.image_rng(epoch, k);
                let count = self.config.schedule.rays_per_image.min((w * h) as usize);
                let pixels: Vec<(u32, u32)> = index::sample(&mut rng, (w * h) as usize, count)
                    .into_iter()
                    .map(|i| ((i % w as usize) as u32, (i / w as usize) as u32))
                    .collect();
                let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
                let cam = CameraVars::from_params(&mut tape, &self.store, &self.rig.views[self.frame_camera[k]]);
                let out = render_pixels(
                    &mut tape, &self.store, &self.field, &cam, &pixels, w, h, frame.time, &self.render, &mut rng,
                )
                .map_err(|e| match e {
                    RenderError::NonFinite { .. } => self.non_finite(epoch, f64::NAN),
                    e => TrainError::Render(e),
                })?;
                let gt: Vec<T> = pixels.iter().flat_map(|&(u, v)| img.pixel(u, v)).map(T::lit).collect();
                let gt = tape.constant(Tensor::new(vec![pixels.len(), 3], gt)?);
                let loss = photometric_loss(&mut tape, out.rgb, gt)?;
                let value = tape.value(loss).item().as_f64();
                let grads = if grad {
                    let scaled = tape.scale(loss, T::one() / T::lit(n_img as f64));
                    tape.param_gradients(scaled)?
                } else {
                    Vec::new()
                };
                Ok((value, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = Vec::new();
        for r in per_image {
            let (l, g) = r?;
            total += l;
            grads.extend(g);
        }
        Ok((total / n_img as f64, grads))
    }

    // Only what this epoch steps needs gradients.
    fn set_grad_mask(&mut self, phase: Phase) {
        let mut set = |ids: Vec<ParamId>, on: bool| {
            for id in ids {
                self.store.set_requires_grad(id, on);
            }
        };
        set(self.field.static_params(), phase.static_branch);
        set(self.field.dynamic_params(), phase.dynamic_branch);
        set(self.field.gate_params(), phase.cameras);
        set(self.rig.pose_params(), phase.cameras);
        set(self.rig.focal_params(), phase.cameras);
        set(self.rig.principal_params(), phase.cameras && !self.rig.options.fix_principal);
        set(self.rig.skew_params(), phase.cameras && self.rig.options.learn_skew);
    }

    fn record(&self, epoch: u64, loss: f64) -> Result<EpochRecord, TrainError> {
        let (lr_field, lr_cam, _) = self.learning_rates(epoch.max(1));
        let errs = self.camera_errors()?;
        Ok(EpochRecord {
            epoch,
            loss,
            psnr_train: psnr_from_mse(loss),
            lr_field,
            lr_cam,
            ate: errs.as_ref().map(|(t, _)| t.ate_rmse),
            focal_err_px: errs.map(|(_, f)| f),
        })
    }

    /// Loss of the untouched model, logged as epoch 0.
    pub fn initial_record(&self) -> Result<EpochRecord, TrainError> {
        let (loss, _) = self.epoch_loss(0, false)?;
        if !loss.is_finite() {
            return Err(self.non_finite(0, loss));
        }
        self.record(0, loss)
    }

    /// Runs the next epoch and returns its log row.
    pub fn step(&mut self) -> Result<EpochRecord, TrainError> {
        let i = self.epoch + 1;
        let phase = Phase::at(i, &self.config.schedule);
        self.set_grad_mask(phase);
        self.store.zero_grad();
        let (loss, grads) = self.epoch_loss(i, true)?;
        if !loss.is_finite() {
            return Err(self.non_finite(i, loss));
        }
        for (id, g) in &grads {
            self.store.accumulate_grad(*id, g);
        }

        let (lr_field, lr_pose, lr_focal) = self.learning_rates(i);
        let mut field_params = if phase.static_branch {
            self.field.static_params()
        } else {
            self.field.dynamic_params()
        };
        if phase.cameras {
            field_params.extend(self.field.gate_params());
        }
        self.optimizers.field.step(&mut self.store, &field_params, lr_field)?;
        if phase.cameras {
            self.optimizers.pose.step(&mut self.store, &self.rig.pose_params(), lr_pose)?;
            self.rig.canonicalize(&mut self.store);
            let focal: Vec<ParamId> = self.optimizers.focal.params().collect();
            self.optimizers.focal.step(&mut self.store, &focal, lr_focal)?;
        }
        self.epoch = i;
        if self.store.norms().iter().any(|(_, n)| !n.is_finite()) {
            return Err(self.non_finite(i, loss));
        }
        let rec = self.record(i, loss)?;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `epochs` are complete (the configured total when
    /// `None`), calling `on_epoch` with each new log row. The epoch-0 row is
    /// produced first when training starts from scratch.
    pub fn run(&mut self, epochs: Option<u64>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(), TrainError> {
        let until = epochs.unwrap_or(self.config.schedule.epochs);
        if self.epoch == 0 && self.history.is_empty() {
            let r = self.initial_record()?;
            on_epoch(&r);
            self.history.push(r);
        }
        while self.epoch < until {
            let r = self.step()?;
            if r.epoch % 100 == 0 {
                log::info!("epoch {} loss {:.6} psnr {:.2}", r.epoch, r.loss, r.psnr_train);
            }
            on_epoch(&r);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            epoch: self.epoch,
            config: self.config.to_toml(),
            dataset_hash: self.dataset.hash.clone(),
            tensors: Checkpoint::tensors_from(&self.store),
            optimizers: self.optimizers.snapshot(&self.store),
        }
    }

    /// Rebuilds a trainer from a checkpoint's config and state. A dataset
    /// hash mismatch is logged, not rejected.
    pub fn restore(ck: &Checkpoint<T>, dataset: Dataset) -> Result<Self, TrainError> {
        let config = TrainConfig::from_toml(&ck.config)?;
        if ck.dataset_hash != dataset.hash {
            log::warn!(
                "checkpoint was trained on dataset {} but this dataset hashes to {}",
                ck.dataset_hash,
                dataset.hash
            );
        }
        let mut t = Self::new(config, dataset)?;
        t.load_state(ck)?;
        Ok(t)
    }

    /// Loads parameters, optimizer moments and the epoch counter. Nothing is
    /// changed unless the whole checkpoint fits.
    pub fn load_state(&mut self, ck: &Checkpoint<T>) -> Result<(), TrainError> {
        let found = ck.tensors.iter().filter(|(n, _)| n.ends_with(".rotation")).count();
        if found != self.rig.len() {
            return Err(TrainError::CameraCount { expected: self.rig.len(), found });
        }
        ck.check_params(&self.store)?;
        let mut optimizers = self.optimizers.clone();
        optimizers.restore(&self.store, &ck.optimizers)?;
        ck.apply_params(&mut self.store)?;
        self.optimizers = optimizers;
        self.epoch = ck.epoch;
        self.history.clear();
        Ok(())
    }
}
