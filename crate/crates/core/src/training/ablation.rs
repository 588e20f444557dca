//! Perturbation sweeps: for every grid value, train once with camera
//! refinement and once with the perturbed cameras frozen.
//!
//! Every run lives in `<out_dir>/runs/<class>_<value>_s<seed>_<arm>/` with
//! its epoch log and a `result.json`; runs whose result already parses are
//! reused, so an interrupted sweep resumes where it stopped. The long-format
//! table is written to `<out_dir>/sweep.csv`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{PerturbationSpec, SignPattern};
use crate::dataio::Dataset;
use crate::scalar::Real;

use super::{write_log, ConfigError, TrainConfig, TrainError, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbClass {
    /// Focal lengths; grid values in percent.
    Intrinsics,
    /// Rotations; grid values in degrees.
    Rotation,
    /// Camera centers; grid values in percent of the scene scale.
    Translation,
    /// Rotation (degrees) and translation (percent) together.
    Both,
}

impl PerturbClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Intrinsics => "intrinsics",
            Self::Rotation => "rotation",
            Self::Translation => "translation",
            Self::Both => "both",
        }
    }
}

impl std::str::FromStr for PerturbClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intrinsics" => Ok(Self::Intrinsics),
            "rotation" => Ok(Self::Rotation),
            "translation" => Ok(Self::Translation),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown perturbation class {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationArm {
    Refine,
    Frozen,
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Refine => "refine",
            Self::Frozen => "frozen",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub class: PerturbClass,
    /// Grid half-width, in the class's unit.
    pub range: f64,
    pub step: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// Final numbers of one run; one row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub class: PerturbClass,
    pub value: f64,
    pub seed: u64,
    pub arm: AblationArm,
    pub psnr: f64,
    pub ssim: f64,
    pub ate_rmse: Option<f64>,
    pub rot_err_deg: Option<f64>,
    pub focal_err_px: Option<f64>,
    pub final_loss: f64,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.step > 0.0 && self.range >= 0.0 && self.range.is_finite()) {
            return bad(format!("need step > 0 and range >= 0, got {} and {}", self.step, self.range));
        }
        let ratio = self.range / self.step;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad(format!("step {} does not divide range {}", self.step, self.range));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for v in self.grid() {
            self.perturbation(v, 0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// `-range, -range + step, …, range`.
    pub fn grid(&self) -> Vec<f64> {
        let k = (self.range / self.step).round() as i64;
        (-k..=k).map(|i| i as f64 * self.step).collect()
    }

    /// The camera perturbation for grid value `value`.
    pub fn perturbation(&self, value: f64, seed: u64) -> PerturbationSpec {
        let mag = value.abs();
        let mut spec = PerturbationSpec {
            sign: if value < 0.0 { SignPattern::Negative } else { SignPattern::Positive },
            seed,
            ..Default::default()
        };
        match self.class {
            PerturbClass::Intrinsics => spec.intrinsic_frac = mag / 100.0,
            PerturbClass::Rotation => spec.rotation_deg = mag,
            PerturbClass::Translation => spec.translation_frac = mag / 100.0,
            PerturbClass::Both => {
                spec.rotation_deg = mag;
                spec.translation_frac = mag / 100.0;
            }
        }
        spec
    }

    /// Every (value, seed, arm) in sweep order.
    pub fn runs(&self) -> Vec<(f64, u64, AblationArm)> {
        let mut out = Vec::new();
        for v in self.grid() {
            for &s in &self.seeds {
                for arm in [AblationArm::Refine, AblationArm::Frozen] {
                    out.push((v, s, arm));
                }
            }
        }
        out
    }

    pub fn run_dir(&self, value: f64, seed: u64, arm: AblationArm) -> PathBuf {
        self.out_dir
            .join("runs")
            .join(format!("{}_{value:+}_s{seed}_{arm}", self.class.as_str()))
    }

    /// Training config of one run derived from `base`.
    pub fn run_config(&self, base: &TrainConfig, value: f64, seed: u64, arm: AblationArm) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let p = self.perturbation(value, seed);
        cfg.camera.perturb = (!p.is_zero()).then_some(p);
        if arm == AblationArm::Frozen {
            cfg.schedule.camera_epochs = Some(0);
        }
        cfg
    }
}

fn read_result(path: &Path) -> Option<AblationRow> {
    serde_json::from_slice(&std::fs::read(path).ok()?).ok()
}

/// Runs (or resumes) the sweep and writes `sweep.csv`.
pub fn run_ablation<T: Real>(
    plan: &AblationPlan,
    base: &TrainConfig,
    dataset: &Dataset,
) -> Result<Vec<AblationRow>, TrainError> {
    plan.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    let mut rows = Vec::new();
    for (value, seed, arm) in plan.runs() {
        let dir = plan.run_dir(value, seed, arm);
        let result = dir.join("result.json");
        if dir.exists() {
            match read_result(&result) {
                Some(row) => {
                    log::info!("reusing {}", dir.display());
                    rows.push(row);
                    continue;
                }
                None => log::warn!("skipping incomplete or corrupted run directory {}; running it again", dir.display()),
            }
        }
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let cfg = plan.run_config(base, value, seed, arm);
        let mut trainer = Trainer::<T>::new(cfg, dataset.clone())?;
        trainer.run(None, |_| {})?;
        write_log(&trainer.history, &dir.join("log.csv"))?;
        let report = trainer.evaluate()?;
        let row = AblationRow {
            class: plan.class,
            value,
            seed,
            arm,
            psnr: report.mean_psnr(),
            ssim: report.mean_ssim(),
            ate_rmse: report.ate_rmse(),
            rot_err_deg: report.rot_err_deg(),
            focal_err_px: report.focal_err_px,
            final_loss: trainer.history.last().map_or(f64::NAN, |r| r.loss),
        };
        let json = serde_json::to_vec_pretty(&row).expect("row serializes");
        std::fs::write(&result, json).map_err(io(&result))?;
        log::info!("{} {value:+} seed {seed} {arm}: psnr {:.2}", plan.class.as_str(), row.psnr);
        rows.push(row);
    }
    let path = plan.out_dir.join("sweep.csv");
    let csv_err = |source| TrainError::Csv { path: path.clone(), source };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    Ok(rows)
}
