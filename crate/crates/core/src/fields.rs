//! Radiance fields: a static branch (density + color) and a dynamic branch
//! (deformation + density + color + blend), fused per sample.
//!
//! Every query works on batches: `points: [P,3]`, `dirs: [P,3]` (unit),
//! `times: [P,1]`. Points are normalized to the scene box before encoding;
//! the network input is the normalized point followed by its grid encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kaiming_init, normal_init, AutodiffError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoding::{encode_grid, EncodingConfig, EncodingError, EncodingVars, GridEncoding};
use crate::scalar::Real;

/// Floor on fused density when normalizing the blended color.
pub const FUSE_EPS: f64 = 1e-9;

/// How static and dynamic samples are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// `σ = (1-b)σ_s + bσ_d`, color weighted by each branch's density share.
    #[default]
    DensityWeighted,
    /// Density as above, color a plain `(1-b)/b` mix.
    ColorBlend,
    /// Only the static branch is evaluated.
    StaticOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub width: usize,
    /// Linear layers in the density networks.
    pub density_depth: usize,
    /// Linear layers in the color networks.
    pub color_depth: usize,
    /// Linear layers in the deformation network.
    pub deform_depth: usize,
    /// Feature vector passed from density to color network.
    pub feature_dim: usize,
    pub position: EncodingConfig,
    pub direction: EncodingConfig,
    pub time: EncodingConfig,
    /// Number of position bands open at initialization.
    pub warm_bands: usize,
    pub fusion: FusionStrategy,
    pub scene_center: [f64; 3],
    pub scene_radius: f64,
    /// Std of the deformation output layer, keeping early offsets small.
    pub deform_init_std: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width: 256,
            density_depth: 4,
            color_depth: 2,
            deform_depth: 4,
            feature_dim: 256,
            position: EncodingConfig::position(),
            direction: EncodingConfig::direction(),
            time: EncodingConfig::time(),
            warm_bands: 2,
            fusion: FusionStrategy::DensityWeighted,
            scene_center: [0.0; 3],
            scene_radius: 1.0,
            deform_init_std: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::Config(m.to_string()));
        if self.width == 0 || self.feature_dim == 0 {
            return bad("width and feature_dim must be positive");
        }
        if self.density_depth == 0 || self.color_depth == 0 || self.deform_depth == 0 {
            return bad("network depths must be at least 1");
        }
        if !(self.scene_radius > 0.0 && self.scene_radius.is_finite()) {
            return bad("scene_radius must be positive");
        }
        if self.warm_bands > self.position.bands {
            return bad("warm_bands exceeds position bands");
        }
        Ok(())
    }
}

/// A fully connected network: ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `depth` linear layers mapping `input → width → … → output`. Weights
    /// are Kaiming-normal, biases zero; `out_std` overrides the last layer.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        input: usize,
        width: usize,
        output: usize,
        depth: usize,
        out_std: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let mut layers = Vec::with_capacity(depth);
        let mut fan_in = input;
        for l in 0..depth {
            let last = l + 1 == depth;
            let fan_out = if last { output } else { width };
            let w = match (last, out_std) {
                (true, Some(std)) => normal_init::<T, _>(&[fan_in, fan_out], std, rng)?,
                _ => kaiming_init::<T, _>(&[fan_in, fan_out], fan_in, rng)?,
            };
            let w = store.insert(format!("{name}.l{l}.w"), group, w)?;
            let b = store.insert(format!("{name}.l{l}.b"), group, Tensor::zeros(&[fan_out]))?;
            layers.push((w, b));
            fan_in = fan_out;
        }
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            h = tape.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Sets every weight and bias to zero.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.value_mut(id).fill(T::zero());
        }
    }
}

/// Per-sample field output on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FieldSample {
    /// `[P,1]`, non-negative.
    pub sigma: Var,
    /// `[P,3]` in `(0,1)`.
    pub rgb: Var,
    /// `[P,1]` blend weight, dynamic branch only.
    pub blend: Option<Var>,
}

/// Anything that maps sample points to density and color on a tape.
pub trait RadianceField<T: Real> {
    fn query(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        dirs: Var,
        times: Var,
    ) -> Result<FieldSample, AutodiffError>;
}

/// Gate vectors shared across branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedGates {
    pub position: ParamId,
    pub direction: ParamId,
    pub time: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticField {
    pub position: GridEncoding,
    pub direction: GridEncoding,
    pub density: Mlp,
    pub color: Mlp,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicField {
    pub position: GridEncoding,
    pub direction: GridEncoding,
    pub time: GridEncoding,
    pub deformation: Mlp,
    pub density: Mlp,
    pub color: Mlp,
    pub feature_dim: usize,
}

/// Both branches plus the shared gates and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfField {
    pub config: FieldConfig,
    pub gates: SharedGates,
    pub static_field: StaticField,
    pub dynamic_field: DynamicField,
}

fn enc_input<T: Real>(tape: &mut Tape<T>, x: Var, vars: &EncodingVars) -> Result<Var, AutodiffError> {
    let e = encode_grid(tape, x, vars)?;
    tape.concat(&[x, e], 1)
}

impl NerfField {
    /// Registers all parameters. Static networks go to [`ParamGroup::Static`],
    /// dynamic ones to [`ParamGroup::Dynamic`], gates to [`ParamGroup::Gates`].
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        config: &FieldConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, FieldError> {
        config.validate()?;
        let c = config;
        let s_pos = GridEncoding::register(store, "static.enc_pos", 3, &c.position, ParamGroup::Static, None, rng)?;
        let s_dir = GridEncoding::register(store, "static.enc_dir", 3, &c.direction, ParamGroup::Static, None, rng)?;
        let gates_pos = s_pos.gates;
        let gates_dir = s_dir.gates;
        crate::encoding::init_gates(store, gates_pos, c.warm_bands)?;

        let pos_in = 3 + s_pos.output_len();
        let dir_len = s_dir.output_len();
        let density = Mlp::register(store, "static.density", ParamGroup::Static, pos_in, c.width, 1 + c.feature_dim, c.density_depth, None, rng)?;
        let color = Mlp::register(store, "static.color", ParamGroup::Static, c.feature_dim + dir_len, c.width, 3, c.color_depth, None, rng)?;
        let static_field = StaticField {
            position: s_pos,
            direction: s_dir,
            density,
            color,
            feature_dim: c.feature_dim,
        };

        let d_pos = GridEncoding::register(store, "dynamic.enc_pos", 3, &c.position, ParamGroup::Dynamic, Some(gates_pos), rng)?;
        let d_dir = GridEncoding::register(store, "dynamic.enc_dir", 3, &c.direction, ParamGroup::Dynamic, Some(gates_dir), rng)?;
        let d_time = GridEncoding::register(store, "dynamic.enc_time", 1, &c.time, ParamGroup::Dynamic, None, rng)?;
        let time_len = d_time.output_len();
        let deformation = Mlp::register(
            store,
            "dynamic.deform",
            ParamGroup::Dynamic,
            pos_in + 1 + time_len,
            c.width,
            3,
            c.deform_depth,
            Some(c.deform_init_std),
            rng,
        )?;
        let density = Mlp::register(
            store,
            "dynamic.density",
            ParamGroup::Dynamic,
            pos_in + 1 + time_len,
            c.width,
            2 + c.feature_dim,
            c.density_depth,
            None,
            rng,
        )?;
        let color = Mlp::register(
            store,
            "dynamic.color",
            ParamGroup::Dynamic,
            c.feature_dim + dir_len + 1 + time_len,
            c.width,
            3,
            c.color_depth,
            None,
            rng,
        )?;
        let gates = SharedGates {
            position: gates_pos,
            direction: gates_dir,
            time: d_time.gates,
        };
        Ok(Self {
            config: config.clone(),
            gates,
            static_field,
            dynamic_field: DynamicField {
                position: d_pos,
                direction: d_dir,
                time: d_time,
                deformation,
                density,
                color,
                feature_dim: c.feature_dim,
            },
        })
    }

    fn normalize<T: Real>(&self, tape: &mut Tape<T>, points: Var) -> Result<Var, AutodiffError> {
        let c = self.config.scene_center.map(T::lit);
        let center = tape.constant(Tensor::vector(&c));
        let shifted = tape.sub(points, center)?;
        Ok(tape.scale(shifted, T::one() / T::lit(self.config.scene_radius)))
    }

    pub fn eval_static<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        dirs: Var,
    ) -> Result<FieldSample, AutodiffError> {
        let x = self.normalize(tape, points)?;
        self.static_at(tape, store, x, dirs)
    }

    fn static_at<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        dirs: Var,
    ) -> Result<FieldSample, AutodiffError> {
        let f = &self.static_field;
        let pos_vars = f.position.vars(tape, store);
        let input = enc_input(tape, x, &pos_vars)?;
        let h = f.density.forward(tape, store, input)?;
        let raw_sigma = tape.slice(h, 1, 0, 1)?;
        let sigma = tape.softplus(raw_sigma);
        let feature = tape.slice(h, 1, 1, f.feature_dim)?;
        let dir_vars = f.direction.vars(tape, store);
        let d = encode_grid(tape, dirs, &dir_vars)?;
        let c_in = tape.concat(&[feature, d], 1)?;
        let raw_rgb = f.color.forward(tape, store, c_in)?;
        let rgb = tape.sigmoid(raw_rgb);
        Ok(FieldSample { sigma, rgb, blend: None })
    }

    /// Deformation offset `Δx` in normalized scene units, `[P,3]`.
    pub fn deformation<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        times: Var,
    ) -> Result<Var, AutodiffError> {
        let x = self.normalize(tape, points)?;
        let t_feat = self.time_features(tape, store, times)?;
        self.offset_at(tape, store, x, t_feat)
    }

    fn time_features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, times: Var) -> Result<Var, AutodiffError> {
        let vars = self.dynamic_field.time.vars(tape, store);
        enc_input(tape, times, &vars)
    }

    fn offset_at<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        t_feat: Var,
    ) -> Result<Var, AutodiffError> {
        let f = &self.dynamic_field;
        let vars = f.position.vars(tape, store);
        let px = enc_input(tape, x, &vars)?;
        let input = tape.concat(&[px, t_feat], 1)?;
        f.deformation.forward(tape, store, input)
    }

    pub fn eval_dynamic<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        dirs: Var,
        times: Var,
    ) -> Result<FieldSample, AutodiffError> {
        let f = &self.dynamic_field;
        let x = self.normalize(tape, points)?;
        let t_feat = self.time_features(tape, store, times)?;
        let dx = self.offset_at(tape, store, x, t_feat)?;
        let xd = tape.add(x, dx)?;
        let vars = f.position.vars(tape, store);
        let px = enc_input(tape, xd, &vars)?;
        let input = tape.concat(&[px, t_feat], 1)?;
        let h = f.density.forward(tape, store, input)?;
        let raw_sigma = tape.slice(h, 1, 0, 1)?;
        let sigma = tape.softplus(raw_sigma);
        let raw_b = tape.slice(h, 1, 1, 1)?;
        let blend = tape.sigmoid(raw_b);
        let feature = tape.slice(h, 1, 2, f.feature_dim)?;
        let dir_vars = f.direction.vars(tape, store);
        let d = encode_grid(tape, dirs, &dir_vars)?;
        let c_in = tape.concat(&[feature, d, t_feat], 1)?;
        let raw_rgb = f.color.forward(tape, store, c_in)?;
        let rgb = tape.sigmoid(raw_rgb);
        Ok(FieldSample { sigma, rgb, blend: Some(blend) })
    }

    /// Parameters of the static branch (F_s).
    pub fn static_params(&self) -> Vec<ParamId> {
        let f = &self.static_field;
        let mut v = f.position.weights.clone();
        v.extend(&f.direction.weights);
        v.extend(f.density.params());
        v.extend(f.color.params());
        v
    }

    /// Parameters of the dynamic branch (F_ξ).
    pub fn dynamic_params(&self) -> Vec<ParamId> {
        let f = &self.dynamic_field;
        let mut v = f.position.weights.clone();
        v.extend(&f.direction.weights);
        v.extend(&f.time.weights);
        v.extend(f.deformation.params());
        v.extend(f.density.params());
        v.extend(f.color.params());
        v
    }

    /// Band gates (F_c).
    pub fn gate_params(&self) -> Vec<ParamId> {
        vec![self.gates.position, self.gates.direction, self.gates.time]
    }
}

/// Combines static and dynamic samples:
/// `σ = (1-b)σ_s + bσ_d`, `rgb = w_s rgb_s + w_d rgb_d` with
/// `w_d = bσ_d / max(σ, ε)` and `w_s = 1 - w_d`. This equals the
/// density-weighted form `((1-b)σ_s rgb_s + bσ_d rgb_d)/σ` whenever `σ > ε`
/// and reduces to the static sample bit-for-bit at `b = 0`.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    s: &FieldSample,
    d: &FieldSample,
    strategy: FusionStrategy,
) -> Result<FieldSample, AutodiffError> {
    let b = match (strategy, d.blend) {
        (FusionStrategy::StaticOnly, _) | (_, None) => return Ok(FieldSample { blend: None, ..*s }),
        (_, Some(b)) => b,
    };
    let one_minus_b = tape.neg(b);
    let one_minus_b = tape.add_scalar(one_minus_b, T::one());
    let ss = tape.mul(one_minus_b, s.sigma)?;
    let sd = tape.mul(b, d.sigma)?;
    let sigma = tape.add(ss, sd)?;
    let w_d = match strategy {
        FusionStrategy::ColorBlend => b,
        _ => {
            let denom = tape.clamp_min(sigma, T::lit(FUSE_EPS));
            tape.div(sd, denom)?
        }
    };
    let diff = tape.sub(d.rgb, s.rgb)?;
    let delta = tape.mul(w_d, diff)?;
    let rgb = tape.add(s.rgb, delta)?;
    Ok(FieldSample { sigma, rgb, blend: Some(b) })
}

impl<T: Real> RadianceField<T> for NerfField {
    fn query(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        dirs: Var,
        times: Var,
    ) -> Result<FieldSample, AutodiffError> {
        let s = self.eval_static(tape, store, points, dirs)?;
        if self.config.fusion == FusionStrategy::StaticOnly {
            return Ok(s);
        }
        let d = self.eval_dynamic(tape, store, points, dirs, times)?;
        fuse(tape, &s, &d, self.config.fusion)
    }
}
