//! Learnable grid encodings.
//!
//! Each band `k` owns a learnable projection `W_k` of shape `[in_dim, d_k]`.
//! The positional half is `sin(p W_k), cos(p W_k)`, the frequency half
//! scales the same projection by `2^(k-1) π`. Every band block, in both
//! halves, is multiplied by a learnable gate `σ(α_k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normal_init, AutodiffError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Real;

/// Gate pre-activation used for open bands; closed bands use the negative.
pub const GATE_OPEN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Number of bands `n`.
    pub bands: usize,
    /// Frequencies per band `d_i`.
    pub per_band: usize,
    /// Std of the noise added to the axis-aligned start point of `W_k`.
    #[serde(default = "default_noise")]
    pub init_noise: f64,
}

fn default_noise() -> f64 {
    0.05
}

impl EncodingConfig {
    pub fn position() -> Self {
        Self { bands: 6, per_band: 4, init_noise: 0.05 }
    }

    pub fn direction() -> Self {
        Self { bands: 2, per_band: 2, init_noise: 0.05 }
    }

    pub fn time() -> Self {
        Self { bands: 2, per_band: 2, init_noise: 0.05 }
    }

    /// Length of `encode_grid` output.
    pub fn output_len(&self) -> usize {
        4 * self.bands * self.per_band
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodingError {
    #[error("encoding needs at least one band and one frequency per band")]
    Empty,
    #[error("warm_bands {warm} exceeds band count {bands}")]
    WarmBands { warm: usize, bands: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Parameter handles of one grid encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEncoding {
    pub in_dim: usize,
    pub dims: Vec<usize>,
    /// `W_k`, each `[in_dim, d_k]`.
    pub weights: Vec<ParamId>,
    /// `[n]` gate pre-activations.
    pub gates: ParamId,
}

impl GridEncoding {
    /// Registers `W_k` under `group` and, unless `shared_gates` is given, a
    /// fresh gate vector in [`ParamGroup::Gates`] with every band open.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        cfg: &EncodingConfig,
        group: ParamGroup,
        shared_gates: Option<ParamId>,
        rng: &mut impl Rng,
    ) -> Result<Self, EncodingError> {
        if cfg.bands == 0 || cfg.per_band == 0 || in_dim == 0 {
            return Err(EncodingError::Empty);
        }
        let mut weights = Vec::with_capacity(cfg.bands);
        for k in 0..cfg.bands {
            let mut w = normal_init::<T, _>(&[in_dim, cfg.per_band], cfg.init_noise, rng)?;
            // column j starts on coordinate axis (j + k) mod in_dim
            for j in 0..cfg.per_band {
                let axis = (j + k) % in_dim;
                w.data_mut()[axis * cfg.per_band + j] += T::one();
            }
            weights.push(store.insert(format!("{name}.w{k}"), group, w)?);
        }
        let gates = match shared_gates {
            Some(g) => {
                if store.value(g).shape() != [cfg.bands] {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "shared gates",
                        lhs: store.value(g).shape().to_vec(),
                        rhs: vec![cfg.bands],
                    }
                    .into());
                }
                g
            }
            None => store.insert(
                format!("{name}.gates"),
                ParamGroup::Gates,
                Tensor::full(&[cfg.bands], T::lit(GATE_OPEN)),
            )?,
        };
        Ok(Self {
            in_dim,
            dims: vec![cfg.per_band; cfg.bands],
            weights,
            gates,
        })
    }

    pub fn bands(&self) -> usize {
        self.weights.len()
    }

    pub fn output_len(&self) -> usize {
        4 * self.dims.iter().sum::<usize>()
    }

    pub fn vars<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> EncodingVars {
        EncodingVars {
            weights: self.weights.iter().map(|&w| tape.param(store, w)).collect(),
            gates: tape.param(store, self.gates),
        }
    }
}

/// Encoding parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct EncodingVars {
    pub weights: Vec<Var>,
    pub gates: Var,
}

/// Sets gate pre-activations to `+4` for the first `warm_bands` bands and
/// `-4` for the rest.
pub fn init_gates<T: Real>(
    store: &mut ParamStore<T>,
    gates: ParamId,
    warm_bands: usize,
) -> Result<(), EncodingError> {
    let n = store.value(gates).numel();
    if warm_bands > n {
        return Err(EncodingError::WarmBands { warm: warm_bands, bands: n });
    }
    let values: Vec<T> = (0..n)
        .map(|k| T::lit(if k < warm_bands { GATE_OPEN } else { -GATE_OPEN }))
        .collect();
    store.set_value(gates, Tensor::vector(&values))?;
    store.set_requires_grad(gates, true);
    Ok(())
}

fn band_args<T: Real>(tape: &mut Tape<T>, p: Var, vars: &EncodingVars) -> Result<Vec<Var>, AutodiffError> {
    vars.weights.iter().map(|&w| tape.matmul(p, w)).collect()
}

fn sin_cos<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, AutodiffError> {
    let s = tape.sin(z);
    let c = tape.cos(z);
    tape.concat(&[s, c], 1)
}

fn frequency_scale<T: Real>(band: usize) -> T {
    T::lit(2f64.powi(band as i32) * std::f64::consts::PI)
}

/// Ungated positional half for a batch `p: [P, in_dim]`, giving `[P, 2Σd]`.
pub fn encode_position<T: Real>(tape: &mut Tape<T>, p: Var, vars: &EncodingVars) -> Result<Var, AutodiffError> {
    let parts = band_args(tape, p, vars)?
        .into_iter()
        .map(|z| sin_cos(tape, z))
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat(&parts, 1)
}

/// Ungated frequency half for a batch `p: [P, in_dim]`, giving `[P, 2Σd]`.
pub fn encode_frequency<T: Real>(tape: &mut Tape<T>, p: Var, vars: &EncodingVars) -> Result<Var, AutodiffError> {
    let parts = band_args(tape, p, vars)?
        .into_iter()
        .enumerate()
        .map(|(k, z)| {
            let z = tape.scale(z, frequency_scale(k));
            sin_cos(tape, z)
        })
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat(&parts, 1)
}

/// Gated concatenation `[f_pos(p), f_freq(p)]`, giving `[P, 4Σd]`.
pub fn encode_grid<T: Real>(tape: &mut Tape<T>, p: Var, vars: &EncodingVars) -> Result<Var, AutodiffError> {
    let args = band_args(tape, p, vars)?;
    let gates = tape.sigmoid(vars.gates);
    let mut pos = Vec::with_capacity(args.len());
    let mut freq = Vec::with_capacity(args.len());
    for (k, &z) in args.iter().enumerate() {
        let g = tape.slice(gates, 0, k, 1)?;
        let block = sin_cos(tape, z)?;
        pos.push(tape.mul(block, g)?);
        let zf = tape.scale(z, frequency_scale(k));
        let block = sin_cos(tape, zf)?;
        freq.push(tape.mul(block, g)?);
    }
    pos.extend(freq);
    tape.concat(&pos, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: EncodingConfig) -> (ParamStore<f64>, GridEncoding) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = GridEncoding::register(&mut store, "enc", 3, &cfg, ParamGroup::Static, None, &mut rng).unwrap();
        (store, enc)
    }

    fn eval(
        store: &ParamStore<f64>,
        enc: &GridEncoding,
        p: &[f64],
        f: fn(&mut Tape<f64>, Var, &EncodingVars) -> Result<Var, AutodiffError>,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = enc.vars(&mut tape, store);
        let x = tape.constant(Tensor::new(vec![p.len() / 3, 3], p.to_vec()).unwrap());
        let out = f(&mut tape, x, &vars).unwrap();
        tape.value(out).data().to_vec()
    }

    fn set_w(store: &mut ParamStore<f64>, enc: &GridEncoding, k: usize, w: &[f64]) {
        let shape = store.value(enc.weights[k]).shape().to_vec();
        store.set_value(enc.weights[k], Tensor::new(shape, w.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn zero_point_gives_sin_zero_cos_one() {
        let (store, enc) = setup(EncodingConfig::position());
        let out = eval(&store, &enc, &[0.0; 3], encode_position);
        assert_eq!(out.len(), 2 * 24);
        for band in out.chunks(8) {
            assert!(band[..4].iter().all(|&x| x == 0.0));
            assert!(band[4..].iter().all(|&x| x == 1.0));
        }
        let out = eval(&store, &enc, &[0.0; 3], encode_frequency);
        assert!(out.chunks(8).all(|b| b[..4].iter().all(|&x| x == 0.0) && b[4..].iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn single_band_positional_value() {
        let cfg = EncodingConfig { bands: 1, per_band: 1, init_noise: 0.0 };
        let (mut store, enc) = setup(cfg);
        set_w(&mut store, &enc, 0, &[std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let out = eval(&store, &enc, &[1.0, 0.0, 0.0], encode_position);
        assert!((out[0] - 1.0).abs() < 1e-15 && out[1].abs() < 1e-15);
    }

    #[test]
    fn frequency_bands_double() {
        let cfg = EncodingConfig { bands: 2, per_band: 1, init_noise: 0.0 };
        let (mut store, enc) = setup(cfg);
        set_w(&mut store, &enc, 0, &[1.0, 0.0, 0.0]);
        set_w(&mut store, &enc, 1, &[1.0, 0.0, 0.0]);
        let out = eval(&store, &enc, &[1.0, 0.0, 0.0], encode_frequency);
        let expected = [0.0, -1.0, 0.0, 1.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn gates_open_and_closed() {
        let (mut store, enc) = setup(EncodingConfig::position());
        let p = [0.3, -0.2, 0.7];
        store.set_value(enc.gates, Tensor::full(&[6], 1e3)).unwrap();
        let open = eval(&store, &enc, &p, encode_grid);
        let pos = eval(&store, &enc, &p, encode_position);
        let freq = eval(&store, &enc, &p, encode_frequency);
        assert_eq!(open.len(), 96);
        assert_eq!(open, [pos, freq].concat());
        store.set_value(enc.gates, Tensor::full(&[6], -1e3)).unwrap();
        assert!(eval(&store, &enc, &p, encode_grid).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn warm_band_gate_table() {
        let (mut store, enc) = setup(EncodingConfig::position());
        init_gates(&mut store, enc.gates, 2).unwrap();
        let act: Vec<f64> = store.value(enc.gates).data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let hi = 1.0 / (1.0 + (-4f64).exp());
        assert!((hi - 0.982).abs() < 1e-3);
        for (k, a) in act.iter().enumerate() {
            let want = if k < 2 { hi } else { 1.0 - hi };
            assert!((a - want).abs() < 1e-15);
        }
        assert!(init_gates(&mut store, enc.gates, 7).is_err());

        let p = [0.4, 0.1, -0.5];
        init_gates(&mut store, enc.gates, 6).unwrap();
        let open: f64 = eval(&store, &enc, &p, encode_grid).iter().map(|x| x * x).sum::<f64>().sqrt();
        init_gates(&mut store, enc.gates, 0).unwrap();
        let closed: f64 = eval(&store, &enc, &p, encode_grid).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(closed <= 0.02 * open);
    }

    #[test]
    fn axis_aligned_weights_reproduce_fourier_features() {
        let cfg = EncodingConfig { bands: 4, per_band: 3, init_noise: 0.0 };
        let (mut store, enc) = setup(cfg);
        for k in 0..4 {
            set_w(&mut store, &enc, k, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = eval(&store, &enc, &pts, encode_frequency);
        for (i, p) in pts.chunks(3).enumerate() {
            let row = &out[i * 24..(i + 1) * 24];
            for k in 0..4 {
                let f = 2f64.powi(k as i32) * std::f64::consts::PI;
                for a in 0..3 {
                    assert!((row[k * 6 + a] - (f * p[a]).sin()).abs() < 1e-12);
                    assert!((row[k * 6 + 3 + a] - (f * p[a]).cos()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_grid_gradients() {
        let cfg = EncodingConfig { bands: 3, per_band: 2, init_noise: 0.05 };
        let (mut store, enc) = setup(cfg);
        init_gates(&mut store, enc.gates, 1).unwrap();
        let pid = store.insert("p", ParamGroup::Other, Tensor::new(vec![2, 3], vec![0.2, -0.4, 0.1, 0.5, 0.3, -0.7]).unwrap()).unwrap();
        let weights: Vec<f64> = (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        let report = gradient_check(&mut store, &ids, GradCheckOptions::default(), |tape, store| {
            let vars = enc.vars(tape, store);
            let p = tape.param(store, pid);
            let e = encode_grid(tape, p, &vars)?;
            let w = tape.constant(Tensor::new(vec![2, 24], weights.clone())?);
            let y = tape.mul(e, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
