use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

// Maps (w1, w2, w3) to the row-major entries of the skew matrix [w]x.
const HAT_BASIS: [f64; 27] = [
    0., 0., 0., //
    0., 0., -1., //
    0., 1., 0., //
    0., 0., 1., //
    0., 0., 0., //
    -1., 0., 0., //
    0., -1., 0., //
    1., 0., 0., //
    0., 0., 0., //
];

/// Skew-symmetric `[w]x` of a `[3]` variable, as a `[3,3]` variable.
pub fn hat<T: Real>(tape: &mut Tape<T>, w: Var) -> Result<Var, AutodiffError> {
    let basis = Tensor::new(vec![9, 3], HAT_BASIS.iter().map(|&x| T::lit(x)).collect())?;
    let basis = tape.constant(basis);
    let flat = tape.matmul(basis, w)?;
    tape.reshape(flat, &[3, 3])
}

/// Exponential map from an axis-angle `[3]` variable to a `[3,3]` rotation:
/// `R = I + a(θ) K + b(θ) K²` with `a = sin θ / θ`, `b = (1 - cos θ) / θ²`.
pub fn so3_exp<T: Real>(tape: &mut Tape<T>, w: Var) -> Result<Var, AutodiffError> {
    if tape.shape(w) != [3] {
        return Err(AutodiffError::ShapeMismatch {
            op: "so3_exp",
            lhs: tape.shape(w).to_vec(),
            rhs: vec![3],
        });
    }
    let k = hat(tape, w)?;
    let k2 = tape.matmul(k, k)?;
    let sq = tape.mul(w, w)?;
    let theta2 = tape.sum(sq);
    let (a, b) = if tape.value(theta2).item().as_f64() < SERIES_THRESHOLD * SERIES_THRESHOLD {
        let theta4 = tape.mul(theta2, theta2)?;
        let a2 = tape.scale(theta2, T::lit(-1.0 / 6.0));
        let a4 = tape.scale(theta4, T::lit(1.0 / 120.0));
        let a = tape.add(a2, a4)?;
        let a = tape.add_scalar(a, T::one());
        let b2 = tape.scale(theta2, T::lit(-1.0 / 24.0));
        let b4 = tape.scale(theta4, T::lit(1.0 / 720.0));
        let b = tape.add(b2, b4)?;
        let b = tape.add_scalar(b, T::lit(0.5));
        (a, b)
    } else {
        let theta = tape.sqrt(theta2);
        let s = tape.sin(theta);
        let inv = tape.recip(theta);
        let a = tape.mul(s, inv)?;
        let c = tape.cos(theta);
        let one_minus_c = tape.neg(c);
        let one_minus_c = tape.add_scalar(one_minus_c, T::one());
        let inv2 = tape.recip(theta2);
        let b = tape.mul(one_minus_c, inv2)?;
        (a, b)
    };
    let eye = tape.constant(identity3());
    let ak = tape.mul(a, k)?;
    let bk2 = tape.mul(b, k2)?;
    let r = tape.add(eye, ak)?;
    tape.add(r, bk2)
}

fn identity3<T: Real>() -> Tensor<T> {
    let mut t = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        t.data_mut()[i * 4] = T::one();
    }
    t
}

/// Rotation matrix of an axis-angle vector, for value-only use.
pub fn rotation_matrix(w: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(w)).into_inner()
}

/// Axis-angle of a rotation matrix, with angle in `[0, π]`.
pub fn axis_angle(r: &Matrix3<f64>) -> [f64; 3] {
    let rot = Rotation3::from_matrix(r);
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Axis-angle equivalent of the Euler product `Rx(θx) Ry(θy) Rz(θz)`.
pub fn euler_to_axis_angle(theta_x: f64, theta_y: f64, theta_z: f64) -> [f64; 3] {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), theta_x);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), theta_y);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta_z);
    let v = (rx * ry * rz).scaled_axis();
    [v.x, v.y, v.z]
}

/// Wraps an axis-angle vector so its norm lies in `[0, π]` without changing
/// the rotation it represents.
pub fn canonicalize_axis_angle<T: Real>(w: &mut [T]) {
    let norm = w.iter().map(|&x| x * x).sum::<T>().sqrt();
    let pi = T::PI();
    if norm > pi {
        let two_pi = pi + pi;
        let mut target = norm % two_pi;
        let mut flip = T::one();
        if target > pi {
            target = two_pi - target;
            flip = -T::one();
        }
        let scale = flip * target / norm;
        for x in w.iter_mut() {
            *x *= scale;
        }
    }
}

/// Angle in radians of the relative rotation `R1ᵀ R2`.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let rel = r1.transpose() * r2;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Rotation by `angle` radians about a (not necessarily unit) `axis`.
pub fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn eval(w: [f64; 3]) -> Matrix3<f64> {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::vector(&w));
        let r = so3_exp(&mut tape, v).unwrap();
        Matrix3::from_row_slice(tape.value(r).data())
    }

    fn elemental(axis: usize, t: f64) -> Matrix3<f64> {
        let (c, s) = (t.cos(), t.sin());
        match axis {
            0 => Matrix3::new(1., 0., 0., 0., c, -s, 0., s, c),
            1 => Matrix3::new(c, 0., s, 0., 1., 0., -s, 0., c),
            _ => Matrix3::new(c, -s, 0., s, c, 0., 0., 0., 1.),
        }
    }

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(eval([0.0; 3]), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = eval([0.0, 0.0, FRAC_PI_2]);
        let col0 = r.column(0);
        assert!((col0 - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tape_rodrigues_agrees_with_reference() {
        for w in [[0.3, -0.2, 0.9], [1e-7, 2e-7, -1e-7], [3.0, 0.1, 0.2], [0.0, 0.0, PI]] {
            let diff = (eval(w) - rotation_matrix(w)).abs().max();
            assert!(diff < 1e-12, "{w:?}: {diff}");
        }
    }

    #[test]
    fn euler_single_axis_and_zero() {
        assert_eq!(euler_to_axis_angle(0.0, 0.0, 0.0), [0.0, 0.0, 0.0]);
        let w = euler_to_axis_angle(0.3, 0.0, 0.0);
        assert!((w[0] - 0.3).abs() < 1e-12 && w[1].abs() < 1e-12 && w[2].abs() < 1e-12);
    }

    #[test]
    fn euler_round_trip_matches_elemental_product() {
        let (x, y, z) = (0.1, 0.2, 0.3);
        let expected = elemental(0, x) * elemental(1, y) * elemental(2, z);
        let got = eval(euler_to_axis_angle(x, y, z));
        assert!((got - expected).abs().max() < 1e-9);
    }

    #[test]
    fn canonicalization_preserves_rotation() {
        for w in [[4.0, 0.0, 0.0], [2.5, -2.5, 1.0], [7.0, 0.2, -0.1]] {
            let mut c: [f64; 3] = w;
            canonicalize_axis_angle(&mut c);
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            assert!(n <= PI + 1e-12);
            assert!((rotation_matrix(w) - rotation_matrix(c)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn geodesic_of_axis_rotation() {
        let r = rotation_matrix([0.2, 0.4, -0.1]);
        let d = axis_rotation(Vector3::new(1.0, 2.0, 3.0), 10f64.to_radians());
        assert!((geodesic_distance(&r, &(r * d)).to_degrees() - 10.0).abs() < 1e-9);
    }
}
