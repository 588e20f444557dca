use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Real;

use super::{AutodiffError, Tensor};

/// He/Kaiming normal initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn kaiming_init<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>, AutodiffError> {
    if fan_in == 0 {
        return Err(AutodiffError::InvalidArgument("kaiming_init: fan_in must be >= 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(shape, std, rng)
}

pub fn normal_init<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Result<Tensor<T>, AutodiffError> {
    let dist = Normal::new(0.0, std)
        .map_err(|e| AutodiffError::InvalidArgument(format!("normal_init: {e}")))?;
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_variance(t: &Tensor<f64>) -> f64 {
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn variance_follows_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (fan_in, target) in [(2usize, 1.0), (200, 0.01)] {
            let t: Tensor<f64> = kaiming_init(&[100_000], fan_in, &mut rng).unwrap();
            let var = sample_variance(&t);
            assert!((var / target - 1.0).abs() < 0.05, "fan_in {fan_in}: {var}");
        }
    }

    #[test]
    fn seeded_draws_repeat_exactly() {
        let a: Tensor<f64> = kaiming_init(&[4, 5], 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: Tensor<f64> = kaiming_init(&[4, 5], 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_fan_in_rejected() {
        let r: Result<Tensor<f64>, _> = kaiming_init(&[2], 0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }
}
