use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive white Gaussian noise, `sigma255` on the 0-255 scale. The result
/// is not clipped to `[0,1]`.
pub fn add_gaussian_noise<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    sigma255: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {sigma255}"
        )));
    }
    if sigma255 == 0.0 {
        return Ok(image.clone());
    }
    let std = sigma255 / 255.0;
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + T::from_f64_lossy(std * n)
        })
        .collect();
    Tensor::from_vec(image.shape(), data)
}

/// Training-time noise: a fresh sigma per sample, uniform over a range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_min: 5.0,
            sigma_max: 30.0,
        }
    }
}

impl NoiseSpec {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            sigma_min: sigma,
            sigma_max: sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "noise range [{}, {}] must satisfy 0 <= lo <= hi",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma_max == self.sigma_min {
            self.sigma_min
        } else {
            rng.random_range(self.sigma_min..self.sigma_max)
        }
    }

    /// Draws a sigma, then the noise. The sigma never leaves this function.
    pub fn corrupt<T: Real, R: Rng + ?Sized>(&self, image: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let sigma = self.sample_sigma(rng);
        add_gaussian_noise(image, sigma, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32 / 16.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        assert!(add_gaussian_noise(&img, -1.0, &mut rng).is_err());
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let img = Tensor::<f64>::full(&[1, 256, 256], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noisy = add_gaussian_noise(&img, 25.0, &mut rng).unwrap();
        let diffs: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() / target < 0.03);
    }

    #[test]
    fn sampled_sigma_stays_in_range() {
        let spec = NoiseSpec::default();
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = spec.sample_sigma(&mut rng);
            assert!((5.0..30.0).contains(&s));
        }
        assert!(NoiseSpec {
            sigma_min: 3.0,
            sigma_max: 2.0
        }
        .validate()
        .is_err());
    }
}
