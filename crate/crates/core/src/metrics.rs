//! MSE / PSNR on the 0-255 scale and validation-set evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ImagePatch;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::training::add_gaussian_noise;

/// Noise levels (0-255 scale) reported during validation.
pub const VALIDATION_SIGMAS: [f64; 4] = [10.0, 15.0, 20.0, 25.0];

/// Mean squared error after scaling `[0,1]` values by 255 (no re-quantization).
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty images".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = 255.0 * (x.as_f64() - y.as_f64());
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR in dB for a given 0-255 scale MSE; `+inf` when the MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

pub fn psnr<T: Real>(clean: &Tensor<T>, other: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(clean, other)?))
}

/// Mean of the finite values; identical-image sentinels are excluded.
pub fn mean_finite(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Anything that maps a noisy `[1,H,W]` image to a denoised one.
pub trait Denoise: Sync {
    fn denoise_image(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Denoise for DenoiserModel<f32> {
    fn denoise_image(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.denoise(noisy)
    }
}

impl<F> Denoise for F
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    fn denoise_image(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(noisy)
    }
}

/// Stable per-(image, sigma) noise seed, independent of set ordering.
pub fn noise_seed(seed: u64, image_id: &str, sigma: f64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes().chain(sigma.to_bits().to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub sigma: f64,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub mean_psnr_noisy: f64,
    pub mean_psnr_denoised: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<EvalRow>,
    pub per_sigma: Vec<SigmaSummary>,
}

impl ValidationReport {
    pub fn mean_denoised(&self, sigma: f64) -> Option<f64> {
        self.per_sigma
            .iter()
            .find(|s| s.sigma == sigma)
            .map(|s| s.mean_psnr_denoised)
    }

    pub fn improvement(&self, sigma: f64) -> Option<f64> {
        self.per_sigma
            .iter()
            .find(|s| s.sigma == sigma)
            .map(|s| s.mean_psnr_denoised - s.mean_psnr_noisy)
    }
}

/// Corrupts every image at every sigma with a noise draw fixed by
/// `(seed, image id, sigma)`, denoises it, and averages PSNR per sigma.
/// Means are summed in image-id order so shuffling the set changes nothing.
pub fn evaluate_validation(
    denoiser: &dyn Denoise,
    images: &[ImagePatch],
    sigmas: &[f64],
    seed: u64,
) -> Result<ValidationReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut order: Vec<&ImagePatch> = images.iter().collect();
    order.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let jobs: Vec<(&ImagePatch, f64)> = sigmas
        .iter()
        .flat_map(|&s| order.iter().map(move |&img| (img, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(img, sigma)| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, &img.source_id, sigma));
            let noisy = add_gaussian_noise(&img.pixels, sigma, &mut rng)?;
            let denoised = denoiser.denoise_image(&noisy)?;
            Ok(EvalRow {
                image_id: img.source_id.clone(),
                sigma,
                psnr_noisy: psnr(&img.pixels, &noisy)?,
                psnr_denoised: psnr(&img.pixels, &denoised)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_sigma = sigmas
        .iter()
        .map(|&sigma| {
            let of = |f: fn(&EvalRow) -> f64| {
                let v: Vec<f64> = rows.iter().filter(|r| r.sigma == sigma).map(f).collect();
                mean_finite(&v).unwrap_or(f64::INFINITY)
            };
            SigmaSummary {
                sigma,
                mean_psnr_noisy: of(|r| r.psnr_noisy),
                mean_psnr_denoised: of(|r| r.psnr_denoised),
            }
        })
        .collect();
    Ok(ValidationReport { rows, per_sigma })
}

/// Writes evaluation rows as CSV: `image_id,sigma,psnr_noisy,psnr_denoised`.
pub fn write_eval_csv<W: std::io::Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "sigma", "psnr_noisy", "psnr_denoised"])?;
    for r in rows {
        w.write_record([
            r.image_id.clone(),
            r.sigma.to_string(),
            r.psnr_noisy.to_string(),
            r.psnr_denoised.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use proptest::prelude::*;

    fn flat(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 8, 8], v)
    }

    #[test]
    fn psnr_reference_values() {
        assert_eq!(psnr_from_mse(255.0 * 255.0), 0.0);
        let a = flat(0.25);
        let b = flat(0.25 + 16.0 / 255.0);
        let m = mse(&a.cast::<f64>(), &b.cast::<f64>()).unwrap();
        assert!((m - 256.0).abs() < 1e-3);
        let expected = 10.0 * (65025.0f64 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 0.01);
        assert!((expected - 24.05).abs() < 0.01);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(&[1, 8, 7])).is_err());
        assert_eq!(mean_finite(&[f64::INFINITY, 30.0, 20.0]), Some(25.0));
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed in 0u64..1000) {
            let a = synthetic::texture(seed, 8, 8).cast::<f64>();
            let b = synthetic::texture(seed + 1, 8, 8).cast::<f64>();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn psnr_decreases_with_offset(d1 in 1e-3f64..0.2, extra in 1e-3f64..0.2) {
            let a = Tensor::<f64>::full(&[1, 4, 4], 0.3);
            let near = a.map(|v| v + d1);
            let far = a.map(|v| v - (d1 + extra));
            prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
        }
    }

    #[test]
    fn identity_baseline_equals_noisy_psnr() {
        let val = synthetic::validation_set(3, 16, 0);
        let identity = |x: &Tensor<f32>| Ok(x.clone());
        let r = evaluate_validation(&identity, &val, &VALIDATION_SIGMAS, 4).unwrap();
        for s in &r.per_sigma {
            assert_eq!(s.mean_psnr_noisy, s.mean_psnr_denoised);
        }
        assert_eq!(r.rows.len(), 12);
    }

    #[test]
    fn zero_output_baseline_is_finite() {
        let val = vec![ImagePatch::new(Tensor::full(&[1, 16, 16], 0.5), "gray")];
        let zero = |x: &Tensor<f32>| Ok(Tensor::zeros(x.shape()));
        let r = evaluate_validation(&zero, &val, &[25.0], 1).unwrap();
        let p = r.mean_denoised(25.0).unwrap();
        assert!(p.is_finite());
        assert!((p - psnr_from_mse(127.5f64.powi(2))).abs() < 1e-3);
    }

    #[test]
    fn evaluation_is_order_independent_and_deterministic() {
        let val = synthetic::validation_set(5, 16, 2);
        let halve = |x: &Tensor<f32>| Ok(x.map(|v| 0.5 * v + 0.25));
        let a = evaluate_validation(&halve, &val, &[10.0, 25.0], 9).unwrap();
        let mut shuffled = val.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let b = evaluate_validation(&halve, &shuffled, &[10.0, 25.0], 9).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_validation(&halve, &[], &[10.0], 0).is_err());
    }
}
