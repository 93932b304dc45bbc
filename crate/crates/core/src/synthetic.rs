//! Procedural noise-free textures used as bundled training and validation data.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePatch;
use crate::tensor::Tensor;

/// A smooth texture: a few low-frequency gratings, soft blobs, and one
/// blurred step edge, rescaled into `[0.1, 0.9]`.
pub fn texture(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let period = rng.random_range(10.0..36.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.3..1.0);
            (angle, 2.0 * PI / period, phase, amp)
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let cy = rng.random_range(0.0..height as f64);
            let cx = rng.random_range(0.0..width as f64);
            let radius = rng.random_range(6.0..20.0);
            let amp = rng.random_range(-1.0..1.0);
            (cy, cx, radius, amp)
        })
        .collect();
    let edge_angle = rng.random_range(0.0..2.0 * PI);
    let edge_offset = rng.random_range(-0.3..0.3) * height.min(width) as f64;
    let edge_amp = rng.random_range(0.3..0.8);

    let (cy0, cx0) = (height as f64 / 2.0, width as f64 / 2.0);
    let raw: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let mut v = 0.0;
            for &(angle, freq, phase, amp) in &gratings {
                v += amp * (freq * (x * angle.cos() + y * angle.sin()) + phase).sin();
            }
            for &(by, bx, r, amp) in &blobs {
                let d2 = (y - by).powi(2) + (x - bx).powi(2);
                v += amp * (-d2 / (2.0 * r * r)).exp();
            }
            let s = (x - cx0) * edge_angle.cos() + (y - cy0) * edge_angle.sin() - edge_offset;
            v += edge_amp * (s / 1.5).tanh();
            v
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = raw.iter().map(|&v| (0.1 + 0.8 * (v - lo) / span) as f32).collect();
    Tensor::from_vec(&[1, height, width], data).expect("shape matches")
}

fn set(prefix: &str, count: usize, size: usize, seed: u64, stream: u64) -> Vec<ImagePatch> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 32) ^ i as u64;
            ImagePatch::new(texture(s, size, size), format!("{prefix}-{i:02}"))
        })
        .collect()
}

/// Bundled training patches.
pub fn training_set(count: usize, size: usize, seed: u64) -> Vec<ImagePatch> {
    set("synthetic-train", count, size, seed, 1)
}

/// Held-out stand-ins for the validation images, disjoint from [`training_set`].
pub fn validation_set(count: usize, size: usize, seed: u64) -> Vec<ImagePatch> {
    set("synthetic-val", count, size, seed, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_in_range_and_deterministic() {
        let a = texture(5, 64, 48);
        assert_eq!(a.shape(), &[1, 64, 48]);
        assert!(a.data().iter().all(|&v| (0.1..=0.9).contains(&v)));
        assert_eq!(a, texture(5, 64, 48));
        assert_ne!(a, texture(6, 64, 48));
    }

    #[test]
    fn splits_do_not_share_images() {
        let train = training_set(16, 32, 0);
        let val = validation_set(7, 32, 0);
        for v in &val {
            assert!(train.iter().all(|t| t.pixels != v.pixels));
        }
    }
}
