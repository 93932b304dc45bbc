//! Grayscale image ingestion, PGM export, and patch preparation.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, ImageError, Result};
use crate::tensor::Tensor;

/// An image or crop with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub pixels: Tensor<f32>,
    pub source_id: String,
    pub crop_origin: (usize, usize),
}

impl ImagePatch {
    pub fn new(pixels: Tensor<f32>, source_id: impl Into<String>) -> Self {
        Self {
            pixels,
            source_id: source_id.into(),
            crop_origin: (0, 0),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads an 8-bit PGM (P5) or PNG as a `[1,H,W]` tensor scaled by `1/255`.
/// Colour PNGs are converted with luminance weights 0.299/0.587/0.114.
/// The patch id is the file name, so results do not depend on where the
/// file lives.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pixels = decode_grayscale(&bytes)?;
    let id = path
        .file_name()
        .map_or_else(|| path.to_string_lossy(), |n| n.to_string_lossy());
    Ok(ImagePatch::new(pixels, id))
}

pub fn decode_grayscale(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(ImageError::UnsupportedFormat("expected binary PGM (P5) or PNG".into()).into())
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::CorruptHeader("header ends early".into()).into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
        *field = text
            .parse()
            .map_err(|_| ImageError::CorruptHeader(format!("expected a number at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::CorruptHeader("missing whitespace after maxval".into()).into());
    }
    pos += 1;
    if width == 0 || height == 0 || maxval == 0 {
        return Err(ImageError::CorruptHeader("zero width, height or maxval".into()).into());
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedBitDepth(format!("PGM maxval {maxval}, only 255 is supported")).into());
    }
    let n = width * height;
    let body = bytes.get(pos..pos + n).ok_or(ImageError::Truncated)?;
    Tensor::from_vec(&[1, height, width], body.iter().map(|&b| b as f32 / 255.0).collect())
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::CorruptHeader(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.as_raw().chunks(2).map(|p| p[0] as f32 / 255.0).collect(),
        DynamicImage::ImageRgb8(buf) => buf.as_raw().chunks(3).map(luminance).collect(),
        DynamicImage::ImageRgba8(buf) => buf.as_raw().chunks(4).map(luminance).collect(),
        other => return Err(ImageError::UnsupportedBitDepth(format!("PNG colour type {:?}", other.color())).into()),
    };
    Tensor::from_vec(&[1, h, w], data)
}

fn luminance(px: &[u8]) -> f32 {
    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
    (y / 255.0) as f32
}

/// Clamps to `[0,1]`, quantizes to 8 bits, and encodes a binary PGM.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::shape("encode_pgm", &[1, h, w], &[c, h, w]));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(image)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Uniformly positioned `size x size` crop.
pub fn random_crop<R: Rng + ?Sized>(image: &ImagePatch, size: usize, rng: &mut R) -> Result<ImagePatch> {
    let (h, w) = (image.height(), image.width());
    if h < size || w < size || size == 0 {
        return Err(ImageError::TooSmall {
            height: h,
            width: w,
            min: size,
        }
        .into());
    }
    let row = rng.random_range(0..=h - size);
    let col = rng.random_range(0..=w - size);
    crop(image, row, col, size)
}

pub fn crop(image: &ImagePatch, row: usize, col: usize, size: usize) -> Result<ImagePatch> {
    let w = image.width();
    if row + size > image.height() || col + size > w {
        return Err(Error::InvalidArgument(format!(
            "crop at ({row},{col}) of size {size} exceeds image"
        )));
    }
    let src = image.pixels.data();
    let mut data = Vec::with_capacity(size * size);
    for y in row..row + size {
        data.extend_from_slice(&src[y * w + col..y * w + col + size]);
    }
    Ok(ImagePatch {
        pixels: Tensor::from_vec(&[1, size, size], data)?,
        source_id: image.source_id.clone(),
        crop_origin: (image.crop_origin.0 + row, image.crop_origin.1 + col),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Where images for each split come from and how they are cut into patches.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub patch_size: usize,
    pub crops_per_image: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            patch_size: 64,
            crops_per_image: 1,
            seed: 0,
        }
    }
}

/// Image files (`.pgm`, `.png`) under `dir`, sorted by path.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl DatasetSpec {
    fn roots(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn files(&self, split: Split) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for root in self.roots(split) {
            if root.is_dir() {
                out.extend(list_images(root)?);
            } else {
                out.push(root.clone());
            }
        }
        Ok(out)
    }

    /// Fails if any image file is shared between splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let canon = |split| -> Result<HashSet<PathBuf>> {
            self.files(split)?
                .into_iter()
                .map(|p| fs::canonicalize(&p).map_err(|e| Error::io(p, e)))
                .collect()
        };
        let train = canon(Split::Train)?;
        for split in [Split::Validation, Split::Test] {
            if let Some(shared) = canon(split)?.intersection(&train).next() {
                return Err(Error::Config(format!(
                    "{} is used for both training and {split:?}",
                    shared.display()
                )));
            }
        }
        Ok(())
    }

    /// Loads a split. Training images are cut into `crops_per_image` random
    /// `patch_size` crops; validation and test images are kept whole.
    pub fn load<R: Rng + ?Sized>(&self, split: Split, rng: &mut R) -> Result<Vec<ImagePatch>> {
        self.check_disjoint()?;
        let mut out = Vec::new();
        for path in self.files(split)? {
            let image = load_grayscale(&path)?;
            if split == Split::Train {
                for _ in 0..self.crops_per_image {
                    out.push(random_crop(&image, self.patch_size, rng)?);
                }
            } else {
                out.push(image);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pgm(w: usize, h: usize, fill: u8) -> Vec<u8> {
        let mut b = format!("P5\n# comment\n{w} {h}\n255\n").into_bytes();
        b.extend(std::iter::repeat_n(fill, w * h));
        b
    }

    #[test]
    fn pgm_extremes_and_midpoint() {
        let ones = decode_grayscale(&pgm(3, 2, 255)).unwrap();
        assert_eq!(ones.shape(), &[1, 2, 3]);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let zeros = decode_grayscale(&pgm(3, 2, 0)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let mid = decode_grayscale(&pgm(1, 1, 128)).unwrap();
        assert_eq!(mid.data()[0], 128.0 / 255.0);
        assert!((mid.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn pgm_errors_are_distinct() {
        let sixteen = b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0".to_vec();
        assert!(matches!(
            decode_grayscale(&sixteen),
            Err(Error::Image(ImageError::UnsupportedBitDepth(_)))
        ));
        assert!(matches!(
            decode_grayscale(b"P5\n2 x\n255\n"),
            Err(Error::Image(ImageError::CorruptHeader(_)))
        ));
        let mut short = pgm(4, 4, 9);
        short.truncate(short.len() - 3);
        assert!(matches!(
            decode_grayscale(&short),
            Err(Error::Image(ImageError::Truncated))
        ));
        assert!(matches!(
            decode_grayscale(b"GIF89a"),
            Err(Error::Image(ImageError::UnsupportedFormat(_)))
        ));
    }

    #[test]
    fn pgm_round_trip_is_exact_for_8bit_data() {
        let mut b = b"P5\n16 16\n255\n".to_vec();
        b.extend(0..=255u8);
        let t = decode_grayscale(&b).unwrap();
        assert_eq!(encode_pgm(&t).unwrap(), b);
    }

    #[test]
    fn colour_png_uses_luminance_weights() {
        let img = image::RgbImage::from_raw(2, 1, vec![255, 0, 0, 10, 20, 30]).unwrap();
        let mut bytes = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let t = decode_grayscale(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert!((t.data()[0] as f64 - 0.299).abs() < 1e-6);
        let y = (0.299 * 10.0 + 0.587 * 20.0 + 0.114 * 30.0) / 255.0;
        assert!((t.data()[1] as f64 - y).abs() < 1e-6);
    }

    #[test]
    fn crop_of_exact_size_is_whole_image() {
        let img = ImagePatch::new(Tensor::from_fn(&[1, 64, 64], |i| i as f32), "x");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(&img, 64, &mut rng).unwrap();
        assert_eq!(c.crop_origin, (0, 0));
        assert_eq!(c.pixels, img.pixels);
        assert!(random_crop(&img, 65, &mut rng).is_err());
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let img = ImagePatch::new(Tensor::zeros(&[1, 128, 128]), "x");
        let a = random_crop(&img, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_crop(&img, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.crop_origin, b.crop_origin);
    }

    #[test]
    fn crop_origins_are_uniform() {
        let img = ImagePatch::new(Tensor::zeros(&[1, 128, 128]), "x");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [0usize; 65];
        for _ in 0..draws {
            counts[random_crop(&img, 64, &mut rng).unwrap().crop_origin.0] += 1;
        }
        let expected = draws as f64 / 65.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 64 degrees of freedom; the 0.999 quantile is about 112
        assert!(chi2 < 112.0, "chi-square {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, pgm(64, 64, 7)).unwrap();
        let spec = DatasetSpec {
            train: vec![dir.path().to_path_buf()],
            validation: vec![p.clone()],
            ..Default::default()
        };
        assert!(spec.check_disjoint().is_err());
        let ok = DatasetSpec {
            train: vec![dir.path().to_path_buf()],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loaded = ok.load(Split::Train, &mut rng).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].pixels.shape(), &[1, 64, 64]);
    }
}
