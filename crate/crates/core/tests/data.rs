use advdenoise_core::data::{encode_pgm, list_images, load_grayscale, save_pgm, DatasetSpec, Split};
use advdenoise_core::{synthetic, Error, ImageError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pgm_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic::texture(4, 20, 30).map(|v| (v * 255.0).round() / 255.0);
    let path = dir.path().join("t.pgm");
    save_pgm(&img, &path).unwrap();
    let back = load_grayscale(&path).unwrap();
    assert_eq!(back.pixels, img);
    assert_eq!(back.source_id, "t.pgm");
}

#[test]
fn png_files_are_read_as_grayscale() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let raw: Vec<u8> = (0..16 * 16).map(|i| (i % 256) as u8).collect();
    image::GrayImage::from_raw(16, 16, raw.clone())
        .unwrap()
        .save(&path)
        .unwrap();
    let loaded = load_grayscale(&path).unwrap();
    assert_eq!(loaded.pixels.shape(), &[1, 16, 16]);
    let expected: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(loaded.pixels.data(), expected.as_slice());
}

#[test]
fn sixteen_bit_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.png");
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_pixel(8, 8, image::Luma([1000]));
    img.save(&path).unwrap();
    assert!(matches!(
        load_grayscale(&path),
        Err(Error::Image(ImageError::UnsupportedBitDepth(_)))
    ));
}

#[test]
fn dataset_splits_load_and_must_be_disjoint() {
    let root = tempfile::tempdir().unwrap();
    let train = root.path().join("train");
    let val = root.path().join("val");
    std::fs::create_dir_all(&train).unwrap();
    std::fs::create_dir_all(&val).unwrap();
    for i in 0..3 {
        save_pgm(&synthetic::texture(i, 40, 40), train.join(format!("{i}.pgm"))).unwrap();
    }
    save_pgm(&synthetic::texture(9, 24, 24), val.join("v.pgm")).unwrap();
    std::fs::write(train.join("notes.txt"), "ignored").unwrap();
    assert_eq!(list_images(&train).unwrap().len(), 3);

    let spec = DatasetSpec {
        train: vec![train.clone()],
        validation: vec![val.clone()],
        patch_size: 16,
        crops_per_image: 2,
        ..DatasetSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let patches = spec.load(Split::Train, &mut rng).unwrap();
    assert_eq!(patches.len(), 6);
    assert!(patches.iter().all(|p| p.pixels.shape() == [1, 16, 16]));
    let whole = spec.load(Split::Validation, &mut rng).unwrap();
    assert_eq!(whole[0].pixels.shape(), &[1, 24, 24]);

    let overlapping = DatasetSpec {
        validation: vec![train.join("1.pgm")],
        ..spec
    };
    assert!(matches!(overlapping.check_disjoint(), Err(Error::Config(_))));
}

#[test]
fn encoded_pgm_clamps_out_of_range_values() {
    let img = Tensor::from_vec(&[1, 1, 3], vec![-0.5f32, 0.5, 1.5]).unwrap();
    let bytes = encode_pgm(&img).unwrap();
    assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
}
