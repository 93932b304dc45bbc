use advdenoise_core::checkpoint::*;
use advdenoise_core::{
    build_denoiser, build_discriminator, CheckpointError, DiscriminatorConfig, Error, MultiScaleConfig, SkipMode,
};
use proptest::prelude::*;

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        config_hash: "3f2a".into(),
        provenance: "seed=7\nphase1_iters=10\n".into(),
        completed_phase: 1,
    }
}

fn checkpoint_error(result: advdenoise_core::Result<impl std::fmt::Debug>) -> CheckpointError {
    match result {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

fn default_bytes() -> Vec<u8> {
    let mut m = build_denoiser::<f32>(MultiScaleConfig::default(), 1).unwrap();
    m.set_skip_mode(SkipMode::ShortCircuit);
    m.set_dropout(Some(0.7)).unwrap();
    encode_denoiser(&m, &meta())
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    let model = build_denoiser::<f32>(MultiScaleConfig::default(), 1).unwrap();
    save_denoiser(&first, &model, &meta()).unwrap();
    let (loaded, m) = load_denoiser(&first).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(m, meta());
    save_denoiser(&second, &loaded, &m).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn stored_config_survives() {
    let (m, _) = decode_denoiser(&default_bytes()).unwrap();
    assert_eq!(m.config().to_spec_string(), "3:32,5:40,7:48,9:56,11:64");
    assert_eq!(m.skip_mode(), SkipMode::ShortCircuit);
    assert_eq!(m.dropout(), Some(0.7));
    assert_eq!(m.lp_config(), advdenoise_core::LpConfig::default());
}

#[test]
fn header_starts_with_magic_and_version() {
    let bytes = default_bytes();
    assert_eq!(&bytes[..4], b"ADVD");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), FORMAT_VERSION);
    assert_eq!(&bytes[6..10], b"DENO");
}

#[test]
fn discriminator_round_trip() {
    let d = build_discriminator::<f32>(DiscriminatorConfig::default(), 2).unwrap();
    let bytes = encode_discriminator(&d, &meta());
    assert_eq!(&bytes[6..10], b"DISC");
    let (back, m) = decode_discriminator(&bytes).unwrap();
    assert_eq!(back.params(), d.params());
    assert_eq!(encode_discriminator(&back, &m), bytes);
    assert!(matches!(
        checkpoint_error(decode_denoiser(&bytes)),
        CheckpointError::WrongKind { .. }
    ));
}

#[test]
fn truncation_at_any_length_is_reported_as_truncation() {
    let bytes = default_bytes();
    let mut lengths: Vec<usize> = (0..64).collect();
    lengths.extend((64..bytes.len()).step_by(9973));
    lengths.push(bytes.len() - 1);
    for len in lengths {
        assert_eq!(
            checkpoint_error(decode_denoiser(&bytes[..len])),
            CheckpointError::Truncated,
            "length {len}"
        );
    }
}

#[test]
fn version_mismatch() {
    let mut bytes = default_bytes();
    bytes[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert_eq!(
        checkpoint_error(decode_denoiser(&bytes)),
        CheckpointError::VersionMismatch {
            found: FORMAT_VERSION + 1,
            supported: FORMAT_VERSION
        }
    );
}

#[test]
fn wrong_magic() {
    let mut bytes = default_bytes();
    bytes[..4].copy_from_slice(b"GIF8");
    assert_eq!(checkpoint_error(decode_denoiser(&bytes)), CheckpointError::BadMagic);
}

#[test]
fn shape_mismatch_is_named() {
    let mut m = build_denoiser::<f32>(MultiScaleConfig::default(), 1).unwrap();
    let p = m.params_mut().by_name_mut("features.k3.weight").unwrap();
    p.value = p.value.clone().reshape(&[32, 9, 1, 1]).unwrap();
    let bytes = encode_denoiser(&m, &meta());
    match checkpoint_error(decode_denoiser(&bytes)) {
        CheckpointError::ShapeMismatch { name, expected, found } => {
            assert_eq!(name, "features.k3.weight");
            assert_eq!(expected, [32, 1, 3, 3]);
            assert_eq!(found, [32, 9, 1, 1]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_denoiser(dir.path().join("nope.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn trailing_garbage_is_rejected() {
    let mut bytes = default_bytes();
    bytes.push(0);
    assert!(matches!(
        checkpoint_error(decode_denoiser(&bytes)),
        CheckpointError::Malformed(_)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flipped_weight_bytes_fail_the_checksum(offset in 0usize..240 * 240 * 4, bit in 0u8..8) {
        let mut bytes = default_bytes();
        // Flip a bit inside the float payload of the largest array.
        let name = b"gating.conv2.weight";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
        let payload = at + name.len() + 1 + 4 * 4;
        bytes[payload + offset] ^= 1 << bit;
        prop_assert_eq!(checkpoint_error(decode_denoiser(&bytes)), CheckpointError::Checksum);
    }
}
