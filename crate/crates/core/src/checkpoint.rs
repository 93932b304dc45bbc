//! Binary checkpoints of denoisers and discriminators.
//!
//! Layout (little endian): magic `ADVD`, `u16` format version, 4-byte model
//! kind (`DENO` or `DISC`), run metadata, a model configuration block, the
//! named shape-tagged `f32` parameter arrays, and a trailing CRC-32 of
//! everything before it.

use std::path::Path;

use crate::denoiser::{build_denoiser, Branch, DenoiserModel, LpConfig, MultiScaleConfig, SkipMode};
use crate::discriminator::{build_discriminator, ConvStage, Discriminator, DiscriminatorConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ADVD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Discriminator,
}

impl ModelKind {
    pub fn tag(self) -> [u8; 4] {
        match self {
            ModelKind::Denoiser => *b"DENO",
            ModelKind::Discriminator => *b"DISC",
        }
    }

    fn from_tag(tag: [u8; 4]) -> Option<Self> {
        [ModelKind::Denoiser, ModelKind::Discriminator]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

/// Run information stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Free-form description of the run configuration (`key=value` lines).
    pub provenance: String,
    /// Last fully completed training phase, 0 for none.
    pub completed_phase: u8,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: ModelKind, meta: &CheckpointMeta) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.u16(FORMAT_VERSION);
        w.buf.extend_from_slice(&kind.tag());
        w.text(&meta.config_hash);
        w.text(&meta.provenance);
        w.u8(meta.completed_phase);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn size(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("size fits in u32"));
    }

    fn text(&mut self, s: &str) {
        self.size(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn params(&mut self, params: &ParamSet<f32>) {
        self.size(params.len());
        for p in params.iter() {
            self.u16(u16::try_from(p.name.len()).expect("short parameter name"));
            self.buf.extend_from_slice(p.name.as_bytes());
            self.u8(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                self.size(d);
            }
            for &v in p.value.data() {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn size(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.size()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("text is not UTF-8".into()))
    }

    fn params(&mut self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, CheckpointError> {
        let count = self.size()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
            let ndim = self.u8()? as usize;
            let shape = (0..ndim).map(|_| self.size()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("shape of {name} overflows")))?;
            let raw = self.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, shape, data));
        }
        Ok(out)
    }
}

/// Parses the common header; returns the reader positioned at the config block.
fn open(bytes: &[u8], expected: ModelKind) -> Result<(Reader<'_>, CheckpointMeta), CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let tag = r.array::<4>()?;
    let found = ModelKind::from_tag(tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown model kind {:?}", String::from_utf8_lossy(&tag))))?;
    if found != expected {
        return Err(CheckpointError::WrongKind {
            expected: String::from_utf8_lossy(&expected.tag()).into_owned(),
            found: String::from_utf8_lossy(&tag).into_owned(),
        });
    }
    let meta = CheckpointMeta {
        config_hash: r.text()?,
        provenance: r.text()?,
        completed_phase: r.u8()?,
    };
    Ok((r, meta))
}

/// Verifies the trailing checksum once the body has been parsed.
fn close(mut r: Reader<'_>) -> Result<(), CheckpointError> {
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != r.bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
    }
    if crc32fast::hash(&r.bytes[..body_end]) != stored {
        return Err(CheckpointError::Checksum);
    }
    Ok(())
}

/// Copies stored arrays into `params`, which must have exactly the same names and shapes.
fn fill(params: &mut ParamSet<f32>, stored: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<(), CheckpointError> {
    if stored.len() != params.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} parameter arrays, found {}",
            params.len(),
            stored.len()
        )));
    }
    for (name, shape, data) in stored {
        let p = params
            .by_name_mut(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected parameter {name}")))?;
        if p.value.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: p.value.shape().to_vec(),
                found: shape,
            });
        }
        p.value = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok(())
}

fn skip_code(mode: SkipMode) -> u8 {
    match mode {
        SkipMode::ShortCircuit => 0,
        SkipMode::Gated => 1,
    }
}

pub fn encode_denoiser(model: &DenoiserModel<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::new(ModelKind::Denoiser, meta);
    let config = model.config();
    w.u8(config.input_channels as u8);
    w.u8(config.branches.len() as u8);
    for b in &config.branches {
        w.u16(b.kernel as u16);
        w.u16(b.channels as u16);
    }
    w.u16(crate::denoiser::FEATURE_WIDTH as u16);
    w.u16(crate::denoiser::RECON_WIDTH as u16);
    let lp = model.lp_config();
    w.f64(lp.lambda);
    w.f64(lp.p);
    w.f64(lp.eps);
    w.u8(skip_code(model.skip_mode()));
    match model.dropout() {
        Some(p) => {
            w.u8(1);
            w.f64(p);
        }
        None => {
            w.u8(0);
            w.f64(0.0);
        }
    }
    w.params(model.params());
    w.finish()
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<(DenoiserModel<f32>, CheckpointMeta)> {
    let (mut r, meta) = open(bytes, ModelKind::Denoiser)?;
    let input_channels = r.u8()? as usize;
    let n = r.u8()? as usize;
    let mut branches = Vec::with_capacity(n);
    for _ in 0..n {
        let kernel = r.u16()? as usize;
        let channels = r.u16()? as usize;
        branches.push(Branch { kernel, channels });
    }
    let feature_width = r.u16()? as usize;
    let recon_width = r.u16()? as usize;
    let lp = LpConfig {
        lambda: r.f64()?,
        p: r.f64()?,
        eps: r.f64()?,
    };
    let skip = match r.u8()? {
        0 => SkipMode::ShortCircuit,
        1 => SkipMode::Gated,
        other => return Err(CheckpointError::Malformed(format!("unknown skip mode {other}")).into()),
    };
    let has_dropout = r.u8()?;
    let dropout_value = r.f64()?;
    let stored = r.params()?;
    close(r)?;

    if feature_width != crate::denoiser::FEATURE_WIDTH || recon_width != crate::denoiser::RECON_WIDTH {
        return Err(CheckpointError::Malformed(format!(
            "layer widths {feature_width}/{recon_width} differ from this build"
        ))
        .into());
    }
    let config = MultiScaleConfig {
        input_channels,
        branches,
    };
    let mut model = build_denoiser::<f32>(config, 0)?;
    fill(model.params_mut(), stored)?;
    model.set_lp_config(lp)?;
    model.set_skip_mode(skip);
    model.set_dropout((has_dropout != 0).then_some(dropout_value))?;
    Ok((model, meta))
}

pub fn encode_discriminator(disc: &Discriminator<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::new(ModelKind::Discriminator, meta);
    let config = disc.config();
    w.u8(config.stages.len() as u8);
    for s in &config.stages {
        w.u16(s.kernel as u16);
        w.u16(s.stride as u16);
        w.u16(s.channels as u16);
    }
    w.size(config.hidden);
    w.size(config.min_size);
    w.params(disc.params());
    w.finish()
}

pub fn decode_discriminator(bytes: &[u8]) -> Result<(Discriminator<f32>, CheckpointMeta)> {
    let (mut r, meta) = open(bytes, ModelKind::Discriminator)?;
    let n = r.u8()? as usize;
    let mut stages = Vec::with_capacity(n);
    for _ in 0..n {
        stages.push(ConvStage {
            kernel: r.u16()? as usize,
            stride: r.u16()? as usize,
            channels: r.u16()? as usize,
        });
    }
    let hidden = r.size()?;
    let min_size = r.size()?;
    let stored = r.params()?;
    close(r)?;
    let config = DiscriminatorConfig {
        stages,
        hidden,
        min_size,
    };
    let mut disc = build_discriminator::<f32>(config, 0)?;
    fill(disc.params_mut(), stored)?;
    Ok((disc, meta))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_denoiser(path: impl AsRef<Path>, model: &DenoiserModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    write_file(path.as_ref(), &encode_denoiser(model, meta))
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<(DenoiserModel<f32>, CheckpointMeta)> {
    decode_denoiser(&read_file(path.as_ref())?)
}

pub fn save_discriminator(path: impl AsRef<Path>, disc: &Discriminator<f32>, meta: &CheckpointMeta) -> Result<()> {
    write_file(path.as_ref(), &encode_discriminator(disc, meta))
}

pub fn load_discriminator(path: impl AsRef<Path>) -> Result<(Discriminator<f32>, CheckpointMeta)> {
    decode_discriminator(&read_file(path.as_ref())?)
}
