//! Binary model format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! stream   = header record* [upscale]
//! header   = "DPWM" version:u16 arch_len:u16 arch:utf8 bits:u8 rule:u8
//!            norm_channels:u8 (mean:f64 std:f64)* records:u32
//! record   = kind:u8 name_len:u8 name:utf8 rank:u8 dims:u32*rank payload
//!   kind 0 = f32 values
//!   kind 1 = scale:f32 levels, offset-binary (I - n), b bits each, MSB first,
//!            zero-padded to a byte
//! upscale  = "DPUP" (scale_hi:f32 bits)* one entry per kind-1 record, one
//!            bit per weight, MSB first, zero-padded to a byte
//! ```
//!
//! A low-precision stream stops after the records. A high-precision stream
//! is the same bytes followed by the up-scaling section, so switching
//! precision never rewrites the shared levels. The detached up-scaling
//! section (`.dpb`) is `"DPBP" version:u16 checksum:u64 upscale`, where the
//! checksum is the first 8 bytes of SHA-256 over the packed level payloads
//! of the stream it belongs to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Standardizer;
use crate::dual::{QuantizedLayer, QuantizedModel, UpscalePlane};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Layer, Network};
use crate::quant::{LevelTensor, QuantSpec, ScaleRule, UpscaleBits};

pub const MODEL_MAGIC: [u8; 4] = *b"DPWM";
pub const UPSCALE_MAGIC: [u8; 4] = *b"DPUP";
pub const BITPLANE_MAGIC: [u8; 4] = *b"DPBP";
pub const FORMAT_VERSION: u16 = 1;

const KIND_FLOAT: u8 = 0;
const KIND_LEVELS: u8 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PackError {
    #[error("bad magic: not a {0}")]
    BadMagic(&'static str),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated input: {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },

    #[error("bit-width {0} is not supported")]
    InvalidBitWidth(u8),

    #[error("unknown scale rule tag {0}")]
    UnknownScaleRule(u8),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("record layout does not match the architecture: {0}")]
    LayoutMismatch(String),

    #[error("non-zero padding bits in `{0}`")]
    NonZeroPadding(String),

    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("up-scaling plane belongs to a different model (checksum {actual:016x}, expected {expected:016x})")]
    ChecksumMismatch { expected: u64, actual: u64 },

    #[error("layer `{0}` has no up-scaling plane")]
    MissingUpscale(String),

    #[error("stream already carries up-scaling planes")]
    AlreadyHigh,

    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Low stream plus detached plane to high stream.
    Up,
    /// High stream to low stream plus detached plane.
    Down,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            _ => Err(format!("unknown direction `{s}` (expected up or down)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Switched {
    pub stream: Vec<u8>,
    /// The detached up-scaling plane, produced when switching down.
    pub bitplane: Option<Vec<u8>>,
}

/// Packs `values` of `bits` bits each, MSB first.
pub fn pack_bits(values: impl IntoIterator<Item = u32>, bits: u8, count: usize) -> Vec<u8> {
    let mut out = vec![0u8; (count * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for v in values {
        for k in (0..bits).rev() {
            if (v >> k) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    debug_assert_eq!(pos, count * bits as usize);
    out
}

/// Inverse of [`pack_bits`]; `None` if a padding bit is set.
pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Option<Vec<u32>> {
    let bit = |pos: usize| (bytes[pos / 8] >> (7 - pos % 8)) & 1;
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for _ in 0..bits {
            v = (v << 1) | bit(pos) as u32;
            pos += 1;
        }
        out.push(v);
    }
    (pos..bytes.len() * 8).all(|p| bit(p) == 0).then_some(out)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(PackError::Truncated {
            what,
            offset: self.pos,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn str(&mut self, len: usize, what: &'static str) -> Result<String> {
        let raw = self.take(len, what)?;
        Ok(std::str::from_utf8(raw).map_err(|_| PackError::InvalidUtf8(what))?.to_string())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// The tensors a network stores, in file order: `(layer, slot, name)`.
/// Slot 0 of a Dense/Conv2d layer is its weight.
fn record_layout(net: &Network<f32>) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for (i, (layer, name)) in net.layers().iter().zip(net.names()).enumerate() {
        let slots: &[&str] = match layer {
            Layer::Dense(_) | Layer::Conv2d(_) => &["weight", "bias"],
            Layer::BatchNorm(_) => &["gamma", "beta", "running_mean", "running_var"],
            _ => &[],
        };
        out.extend(slots.iter().enumerate().map(|(k, s)| (i, k, format!("{name}.{s}"))));
    }
    out
}

fn slot_shape(layer: &Layer<f32>, slot: usize) -> Vec<usize> {
    match (layer, slot) {
        (Layer::Dense(_) | Layer::Conv2d(_), 0) => layer.weight_shape().expect("weight layer"),
        (Layer::Dense(d), _) => vec![d.out_features],
        (Layer::Conv2d(c), _) => vec![c.out_channels],
        (Layer::BatchNorm(b), _) => vec![b.channels],
        _ => unreachable!("layer without parameters"),
    }
}

fn slot_mut(layer: &mut Layer<f32>, slot: usize) -> &mut Vec<f32> {
    match (layer, slot) {
        (Layer::Dense(d), 0) => &mut d.weight,
        (Layer::Dense(d), _) => &mut d.bias,
        (Layer::Conv2d(c), 0) => &mut c.weight,
        (Layer::Conv2d(c), _) => &mut c.bias,
        (Layer::BatchNorm(b), 0) => &mut b.gamma,
        (Layer::BatchNorm(b), 1) => &mut b.beta,
        (Layer::BatchNorm(b), 2) => &mut b.running_mean,
        (Layer::BatchNorm(b), _) => &mut b.running_var,
        _ => unreachable!("layer without parameters"),
    }
}

fn level_payload(levels: &LevelTensor) -> Vec<u8> {
    let n = levels.spec().lower_clip();
    pack_bits(
        levels.indices().iter().map(|&i| (i - n) as u32),
        levels.bits(),
        levels.len(),
    )
}

fn upscale_section(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut w = Writer(UPSCALE_MAGIC.to_vec());
    for (q, name) in model.layers.iter().zip(model.net.names()) {
        let Some(q) = q else { continue };
        let plane = q
            .upscale
            .as_ref()
            .ok_or_else(|| PackError::MissingUpscale(name.clone()))?;
        w.f32(plane.scale);
        w.bytes(&pack_bits(
            plane.bits.as_slice().iter().map(|&b| b as u32),
            1,
            plane.bits.len(),
        ));
    }
    Ok(w.0)
}

/// Checksum of the shared levels that a detached up-scaling plane is tied to.
pub fn shared_checksum(model: &QuantizedModel) -> u64 {
    let mut h = Sha256::new();
    for q in model.layers.iter().flatten() {
        h.update(q.low.scale().to_le_bytes());
        h.update(level_payload(&q.low));
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Serializes a model; the up-scaling section is written when every
/// quantized layer has a plane, omitted when none has one.
pub fn pack(model: &QuantizedModel) -> Result<Vec<u8>> {
    let arch = model.arch.to_string();
    let layout = record_layout(&model.net);
    let mut w = Writer(MODEL_MAGIC.to_vec());
    w.u16(FORMAT_VERSION);
    w.u16(arch.len() as u16);
    w.bytes(arch.as_bytes());
    w.u8(model.spec.bits());
    w.u8(model.spec.scale_rule().tag());
    match &model.input_norm {
        Some(norm) => {
            w.u8(norm.mean.len() as u8);
            for (m, s) in norm.mean.iter().zip(&norm.std) {
                w.0.extend_from_slice(&m.to_le_bytes());
                w.0.extend_from_slice(&s.to_le_bytes());
            }
        }
        None => w.u8(0),
    }
    w.u32(layout.len() as u32);
    for (i, slot, name) in &layout {
        let layer = &model.net.layers()[*i];
        let shape = slot_shape(layer, *slot);
        let quantized = if *slot == 0 { model.layers[*i].as_ref() } else { None };
        w.u8(if quantized.is_some() { KIND_LEVELS } else { KIND_FLOAT });
        w.u8(name.len() as u8);
        w.bytes(name.as_bytes());
        w.u8(shape.len() as u8);
        for &d in &shape {
            w.u32(d as u32);
        }
        match quantized {
            Some(q) => {
                w.f32(q.low.scale());
                w.bytes(&level_payload(&q.low));
            }
            None => {
                let mut layer = layer.clone();
                let values = slot_mut(&mut layer, *slot);
                let expected: usize = shape.iter().product();
                if values.len() != expected {
                    return Err(PackError::LayoutMismatch(format!(
                        "`{name}` holds {} values, expected {expected}",
                        values.len()
                    ))
                    .into());
                }
                for &v in values.iter() {
                    w.f32(v);
                }
            }
        }
    }
    let planes = model.layers.iter().flatten().filter(|q| q.upscale.is_some()).count();
    if planes > 0 {
        w.bytes(&upscale_section(model)?);
    }
    Ok(w.0)
}

fn read_upscale(r: &mut Reader<'_>, layers: &mut [Option<QuantizedLayer>], names: &[String]) -> Result<()> {
    for (q, name) in layers.iter_mut().zip(names) {
        let Some(q) = q else { continue };
        let scale = r.f32("up-scaling scale")?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidScale(scale));
        }
        let raw = r.take(q.low.len().div_ceil(8), "up-scaling bits")?;
        let bits = unpack_bits(raw, 1, q.low.len())
            .ok_or_else(|| PackError::NonZeroPadding(format!("{name} up-scaling")))?;
        q.upscale = Some(UpscalePlane {
            bits: UpscaleBits::new(bits.into_iter().map(|b| b as u8).collect())?,
            scale,
        });
    }
    Ok(())
}

fn check_magic(r: &mut Reader<'_>, magic: [u8; 4], what: &'static str) -> Result<()> {
    if r.remaining() < 4 || r.array::<4>(what)? != magic {
        return Err(PackError::BadMagic(what).into());
    }
    Ok(())
}

pub fn unpack(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, MODEL_MAGIC, "model stream")?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(PackError::UnsupportedVersion(version).into());
    }
    let arch_len = r.u16("architecture length")? as usize;
    let arch_id = r.str(arch_len, "architecture id")?;
    let arch: Architecture = arch_id
        .parse()
        .map_err(|_| PackError::UnknownArchitecture(arch_id.clone()))?;
    let bits = r.u8("bit-width")?;
    let rule_tag = r.u8("scale rule")?;
    let rule = ScaleRule::from_tag(rule_tag).ok_or(PackError::UnknownScaleRule(rule_tag))?;
    let spec = QuantSpec::new(bits, rule).map_err(|_| PackError::InvalidBitWidth(bits))?;
    let input_norm = read_input_norm(&mut r, &arch)?;
    let count = r.u32("record count")? as usize;

    let mut net: Network<f32> = arch.build(&mut ChaCha8Rng::seed_from_u64(0));
    let layout = record_layout(&net);
    if count != layout.len() {
        return Err(PackError::LayoutMismatch(format!(
            "{count} records, {arch_id} has {}",
            layout.len()
        ))
        .into());
    }
    let mut layers: Vec<Option<QuantizedLayer>> = vec![None; net.len()];
    for (i, slot, expected_name) in &layout {
        let kind = r.u8("record kind")?;
        let name_len = r.u8("name length")? as usize;
        let name = r.str(name_len, "record name")?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = slot_shape(&net.layers()[*i], *slot);
        if &name != expected_name || dims != shape {
            return Err(PackError::LayoutMismatch(format!(
                "record `{name}` {dims:?}, expected `{expected_name}` {shape:?}"
            ))
            .into());
        }
        let len: usize = shape.iter().product();
        match kind {
            KIND_LEVELS if *slot == 0 => {
                let scale = r.f32("scale")?;
                let raw = r.take((len * bits as usize).div_ceil(8), "level payload")?;
                let codes = unpack_bits(raw, bits, len).ok_or_else(|| PackError::NonZeroPadding(name.clone()))?;
                let n = spec.lower_clip();
                let indices = codes.into_iter().map(|c| c as i32 + n).collect();
                layers[*i] = Some(QuantizedLayer {
                    low: LevelTensor::new(indices, spec, scale)?,
                    upscale: None,
                });
                slot_mut(&mut net.layers_mut()[*i], 0).clear();
            }
            KIND_FLOAT => {
                let raw = r.take(len * 4, "float payload")?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                *slot_mut(&mut net.layers_mut()[*i], *slot) = values;
            }
            _ => {
                return Err(PackError::LayoutMismatch(format!("record `{name}` has kind {kind}")).into());
            }
        }
    }
    if r.remaining() > 0 {
        check_magic(&mut r, UPSCALE_MAGIC, "up-scaling section")?;
        if layers.iter().flatten().next().is_some() && spec.widened().is_err() {
            return Err(PackError::InvalidBitWidth(bits + 1).into());
        }
        read_upscale(&mut r, &mut layers, net.names())?;
        if r.remaining() > 0 {
            return Err(PackError::TrailingBytes(r.remaining()).into());
        }
    }
    let model = QuantizedModel::new(arch, spec, net, layers)?;
    Ok(match input_norm {
        Some(norm) => model.with_input_norm(norm),
        None => model,
    })
}

fn read_input_norm(r: &mut Reader<'_>, arch: &Architecture) -> Result<Option<Standardizer>> {
    let channels = r.u8("input channels")? as usize;
    if channels == 0 {
        return Ok(None);
    }
    let expected = match arch {
        Architecture::Mlp { .. } => 1,
        Architecture::MiniConvBn { channels, .. } => *channels,
    };
    if channels != expected {
        return Err(PackError::LayoutMismatch(format!(
            "{channels} input normalization channels, expected {expected}"
        ))
        .into());
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for _ in 0..channels {
        mean.push(f64::from_le_bytes(r.array("input mean")?));
        let s = f64::from_le_bytes(r.array("input std")?);
        if !(s.is_finite() && s > 0.0) {
            return Err(PackError::LayoutMismatch(format!("input std {s}")).into());
        }
        std.push(s);
    }
    Ok(Some(Standardizer { mean, std }))
}

/// The detached up-scaling plane of a high-precision model.
pub fn pack_bitplane(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut w = Writer(BITPLANE_MAGIC.to_vec());
    w.u16(FORMAT_VERSION);
    w.0.extend_from_slice(&shared_checksum(model).to_le_bytes());
    w.bytes(&upscale_section(model)?);
    Ok(w.0)
}

/// Attaches a detached plane to a low-precision model.
pub fn attach_bitplane(model: &QuantizedModel, bitplane: &[u8]) -> Result<QuantizedModel> {
    if model.layers.iter().flatten().any(|q| q.upscale.is_some()) {
        return Err(PackError::AlreadyHigh.into());
    }
    let mut r = Reader::new(bitplane);
    check_magic(&mut r, BITPLANE_MAGIC, "up-scaling plane")?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(PackError::UnsupportedVersion(version).into());
    }
    let expected = r.u64("checksum")?;
    let actual = shared_checksum(model);
    if expected != actual {
        return Err(PackError::ChecksumMismatch { expected, actual }.into());
    }
    check_magic(&mut r, UPSCALE_MAGIC, "up-scaling section")?;
    model.spec.widened().map_err(|_| PackError::InvalidBitWidth(model.spec.bits() + 1))?;
    let mut out = model.clone();
    read_upscale(&mut r, &mut out.layers, model.net.names())?;
    if r.remaining() > 0 {
        return Err(PackError::TrailingBytes(r.remaining()).into());
    }
    Ok(out)
}

/// Moves a packed model between its two precisions. The shared level
/// payloads are carried over byte for byte.
pub fn switch_precision(stream: &[u8], direction: Direction, bitplane: Option<&[u8]>) -> Result<Switched> {
    let model = unpack(stream)?;
    match direction {
        Direction::Down => {
            if let Some((_, name)) = model
                .layers
                .iter()
                .zip(model.net.names())
                .find(|(q, _)| matches!(q, Some(q) if q.upscale.is_none()))
            {
                return Err(PackError::MissingUpscale(name.clone()).into());
            }
            Ok(Switched {
                stream: pack(&model.strip_upscale())?,
                bitplane: Some(pack_bitplane(&model)?),
            })
        }
        Direction::Up => {
            let plane = bitplane.ok_or_else(|| {
                let first = model
                    .layers
                    .iter()
                    .zip(model.net.names())
                    .find(|(q, _)| q.is_some())
                    .map(|(_, n)| n.clone())
                    .unwrap_or_default();
                PackError::MissingUpscale(first)
            })?;
            Ok(Switched {
                stream: pack(&attach_bitplane(&model, plane)?)?,
                bitplane: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Standardizer;
use crate::dual::{DualModel, LayerMask};
    use crate::nn::Architecture;
    use proptest::prelude::*;

    fn model(arch: Architecture, bits: u8, mask: LayerMask) -> QuantizedModel {
        let spec = QuantSpec::new(bits, ScaleRule::LevelCount).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        DualModel::new(&arch, spec, &mask, 0.3, &mut rng)
            .unwrap()
            .snapshot()
            .unwrap()
    }

    fn small() -> QuantizedModel {
        model("mlp:12-5-3".parse().unwrap(), 2, LayerMask::All)
    }

    #[test]
    fn bit_packing_is_msb_first() {
        assert_eq!(pack_bits([0b10, 0b01, 0b11], 2, 3), vec![0b1001_1100]);
        assert_eq!(unpack_bits(&[0b1001_1100], 2, 3), Some(vec![2, 1, 3]));
        assert_eq!(unpack_bits(&[0b1001_1101], 2, 3), None);
    }

    #[test]
    fn round_trip_is_exact() {
        for m in [
            small(),
            small().strip_upscale(),
            model(Architecture::mini_conv_bn(), 3, LayerMask::Only(vec![1, 3])),
            model("mlp:12-5-3".parse().unwrap(), 4, LayerMask::None),
            small().with_input_norm(Standardizer {
                mean: vec![0.13],
                std: vec![0.31],
            }),
        ] {
            let bytes = pack(&m).unwrap();
            let back = unpack(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(pack(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn high_stream_extends_low_stream() {
        let m = small();
        let high = pack(&m).unwrap();
        let low = pack(&m.strip_upscale()).unwrap();
        assert!(high.starts_with(&low));
        assert_eq!(&high[low.len()..low.len() + 4], b"DPUP");
        let down = switch_precision(&high, Direction::Down, None).unwrap();
        assert_eq!(down.stream, low);
        let up = switch_precision(&low, Direction::Up, down.bitplane.as_deref()).unwrap();
        assert_eq!(up.stream, high);
    }

    #[test]
    fn structural_errors_are_distinct() {
        let m = small();
        let high = pack(&m).unwrap();
        let low = pack(&m.strip_upscale()).unwrap();
        let err = |r: Result<QuantizedModel>| match r.unwrap_err() {
            Error::Pack(p) => p,
            e => panic!("unexpected {e}"),
        };
        assert_eq!(err(unpack(b"NOPE....")), PackError::BadMagic("model stream"));
        let mut v = high.clone();
        v[4] = 9;
        assert_eq!(err(unpack(&v)), PackError::UnsupportedVersion(9));
        assert!(matches!(err(unpack(&high[..high.len() - 1])), PackError::Truncated { .. }));
        let mut t = high.clone();
        t.push(0);
        assert_eq!(err(unpack(&t)), PackError::TrailingBytes(1));
        let mut t = low.clone();
        t.extend_from_slice(b"XX");
        assert!(matches!(err(unpack(&t)), PackError::BadMagic(_)));
        // bits byte sits right after the architecture id
        let arch_len = u16::from_le_bytes([high[6], high[7]]) as usize;
        let mut b = high.clone();
        b[8 + arch_len] = 1;
        assert_eq!(err(unpack(&b)), PackError::InvalidBitWidth(1));
        let mut b = high.clone();
        b[9 + arch_len] = 7;
        assert_eq!(err(unpack(&b)), PackError::UnknownScaleRule(7));
    }

    #[test]
    fn padding_must_be_zero() {
        // fc0 holds 60 2-bit levels: exactly 15 bytes, so use fc1 (15 levels, 30 bits).
        let m = small().strip_upscale();
        let bytes = pack(&m).unwrap();
        // fc1.bias follows: kind, name length, name, rank, one dim, three floats
        let fc1_payload_end = bytes.len() - (1 + 1 + 8 + 1 + 4 + 3 * 4);
        let mut bad = bytes.clone();
        bad[fc1_payload_end - 1] |= 0b0000_0001;
        assert_eq!(
            unpack(&bad).unwrap_err().to_string(),
            PackError::NonZeroPadding("fc1.weight".into()).to_string()
        );
    }

    #[test]
    fn bitplane_is_tied_to_its_model() {
        let a = small();
        let b = model("mlp:12-5-3".parse().unwrap(), 2, LayerMask::All);
        let mut other = b.clone();
        other.layers[1].as_mut().unwrap().low = LevelTensor::new(
            vec![0; 60],
            other.spec,
            1.0,
        )
        .unwrap();
        let plane = pack_bitplane(&a).unwrap();
        let err = attach_bitplane(&other.strip_upscale(), &plane).unwrap_err();
        assert!(matches!(err, Error::Pack(PackError::ChecksumMismatch { .. })));
        attach_bitplane(&b.strip_upscale(), &plane).unwrap();
        assert!(matches!(
            attach_bitplane(&a, &plane).unwrap_err(),
            Error::Pack(PackError::AlreadyHigh)
        ));
        let low = pack(&a.strip_upscale()).unwrap();
        assert!(matches!(
            switch_precision(&low, Direction::Down, None).unwrap_err(),
            Error::Pack(PackError::MissingUpscale(_))
        ));
        assert!(matches!(
            switch_precision(&low, Direction::Up, None).unwrap_err(),
            Error::Pack(PackError::MissingUpscale(_))
        ));
    }

    proptest! {
        #[test]
        fn bit_packing_round_trips(bits in 1u8..=8, raw in prop::collection::vec(any::<u32>(), 0..40)) {
            let values: Vec<u32> = raw.iter().map(|v| v & ((1 << bits) - 1)).collect();
            let packed = pack_bits(values.iter().copied(), bits, values.len());
            prop_assert_eq!(packed.len(), (values.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, bits, values.len()), Some(values));
        }
    }
}
