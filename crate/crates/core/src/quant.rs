//! Linear weight quantization and one-bit level branching.
//!
//! A `b`-bit tensor is a vector of signed level indices in
//! `[-2^(b-1), 2^(b-1) - 1]` plus one positive scale. The `(b+1)`-bit
//! tensor is derived by shifting every index left and appending an
//! up-scaling bit, `I' = 2 I + lambda`, so the high-order `b` bits of both
//! precisions are the same bits. Going back down is an arithmetic right
//! shift; nothing is re-quantized in either direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the `(b+1)`-bit scale is derived from the `b`-bit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `s' = (2^b - 1) s / (2^(b+1) - 1)`: the ratio of level counts.
    #[default]
    LevelCount,
    /// `s' = (2^(b-1) - 1) s / (2^b - 1)`: keeps the largest positive
    /// representable value `p * s` identical across the two precisions.
    RangeExact,
}

impl ScaleRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleRule::LevelCount => "level_count",
            ScaleRule::RangeExact => "range_exact",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ScaleRule::LevelCount => 0,
            ScaleRule::RangeExact => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScaleRule::LevelCount),
            1 => Some(ScaleRule::RangeExact),
            _ => None,
        }
    }
}

impl std::str::FromStr for ScaleRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "level_count" => Ok(ScaleRule::LevelCount),
            "range_exact" => Ok(ScaleRule::RangeExact),
            other => Err(format!(
                "unknown scale rule `{other}` (expected level_count or range_exact)"
            )),
        }
    }
}

/// Bit-width and scale rule of one quantized tensor. The clip bounds are
/// always derived from the bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u8,
    scale_rule: ScaleRule,
}

impl QuantSpec {
    pub const MIN_BITS: u8 = 2;
    pub const MAX_BITS: u8 = 8;

    pub fn new(bits: u8, scale_rule: ScaleRule) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::InvalidBitWidth(bits as u32));
        }
        Ok(Self { bits, scale_rule })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale_rule(&self) -> ScaleRule {
        self.scale_rule
    }

    /// `n = -2^(b-1)`
    pub fn lower_clip(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    /// `p = 2^(b-1) - 1`
    pub fn upper_clip(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn level_count(&self) -> usize {
        1 << self.bits
    }

    /// One bit wider, same scale rule.
    pub fn widened(&self) -> Result<Self> {
        Self::new(self.bits + 1, self.scale_rule)
    }
}

/// Quantized level indices with their scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTensor {
    indices: Vec<i32>,
    spec: QuantSpec,
    scale: f32,
}

impl LevelTensor {
    pub fn new(indices: Vec<i32>, spec: QuantSpec, scale: f32) -> Result<Self> {
        check_scale(scale)?;
        let (lower, upper) = (spec.lower_clip(), spec.upper_clip());
        if let Some(&index) = indices.iter().find(|&&i| i < lower || i > upper) {
            return Err(Error::IndexOutOfRange {
                index,
                lower,
                upper,
            });
        }
        Ok(Self {
            indices,
            spec,
            scale,
        })
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn bits(&self) -> u8 {
        self.spec.bits
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn into_indices(self) -> Vec<i32> {
        self.indices
    }
}

/// The appended least-significant bits, one per weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpscaleBits {
    bits: Vec<u8>,
}

impl UpscaleBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidUpscaleBit(bad));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

fn check_scale(scale: f32) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScale(scale))
    }
}

/// Fallback scale for a tensor whose entries are all zero.
pub const ZERO_TENSOR_SCALE: f32 = 1.0;

/// `max(|w|) / (2^(b-1) - 1)`.
pub fn compute_scale(weights: &[f32], spec: QuantSpec) -> Result<f32> {
    if weights.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    if !max_abs.is_finite() {
        return Err(Error::InvalidScale(max_abs));
    }
    let scale = max_abs / spec.upper_clip() as f32;
    // Also covers magnitudes small enough to underflow to zero.
    if scale > 0.0 {
        Ok(scale)
    } else {
        Ok(ZERO_TENSOR_SCALE)
    }
}

/// `clip(round(w / s), n, p)` with ties rounded away from zero.
///
/// The quotient is formed in double precision. For single-precision
/// operands that quotient is far closer to the exact rational than the
/// smallest possible distance between a non-tie quotient and a half
/// integer, so rounding it selects the true nearest level.
pub fn quantize_indices(weights: &[f32], scale: f32, spec: QuantSpec) -> Result<LevelTensor> {
    check_scale(scale)?;
    let (lower, upper) = (spec.lower_clip() as f64, spec.upper_clip() as f64);
    let s = scale as f64;
    let indices = weights
        .iter()
        .map(|&w| ((w as f64) / s).round().clamp(lower, upper) as i32)
        .collect();
    Ok(LevelTensor {
        indices,
        spec,
        scale,
    })
}

/// `indices * scale`, elementwise.
pub fn dequantize(levels: &LevelTensor) -> Vec<f32> {
    let s = levels.scale;
    levels.indices.iter().map(|&i| i as f32 * s).collect()
}

fn scale_ratio(bits: u8, rule: ScaleRule) -> (f64, f64) {
    let b = bits as i32;
    match rule {
        ScaleRule::LevelCount => (((1i64 << b) - 1) as f64, ((1i64 << (b + 1)) - 1) as f64),
        ScaleRule::RangeExact => (((1i64 << (b - 1)) - 1) as f64, ((1i64 << b) - 1) as f64),
    }
}

/// Scale of the `(bits+1)`-bit tensor given the scale of the `bits`-bit one.
pub fn upscale_scale(scale_b: f32, bits: u8, rule: ScaleRule) -> Result<f32> {
    check_scale(scale_b)?;
    if !(QuantSpec::MIN_BITS..QuantSpec::MAX_BITS).contains(&bits) {
        return Err(Error::InvalidBitWidth(bits as u32));
    }
    let (num, den) = scale_ratio(bits, rule);
    Ok(((scale_b as f64) * num / den) as f32)
}

/// Inverse of [`upscale_scale`]. When a single-precision value exists that
/// maps forward exactly onto `scale_hi`, that value is returned.
pub fn downscale_scale(scale_hi: f32, bits: u8, rule: ScaleRule) -> Result<f32> {
    check_scale(scale_hi)?;
    if !(QuantSpec::MIN_BITS..QuantSpec::MAX_BITS).contains(&bits) {
        return Err(Error::InvalidBitWidth(bits as u32));
    }
    let (num, den) = scale_ratio(bits, rule);
    let guess = ((scale_hi as f64) * den / num) as f32;
    for candidate in [guess, guess.next_down(), guess.next_up()] {
        if upscale_scale(candidate, bits, rule).ok() == Some(scale_hi) {
            return Ok(candidate);
        }
    }
    Ok(guess)
}

/// Level branching: `I' = 2 I + lambda` at one more bit.
pub fn upscale_indices(levels: &LevelTensor, bits_up: &UpscaleBits) -> Result<LevelTensor> {
    if levels.len() != bits_up.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} indices but {} up-scaling bits",
            levels.len(),
            bits_up.len()
        )));
    }
    let spec = levels.spec.widened()?;
    let scale = upscale_scale(levels.scale, levels.spec.bits, levels.spec.scale_rule)?;
    let indices = levels
        .indices
        .iter()
        .zip(&bits_up.bits)
        .map(|(&i, &lambda)| 2 * i + lambda as i32)
        .collect();
    Ok(LevelTensor {
        indices,
        spec,
        scale,
    })
}

/// Strip the least-significant bit: `I = floor(I' / 2)`, `lambda = I' - 2 I`.
pub fn truncate_indices(levels_hi: &LevelTensor) -> Result<(LevelTensor, UpscaleBits)> {
    let bits_hi = levels_hi.spec.bits;
    if bits_hi < QuantSpec::MIN_BITS + 1 {
        return Err(Error::InvalidBitWidth(bits_hi as u32));
    }
    let spec = QuantSpec::new(bits_hi - 1, levels_hi.spec.scale_rule)?;
    let scale = downscale_scale(levels_hi.scale, spec.bits, spec.scale_rule)?;
    let (indices, lambda): (Vec<i32>, Vec<u8>) = levels_hi
        .indices
        .iter()
        .map(|&i| (i >> 1, (i & 1) as u8))
        .unzip();
    Ok((
        LevelTensor {
            indices,
            spec,
            scale,
        },
        UpscaleBits { bits: lambda },
    ))
}

/// Straight-through gradient of the quantizer: the upstream gradient passes
/// unchanged where `w / s` lies inside `[n, p]` and is zeroed outside.
pub fn ste_weight_gradient(
    upstream_grad: &[f32],
    weights: &[f32],
    scale: f32,
    spec: QuantSpec,
) -> Vec<f32> {
    assert_eq!(
        upstream_grad.len(),
        weights.len(),
        "gradient and weight lengths differ"
    );
    let (lower, upper) = (spec.lower_clip() as f64, spec.upper_clip() as f64);
    let s = scale as f64;
    upstream_grad
        .iter()
        .zip(weights)
        .map(|(&g, &w)| {
            let r = w as f64 / s;
            if (lower..=upper).contains(&r) {
                g
            } else {
                0.0
            }
        })
        .collect()
}
