//! Trainable dual model and its frozen, quantized form.

use rand::Rng;

use super::config::{LayerMask, TrainConfig};
use super::{init_dual_weight, DerivedLevels, DualWeight};
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::distinct_levels;
use crate::nn::{count_correct, Architecture, Network};
use crate::pack::PackError;
use crate::quant::{dequantize, upscale_indices, LevelTensor, QuantSpec, UpscaleBits};
use crate::tensor::Tensor;

use super::trainer::LayerLevels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// `b` bits.
    Low,
    /// `b + 1` bits.
    High,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Low => "low",
            Precision::High => "high",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "low" => Ok(Precision::Low),
            "high" => Ok(Precision::High),
            _ => Err(format!("unknown precision `{s}` (expected low or high)")),
        }
    }
}

/// Network whose quantized layers hold master weights and latent
/// up-scaling parameters in `duals`; their weights in `net` are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    pub arch: Architecture,
    pub spec: QuantSpec,
    pub net: Network<f32>,
    pub duals: Vec<Option<DualWeight>>,
}

impl DualModel {
    pub fn from_config<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Self> {
        Self::new(&config.arch, config.quant_spec()?, &config.quantize, config.index_sigma, rng)
    }

    /// Builds the network, then replaces the weights of masked layers with
    /// freshly initialized dual weights.
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        spec: QuantSpec,
        mask: &LayerMask,
        index_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net: Network<f32> = arch.build(rng);
        let mut duals = vec![None; net.len()];
        let mut weight_layer = 0;
        for (i, dual) in duals.iter_mut().enumerate() {
            let Some(shape) = net.layers()[i].weight_shape() else {
                continue;
            };
            if mask.contains(weight_layer) {
                net.take_weight(i);
                *dual = Some(init_dual_weight(&shape, spec, index_sigma, rng)?);
            }
            weight_layer += 1;
        }
        Ok(Self {
            arch: arch.clone(),
            spec,
            net,
            duals,
        })
    }

    pub fn derive_all(&self) -> Result<Vec<Option<DerivedLevels>>> {
        self.duals
            .iter()
            .map(|d| d.as_ref().map(DualWeight::derive).transpose())
            .collect()
    }

    /// Frozen copy with shared levels and up-scaling planes.
    pub fn snapshot(&self) -> Result<QuantizedModel> {
        let layers = self
            .derive_all()?
            .into_iter()
            .map(|d| {
                d.map(|d| QuantizedLayer {
                    upscale: Some(UpscalePlane {
                        scale: d.high.scale(),
                        bits: d.upscale,
                    }),
                    low: d.low,
                })
            })
            .collect();
        QuantizedModel::new(self.arch.clone(), self.spec, self.net.clone(), layers)
    }

    /// Frozen copy with shared levels only.
    pub fn low_snapshot(&self) -> Result<QuantizedModel> {
        let layers = self
            .duals
            .iter()
            .map(|d| {
                d.as_ref()
                    .map(|d| Ok(QuantizedLayer { low: d.low_levels()?, upscale: None }))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        QuantizedModel::new(self.arch.clone(), self.spec, self.net.clone(), layers)
    }
}

/// Up-scaling bits of one layer and the scale of its `b + 1`-bit mode.
#[derive(Debug, Clone, PartialEq)]
pub struct UpscalePlane {
    pub bits: UpscaleBits,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub low: LevelTensor,
    pub upscale: Option<UpscalePlane>,
}

impl QuantizedLayer {
    pub fn high(&self, name: &str) -> Result<LevelTensor> {
        let plane = self
            .upscale
            .as_ref()
            .ok_or_else(|| PackError::MissingUpscale(name.to_string()))?;
        let hi = upscale_indices(&self.low, &plane.bits)?;
        LevelTensor::new(hi.into_indices(), self.low.spec().widened()?, plane.scale)
    }
}

/// Inference-only model: full-precision layers live in `net`, quantized
/// layers in `layers` (indexed like `net`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub arch: Architecture,
    pub spec: QuantSpec,
    pub net: Network<f32>,
    pub layers: Vec<Option<QuantizedLayer>>,
    /// Input standardization the model was trained with.
    pub input_norm: Option<Standardizer>,
}

impl QuantizedModel {
    pub fn new(
        arch: Architecture,
        spec: QuantSpec,
        net: Network<f32>,
        layers: Vec<Option<QuantizedLayer>>,
    ) -> Result<Self> {
        if layers.len() != net.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} quantized slots for {} layers",
                layers.len(),
                net.len()
            )));
        }
        for (i, (layer, q)) in net.layers().iter().zip(&layers).enumerate() {
            let Some(q) = q else { continue };
            let name = &net.names()[i];
            let len: usize = layer
                .weight_shape()
                .ok_or_else(|| Error::ShapeMismatch(format!("layer `{name}` has no weight to quantize")))?
                .iter()
                .product();
            if q.low.len() != len || q.low.spec() != spec {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{name}`: {} {}-bit levels for {len} weights",
                    q.low.len(),
                    q.low.bits()
                )));
            }
            if let Some(p) = &q.upscale {
                if p.bits.len() != len {
                    return Err(Error::ShapeMismatch(format!(
                        "layer `{name}`: {} up-scaling bits for {len} weights",
                        p.bits.len()
                    )));
                }
            }
        }
        Ok(Self {
            arch,
            spec,
            net,
            layers,
            input_norm: None,
        })
    }

    pub fn with_input_norm(mut self, norm: Standardizer) -> Self {
        self.input_norm = Some(norm);
        self
    }

    pub fn quantized_count(&self) -> usize {
        self.layers.iter().flatten().count()
    }

    /// Every quantized layer carries an up-scaling plane.
    pub fn has_upscale(&self) -> bool {
        self.layers.iter().flatten().all(|q| q.upscale.is_some())
    }

    pub fn strip_upscale(&self) -> Self {
        let mut m = self.clone();
        for q in m.layers.iter_mut().flatten() {
            q.upscale = None;
        }
        m
    }

    pub fn levels(&self, precision: Precision) -> Result<Vec<Option<LevelTensor>>> {
        self.layers
            .iter()
            .zip(self.net.names())
            .map(|(q, name)| {
                q.as_ref()
                    .map(|q| match precision {
                        Precision::Low => Ok(q.low.clone()),
                        Precision::High => q.high(name),
                    })
                    .transpose()
            })
            .collect()
    }

    pub fn weights(&self, precision: Precision) -> Result<Vec<Option<Vec<f32>>>> {
        Ok(self
            .levels(precision)?
            .iter()
            .map(|l| l.as_ref().map(dequantize))
            .collect())
    }

    pub fn forward(&self, input: &Tensor<f32>, precision: Precision) -> Result<Tensor<f32>> {
        let weights = self.weights(precision)?;
        self.forward_weights(input, &weights)
    }

    fn forward_weights(&self, input: &Tensor<f32>, weights: &[Option<Vec<f32>>]) -> Result<Tensor<f32>> {
        let over: Vec<Option<&[f32]>> = weights.iter().map(|w| w.as_deref()).collect();
        self.net.infer(input, &over)
    }

    /// Top-1 accuracy in `[0, 1]`.
    pub fn evaluate(&self, data: &Dataset, precision: Precision, batch_size: usize) -> Result<f64> {
        let weights = self.weights(precision)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, y) = data.gather(chunk);
            correct += count_correct(&self.forward_weights(&x, &weights)?, &y);
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Distinct levels in use per quantized layer; `high` is 0 without a plane.
    pub fn level_counts(&self) -> Result<Vec<LayerLevels>> {
        let mut out = Vec::new();
        for (q, name) in self.layers.iter().zip(self.net.names()) {
            let Some(q) = q else { continue };
            let high = match q.upscale {
                Some(_) => distinct_levels(&q.high(name)?),
                None => 0,
            };
            out.push(LayerLevels {
                layer: name.clone(),
                low: distinct_levels(&q.low),
                high,
            });
        }
        Ok(out)
    }
}
