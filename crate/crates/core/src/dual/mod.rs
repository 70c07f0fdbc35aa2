//! Dual-precision weights: a shared `b`-bit level tensor plus one
//! up-scaling bit per weight that lifts it to `b + 1` bits.

mod config;
mod model;
mod trainer;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use config::{DatasetId, IndexNorm, LayerMask, PhasePlan, TrainConfig, CONFIG_KEYS};
pub use model::{DualModel, Precision, QuantizedLayer, QuantizedModel, UpscalePlane};
pub use trainer::{
    run_baseline, run_training, BaselineRecord, EpochRecord, LayerLevels, Trainable, Trainer,
    TrainingOutcome,
};

use crate::error::{Error, Result};
use crate::nn::arch::uniform_fan_in;
use crate::quant::{compute_scale, quantize_indices, upscale_indices, LevelTensor, QuantSpec, UpscaleBits};
use crate::tensor::{Real, Tensor};

/// Trainable state of one quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWeight {
    /// Full-precision weights the shared levels are derived from.
    pub master: Vec<f32>,
    /// Real-valued parameters whose sign gives the up-scaling bits.
    pub lambda_latent: Vec<f32>,
    pub shape: Vec<usize>,
    pub spec: QuantSpec,
    /// `max |lambda_latent|` at initialization; the max-abs normalization target.
    pub init_max_abs: f32,
}

/// Levels of one layer in both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedLevels {
    pub low: LevelTensor,
    pub upscale: UpscaleBits,
    pub high: LevelTensor,
}

impl DualWeight {
    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }

    pub fn low_levels(&self) -> Result<LevelTensor> {
        let scale = compute_scale(&self.master, self.spec)?;
        quantize_indices(&self.master, scale, self.spec)
    }

    pub fn upscale_bits(&self) -> UpscaleBits {
        binarize_upscale(&self.lambda_latent)
    }

    pub fn derive(&self) -> Result<DerivedLevels> {
        let low = self.low_levels()?;
        let upscale = self.upscale_bits();
        let high = upscale_indices(&low, &upscale)?;
        Ok(DerivedLevels { low, upscale, high })
    }
}

/// Fan-in uniform master weights and `N(0, index_sigma)` latent up-scaling
/// parameters. The fan-in is the product of all but the first dimension.
pub fn init_dual_weight<R: Rng + ?Sized>(
    shape: &[usize],
    spec: QuantSpec,
    index_sigma: f64,
    rng: &mut R,
) -> Result<DualWeight> {
    let len: usize = shape.iter().product();
    let fan_in: usize = shape.iter().skip(1).product();
    if len == 0 || shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!("cannot initialize weight of shape {shape:?}")));
    }
    let normal = Normal::new(0.0, index_sigma)
        .map_err(|e| Error::config("index_sigma", e.to_string()))?;
    let master = uniform_fan_in::<f32, R>(fan_in, len, rng);
    let lambda_latent: Vec<f32> = (0..len).map(|_| normal.sample(rng) as f32).collect();
    let init_max_abs = max_abs(&lambda_latent);
    Ok(DualWeight {
        master,
        lambda_latent,
        shape: shape.to_vec(),
        spec,
        init_max_abs,
    })
}

/// `(h_low + eta * h_high) / 2`, elementwise.
pub fn combine_hypotheses<T: Real>(h_low: &Tensor<T>, h_high: &Tensor<T>, eta: T) -> Result<Tensor<T>> {
    if h_low.shape() != h_high.shape() {
        return Err(Error::ShapeMismatch(format!(
            "hypotheses {:?} and {:?}",
            h_low.shape(),
            h_high.shape()
        )));
    }
    let half = T::from_f64_lossy(0.5);
    let data = h_low
        .data()
        .iter()
        .zip(h_high.data())
        .map(|(&l, &h)| (l + eta * h) * half)
        .collect();
    Tensor::new(h_low.shape().to_vec(), data)
}

/// Up-scaling bit 1 where the latent is strictly positive.
pub fn binarize_upscale(lambda_latent: &[f32]) -> UpscaleBits {
    UpscaleBits::new(lambda_latent.iter().map(|&x| u8::from(x > 0.0)).collect())
        .expect("bits are 0 or 1")
}

fn max_abs(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Rescales the latent parameters in place. Signs (and so the up-scaling
/// bits) are preserved; an all-zero tensor is left alone.
pub fn normalize_index_params(lambda_latent: &mut [f32], norm: IndexNorm, init_max_abs: f32, sigma: f64) {
    let factor = match norm {
        IndexNorm::Off => return,
        IndexNorm::MaxAbs => {
            let m = max_abs(lambda_latent);
            if m == 0.0 || !m.is_finite() {
                return;
            }
            init_max_abs as f64 / m as f64
        }
        IndexNorm::Std => {
            let n = lambda_latent.len() as f64;
            if n == 0.0 {
                return;
            }
            let mean = lambda_latent.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = lambda_latent
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            if var == 0.0 || !var.is_finite() {
                return;
            }
            sigma / var.sqrt()
        }
    };
    for v in lambda_latent {
        *v = (*v as f64 * factor) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::ScaleRule;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn combined_hypothesis_examples() {
        let l = Tensor::from_rows(&[&[1.0f64, 2.0]]).unwrap();
        let h = Tensor::from_rows(&[&[3.0f64, 4.0]]).unwrap();
        let c = combine_hypotheses(&l, &h, 0.01).unwrap();
        assert!((c.data()[0] - 0.515).abs() < 1e-15 && (c.data()[1] - 1.02).abs() < 1e-15);
        assert_eq!(combine_hypotheses(&l, &l, 1.0).unwrap(), l);
        let zero = Tensor::from_rows(&[&[0.0f64, 0.0]]).unwrap();
        assert_eq!(combine_hypotheses(&l, &zero, 0.3).unwrap().data(), &[0.5, 1.0]);
        let wide = Tensor::from_rows(&[&[0.0f64, 0.0, 0.0]]).unwrap();
        assert!(combine_hypotheses(&l, &wide, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn combination_is_linear(
            a in -4.0f64..4.0,
            h1 in prop::collection::vec(-10.0f64..10.0, 6),
            h2 in prop::collection::vec(-10.0f64..10.0, 6),
        ) {
            let t = |v: &[f64]| Tensor::new(vec![2, 3], v.to_vec()).unwrap();
            let s = |v: &[f64]| v.iter().map(|x| a * x).collect::<Vec<_>>();
            let lhs = combine_hypotheses(&t(&s(&h1)), &t(&s(&h2)), 0.01).unwrap();
            let rhs = combine_hypotheses(&t(&h1), &t(&h2), 0.01).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - a * y).abs() <= 1e-12 * (1.0 + y.abs() * a.abs()));
            }
        }
    }

    #[test]
    fn normalization_example() {
        let mut x = [0.2f32, -0.4];
        normalize_index_params(&mut x, IndexNorm::MaxAbs, 0.8, 0.3);
        assert_eq!(x, [0.4, -0.8]);
        let mut z = [0.0f32; 3];
        normalize_index_params(&mut z, IndexNorm::MaxAbs, 0.8, 0.3);
        assert_eq!(z, [0.0; 3]);
    }

    #[test]
    fn fresh_latent_statistics() {
        let spec = QuantSpec::new(2, ScaleRule::LevelCount).unwrap();
        let d = init_dual_weight(&[400, 300], spec, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = d.lambda_latent.len() as f64;
        let mean = d.lambda_latent.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (d.lambda_latent.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01 && (std - 0.3).abs() < 0.01, "{mean} {std}");
        let ones = d.upscale_bits().count_ones() as f64 / n;
        assert!((ones - 0.5).abs() < 0.01, "{ones}");
        let all_neg = DualWeight {
            lambda_latent: vec![-1.0; d.len()],
            ..d
        };
        let lv = all_neg.derive().unwrap();
        let doubled: Vec<i32> = lv.low.indices().iter().map(|i| 2 * i).collect();
        assert_eq!(lv.high.indices(), &doubled[..]);
    }

    #[test]
    fn binarize_threshold_is_strict() {
        let b = binarize_upscale(&[-0.1, 0.0, 1e-9, 3.0]);
        assert_eq!(b.as_slice(), &[0, 0, 1, 1]);
        assert_eq!(binarize_upscale(&[0.2, -0.1, 0.0]).as_slice(), &[1, 0, 0]);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let spec = QuantSpec::new(2, ScaleRule::LevelCount).unwrap();
        let a = init_dual_weight(&[64, 100], spec, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_dual_weight(&[64, 100], spec, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f32 / 100.0).sqrt();
        assert!(a.master.iter().all(|w| w.abs() <= bound));
        let n = a.lambda_latent.len() as f64;
        let var = a.lambda_latent.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.3).abs() < 0.02, "{}", var.sqrt());
        assert_eq!(a.init_max_abs, max_abs(&a.lambda_latent));
        let d = a.derive().unwrap();
        assert_eq!(d.high.bits(), 3);
        assert_eq!(d.upscale.count_ones(), a.lambda_latent.iter().filter(|&&v| v > 0.0).count());
    }

    proptest! {
        #[test]
        fn normalization_preserves_signs(
            v in prop::collection::vec(-5.0f32..5.0, 1..64),
            target in 0.01f32..2.0,
        ) {
            for norm in [IndexNorm::MaxAbs, IndexNorm::Std, IndexNorm::Off] {
                let mut x = v.clone();
                normalize_index_params(&mut x, norm, target, 0.3);
                prop_assert_eq!(binarize_upscale(&x), binarize_upscale(&v));
                if norm == IndexNorm::MaxAbs && max_abs(&v) > 0.0 {
                    prop_assert!((max_abs(&x) - target).abs() <= target * 1e-5);
                }
            }
        }
    }
}
