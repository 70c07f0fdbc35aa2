//! Two-phase dual-precision training and the single-precision baseline.
//!
//! Phase 1 trains on the combined hypothesis. Odd epochs update the shared
//! parameters (master weights, biases, batch-norm affine); even epochs also
//! update the latent up-scaling parameters. Phase 2 freezes everything but
//! the latent up-scaling parameters and trains them on the high-mode loss,
//! with batch norm on running statistics so the low mode is unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{DualModel, Precision};
use super::{combine_hypotheses, normalize_index_params};
use crate::data::{augment, epoch_order, DataSplits};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Adam, AdamState, Gradients, Mode};
use crate::quant::{dequantize, ste_weight_gradient, QuantSpec};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 1000;

/// Which parameters an epoch updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    Shared,
    SharedAndUpscale,
    Upscale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLevels {
    pub layer: String,
    pub low: usize,
    pub high: usize,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub trainable: Trainable,
    pub lr: f64,
    pub train_loss: f64,
    pub low_accuracy: f64,
    pub high_accuracy: f64,
    pub levels: Vec<LayerLevels>,
}

impl EpochRecord {
    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }

    /// Parses a history log written with [`EpochRecord::to_json_line`].
    pub fn parse_history(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("history line: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub epoch: usize,
    pub bits: u8,
    pub train_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: DualModel,
    pub history: Vec<EpochRecord>,
}

/// Per-layer gradients of the quantized weights.
struct DualGrads {
    master: Vec<Option<Vec<f32>>>,
    latent: Vec<Option<Vec<f32>>>,
}

pub struct Trainer {
    config: TrainConfig,
    model: DualModel,
    adam: Adam,
    master_state: Vec<AdamState<f32>>,
    latent_state: Vec<AdamState<f32>>,
    param_state: Vec<Vec<AdamState<f32>>>,
    data_rng: ChaCha8Rng,
    epoch: usize,
}

fn scaled(t: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    let data = t.data().iter().map(|&v| v * factor).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn overrides(weights: &[Option<Vec<f32>>]) -> Vec<Option<&[f32]>> {
    weights.iter().map(|w| w.as_deref()).collect()
}

impl Trainer {
    /// Model initialized from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = DualModel::from_config(config, &mut rng)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: &TrainConfig, model: DualModel) -> Self {
        let n = model.net.len();
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(1);
        Self {
            config: config.clone(),
            adam: Adam::default(),
            master_state: vec![AdamState::default(); n],
            latent_state: vec![AdamState::default(); n],
            param_state: vec![vec![AdamState::default(); 2]; n],
            data_rng,
            epoch: 0,
            model,
        }
    }

    pub fn model(&self) -> &DualModel {
        &self.model
    }

    pub fn into_model(self) -> DualModel {
        self.model
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Schedule entry for a 1-based epoch.
    pub fn schedule(&self, epoch: usize) -> (u8, Trainable, f64) {
        let plan = &self.config.plan;
        match plan.phase_of(epoch) {
            1 if epoch % 2 == 1 => (1, Trainable::Shared, plan.lr_phase1_odd),
            1 => (1, Trainable::SharedAndUpscale, plan.lr_phase1_even),
            _ => (2, Trainable::Upscale, plan.lr_phase2),
        }
    }

    /// Combined-hypothesis loss with batch norm on batch statistics, no state change.
    pub fn combined_loss(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let snap = self.model.snapshot()?;
        let mut net = self.model.net.clone();
        let low = snap.weights(Precision::Low)?;
        let high = snap.weights(Precision::High)?;
        let h_low = net.forward_with(x, Mode::TrainFrozenStats, &overrides(&low))?;
        let h_high = net.forward_with(x, Mode::TrainFrozenStats, &overrides(&high))?;
        let h = combine_hypotheses(h_low.output(), h_high.output(), self.config.plan.eta as f32)?;
        Ok(softmax_cross_entropy(&h, labels)?.0 as f64)
    }

    fn update_shared(&mut self, master_grads: &[Option<Vec<f32>>], grads: &Gradients<f32>, lr: f64) {
        let adam = self.adam;
        for (i, g) in master_grads.iter().enumerate() {
            if let (Some(g), Some(d)) = (g, self.model.duals[i].as_mut()) {
                adam.step(&mut d.master, g, &mut self.master_state[i], lr);
            }
        }
        let mut params = self.model.net.params_mut();
        for (i, layer_params) in params.iter_mut().enumerate() {
            let slices = grads.layers[i].slices();
            for (k, p) in layer_params.iter_mut().enumerate() {
                if k == 0 && self.model.duals[i].is_some() {
                    continue;
                }
                adam.step(p, slices[k], &mut self.param_state[i][k], lr);
            }
        }
    }

    fn update_latent(&mut self, latent_grads: &[Option<Vec<f32>>], lr: f64) {
        let (norm, sigma) = (self.config.index_norm, self.config.index_sigma);
        for (i, g) in latent_grads.iter().enumerate() {
            if let (Some(g), Some(d)) = (g, self.model.duals[i].as_mut()) {
                self.adam.step(&mut d.lambda_latent, g, &mut self.latent_state[i], lr);
                normalize_index_params(&mut d.lambda_latent, norm, d.init_max_abs, sigma);
            }
        }
    }

    /// One phase-1 batch. Returns the combined-hypothesis loss.
    pub fn step_phase1(&mut self, x: &Tensor<f32>, labels: &[usize], with_upscale: bool, lr: f64) -> Result<f64> {
        let derived = self.model.derive_all()?;
        let w_low: Vec<_> = derived.iter().map(|d| d.as_ref().map(|d| dequantize(&d.low))).collect();
        let w_high: Vec<_> = derived.iter().map(|d| d.as_ref().map(|d| dequantize(&d.high))).collect();
        let (ov_low, ov_high) = (overrides(&w_low), overrides(&w_high));
        let net = &mut self.model.net;
        let tape_low = net.forward_with(x, Mode::Train, &ov_low)?;
        let tape_high = net.forward_with(x, Mode::TrainFrozenStats, &ov_high)?;
        let eta = self.config.plan.eta as f32;
        let h = combine_hypotheses(tape_low.output(), tape_high.output(), eta)?;
        let (loss, g) = softmax_cross_entropy(&h, labels)?;
        let mut grads = net.backward(&tape_low, &scaled(&g, 0.5), &ov_low)?;
        let grads_high = net.backward(&tape_high, &scaled(&g, 0.5 * eta), &ov_high)?;

        let mut dual = DualGrads {
            master: vec![None; derived.len()],
            latent: vec![None; derived.len()],
        };
        for (i, d) in derived.iter().enumerate() {
            let (Some(d), Some(w)) = (d, self.model.duals[i].as_ref()) else {
                continue;
            };
            let (s_b, s_hi) = (d.low.scale(), d.high.scale());
            let g_low = grads.layers[i].weight().expect("quantized layer has a weight gradient");
            let g_high = grads_high.layers[i].weight().expect("quantized layer has a weight gradient");
            // W_high = (2 I_b + lambda) s_hi, with I_b passed straight through as W / s_b.
            let chain = 2.0 * s_hi / s_b;
            let through: Vec<f32> = g_low.iter().zip(g_high).map(|(&a, &b)| a + chain * b).collect();
            dual.master[i] = Some(ste_weight_gradient(&through, &w.master, s_b, w.spec));
            dual.latent[i] = Some(g_high.iter().map(|&v| v * s_hi).collect());
        }
        grads.add_assign(&grads_high);
        self.update_shared(&dual.master, &grads, lr);
        if with_upscale {
            self.update_latent(&dual.latent, lr);
        }
        Ok(loss as f64)
    }

    /// One phase-2 batch. Returns the high-mode loss.
    pub fn step_phase2(&mut self, x: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
        let derived = self.model.derive_all()?;
        let w_high: Vec<_> = derived.iter().map(|d| d.as_ref().map(|d| dequantize(&d.high))).collect();
        let ov_high = overrides(&w_high);
        let tape = self.model.net.forward_with(x, Mode::Eval, &ov_high)?;
        let (loss, g) = softmax_cross_entropy(tape.output(), labels)?;
        let grads = self.model.net.backward(&tape, &g, &ov_high)?;
        let latent: Vec<Option<Vec<f32>>> = derived
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.as_ref().map(|d| {
                    let s_hi = d.high.scale();
                    grads.layers[i]
                        .weight()
                        .expect("quantized layer has a weight gradient")
                        .iter()
                        .map(|&v| v * s_hi)
                        .collect()
                })
            })
            .collect();
        self.update_latent(&latent, lr);
        Ok(loss as f64)
    }

    /// One single-precision batch on the shared levels alone.
    pub fn step_low_only(&mut self, x: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
        let lows: Vec<_> = self
            .model
            .duals
            .iter()
            .map(|d| d.as_ref().map(|d| d.low_levels()).transpose())
            .collect::<Result<_>>()?;
        let w: Vec<_> = lows.iter().map(|l| l.as_ref().map(dequantize)).collect();
        let ov = overrides(&w);
        let tape = self.model.net.forward_with(x, Mode::Train, &ov)?;
        let (loss, g) = softmax_cross_entropy(tape.output(), labels)?;
        let grads = self.model.net.backward(&tape, &g, &ov)?;
        let master: Vec<Option<Vec<f32>>> = lows
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (l, d) = (l.as_ref()?, self.model.duals[i].as_ref()?);
                let gw = grads.layers[i].weight()?;
                Some(ste_weight_gradient(gw, &d.master, l.scale(), d.spec))
            })
            .collect();
        self.update_shared(&master, &grads, lr);
        Ok(loss as f64)
    }

    fn batches(&mut self, data: &DataSplits) -> Vec<Vec<usize>> {
        let order = epoch_order(data.train.len(), &mut self.data_rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn batch(&mut self, data: &DataSplits, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (mut x, y) = data.train.gather(idx);
        augment(&mut x, self.config.augment, &mut self.data_rng);
        (x, y)
    }

    /// Trains one epoch according to the schedule, then evaluates both modes.
    pub fn run_epoch(&mut self, data: &DataSplits) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let (phase, trainable, lr) = self.schedule(epoch);
        if phase == 2 && self.schedule(epoch - 1).0 == 1 {
            // Phase 2 optimizes a different loss; moments gathered on the
            // eta-scaled phase-1 gradient would inflate its first steps.
            self.latent_state.iter_mut().for_each(|s| *s = AdamState::default());
        }
        let mut total = 0.0;
        let batches = self.batches(data);
        for idx in &batches {
            let (x, y) = self.batch(data, idx);
            total += match trainable {
                Trainable::Shared => self.step_phase1(&x, &y, false, lr)?,
                Trainable::SharedAndUpscale => self.step_phase1(&x, &y, true, lr)?,
                Trainable::Upscale => self.step_phase2(&x, &y, lr)?,
            };
        }
        self.epoch = epoch;
        let snap = self.model.snapshot()?;
        Ok(EpochRecord {
            epoch,
            phase,
            trainable,
            lr,
            train_loss: total / batches.len().max(1) as f64,
            low_accuracy: snap.evaluate(&data.test, Precision::Low, EVAL_BATCH)?,
            high_accuracy: snap.evaluate(&data.test, Precision::High, EVAL_BATCH)?,
            levels: snap.level_counts()?,
        })
    }

    pub fn run_low_only_epoch(&mut self, data: &DataSplits, lr: f64) -> Result<BaselineRecord> {
        let mut total = 0.0;
        let batches = self.batches(data);
        for idx in &batches {
            let (x, y) = self.batch(data, idx);
            total += self.step_low_only(&x, &y, lr)?;
        }
        self.epoch += 1;
        let snap = self.model.low_snapshot()?;
        Ok(BaselineRecord {
            epoch: self.epoch,
            bits: self.model.spec.bits(),
            train_loss: total / batches.len().max(1) as f64,
            accuracy: snap.evaluate(&data.test, Precision::Low, EVAL_BATCH)?,
        })
    }
}

/// Full two-phase run. `observer` sees every epoch as it completes.
pub fn run_training<F>(config: &TrainConfig, data: &DataSplits, mut observer: F) -> Result<TrainingOutcome>
where
    F: FnMut(&EpochRecord, &DualModel) -> Result<()>,
{
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::with_capacity(config.plan.total_epochs);
    for _ in 0..config.plan.total_epochs {
        let record = trainer.run_epoch(data)?;
        observer(&record, trainer.model())?;
        history.push(record);
    }
    Ok(TrainingOutcome {
        model: trainer.into_model(),
        history,
    })
}

/// Conventional quantization-aware training at a single bit-width with a
/// constant learning rate, sharing the config's architecture, data order,
/// batch size and initialization scheme.
pub fn run_baseline<F>(
    config: &TrainConfig,
    bits: u8,
    epochs: usize,
    lr: f64,
    data: &DataSplits,
    mut observer: F,
) -> Result<(DualModel, Vec<BaselineRecord>)>
where
    F: FnMut(&BaselineRecord) -> Result<()>,
{
    let spec = QuantSpec::new(bits, config.scale_rule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = DualModel::new(&config.arch, spec, &config.quantize, config.index_sigma, &mut rng)?;
    let mut trainer = Trainer::with_model(config, model);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let record = trainer.run_low_only_epoch(data, lr)?;
        observer(&record)?;
        history.push(record);
    }
    Ok((trainer.into_model(), history))
}
