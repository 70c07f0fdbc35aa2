//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! The resolved form written next to every run lists every key, so a run
//! can be repeated from that file alone.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::Augment;
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::quant::{QuantSpec, ScaleRule};

/// Epoch schedule and learning rates of the two training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    /// Epochs `1..=phase1_epochs` alternate shared-only (odd) and
    /// shared-plus-up-scaling (even) updates.
    pub phase1_epochs: usize,
    pub total_epochs: usize,
    pub lr_phase1_odd: f64,
    pub lr_phase1_even: f64,
    pub lr_phase2: f64,
    /// Weight of the high-precision hypothesis in the combined hypothesis.
    pub eta: f64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            phase1_epochs: 50,
            total_epochs: 100,
            lr_phase1_odd: 3e-4,
            lr_phase1_even: 3e-5,
            lr_phase2: 4e-3,
            eta: 0.01,
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_epochs == 0 {
            return Err(Error::config("phase1_epochs", "must be at least 1"));
        }
        if self.phase1_epochs > self.total_epochs {
            return Err(Error::config(
                "phase1_epochs",
                format!("{} exceeds epochs = {}", self.phase1_epochs, self.total_epochs),
            ));
        }
        for (key, v) in [
            ("lr_phase1_odd", self.lr_phase1_odd),
            ("lr_phase1_even", self.lr_phase1_even),
            ("lr_phase2", self.lr_phase2),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be a positive number"));
            }
        }
        Ok(())
    }

    pub fn phase_of(&self, epoch: usize) -> u8 {
        if epoch <= self.phase1_epochs {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetId {
    #[default]
    Mnist,
    Cifar10,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }

    /// `(channels, side)` of one image.
    pub fn image_shape(self) -> (usize, usize) {
        match self {
            DatasetId::Mnist => (1, 28),
            DatasetId::Cifar10 => (3, 32),
        }
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            _ => Err(format!("unknown dataset `{s}` (expected mnist or cifar10)")),
        }
    }
}

/// How the latent up-scaling parameters are rescaled after each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexNorm {
    /// Back to the max-abs value recorded at initialization.
    #[default]
    MaxAbs,
    /// To standard deviation `index_sigma`.
    Std,
    Off,
}

impl IndexNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexNorm::MaxAbs => "max_abs",
            IndexNorm::Std => "std",
            IndexNorm::Off => "off",
        }
    }
}

impl FromStr for IndexNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "max_abs" => Ok(IndexNorm::MaxAbs),
            "std" => Ok(IndexNorm::Std),
            "off" => Ok(IndexNorm::Off),
            _ => Err(format!("unknown index norm `{s}` (expected max_abs, std or off)")),
        }
    }
}

/// Which weight-bearing layers (counted in network order) are quantized.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerMask {
    #[default]
    All,
    None,
    Only(Vec<usize>),
}

impl LayerMask {
    pub fn contains(&self, weight_layer: usize) -> bool {
        match self {
            LayerMask::All => true,
            LayerMask::None => false,
            LayerMask::Only(v) => v.contains(&weight_layer),
        }
    }
}

impl std::fmt::Display for LayerMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerMask::All => f.write_str("all"),
            LayerMask::None => f.write_str("none"),
            LayerMask::Only(v) => {
                let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LayerMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(LayerMask::All),
            "none" => Ok(LayerMask::None),
            list => {
                let mut v = list
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| format!("`{s}` is not all, none, or a list of layer numbers"))?;
                v.sort_unstable();
                v.dedup();
                Ok(LayerMask::Only(v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub name: String,
    pub dataset: DatasetId,
    pub arch: Architecture,
    /// Shared (low-precision) bit-width; the high mode has one more bit.
    pub bits: u8,
    pub scale_rule: ScaleRule,
    pub quantize: LayerMask,
    pub batch_size: usize,
    pub seed: u64,
    /// Standard deviation of the initial latent up-scaling parameters.
    pub index_sigma: f64,
    pub index_norm: IndexNorm,
    pub augment: Augment,
    /// Use only the first N training / test samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub data_dir: Option<PathBuf>,
    pub plan: PhasePlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetId::Mnist,
            arch: Architecture::mlp256(),
            bits: 2,
            scale_rule: ScaleRule::LevelCount,
            quantize: LayerMask::All,
            batch_size: 125,
            seed: 1,
            index_sigma: 0.3,
            index_norm: IndexNorm::MaxAbs,
            augment: Augment::None,
            train_limit: 0,
            test_limit: 0,
            data_dir: None,
            plan: PhasePlan::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "name",
    "dataset",
    "arch",
    "bits",
    "scale_rule",
    "quantize",
    "batch_size",
    "seed",
    "epochs",
    "phase1_epochs",
    "lr_phase1_odd",
    "lr_phase1_even",
    "lr_phase2",
    "eta",
    "index_sigma",
    "index_norm",
    "augment",
    "train_limit",
    "test_limit",
    "data_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

impl TrainConfig {
    /// Defaults overridden by the given `key = value` text.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(Error::config(key, "must be a plain, non-empty name"));
                }
                self.name = value.to_string();
            }
            "dataset" => self.dataset = parse(key, value)?,
            "arch" => self.arch = parse(key, value)?,
            "bits" => self.bits = parse(key, value)?,
            "scale_rule" => self.scale_rule = parse(key, value)?,
            "quantize" => self.quantize = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.plan.total_epochs = parse(key, value)?,
            "phase1_epochs" => self.plan.phase1_epochs = parse(key, value)?,
            "lr_phase1_odd" => self.plan.lr_phase1_odd = parse(key, value)?,
            "lr_phase1_even" => self.plan.lr_phase1_even = parse(key, value)?,
            "lr_phase2" => self.plan.lr_phase2 = parse(key, value)?,
            "eta" => self.plan.eta = parse(key, value)?,
            "index_sigma" => self.index_sigma = parse(key, value)?,
            "index_norm" => self.index_norm = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "train_limit" => self.train_limit = parse(key, value)?,
            "test_limit" => self.test_limit = parse(key, value)?,
            "data_dir" => {
                self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        // b = 1 has no positive level (p = 0), so the scale is undefined.
        if !(QuantSpec::MIN_BITS..QuantSpec::MAX_BITS).contains(&self.bits) {
            return Err(Error::config(
                "bits",
                format!(
                    "{} is outside {}..={}",
                    self.bits,
                    QuantSpec::MIN_BITS,
                    QuantSpec::MAX_BITS - 1
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.index_sigma.is_finite() && self.index_sigma > 0.0) {
            return Err(Error::config("index_sigma", "must be a positive number"));
        }
        let (channels, side) = self.dataset.image_shape();
        let fits = match &self.arch {
            Architecture::Mlp { dims } => dims[0] == channels * side * side,
            Architecture::MiniConvBn { channels: c, size, .. } => *c == channels && *size == side,
        };
        if !fits {
            return Err(Error::config(
                "arch",
                format!(
                    "{} does not accept {} images ({channels}x{side}x{side})",
                    self.arch,
                    self.dataset.as_str()
                ),
            ));
        }
        if self.arch.classes() != 10 {
            return Err(Error::config("arch", "must have 10 outputs"));
        }
        Ok(())
    }

    pub fn quant_spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits, self.scale_rule)
    }

    /// Every key with its effective value, one per line, in a fixed order.
    pub fn to_resolved(&self) -> String {
        let mut s = String::new();
        let p = &self.plan;
        let data_dir = self
            .data_dir
            .as_ref()
            .map(|d| d.display().to_string())
            .unwrap_or_default();
        for (k, v) in [
            ("name", self.name.clone()),
            ("dataset", self.dataset.as_str().into()),
            ("arch", self.arch.to_string()),
            ("bits", self.bits.to_string()),
            ("scale_rule", self.scale_rule.as_str().into()),
            ("quantize", self.quantize.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", p.total_epochs.to_string()),
            ("phase1_epochs", p.phase1_epochs.to_string()),
            ("lr_phase1_odd", p.lr_phase1_odd.to_string()),
            ("lr_phase1_even", p.lr_phase1_even.to_string()),
            ("lr_phase2", p.lr_phase2.to_string()),
            ("eta", p.eta.to_string()),
            ("index_sigma", self.index_sigma.to_string()),
            ("index_norm", self.index_norm.as_str().into()),
            ("augment", self.augment.as_str().into()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("data_dir", data_dir),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 125);
        assert_eq!(c.plan.eta, 0.01);
        assert_eq!(
            (c.plan.lr_phase1_odd, c.plan.lr_phase1_even, c.plan.lr_phase2),
            (3e-4, 3e-5, 4e-3)
        );
        assert_eq!(c.plan.phase1_epochs, 50);
        assert_eq!(c.index_sigma, 0.3);
        c.validate().unwrap();
    }

    #[test]
    fn resolved_round_trips() {
        let mut c = TrainConfig::default();
        c.apply_text("bits = 3\nlr_phase2 = 0.00123 # comment\nquantize = 2,0\nscale_rule = range_exact")
            .unwrap();
        let back = TrainConfig::from_text(&c.to_resolved()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.quantize, LayerMask::Only(vec![0, 2]));
        for key in CONFIG_KEYS {
            assert!(c.to_resolved().contains(&format!("{key} =")), "{key}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_text("batchsize = 3").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "batchsize"));
        let err = TrainConfig::from_text("bits = two").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "bits"));
    }

    #[test]
    fn plan_validation() {
        let mut p = PhasePlan {
            phase1_epochs: 0,
            ..PhasePlan::default()
        };
        assert!(p.validate().is_err());
        p.phase1_epochs = 101;
        assert!(p.validate().is_err());
        p.phase1_epochs = 50;
        p.eta = 0.0;
        assert!(p.validate().is_err());
        assert_eq!(PhasePlan::default().phase_of(50), 1);
        assert_eq!(PhasePlan::default().phase_of(51), 2);
    }

    #[test]
    fn bit_width_and_architecture_validation() {
        let mut c = TrainConfig {
            bits: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.bits = 8;
        assert!(c.validate().is_err());
        c.bits = 7;
        c.validate().unwrap();
        c.arch = Architecture::mini_conv_bn();
        assert!(c.validate().is_err());
        c.dataset = DatasetId::Cifar10;
        c.validate().unwrap();
    }
}
