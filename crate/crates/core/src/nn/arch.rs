//! Model architectures known to the trainer and the model file format.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::tensor::Real;

use super::layers::{BatchNorm, Conv2d, Dense, Layer};
use super::network::Network;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Flatten followed by dense layers with ReLU between them.
    Mlp { dims: Vec<usize> },
    /// Three conv3x3 / batch-norm / ReLU / 2x2 max-pool blocks with 16, 32
    /// and 64 channels, then one dense classifier.
    MiniConvBn {
        channels: usize,
        size: usize,
        classes: usize,
    },
}

pub const MINI_CONV_WIDTHS: [usize; 3] = [16, 32, 64];

impl Architecture {
    /// 784-256-128-10 for 28x28 digits.
    pub fn mlp256() -> Self {
        Architecture::Mlp {
            dims: vec![784, 256, 128, 10],
        }
    }

    /// MiniConvBN for 3x32x32 inputs with ten classes.
    pub fn mini_conv_bn() -> Self {
        Architecture::MiniConvBn {
            channels: 3,
            size: 32,
            classes: 10,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { dims } => *dims.last().unwrap(),
            Architecture::MiniConvBn { classes, .. } => *classes,
        }
    }

    /// Builds the network with fan-in uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases and identity batch norm.
    pub fn build<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Network<T> {
        let mut layers: Vec<(String, Layer<T>)> = Vec::new();
        match self {
            Architecture::Mlp { dims } => {
                layers.push(("flatten".into(), Layer::Flatten));
                let n = dims.len() - 1;
                for (i, pair) in dims.windows(2).enumerate() {
                    layers.push((format!("fc{i}"), Layer::Dense(dense(pair[0], pair[1], rng))));
                    if i + 1 < n {
                        layers.push((format!("relu{i}"), Layer::Relu));
                    }
                }
            }
            Architecture::MiniConvBn {
                channels,
                size,
                classes,
            } => {
                let mut c_in = *channels;
                let mut side = *size;
                for (i, &c_out) in MINI_CONV_WIDTHS.iter().enumerate() {
                    layers.push((format!("conv{i}"), Layer::Conv2d(conv3x3(c_in, c_out, rng))));
                    layers.push((format!("bn{i}"), Layer::BatchNorm(batch_norm(c_out))));
                    layers.push((format!("relu{i}"), Layer::Relu));
                    layers.push((format!("pool{i}"), Layer::MaxPool2));
                    c_in = c_out;
                    side /= 2;
                }
                layers.push(("flatten".into(), Layer::Flatten));
                layers.push((
                    "fc0".into(),
                    Layer::Dense(dense(c_in * side * side, *classes, rng)),
                ));
            }
        }
        Network::new(layers)
    }
}

pub(crate) fn uniform_fan_in<T: Real, R: Rng + ?Sized>(fan_in: usize, len: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

pub(crate) fn dense<T: Real, R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Dense<T> {
    Dense {
        in_features: inp,
        out_features: out,
        weight: uniform_fan_in(inp, inp * out, rng),
        bias: vec![T::zero(); out],
    }
}

pub(crate) fn conv3x3<T: Real, R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Conv2d<T> {
    Conv2d {
        in_channels: c_in,
        out_channels: c_out,
        kernel: 3,
        padding: 1,
        weight: uniform_fan_in(c_in * 9, c_out * c_in * 9, rng),
        bias: vec![T::zero(); c_out],
    }
}

pub(crate) fn batch_norm<T: Real>(channels: usize) -> BatchNorm<T> {
    BatchNorm {
        channels,
        gamma: vec![T::one(); channels],
        beta: vec![T::zero(); channels],
        running_mean: vec![T::zero(); channels],
        running_var: vec![T::one(); channels],
        momentum: 0.1,
        eps: 1e-5,
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { dims } => {
                let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
                write!(f, "mlp:{}", dims.join("-"))
            }
            Architecture::MiniConvBn {
                channels,
                size,
                classes,
            } => write!(f, "miniconvbn:{channels}x{size}-{classes}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = String;

    /// Accepts `mlp256`, `miniconvbn`, `mlp:784-256-10` and `miniconvbn:3x32-10`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown architecture `{s}`");
        match s {
            "mlp256" => return Ok(Self::mlp256()),
            "miniconvbn" => return Ok(Self::mini_conv_bn()),
            _ => {}
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "mlp" => {
                let dims = rest
                    .split('-')
                    .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                if dims.len() < 2 {
                    return Err(bad());
                }
                Ok(Architecture::Mlp { dims })
            }
            "miniconvbn" => {
                let (input, classes) = rest.split_once('-').ok_or_else(bad)?;
                let (channels, size) = input.split_once('x').ok_or_else(bad)?;
                let parse = |v: &str| v.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
                let (channels, size, classes) = (parse(channels)?, parse(size)?, parse(classes)?);
                if size < 8 {
                    return Err(format!("{s}: input side must be at least 8"));
                }
                Ok(Architecture::MiniConvBn {
                    channels,
                    size,
                    classes,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_round_trip() {
        for id in ["mlp:784-256-128-10", "miniconvbn:3x32-10", "mlp:4-3-2"] {
            let a: Architecture = id.parse().unwrap();
            assert_eq!(a.to_string(), id);
        }
        assert_eq!("mlp256".parse::<Architecture>().unwrap(), Architecture::mlp256());
        assert!("mlp:4".parse::<Architecture>().is_err());
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn layer_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Network<f32> = Architecture::mlp256().build(&mut rng);
        assert_eq!(
            net.names(),
            &["flatten", "fc0", "relu0", "fc1", "relu1", "fc2"].map(String::from)
        );
        let net: Network<f32> = Architecture::mini_conv_bn().build(&mut rng);
        assert_eq!(net.len(), 14);
        assert_eq!(net.layers()[13].weight_shape(), Some(vec![10, 64 * 4 * 4]));
    }
}
