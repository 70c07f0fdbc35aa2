use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, Cache, Layer, ParamGrads,
    StatUpdate,
};
use super::Mode;

/// Per-layer weight substitutes. `None` entries (or a short slice) fall back
/// to the weight stored in the layer.
/// Output, per-layer caches and pending batch-norm updates of one pass.
type Run<T> = (Tensor<T>, Vec<Cache<T>>, Vec<StatUpdate<T>>);

pub type WeightOverrides<'a, T> = [Option<&'a [T]>];

/// A sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    names: Vec<String>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    caches: Vec<Cache<T>>,
    output: Tensor<T>,
}

impl<T> ForwardTape<T> {
    /// The network output (pre-softmax logits).
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }
}

/// Gradients for every layer, aligned with `Network::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<ParamGrads<T>>,
}

impl<T: Real> Gradients<T> {
    /// All parameter gradients flattened in `Network::params_mut` order.
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|g| g.slices().into_iter().flat_map(|s| s.iter().copied()))
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<(String, Layer<T>)>) -> Self {
        let (names, layers) = layers.into_iter().unzip();
        Self { layers, names }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Moves the weight of a Dense or Conv2d layer out, leaving it empty.
    /// Forward passes then require an override for that layer.
    pub fn take_weight(&mut self, layer: usize) -> Option<Vec<T>> {
        match &mut self.layers[layer] {
            Layer::Dense(d) => Some(std::mem::take(&mut d.weight)),
            Layer::Conv2d(c) => Some(std::mem::take(&mut c.weight)),
            _ => None,
        }
    }

    /// Trainable tensors per layer: `[weight, bias]` or `[gamma, beta]`.
    pub fn params_mut(&mut self) -> Vec<Vec<&mut Vec<T>>> {
        self.layers
            .iter_mut()
            .map(|l| match l {
                Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
                Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
                Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
                _ => vec![],
            })
            .collect()
    }

    fn run(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        weights: &WeightOverrides<'_, T>,
        keep: bool,
    ) -> Result<Run<T>> {
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut updates = Vec::new();
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let over = weights.get(i).copied().flatten();
            let (y, cache) = match layer {
                Layer::Dense(d) => {
                    let y = d.forward(i, &x, over)?;
                    (y, keep.then_some(Cache::Dense { input: x }))
                }
                Layer::Conv2d(c) => {
                    let y = c.forward(i, &x, over)?;
                    (y, keep.then_some(Cache::Conv { input: x }))
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache, update) = bn.forward(i, &x, mode)?;
                    updates.extend(update);
                    (y, keep.then_some(cache))
                }
                Layer::Relu => {
                    let (y, cache) = relu_forward(&x);
                    (y, keep.then_some(cache))
                }
                Layer::MaxPool2 => {
                    let (y, cache) = maxpool_forward(i, &x)?;
                    (y, keep.then_some(cache))
                }
                Layer::Flatten => {
                    let shape = x.shape().to_vec();
                    let (n, rest) = (x.batch(), x.row_len());
                    let y = x.reshape(vec![n, rest])?;
                    (y, keep.then_some(Cache::Flatten { input_shape: shape }))
                }
            };
            if !y.all_finite() {
                return Err(Error::NumericOverflow(i));
            }
            caches.extend(cache);
            x = y;
        }
        Ok((x, caches, updates))
    }

    fn apply_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            if let Layer::BatchNorm(bn) = &mut self.layers[u.layer] {
                bn.apply_update(u);
            }
        }
    }

    /// Forward pass with the layers' own weights.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<ForwardTape<T>> {
        self.forward_with(input, mode, &[])
    }

    /// Forward pass keeping the activations needed by [`Network::backward`].
    /// In `Mode::Train` batch-norm running statistics are updated.
    pub fn forward_with(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        weights: &WeightOverrides<'_, T>,
    ) -> Result<ForwardTape<T>> {
        let (output, caches, updates) = self.run(input, mode, weights, true)?;
        self.apply_updates(&updates);
        Ok(ForwardTape { caches, output })
    }

    /// Eval-mode forward without a tape.
    pub fn infer(&self, input: &Tensor<T>, weights: &WeightOverrides<'_, T>) -> Result<Tensor<T>> {
        Ok(self.run(input, Mode::Eval, weights, false)?.0)
    }

    /// Reverse pass. `weights` must be the overrides used for the forward.
    pub fn backward(
        &self,
        tape: &ForwardTape<T>,
        grad_output: &Tensor<T>,
        weights: &WeightOverrides<'_, T>,
    ) -> Result<Gradients<T>> {
        if grad_output.shape() != tape.output.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                tape.output.shape()
            )));
        }
        // Nothing upstream of the first weight-bearing layer needs a gradient.
        let first_param = self
            .layers
            .iter()
            .position(|l| !matches!(l, Layer::Relu | Layer::MaxPool2 | Layer::Flatten))
            .unwrap_or(0);
        let mut grads = vec![ParamGrads::None; self.layers.len()];
        let mut dy = grad_output.clone();
        for i in (0..self.layers.len()).rev() {
            if i < first_param {
                break;
            }
            let over = weights.get(i).copied().flatten();
            let need_dx = i > first_param;
            let dx = match (&self.layers[i], &tape.caches[i]) {
                (Layer::Dense(d), Cache::Dense { input }) => {
                    let (g, dx) = d.backward(input, &dy, over, need_dx);
                    grads[i] = g;
                    dx
                }
                (Layer::Conv2d(c), Cache::Conv { input }) => {
                    let (g, dx) = c.backward(input, &dy, over, need_dx);
                    grads[i] = g;
                    dx
                }
                (
                    Layer::BatchNorm(bn),
                    Cache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    let (g, dx) = bn.backward(&dy, xhat, inv_std, *batch_stats);
                    grads[i] = g;
                    Some(dx)
                }
                (Layer::Relu, Cache::Relu { mask }) => Some(relu_backward(&dy, mask)),
                (Layer::MaxPool2, Cache::MaxPool { argmax, input_shape }) => {
                    Some(maxpool_backward(&dy, argmax, input_shape))
                }
                (Layer::Flatten, Cache::Flatten { input_shape }) => {
                    Some(dy.clone().reshape(input_shape.clone())?)
                }
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: tape does not match network"
                    )))
                }
            };
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        Ok(Gradients { layers: grads })
    }
}
