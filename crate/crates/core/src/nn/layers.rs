use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

use super::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `(out, in, kh, kw)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool2,
    Flatten,
}

impl<T> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2 => LayerKind::MaxPool2,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Shape of the weight tensor for weight-bearing layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => Some(vec![d.out_features, d.in_features]),
            Layer::Conv2d(c) => Some(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::Dense(d) => Some(d.in_features),
            Layer::Conv2d(c) => Some(c.in_channels * c.kernel * c.kernel),
            _ => None,
        }
    }
}

/// What backward needs from the forward pass of one layer.
#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    Dense { input: Tensor<T> },
    Conv { input: Tensor<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

type BnForward<T> = (Tensor<T>, Cache<T>, Option<StatUpdate<T>>);

/// Batch statistics produced in `Mode::Train`, applied to running averages
/// by the owner of the network.
#[derive(Debug, Clone)]
pub(crate) struct StatUpdate<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrads<T> {
    None,
    Affine { weight: Vec<T>, bias: Vec<T> },
    Norm { gamma: Vec<T>, beta: Vec<T> },
}

impl<T: Real> ParamGrads<T> {
    pub fn weight(&self) -> Option<&[T]> {
        match self {
            ParamGrads::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Parameter gradients in the same order as `Network::params_mut`.
    pub fn slices(&self) -> Vec<&[T]> {
        match self {
            ParamGrads::None => vec![],
            ParamGrads::Affine { weight, bias } => vec![weight, bias],
            ParamGrads::Norm { gamma, beta } => vec![gamma, beta],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        fn add<T: Real>(a: &mut [T], b: &[T]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        match (self, other) {
            (ParamGrads::Affine { weight, bias }, ParamGrads::Affine { weight: w, bias: b }) => {
                add(weight, w);
                add(bias, b);
            }
            (ParamGrads::Norm { gamma, beta }, ParamGrads::Norm { gamma: g, beta: b }) => {
                add(gamma, g);
                add(beta, b);
            }
            _ => {}
        }
    }
}

fn mismatch(layer: usize, what: impl std::fmt::Display) -> Error {
    Error::ShapeMismatch(format!("layer {layer}: {what}"))
}

fn effective<'a, T>(own: &'a [T], over: Option<&'a [T]>) -> &'a [T] {
    over.unwrap_or(own)
}

impl<T: Real> Dense<T> {
    pub(crate) fn forward(
        &self,
        idx: usize,
        x: &Tensor<T>,
        weight: Option<&[T]>,
    ) -> Result<Tensor<T>> {
        let w = effective(&self.weight, weight);
        if w.len() != self.in_features * self.out_features {
            return Err(mismatch(idx, "missing or mis-sized dense weights"));
        }
        if x.shape().len() != 2 || x.row_len() != self.in_features {
            return Err(mismatch(
                idx,
                format!("dense expects (batch, {}), got {:?}", self.in_features, x.shape()),
            ));
        }
        let batch = x.batch();
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            T::one(),
            Mat::new(x.data(), batch, self.in_features),
            Mat::new(w, self.out_features, self.in_features).t(),
            T::one(),
            &mut out,
        );
        Tensor::new(vec![batch, self.out_features], out)
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor<T>,
        dy: &Tensor<T>,
        weight: Option<&[T]>,
        need_dx: bool,
    ) -> (ParamGrads<T>, Option<Tensor<T>>) {
        let w = effective(&self.weight, weight);
        let batch = input.batch();
        let (o, i) = (self.out_features, self.in_features);
        let mut dw = vec![T::zero(); o * i];
        gemm(
            T::one(),
            Mat::new(dy.data(), batch, o).t(),
            Mat::new(input.data(), batch, i),
            T::zero(),
            &mut dw,
        );
        let mut db = vec![T::zero(); o];
        for r in 0..batch {
            for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); batch * i];
            gemm(
                T::one(),
                Mat::new(dy.data(), batch, o),
                Mat::new(w, o, i),
                T::zero(),
                &mut dx,
            );
            Tensor::new(input.shape().to_vec(), dx).expect("dx shape")
        });
        (ParamGrads::Affine { weight: dw, bias: db }, dx)
    }
}

impl<T: Real> Conv2d<T> {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.padding + 1 - self.kernel,
            w + 2 * self.padding + 1 - self.kernel,
        )
    }

    /// Unfold one `(C, H, W)` image into `(C*k*k, OH*OW)` columns.
    fn im2col(&self, img: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let l = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - pad;
                        for ox in 0..ow {
                            let ix = ox as isize + kx as isize - pad;
                            dst[oy * ow + ox] =
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    T::zero()
                                } else {
                                    img[(c * h + iy as usize) * w + ix as usize]
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, img: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let l = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    fn check_input(&self, idx: usize, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] + 2 * self.padding < self.kernel {
            return Err(mismatch(
                idx,
                format!("conv expects (batch, {}, h, w), got {s:?}", self.in_channels),
            ));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub(crate) fn forward(
        &self,
        idx: usize,
        x: &Tensor<T>,
        weight: Option<&[T]>,
    ) -> Result<Tensor<T>> {
        let w = effective(&self.weight, weight);
        let ckk = self.in_channels * self.kernel * self.kernel;
        if w.len() != self.out_channels * ckk {
            return Err(mismatch(idx, "missing or mis-sized conv weights"));
        }
        let (n, h, wd) = self.check_input(idx, x)?;
        let (oh, ow) = self.out_hw(h, wd);
        let l = oh * ow;
        let img_len = self.in_channels * h * wd;
        let out_len = self.out_channels * l;
        let mut cols = vec![T::zero(); ckk * l];
        let mut out = vec![T::zero(); n * out_len];
        for b in 0..n {
            self.im2col(&x.data()[b * img_len..(b + 1) * img_len], h, wd, &mut cols);
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            for (o, chunk) in dst.chunks_mut(l).enumerate() {
                chunk.fill(self.bias[o]);
            }
            gemm(
                T::one(),
                Mat::new(w, self.out_channels, ckk),
                Mat::new(&cols, ckk, l),
                T::one(),
                dst,
            );
        }
        Tensor::new(vec![n, self.out_channels, oh, ow], out)
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor<T>,
        dy: &Tensor<T>,
        weight: Option<&[T]>,
        need_dx: bool,
    ) -> (ParamGrads<T>, Option<Tensor<T>>) {
        let w = effective(&self.weight, weight);
        let s = input.shape();
        let (n, h, wd) = (s[0], s[2], s[3]);
        let (oh, ow) = self.out_hw(h, wd);
        let l = oh * ow;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let img_len = self.in_channels * h * wd;
        let out_len = self.out_channels * l;
        let mut dw = vec![T::zero(); self.out_channels * ckk];
        let mut db = vec![T::zero(); self.out_channels];
        let mut dx = if need_dx {
            vec![T::zero(); input.len()]
        } else {
            vec![]
        };
        let mut cols = vec![T::zero(); ckk * l];
        let mut dcols = vec![T::zero(); ckk * l];
        for b in 0..n {
            let g = &dy.data()[b * out_len..(b + 1) * out_len];
            for (o, chunk) in g.chunks(l).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
            self.im2col(&input.data()[b * img_len..(b + 1) * img_len], h, wd, &mut cols);
            gemm(
                T::one(),
                Mat::new(g, self.out_channels, l),
                Mat::new(&cols, ckk, l).t(),
                T::one(),
                &mut dw,
            );
            if need_dx {
                gemm(
                    T::one(),
                    Mat::new(w, self.out_channels, ckk).t(),
                    Mat::new(g, self.out_channels, l),
                    T::zero(),
                    &mut dcols,
                );
                self.col2im(&dcols, h, wd, &mut dx[b * img_len..(b + 1) * img_len]);
            }
        }
        let dx = need_dx.then(|| Tensor::new(s.to_vec(), dx).expect("dx shape"));
        (ParamGrads::Affine { weight: dw, bias: db }, dx)
    }
}

impl<T: Real> BatchNorm<T> {
    /// Channel axis is 1; everything after it is spatial.
    fn dims(&self, idx: usize, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(mismatch(
                idx,
                format!("batch norm expects {} channels, got {s:?}", self.channels),
            ));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    pub(crate) fn forward(
        &self,
        idx: usize,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<BnForward<T>> {
        let (n, spatial) = self.dims(idx, x)?;
        let c = self.channels;
        let m = n * spatial;
        let eps = T::from_f64_lossy(self.eps);
        let data = x.data();
        let at = |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;

        let batch_stats = mode != Mode::Eval;
        let (mean, var) = if batch_stats {
            if m < 2 {
                return Err(mismatch(idx, "batch norm needs at least two values per channel"));
            }
            let mt = T::from_usize(m).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    for s in 0..spatial {
                        sum += data[at(b, ch, s)];
                    }
                }
                let mu = sum / mt;
                let mut sq = T::zero();
                for b in 0..n {
                    for s in 0..spatial {
                        let d = data[at(b, ch, s)] - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / mt;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                for s in 0..spatial {
                    let i = at(b, ch, s);
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        let update = (mode == Mode::Train).then(|| {
            let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
            StatUpdate {
                layer: idx,
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            }
        });
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
            update,
        ))
    }

    pub(crate) fn apply_update(&mut self, update: &StatUpdate<T>) {
        let mom = T::from_f64_lossy(self.momentum);
        let keep = T::one() - mom;
        for (r, &b) in self.running_mean.iter_mut().zip(&update.mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&update.var) {
            *r = keep * *r + mom * b;
        }
    }

    pub(crate) fn backward(
        &self,
        dy: &Tensor<T>,
        xhat: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> (ParamGrads<T>, Tensor<T>) {
        let s = dy.shape();
        let (n, spatial) = (s[0], s[2..].iter().product::<usize>());
        let c = self.channels;
        let g = dy.data();
        let at = |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for sp in 0..spatial {
                    let i = at(b, ch, sp);
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let mut dx = vec![T::zero(); g.len()];
        let mt = T::from_usize(n * spatial).unwrap();
        for b in 0..n {
            for ch in 0..c {
                let k = self.gamma[ch] * inv_std[ch];
                for sp in 0..spatial {
                    let i = at(b, ch, sp);
                    dx[i] = if batch_stats {
                        k * (g[i] - dbeta[ch] / mt - xhat[i] * dgamma[ch] / mt)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        (
            ParamGrads::Norm {
                gamma: dgamma,
                beta: dbeta,
            },
            Tensor::new(s.to_vec(), dx).expect("dx shape"),
        )
    }
}

pub(crate) fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let out = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect();
    (
        Tensor::new(x.shape().to_vec(), out).expect("relu shape"),
        Cache::Relu { mask },
    )
}

pub(crate) fn relu_backward<T: Real>(dy: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let dx = dy
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape().to_vec(), dx).expect("relu shape")
}

pub(crate) fn maxpool_forward<T: Real>(idx: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(mismatch(idx, format!("2x2 pooling expects (batch, c, h, w), got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        Cache::MaxPool {
            argmax,
            input_shape: s.to_vec(),
        },
    ))
}

pub(crate) fn maxpool_backward<T: Real>(
    dy: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}
