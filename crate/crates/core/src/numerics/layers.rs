use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_acc_bt, matmul_at, Scalar};
use crate::tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3x3 convolution, stride 1, zero "same" padding. Input `[C, H, W]`.
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    /// Max over all spatial positions: `[C, ...] -> [C]`.
    GlobalMaxPool,
    /// Affine map on a flattened input.
    Dense { inputs: usize, outputs: usize },
    LayerNorm { size: usize },
    Tanh,
}

/// Intermediate values saved by `forward` for exactly one `backward`.
#[derive(Debug)]
pub enum LayerCache<T> {
    Conv { input_shape: [usize; 3], cols: Vec<T> },
    Relu { input: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    GlobalMaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dense { input: Tensor<T> },
    LayerNorm { normalized: Vec<T>, inv_std: T },
    Tanh { output: Tensor<T> },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Tanh => "tanh",
        }
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => vec![
                ("weight", vec![out_channels, in_channels, 3, 3]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerSpec::LayerNorm { size } => vec![("gain", vec![size]), ("bias", vec![size])],
            _ => Vec::new(),
        }
    }

    /// Fresh parameters: weights uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero, layer-norm gain one.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        let glorot = |fan_in: usize, fan_out: usize, shape: Vec<usize>, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => vec![
                glorot(
                    in_channels * 9,
                    out_channels * 9,
                    vec![out_channels, in_channels, 3, 3],
                    rng,
                ),
                Tensor::zeros([out_channels]),
            ],
            LayerSpec::Dense { inputs, outputs } => vec![
                glorot(inputs, outputs, vec![outputs, inputs], rng),
                Tensor::zeros([outputs]),
            ],
            LayerSpec::LayerNorm { size } => {
                vec![Tensor::full([size], T::one()), Tensor::zeros([size])]
            }
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::shape(self.name(), format!("[{in_channels}, H, W]"), input));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                if input.len() != 3 {
                    return Err(Error::shape(self.name(), "[C, H, W]", input));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::GlobalMaxPool => {
                if input.len() < 2 || input[1..].iter().product::<usize>() == 0 {
                    return Err(Error::shape(self.name(), "[C, non-empty spatial...]", input));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.iter().product::<usize>() != inputs {
                    return Err(Error::shape(self.name(), format!("{inputs} inputs"), input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::LayerNorm { size } => {
                if input != [size] {
                    return Err(Error::shape(self.name(), [size], input));
                }
                Ok(vec![size])
            }
        }
    }

    fn check_params<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                format!("{} parameters", self.name()),
                shapes.len(),
                params.len(),
            ));
        }
        for ((pname, shape), p) in shapes.iter().zip(params) {
            p.ensure_shape(shape, &format!("{}.{pname}", self.name()))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        input: &Tensor<T>,
        params: &[Tensor<T>],
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let out_shape = self.output_shape(input.shape())?;
        self.check_params(params)?;
        let (out, cache) = match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let cols = im2col(input.data(), in_channels, h, w);
                let mut out = vec![T::zero(); out_channels * h * w];
                matmul(
                    out_channels,
                    in_channels * 9,
                    h * w,
                    params[0].data(),
                    &cols,
                    &mut out,
                );
                for (o, row) in out.chunks_exact_mut(h * w).enumerate() {
                    let b = params[1].data()[o];
                    for v in row {
                        *v += b;
                    }
                }
                (
                    Tensor::new(out_shape, out)?,
                    LayerCache::Conv { input_shape: [in_channels, h, w], cols },
                )
            }
            LayerSpec::Relu => (
                input.map(|v| if v > T::zero() { v } else { T::zero() }),
                LayerCache::Relu { input: input.clone() },
            ),
            LayerSpec::MaxPool2 => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let x = input.data();
                let mut out = Vec::with_capacity(c * oh * ow);
                let mut argmax = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best);
                        }
                    }
                }
                (
                    Tensor::new(out_shape, out)?,
                    LayerCache::MaxPool { input_shape: input.shape().to_vec(), argmax },
                )
            }
            LayerSpec::GlobalMaxPool => {
                let c = input.shape()[0];
                let spatial = input.len() / c;
                let x = input.data();
                let mut out = Vec::with_capacity(c);
                let mut argmax = Vec::with_capacity(c);
                for ch in 0..c {
                    let base = ch * spatial;
                    let mut best = base;
                    for idx in base + 1..base + spatial {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
                (
                    Tensor::new(out_shape, out)?,
                    LayerCache::GlobalMaxPool { input_shape: input.shape().to_vec(), argmax },
                )
            }
            LayerSpec::Dense { inputs, outputs } => {
                let mut out = params[1].data().to_vec();
                T::gemm(
                    outputs,
                    inputs,
                    1,
                    T::one(),
                    params[0].data(),
                    inputs as isize,
                    1,
                    input.data(),
                    1,
                    1,
                    T::one(),
                    &mut out,
                    1,
                    1,
                );
                (
                    Tensor::new(out_shape, out)?,
                    LayerCache::Dense { input: input.clone() },
                )
            }
            LayerSpec::LayerNorm { size } => {
                let x = input.data();
                let n = T::of(size as f64);
                let mean = x.iter().copied().sum::<T>() / n;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv_std = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
                let normalized: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
                let out = normalized
                    .iter()
                    .zip(params[0].data().iter().zip(params[1].data()))
                    .map(|(&xh, (&g, &b))| xh * g + b)
                    .collect();
                (
                    Tensor::new(out_shape, out)?,
                    LayerCache::LayerNorm { normalized, inv_std },
                )
            }
            LayerSpec::Tanh => {
                let out = input.map(|v| v.tanh());
                (out.clone(), LayerCache::Tanh { output: out })
            }
        };
        if cfg!(debug_assertions) && !out.all_finite() {
            return Err(Error::Training(format!(
                "non-finite output from {} layer",
                self.name()
            )));
        }
        Ok((out, cache))
    }

    /// Gradients w.r.t. the layer input and each parameter.
    pub fn backward<T: Scalar>(
        &self,
        cache: LayerCache<T>,
        params: &[Tensor<T>],
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mismatch = || Error::shape(format!("{} backward", self.name()), self.name(), "cache of another layer");
        match (self, cache) {
            (
                &LayerSpec::Conv3x3 { in_channels, out_channels },
                LayerCache::Conv { input_shape, cols },
            ) => {
                let hw = input_shape[1] * input_shape[2];
                grad_out.ensure_shape(
                    &[out_channels, input_shape[1], input_shape[2]],
                    "conv3x3 backward",
                )?;
                let g = grad_out.data();
                let rows = in_channels * 9;
                let mut dw = vec![T::zero(); out_channels * rows];
                matmul_acc_bt(out_channels, hw, rows, g, &cols, &mut dw);
                let db: Vec<T> = g.chunks_exact(hw).map(|r| r.iter().copied().sum()).collect();
                let mut dcols = vec![T::zero(); rows * hw];
                matmul_at(rows, out_channels, hw, params[0].data(), g, &mut dcols);
                let dx = col2im(&dcols, in_channels, input_shape[1], input_shape[2]);
                Ok((
                    Tensor::new(input_shape.to_vec(), dx)?,
                    vec![
                        Tensor::new([out_channels, in_channels, 3, 3], dw)?,
                        Tensor::from_vec(db),
                    ],
                ))
            }
            (LayerSpec::Relu, LayerCache::Relu { input }) => {
                grad_out.ensure_shape(input.shape(), "relu backward")?;
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), data)?, Vec::new()))
            }
            (LayerSpec::MaxPool2, LayerCache::MaxPool { input_shape, argmax })
            | (LayerSpec::GlobalMaxPool, LayerCache::GlobalMaxPool { input_shape, argmax }) => {
                if grad_out.len() != argmax.len() {
                    return Err(Error::shape(
                        format!("{} backward", self.name()),
                        argmax.len(),
                        grad_out.shape(),
                    ));
                }
                let mut dx = Tensor::zeros(input_shape);
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    d[idx] += g;
                }
                Ok((dx, Vec::new()))
            }
            (&LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                grad_out.ensure_shape(&[outputs], "dense backward")?;
                let g = grad_out.data();
                let x = input.data();
                let mut dw = vec![T::zero(); outputs * inputs];
                for (o, row) in dw.chunks_exact_mut(inputs).enumerate() {
                    let go = g[o];
                    for (w, &xv) in row.iter_mut().zip(x) {
                        *w = go * xv;
                    }
                }
                let mut dx = vec![T::zero(); inputs];
                matmul_at(inputs, outputs, 1, params[0].data(), g, &mut dx);
                Ok((
                    Tensor::new(input.shape().to_vec(), dx)?,
                    vec![Tensor::new([outputs, inputs], dw)?, grad_out.clone()],
                ))
            }
            (&LayerSpec::LayerNorm { size }, LayerCache::LayerNorm { normalized, inv_std }) => {
                grad_out.ensure_shape(&[size], "layer_norm backward")?;
                let g = grad_out.data();
                let gain = params[0].data();
                let n = T::of(size as f64);
                let dxhat: Vec<T> = g.iter().zip(gain).map(|(&a, &b)| a * b).collect();
                let mean_d = dxhat.iter().copied().sum::<T>() / n;
                let mean_dx = dxhat
                    .iter()
                    .zip(&normalized)
                    .map(|(&d, &xh)| d * xh)
                    .sum::<T>()
                    / n;
                let dx = dxhat
                    .iter()
                    .zip(&normalized)
                    .map(|(&d, &xh)| inv_std * (d - mean_d - xh * mean_dx))
                    .collect();
                let dgain = g.iter().zip(&normalized).map(|(&a, &xh)| a * xh).collect();
                Ok((
                    Tensor::from_vec(dx),
                    vec![Tensor::from_vec(dgain), grad_out.clone()],
                ))
            }
            (LayerSpec::Tanh, LayerCache::Tanh { output }) => {
                grad_out.ensure_shape(output.shape(), "tanh backward")?;
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect();
                Ok((Tensor::new(output.shape().to_vec(), data)?, Vec::new()))
            }
            _ => Err(mismatch()),
        }
    }
}

/// `[C*9, H*W]` patch matrix for a 3x3 same-padded convolution.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// A chain of layers with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn init(layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Self {
        let params = layers.iter().map(|l| l.init_params(rng)).collect();
        Sequential { layers, params }
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Self {
        let params = layers
            .iter()
            .map(|l| {
                l.param_shapes()
                    .into_iter()
                    .map(|(_, s)| Tensor::zeros(s))
                    .collect()
            })
            .collect();
        Sequential { layers, params }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers.clone())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (layer, params) in self.layers.iter().zip(&self.params) {
            let (y, cache) = layer.forward(&x, params)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Forward pass without keeping caches.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for (layer, params) in self.layers.iter().zip(&self.params) {
            x = layer.forward(&x, params)?.0;
        }
        Ok(x)
    }

    /// Returns the input gradient and parameter gradients shaped like `params`.
    pub fn backward(
        &self,
        caches: Vec<LayerCache<T>>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Sequential<T>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape("sequential backward caches", self.layers.len(), caches.len()));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let (gi, gp) = self.layers[i].backward(cache, &self.params[i], &g)?;
            grads[i] = gp;
            g = gi;
        }
        Ok((
            g,
            Sequential {
                layers: self.layers.clone(),
                params: grads,
            },
        ))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    /// `(prefix.index.param_name, tensor)` in storage order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (layer, params)) in self.layers.iter().zip(&self.params).enumerate() {
            for ((pname, _), t) in layer.param_shapes().iter().zip(params) {
                out.push((format!("{prefix}.{i}.{pname}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (layer, params)) in self.layers.iter().zip(self.params.iter_mut()).enumerate() {
            for ((pname, _), t) in layer.param_shapes().iter().zip(params.iter_mut()) {
                out.push((format!("{prefix}.{i}.{pname}"), t));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Sequential<T>) -> Result<()> {
        for (a, b) in self.params.iter_mut().flatten().zip(other.params.iter().flatten()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.params.iter_mut().flatten().for_each(|t| t.scale(factor));
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|t| t.len()).sum()
    }
}
