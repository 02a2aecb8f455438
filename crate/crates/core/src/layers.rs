//! Forward and analytic backward passes for the layer kinds the multiscale
//! network is assembled from.
//!
//! Each layer comes in two flavours: a pure function (`conv2d`, `maxpool`,
//! ...) that the oracle tests target directly, and a stateful layer struct
//! that caches whatever its backward pass needs. `infer` never touches the
//! cache, so a network in eval mode can be shared between threads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Train/eval switch. Only dropout behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::new(value.shape(), T::zero()).expect("shape already validated");
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn accumulate(&mut self, delta: &[T]) {
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Uniform initializer on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-a..=a)))
        .collect();
    Tensor::from_vec(shape, data)
}

fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer} backward called before forward"))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    pad: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Valid output columns `j` for kernel column offset `v`.
    fn col_range(&self, v: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(v).min(self.width);
        let hi = (self.width + self.pad).saturating_sub(v).min(self.width);
        (lo, hi.max(lo))
    }

    /// Unfolds one `C×H×W` sample into a `(C·k·k) × (H·W)` matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let (k, pad, h, w, hw) = (self.k, self.pad, self.height, self.width, self.pixels());
        cols.fill(T::zero());
        for c in 0..self.channels {
            let plane = &sample[c * hw..(c + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    let row = &mut cols[((c * k + u) * k + v) * hw..][..hw];
                    let (j0, j1) = self.col_range(v);
                    if j0 == j1 {
                        continue;
                    }
                    for i in 0..h {
                        let Some(ii) = (i + u).checked_sub(pad).filter(|&ii| ii < h) else {
                            continue;
                        };
                        let src = &plane[ii * w + j0 + v - pad..ii * w + j1 + v - pad];
                        row[i * w + j0..i * w + j1].copy_from_slice(src);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto a sample.
    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let (k, pad, h, w, hw) = (self.k, self.pad, self.height, self.width, self.pixels());
        for c in 0..self.channels {
            let plane = &mut sample[c * hw..(c + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    let row = &cols[((c * k + u) * k + v) * hw..][..hw];
                    let (j0, j1) = self.col_range(v);
                    if j0 == j1 {
                        continue;
                    }
                    for i in 0..h {
                        let Some(ii) = (i + u).checked_sub(pad).filter(|&ii| ii < h) else {
                            continue;
                        };
                        let dst = &mut plane[ii * w + j0 + v - pad..ii * w + j1 + v - pad];
                        for (d, &g) in dst.iter_mut().zip(&row[i * w + j0..i * w + j1]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, ConvGeometry)> {
    let (b, c, h, w) = input.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if wc != c {
        return Err(Error::Shape(format!(
            "convolution expects {wc} input channels, got {c}"
        )));
    }
    let geom = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        k,
        pad: (k - 1) / 2,
    };
    Ok((b, o, geom))
}

/// Stride-1 cross-correlation with zero "same" padding:
/// `out[b,o,i,j] = bias[o] + Σ w[o,c,u,v]·in[b,c,i+u−p,j+v−p]`, `p = (k−1)/2`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, out_ch, geom) = conv_geometry(input, weight)?;
    if bias.len() != out_ch {
        return Err(Error::Shape(format!(
            "bias has {} entries for {out_ch} output channels",
            bias.len()
        )));
    }
    let (rows, hw) = (geom.rows(), geom.pixels());
    let mut out = Tensor::zeros(&[batch, out_ch, geom.height, geom.width])?;
    let mut cols = vec![T::zero(); rows * hw];
    let in_stride = geom.channels * hw;
    for s in 0..batch {
        geom.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut out.data_mut()[s * out_ch * hw..(s + 1) * out_ch * hw];
        for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        T::gemm(
            out_ch,
            rows,
            hw,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] given the forward input and `∂L/∂out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (batch, out_ch, geom) = conv_geometry(input, weight)?;
    let expected = [batch, out_ch, geom.height, geom.width];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, forward output was {expected:?}",
            grad_out.shape()
        )));
    }
    let (rows, hw) = (geom.rows(), geom.pixels());
    let mut grad_input = Tensor::zeros(input.shape())?;
    let mut grad_weight = Tensor::zeros(weight.shape())?;
    let mut grad_bias = Tensor::zeros(&[out_ch])?;
    let mut cols = vec![T::zero(); rows * hw];
    let in_stride = geom.channels * hw;
    for s in 0..batch {
        let g = &grad_out.data()[s * out_ch * hw..(s + 1) * out_ch * hw];
        for (o, plane) in g.chunks_exact(hw).enumerate() {
            grad_bias.data_mut()[o] += plane.iter().copied().sum::<T>();
        }
        geom.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        // dW += g · colsᵀ
        T::gemm(
            out_ch,
            hw,
            rows,
            T::one(),
            g,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::one(),
            grad_weight.data_mut(),
            (rows as isize, 1),
        );
        // dcols = Wᵀ · g
        T::gemm(
            rows,
            out_ch,
            hw,
            T::one(),
            weight.data(),
            (1, rows as isize),
            g,
            (hw as isize, 1),
            T::zero(),
            &mut cols,
            (hw as isize, 1),
        );
        geom.col2im(
            &cols,
            &mut grad_input.data_mut()[s * in_stride..(s + 1) * in_stride],
        );
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        let weight = glorot(&[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k, rng)?;
        Self::from_parts(weight, Tensor::zeros(&[out_ch])?)
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (o, _, k, k2) = weight.dims4()?;
        if k != k2 || k % 2 == 0 || bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "invalid conv parameters: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.weight.value, &self.bias.value)
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `∂L/∂input`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let grads = conv2d_backward(input, &self.weight.value, grad_out)?;
        self.weight.accumulate(grads.weight.data());
        self.bias.accumulate(grads.bias.data());
        Ok(grads.input)
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// How the pooled extent is rounded when the windows do not tile the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Floor,
    Ceil,
}

/// Output extent of a pooling window along one axis.
///
/// In ceil mode the last window may hang off the input; only its in-bounds
/// part participates, and a window that would start past the end is dropped.
pub fn pool_extent(input: usize, k: usize, stride: usize, rounding: Rounding) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::Parameter("pool window and stride must be >= 1".into()));
    }
    let span = input as isize - k as isize;
    let s = stride as isize;
    let steps = match rounding {
        Rounding::Floor => span.div_euclid(s),
        Rounding::Ceil => -((-span).div_euclid(s)),
    };
    let mut out = steps + 1;
    if rounding == Rounding::Ceil && out > 0 && (out - 1) * s >= input as isize {
        out -= 1;
    }
    if out < 1 {
        return Err(Error::Shape(format!(
            "pooling {k}/{stride} ({rounding:?}) leaves no output for extent {input}"
        )));
    }
    Ok(out as usize)
}

/// Per-window maxima plus, for every output element, the flat input index it
/// was taken from. Ties go to the first element in row-major scan order.
pub fn maxpool<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    rounding: Rounding,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    let oh = pool_extent(h, k, stride, rounding)?;
    let ow = pool_extent(w, k, stride, rounding)?;
    let mut out = Tensor::zeros(&[b, c, oh, ow])?;
    let mut argmax = Vec::with_capacity(out.len());
    let data = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oi in 0..oh {
            let (r0, r1) = (oi * stride, (oi * stride + k).min(h));
            for oj in 0..ow {
                let (c0, c1) = (oj * stride, (oj * stride + k).min(w));
                let mut best = base + r0 * w + c0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let at = base + r * w + col;
                        if data[at] > data[best] {
                            best = at;
                        }
                    }
                }
                out.data_mut()[argmax.len()] = data[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its argmax input position, accumulating
/// where windows overlap.
pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "grad_out has {} elements, forward produced {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        grad.data_mut()[at] += g;
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub rounding: Rounding,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, rounding: Rounding) -> Self {
        Self {
            k,
            stride,
            rounding,
            cache: None,
        }
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        pool_extent(input, self.k, self.stride, self.rounding)
    }

    pub fn infer<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        maxpool(input, self.k, self.stride, self.rounding).map(|(out, _)| out)
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, argmax) = maxpool(input, self.k, self.stride, self.rounding)?;
        self.cache = Some((input.shape().to_vec(), argmax));
        Ok(out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| missing_cache("maxpool"))?;
        maxpool_backward(shape, argmax, grad_out)
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu backward: input {:?}, grad {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Tensor<T> {
        self.cache = Some(input.clone());
        relu(input)
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("relu"))?;
        relu_backward(input, grad_out)
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let weight = glorot(&[out_features, in_features], in_features, out_features, rng)?;
        Self::from_parts(weight, Tensor::zeros(&[out_features])?)
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match *weight.shape() {
            [o, _] if bias.shape() == [o] => Ok(Self {
                weight: Param::new(weight),
                bias: Param::new(bias),
                cache: None,
            }),
            _ => Err(Error::Shape(format!(
                "invalid linear parameters: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    /// Flattens everything after the batch axis and applies `x·Wᵀ + b`.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, features) = (input.shape()[0], input.len() / input.shape()[0]);
        let (out_f, in_f) = (self.out_features(), self.in_features());
        if features != in_f {
            return Err(Error::Shape(format!(
                "linear layer expects {in_f} features, got {features}"
            )));
        }
        let mut out = Tensor::zeros(&[batch, out_f])?;
        for row in out.data_mut().chunks_exact_mut(out_f) {
            row.copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            batch,
            in_f,
            out_f,
            T::one(),
            input.data(),
            (in_f as isize, 1),
            self.weight.value.data(),
            (1, in_f as isize),
            T::one(),
            out.data_mut(),
            (out_f as isize, 1),
        );
        Ok(out)
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `∂L/∂input` in the
    /// forward input's shape.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let batch = input.shape()[0];
        let (out_f, in_f) = (self.out_features(), self.in_features());
        if grad_out.shape() != [batch, out_f] {
            return Err(Error::Shape(format!(
                "linear grad_out shape {:?}, expected [{batch}, {out_f}]",
                grad_out.shape()
            )));
        }
        for row in grad_out.data().chunks_exact(out_f) {
            self.bias.accumulate(row);
        }
        T::gemm(
            out_f,
            batch,
            in_f,
            T::one(),
            grad_out.data(),
            (1, out_f as isize),
            input.data(),
            (in_f as isize, 1),
            T::one(),
            self.weight.grad.data_mut(),
            (in_f as isize, 1),
        );
        let mut grad_in = Tensor::zeros(input.shape())?;
        T::gemm(
            batch,
            out_f,
            in_f,
            T::one(),
            grad_out.data(),
            (out_f as isize, 1),
            self.weight.value.data(),
            (in_f as isize, 1),
            T::zero(),
            grad_in.data_mut(),
            (in_f as isize, 1),
        );
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept activations are scaled by `1/(1−p)` at train time so
/// eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar> {
    p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p = {p} must lie in [0, 1)")));
        }
        Ok(Self { p, mask: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            self.mask = None;
            return Ok(input.clone());
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..input.len())
            .map(|_| {
                if rng.gen::<f64>() >= self.p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.mask = Some(mask);
        Tensor::from_vec(input.shape(), data)
    }

    /// Applies the cached mask; after an eval-mode forward this is the identity.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            None => Ok(grad_out.clone()),
            Some(mask) if mask.len() == grad_out.len() => {
                let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(grad_out.shape(), data)
            }
            Some(mask) => Err(Error::Shape(format!(
                "dropout mask has {} elements, grad has {}",
                mask.len(),
                grad_out.len()
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SoftmaxLoss<T: Scalar> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    pub probs: Tensor<T>,
    /// `(probs − onehot) / B`
    pub grad_logits: Tensor<T>,
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, classes] = logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax expects [batch, classes], got {:?}",
            logits.shape()
        )));
    };
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(probs)
}

pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<SoftmaxLoss<T>> {
    let probs = softmax(logits)?;
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("label {bad} outside 0..{classes}")));
    }
    let inv_batch = T::one() / T::from_usize(batch).unwrap();
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    let logits_data = logits.data();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits_data[b * classes..(b + 1) * classes];
        // log p = x_l − max − log Σ exp(x − max), exact even when p underflows
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_norm = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        loss -= (row[label] - max - log_norm).as_f64();
        grad.data_mut()[b * classes + label] -= T::one();
    }
    for g in grad.data_mut() {
        *g = *g * inv_batch;
    }
    Ok(SoftmaxLoss {
        loss: T::from_f64_lossy(loss / batch as f64),
        probs,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop cross-correlation with zero padding.
    fn naive_conv(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
        let (b, c, h, w) = input.dims4().unwrap();
        let (o, _, k, _) = weight.dims4().unwrap();
        let p = (k - 1) as isize / 2;
        let mut out = Tensor::zeros(&[b, o, h, w]).unwrap();
        for bi in 0..b {
            for oi in 0..o {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = bias[oi];
                        for ci in 0..c {
                            for u in 0..k {
                                for v in 0..k {
                                    let (ii, jj) = (i as isize + u as isize - p, j as isize + v as isize - p);
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += weight.get4(oi, ci, u, v)
                                            * input.get4(bi, ci, ii as usize, jj as usize);
                                    }
                                }
                            }
                        }
                        out.set4(bi, oi, i, j, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_kernel() {
        let input = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let weight = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = conv2d(&input, &weight, &bias).unwrap();
        assert_eq!(out.get4(0, 0, 1, 1), 45.0);
        assert_eq!(out.get4(0, 0, 0, 0), 12.0);
        assert_eq!(out, naive_conv(&input, &weight, &[0.0]));
    }

    #[test]
    fn conv_identity_and_bias_only() {
        let mut r = rng();
        let input = random_tensor(&[2, 1, 5, 4], &mut r);
        let weight = Tensor::new(&[1, 1, 1, 1], 1.0).unwrap();
        let out = conv2d(&input, &weight, &Tensor::zeros(&[1]).unwrap()).unwrap();
        assert_eq!(out, input);

        let zeros = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let weight = random_tensor(&[3, 2, 3, 3], &mut r);
        let bias = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&zeros, &weight, &bias).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(out.get4(0, o, i, j), bias.data()[o]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for &(c, o, k, h, w) in &[(2, 3, 3, 6, 5), (1, 2, 7, 5, 9), (3, 2, 11, 8, 8)] {
            let input = random_tensor(&[2, c, h, w], &mut r);
            let weight = random_tensor(&[o, c, k, k], &mut r);
            let bias = random_tensor(&[o], &mut r);
            let fast = conv2d(&input, &weight, &bias).unwrap();
            let slow = naive_conv(&input, &weight, bias.data());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let weight = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(conv2d(&input, &weight, &bias), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut r = rng();
        let x = random_tensor(&[1, 2, 6, 6], &mut r);
        let y = random_tensor(&[1, 2, 6, 6], &mut r);
        let weight = random_tensor(&[2, 2, 3, 3], &mut r);
        let zero = Tensor::zeros(&[2]).unwrap();
        let (a, b) = (1.7, -0.3);
        let combo = x.map(|v| a * v).add(&y.map(|v| b * v)).unwrap();
        let lhs = conv2d(&combo, &weight, &zero).unwrap();
        let rhs = conv2d(&x, &weight, &zero)
            .unwrap()
            .map(|v| a * v)
            .add(&conv2d(&y, &weight, &zero).unwrap().map(|v| b * v))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_bias_grad_is_channel_sum() {
        let mut r = rng();
        let input = random_tensor(&[2, 1, 4, 4], &mut r);
        let weight = random_tensor(&[3, 1, 3, 3], &mut r);
        let g = random_tensor(&[2, 3, 4, 4], &mut r);
        let grads = conv2d_backward(&input, &weight, &g).unwrap();
        for o in 0..3 {
            let mut want = 0.0;
            for b in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        want += g.get4(b, o, i, j);
                    }
                }
            }
            assert!((grads.bias.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_single_pixel_grad_stamps_flipped_kernel() {
        let mut r = rng();
        let input = random_tensor(&[1, 1, 5, 5], &mut r);
        let weight = random_tensor(&[1, 1, 3, 3], &mut r);
        let mut g = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        g.set4(0, 0, 2, 2, 1.0);
        let grads = conv2d_backward(&input, &weight, &g).unwrap();
        // out(2,2) = Σ w(u,v)·in(1+u, 1+v), so ∂/∂in(a,b) = w(a−1, b−1)
        for a in 0..5 {
            for b in 0..5 {
                let want = if (1..=3).contains(&a) && (1..=3).contains(&b) {
                    weight.get4(0, 0, a - 1, b - 1)
                } else {
                    0.0
                };
                assert_eq!(grads.input.get4(0, 0, a, b), want);
            }
        }
        // the same stamp from finite differences on the scalar out(2,2)
        let bias = Tensor::zeros(&[1]).unwrap();
        for at in 0..25 {
            let numeric = central_difference(
                |x: &Tensor<f64>| conv2d(x, &weight, &bias).unwrap().get4(0, 0, 2, 2),
                &input,
                at,
                1e-5,
            );
            assert!((numeric - grads.input.data()[at]).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng();
        let input = random_tensor(&[1, 2, 8, 8], &mut r);
        let weight = random_tensor(&[3, 2, 3, 3], &mut r);
        let bias = random_tensor(&[3], &mut r);
        let probe = random_tensor(&[1, 3, 8, 8], &mut r);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d(x, w, b).unwrap().mul(&probe).unwrap().data().iter().sum()
        };
        let grads = conv2d_backward(&input, &weight, &probe).unwrap();
        let mut worst: f64 = 0.0;
        for at in 0..input.len() {
            let n = central_difference(|x| loss(x, &weight, &bias), &input, at, 1e-5);
            worst = worst.max(relative_error(grads.input.data()[at], n));
        }
        for at in 0..weight.len() {
            let n = central_difference(|w| loss(&input, w, &bias), &weight, at, 1e-5);
            worst = worst.max(relative_error(grads.weight.data()[at], n));
        }
        for at in 0..bias.len() {
            let n = central_difference(|b| loss(&input, &weight, b), &bias, at, 1e-5);
            worst = worst.max(relative_error(grads.bias.data()[at], n));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn conv_backward_before_forward() {
        let mut conv = Conv2d::<f32>::new(1, 1, 3, &mut rng()).unwrap();
        let g = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn pool_extents() {
        assert_eq!(pool_extent(65, 3, 2, Rounding::Floor).unwrap(), 32);
        assert_eq!(pool_extent(32, 3, 2, Rounding::Ceil).unwrap(), 16);
        assert_eq!(pool_extent(16, 2, 2, Rounding::Floor).unwrap(), 8);
        assert_eq!(pool_extent(33, 3, 2, Rounding::Floor).unwrap(), 16);
        assert_eq!(pool_extent(16, 3, 2, Rounding::Ceil).unwrap(), 8);
        assert_eq!(pool_extent(2, 3, 2, Rounding::Ceil).unwrap(), 1);
        assert!(pool_extent(2, 3, 2, Rounding::Floor).is_err());
    }

    #[test]
    fn pool_decreasing_input_routes_to_window_start() {
        let data: Vec<f64> = (0..25).rev().map(f64::from).collect();
        let input = Tensor::from_vec(&[1, 1, 5, 5], data).unwrap();
        let (out, argmax) = maxpool(&input, 3, 2, Rounding::Floor).unwrap();
        assert_eq!(argmax, vec![0, 2, 10, 12]);
        assert_eq!(out.data(), &[24.0, 22.0, 14.0, 12.0]);
        let g = Tensor::new(&[1, 1, 2, 2], 1.0).unwrap();
        let grad = maxpool_backward(input.shape(), &argmax, &g).unwrap();
        assert_eq!(grad.data().iter().sum::<f64>(), 4.0);
        for at in [0, 2, 10, 12] {
            assert_eq!(grad.data()[at], 1.0);
        }
    }

    #[test]
    fn pool_ties_go_to_first_scan_element() {
        let input = Tensor::new(&[1, 1, 4, 4], 3.0f64).unwrap();
        let (_, argmax) = maxpool(&input, 3, 2, Rounding::Ceil).unwrap();
        // windows start at rows/cols 0 and 2; the second one is clipped
        assert_eq!(argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn pool_overlapping_windows_accumulate() {
        let mut input = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        input.set4(0, 0, 2, 2, 10.0f64);
        let (_, argmax) = maxpool(&input, 3, 2, Rounding::Floor).unwrap();
        let g = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grad = maxpool_backward(input.shape(), &argmax, &g).unwrap();
        assert_eq!(grad.get4(0, 0, 2, 2), 10.0);
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut r = rng();
        for rounding in [Rounding::Floor, Rounding::Ceil] {
            let input = random_tensor(&[2, 2, 7, 6], &mut r);
            let (out, argmax) = maxpool(&input, 3, 2, rounding).unwrap();
            let probe = random_tensor(out.shape(), &mut r);
            let grad = maxpool_backward(input.shape(), &argmax, &probe).unwrap();
            let loss = |x: &Tensor<f64>| -> f64 {
                maxpool(x, 3, 2, rounding).unwrap().0.mul(&probe).unwrap().data().iter().sum()
            };
            for at in 0..input.len() {
                let n = central_difference(loss, &input, at, 1e-5);
                assert!(relative_error(grad.data()[at], n) < 1e-4);
            }
        }
    }

    #[test]
    fn pool_backward_before_forward() {
        let pool = MaxPool2d::new(2, 2, Rounding::Floor);
        let g = Tensor::<f32>::zeros(&[1, 1, 1, 1]).unwrap();
        assert!(matches!(pool.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn relu_forward_backward() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::new(&[3], 5.0f32).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
        let pos = Tensor::from_vec(&[3], vec![0.0f32, 1.0, 3.5]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn linear_identity_and_bias_grad() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let mut layer = Linear::from_parts(
            Tensor::from_vec(&[3, 3], eye).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
        )
        .unwrap();
        let x = random_tensor(&[2, 3], &mut rng());
        assert_eq!(layer.forward(&x).unwrap(), x);
        let g = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        layer.backward(&g).unwrap();
        assert_eq!(layer.bias.grad.data(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn linear_length_mismatch() {
        let layer = Linear::<f32>::new(8, 4, &mut rng()).unwrap();
        let x = Tensor::zeros(&[2, 7]).unwrap();
        assert!(matches!(layer.infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng();
        let mut layer = Linear::<f64>::new(8192, 4, &mut r).unwrap();
        let x = random_tensor(&[3, 8192], &mut r);
        let probe = random_tensor(&[3, 4], &mut r);
        layer.forward(&x).unwrap();
        let gx = layer.backward(&probe).unwrap();
        let w = layer.weight.value.clone();
        let b = layer.bias.value.clone();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let l = Linear::from_parts(w.clone(), b.clone()).unwrap();
            l.infer(x).unwrap().mul(&probe).unwrap().data().iter().sum()
        };
        let mut worst: f64 = 0.0;
        for at in (0..x.len()).step_by(97) {
            let n = central_difference(|x| loss(x, &w, &b), &x, at, 1e-5);
            worst = worst.max(relative_error(gx.data()[at], n));
        }
        for at in (0..w.len()).step_by(131) {
            let n = central_difference(|w| loss(&x, w, &b), &w, at, 1e-5);
            worst = worst.max(relative_error(layer.weight.grad.data()[at], n));
        }
        for at in 0..4 {
            let n = central_difference(|b| loss(&x, &w, b), &b, at, 1e-5);
            worst = worst.max(relative_error(layer.bias.grad.data()[at], n));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn dropout_modes() {
        let x = random_tensor(&[4, 10], &mut rng());
        let mut d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng()).unwrap(), x);
        let mut d0 = Dropout::new(0.0).unwrap();
        assert_eq!(d0.forward(&x, Mode::Train, &mut rng()).unwrap(), x);
        assert!(matches!(Dropout::<f32>::new(1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let x = Tensor::new(&[1_000_000], 1.0f32).unwrap();
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward(&x, Mode::Train, &mut rng()).unwrap();
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 1e6;
        assert!((0.995..=1.005).contains(&mean), "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let g = Tensor::new(&[1_000_000], 1.0f32).unwrap();
        assert_eq!(d.backward(&g).unwrap(), y);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let logits = Tensor::new(&[2, 4], 0.3f64).unwrap();
        let out = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!(out.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);

        let logits = Tensor::from_vec(&[1, 4], vec![1000.0f32, 0.0, 0.0, 0.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(out.loss.is_finite() && out.loss.abs() < 1e-6);
        assert!(out.probs.data().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_label() {
        let logits = Tensor::<f32>::zeros(&[1, 4]).unwrap();
        assert!(matches!(softmax_cross_entropy(&logits, &[4]), Err(Error::Label(_))));
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut r = rng();
        let logits = random_tensor(&[5, 4], &mut r).map(|v| 3.0 * v);
        let labels = [0, 3, 1, 2, 2];
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        for row in out.probs.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for at in 0..logits.len() {
            let n = central_difference(
                |x| softmax_cross_entropy(x, &labels).unwrap().loss,
                &logits,
                at,
                1e-5,
            );
            assert!(relative_error(out.grad_logits.data()[at], n) < 1e-4);
        }
    }
}
