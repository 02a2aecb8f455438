//! The three-pathway multiscale network.
//!
//! ```text
//! window ─┬─ conv 11 ─ relu ─ pool 3/2 floor ─ conv 11 ─ relu ─ pool 3/2 ceil ─┐
//!         ├─ conv  7 ─ relu ─ pool 3/2 floor ─ conv  7 ─ relu ─ pool 3/2 ceil ─┼─ concat
//!         └─ conv  3 ─ relu ─ pool 3/2 floor ─ conv  3 ─ relu ─ pool 3/2 ceil ─┘
//! concat ─ conv 3 ─ relu ─ pool 2/2 floor ─ flatten ─ dropout ─ linear ─ softmax
//! ```
//!
//! With a 65×65 window and the default widths the flattened feature vector
//! has 8192 entries and the network holds 2,856,932 parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::layers::{
    softmax, Conv2d, Dropout, Linear, MaxPool2d, Mode, Param, Relu, Rounding,
};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const NUM_PATHWAYS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Side of the square input window in pixels.
    pub window: usize,
    /// Kernel size of each pathway, large to small scale.
    pub kernels: [usize; NUM_PATHWAYS],
    /// Feature maps per pathway before `width_scale` is applied.
    pub maps: [usize; NUM_PATHWAYS],
    pub concat_maps: usize,
    pub concat_kernel: usize,
    /// Input length of the fully connected layer; must equal the flattened
    /// feature length implied by the other fields.
    pub fc_in: usize,
    pub classes: usize,
    pub dropout: f64,
    /// Multiplier applied to every map count (rounded, at least 1).
    pub width_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            window: 65,
            kernels: [11, 7, 3],
            maps: [128, 96, 64],
            concat_maps: 128,
            concat_kernel: 3,
            fc_in: 8192,
            classes: NUM_CLASSES,
            dropout: 0.5,
            width_scale: 1.0,
        }
    }
}

/// Extents `[channels, height, width]` of one sample at each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub pathway_stage1: [[usize; 3]; NUM_PATHWAYS],
    pub pathway_stage2: [[usize; 3]; NUM_PATHWAYS],
    pub concat: [usize; 3],
    pub fused: [usize; 3],
    pub pooled: [usize; 3],
    pub flatten: usize,
}

impl NetworkConfig {
    /// Default architecture shrunk by `width_scale` on a `window`-pixel input,
    /// with `fc_in` set to the resulting flatten length.
    pub fn reduced(width_scale: f64, window: usize) -> Result<Self> {
        let mut config = Self {
            window,
            width_scale,
            ..Self::default()
        };
        config.fc_in = config.shape_trace()?.flatten;
        Ok(config)
    }

    fn scaled(&self, maps: usize) -> usize {
        ((maps as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn pathway_maps(&self) -> [usize; NUM_PATHWAYS] {
        self.maps.map(|m| self.scaled(m))
    }

    pub fn fused_maps(&self) -> usize {
        self.scaled(self.concat_maps)
    }

    fn pools() -> (MaxPool2d, MaxPool2d, MaxPool2d) {
        (
            MaxPool2d::new(3, 2, Rounding::Floor),
            MaxPool2d::new(3, 2, Rounding::Ceil),
            MaxPool2d::new(2, 2, Rounding::Floor),
        )
    }

    /// Per-stage extents derived from the layer formulas alone.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config(format!(
                "width_scale {} must be positive",
                self.width_scale
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        let (p1, p2, p3) = Self::pools();
        let wrap = |e: Error| Error::Config(format!("window {} too small: {e}", self.window));
        let s1 = p1.output_extent(self.window).map_err(wrap)?;
        let s2 = p2.output_extent(s1).map_err(wrap)?;
        let s3 = p3.output_extent(s2).map_err(wrap)?;
        let maps = self.pathway_maps();
        let fused = self.fused_maps();
        Ok(ShapeTrace {
            pathway_stage1: maps.map(|m| [m, s1, s1]),
            pathway_stage2: maps.map(|m| [m, s2, s2]),
            concat: [maps.iter().sum(), s2, s2],
            fused: [fused, s2, s2],
            pooled: [fused, s3, s3],
            flatten: fused * s3 * s3,
        })
    }

    pub fn validate(&self) -> Result<ShapeTrace> {
        for &k in self.kernels.iter().chain([&self.concat_kernel]) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        if self.maps.contains(&0) || self.concat_maps == 0 {
            return Err(Error::Config("map counts must be >= 1".into()));
        }
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "classes must be {NUM_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let trace = self.shape_trace()?;
        if trace.flatten != self.fc_in {
            return Err(Error::Config(format!(
                "flattened feature length is {} but fc_in is {}",
                trace.flatten, self.fc_in
            )));
        }
        Ok(trace)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Prediction<T: Scalar> {
    pub probs: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Pathway<T: Scalar> {
    conv1: Conv2d<T>,
    relu1: Relu<T>,
    pool1: MaxPool2d,
    conv2: Conv2d<T>,
    relu2: Relu<T>,
    pool2: MaxPool2d,
}

impl<T: Scalar> Pathway<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.pool1.infer(&crate::layers::relu(&self.conv1.infer(x)?))?;
        self.pool2.infer(&crate::layers::relu(&self.conv2.infer(&x)?))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.conv1.forward(x)?;
        let x = self.pool1.forward(&self.relu1.forward(&x))?;
        let x = self.conv2.forward(&x)?;
        self.pool2.forward(&self.relu2.forward(&x))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu2.backward(&self.pool2.backward(g)?)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&self.pool1.backward(&g)?)?;
        self.conv1.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    pathways: Vec<Pathway<T>>,
    fuse: Conv2d<T>,
    fuse_relu: Relu<T>,
    fuse_pool: MaxPool2d,
    dropout: Dropout<T>,
    fc: Linear<T>,
    /// Pixel standardization learned from the training windows.
    pub stats: Option<Standardization>,
}

fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (b, _, h, w) = parts[0].dims4()?;
    let mut channels = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        channels += pc;
    }
    let mut data = Vec::with_capacity(b * channels * h * w);
    for s in 0..b {
        for p in parts {
            let per = p.len() / b;
            data.extend_from_slice(&p.data()[s * per..(s + 1) * per]);
        }
    }
    Tensor::from_vec(&[b, channels, h, w], data)
}

fn split_channels<T: Scalar>(whole: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (b, _, h, w) = whole.dims4()?;
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(b * c * h * w)).collect();
    for s in 0..b {
        let mut offset = s * total * h * w;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&whole.data()[offset..offset + c * h * w]);
            offset += c * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::from_vec(&[b, c, h, w], data))
        .collect()
}

impl<T: Scalar> Network<T> {
    /// Builds a freshly initialized network. Deterministic for a given RNG state.
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let maps = config.pathway_maps();
        let (pool1, pool2, pool3) = NetworkConfig::pools();
        let mut pathways = Vec::with_capacity(NUM_PATHWAYS);
        for (&k, &m) in config.kernels.iter().zip(&maps) {
            pathways.push(Pathway {
                conv1: Conv2d::new(1, m, k, rng)?,
                relu1: Relu::new(),
                pool1: pool1.clone(),
                conv2: Conv2d::new(m, m, k, rng)?,
                relu2: Relu::new(),
                pool2: pool2.clone(),
            });
        }
        let fuse = Conv2d::new(maps.iter().sum(), config.fused_maps(), config.concat_kernel, rng)?;
        let fc = Linear::new(config.fc_in, config.classes, rng)?;
        Ok(Self {
            dropout: Dropout::new(config.dropout)?,
            config,
            pathways,
            fuse,
            fuse_relu: Relu::new(),
            fuse_pool: pool3,
            fc,
            stats: None,
        })
    }

    /// Replaces the dropout rate in both the layer and the stored config.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        self.dropout = Dropout::new(p)?;
        self.config.dropout = p;
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Trainable parameters in declaration order: each pathway's two
    /// convolutions (weight, bias), the fusion convolution, the linear layer.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::with_capacity(4 * NUM_PATHWAYS + 4);
        for p in &self.pathways {
            out.extend([&p.conv1.weight, &p.conv1.bias, &p.conv2.weight, &p.conv2.bias]);
        }
        out.extend([&self.fuse.weight, &self.fuse.bias, &self.fc.weight, &self.fc.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(4 * NUM_PATHWAYS + 4);
        for p in &mut self.pathways {
            out.extend([
                &mut p.conv1.weight,
                &mut p.conv1.bias,
                &mut p.conv2.weight,
                &mut p.conv2.bias,
            ]);
        }
        out.extend([
            &mut self.fuse.weight,
            &mut self.fuse.bias,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameter count of each layer: pathway convolutions, fusion, linear.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self
            .pathways
            .iter()
            .flat_map(|p| [p.conv1.param_count(), p.conv2.param_count()])
            .collect();
        counts.push(self.fuse.param_count());
        counts.push(self.fc.param_count());
        counts
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Replaces every parameter tensor, checking shapes against the current ones.
    pub fn load_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let mut params = self.params_mut();
        if tensors.len() != params.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, got {}",
                params.len(),
                tensors.len()
            )));
        }
        for (i, (p, t)) in params.iter().zip(&tensors).enumerate() {
            if p.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {:?}, got {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            p.value = t;
        }
        Ok(())
    }

    fn check_input(&self, windows: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = windows.dims4()?;
        let side = self.config.window;
        if (c, h, w) != (1, side, side) {
            return Err(Error::Shape(format!(
                "network expects [B, 1, {side}, {side}] windows, got {:?}",
                windows.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass. Touches no cached state, so it can run from
    /// many threads at once.
    pub fn infer(&self, windows: &Tensor<T>) -> Result<Prediction<T>> {
        self.check_input(windows)?;
        let parts = self
            .pathways
            .iter()
            .map(|p| p.infer(windows))
            .collect::<Result<Vec<_>>>()?;
        let x = concat_channels(&parts)?;
        let x = self.fuse_pool.infer(&crate::layers::relu(&self.fuse.infer(&x)?))?;
        let logits = self.fc.infer(&x)?;
        Ok(Prediction {
            probs: softmax(&logits)?,
            logits,
        })
    }

    /// Forward pass that caches activations for [`Self::backward`]. Dropout
    /// draws from `rng` in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        windows: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Prediction<T>> {
        self.check_input(windows)?;
        let parts = self
            .pathways
            .iter_mut()
            .map(|p| p.forward(windows))
            .collect::<Result<Vec<_>>>()?;
        let x = concat_channels(&parts)?;
        let x = self.fuse.forward(&x)?;
        let x = self.fuse_pool.forward(&self.fuse_relu.forward(&x))?;
        let (b, c, h, w) = x.dims4()?;
        let x = x.reshape(&[b, c * h * w])?;
        let x = self.dropout.forward(&x, mode, rng)?;
        let logits = self.fc.forward(&x)?;
        Ok(Prediction {
            probs: softmax(&logits)?,
            logits,
        })
    }

    /// Backpropagates `∂L/∂logits` through the cached forward pass,
    /// accumulating into every parameter gradient. Returns `∂L/∂windows`.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad_logits)?;
        let g = self.dropout.backward(&g)?;
        let trace = self.config.shape_trace()?;
        let [c, h, w] = trace.pooled;
        let g = g.reshape(&[grad_logits.shape()[0], c, h, w])?;
        let g = self.fuse_relu.backward(&self.fuse_pool.backward(&g)?)?;
        let g = self.fuse.backward(&g)?;
        let split = split_channels(&g, &self.config.pathway_maps())?;
        let mut grad_input: Option<Tensor<T>> = None;
        for (p, g) in self.pathways.iter_mut().zip(&split) {
            let gi = p.backward(g)?;
            grad_input = Some(match grad_input {
                None => gi,
                Some(acc) => acc.add(&gi)?,
            });
        }
        Ok(grad_input.expect("three pathways"))
    }

    /// Per-stage extents observed in an actual forward pass over one window.
    pub fn observed_shapes(&self) -> Result<ShapeTrace> {
        let side = self.config.window;
        let x = Tensor::zeros(&[1, 1, side, side])?;
        let mut stage1 = [[0; 3]; NUM_PATHWAYS];
        let mut stage2 = [[0; 3]; NUM_PATHWAYS];
        let mut parts = Vec::new();
        for (i, p) in self.pathways.iter().enumerate() {
            let a = p.pool1.infer(&crate::layers::relu(&p.conv1.infer(&x)?))?;
            let b = p.pool2.infer(&crate::layers::relu(&p.conv2.infer(&a)?))?;
            stage1[i] = dims3(&a)?;
            stage2[i] = dims3(&b)?;
            parts.push(b);
        }
        let cat = concat_channels(&parts)?;
        let fused = crate::layers::relu(&self.fuse.infer(&cat)?);
        let pooled = self.fuse_pool.infer(&fused)?;
        Ok(ShapeTrace {
            pathway_stage1: stage1,
            pathway_stage2: stage2,
            concat: dims3(&cat)?,
            fused: dims3(&fused)?,
            pooled: dims3(&pooled)?,
            flatten: pooled.len(),
        })
    }

    /// Copies the network into another precision. Optimizer-free state only.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out = Network::<U>::build(self.config.clone(), &mut rng)?;
        out.load_params(self.params().iter().map(|p| p.value.cast()).collect())?;
        out.stats = self.stats;
        Ok(out)
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    let (_, c, h, w) = t.dims4()?;
    Ok([c, h, w])
}
