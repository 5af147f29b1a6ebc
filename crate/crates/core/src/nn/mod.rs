//! Differentiable classifiers with exact reverse-mode gradients.
//!
//! Three fixed architectures are supported: a linear softmax model, a ReLU
//! multilayer perceptron, and a two-convolution/two-dense CNN. Parameters are
//! stored as named segments tagged with their layer index and role so that
//! gradient norms can be restricted to biases, weights, or the last layer.
//!
//! Images are laid out height × width × channels. Convolutions are
//! valid-padding cross-correlations with stride 1, pooling is 2×2 with
//! stride 2 (trailing odd rows/columns are dropped, ties go to the first
//! element in row-major window order).

mod gemm;
pub mod loss;
mod ops;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::Tensor;

pub use loss::{cross_entropy, per_example_losses};

/// Shape hyperparameters of the small CNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden: usize,
}

impl CnnShape {
    /// 5×5×8 conv, pool, 5×5×16 conv, pool, dense 128, dense classes.
    pub fn mnist() -> Self {
        CnnShape {
            height: 28,
            width: 28,
            channels: 1,
            kernel: 5,
            conv1_filters: 8,
            conv2_filters: 16,
            hidden: 128,
        }
    }

    fn conv1_out(&self) -> (usize, usize) {
        (self.height + 1 - self.kernel, self.width + 1 - self.kernel)
    }

    fn pool1_out(&self) -> (usize, usize) {
        let (h, w) = self.conv1_out();
        (h / 2, w / 2)
    }

    fn conv2_out(&self) -> (usize, usize) {
        let (h, w) = self.pool1_out();
        (h + 1 - self.kernel, w + 1 - self.kernel)
    }

    fn flat_features(&self) -> usize {
        let (h, w) = self.conv2_out();
        (h / 2) * (w / 2) * self.conv2_filters
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.height,
            self.width,
            self.channels,
            self.kernel,
            self.conv1_filters,
            self.conv2_filters,
            self.hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::domain(format!("CNN shape has a zero field: {self:?}")));
        }
        let fits = self.height >= self.kernel && self.width >= self.kernel && {
            let (h, w) = self.conv1_out();
            h >= 2 && w >= 2 && {
                let (h, w) = self.pool1_out();
                h >= self.kernel && w >= self.kernel && {
                    let (h, w) = self.conv2_out();
                    h >= 2 && w >= 2
                }
            }
        };
        if !fits {
            return Err(Error::domain(format!(
                "input {}×{} too small for kernel {} with two conv/pool stages",
                self.height, self.width, self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Linear { input_dim: usize },
    Mlp { input_dim: usize, hidden: Vec<usize> },
    SmallCnn(CnnShape),
}

impl Architecture {
    /// Number of input values per example.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Linear { input_dim } | Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::SmallCnn(s) => s.height * s.width * s.channels,
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self, class_count: usize) -> usize {
        match self {
            Architecture::Linear { input_dim } => (input_dim + 1) * class_count,
            Architecture::Mlp { input_dim, hidden } => {
                let mut prev = *input_dim;
                let mut total = 0;
                for &h in hidden.iter().chain(std::iter::once(&class_count)) {
                    total += (prev + 1) * h;
                    prev = h;
                }
                total
            }
            Architecture::SmallCnn(s) => {
                let k2 = s.kernel * s.kernel;
                (k2 * s.channels + 1) * s.conv1_filters
                    + (k2 * s.conv1_filters + 1) * s.conv2_filters
                    + (s.flat_features() + 1) * s.hidden
                    + (s.hidden + 1) * class_count
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Linear { input_dim } if *input_dim == 0 => {
                Err(Error::domain("linear model needs a positive input dimension"))
            }
            Architecture::Mlp { input_dim, hidden } if *input_dim == 0 || hidden.contains(&0) => {
                Err(Error::domain("MLP dimensions must be positive"))
            }
            Architecture::SmallCnn(s) => s.validate(),
            _ => Ok(()),
        }
    }

    /// Layer program for this architecture. Segment `2l` is the weight and
    /// `2l + 1` the bias of parametric layer `l`.
    fn plan(&self, class_count: usize) -> Vec<ops::Op> {
        use ops::Op;
        let dense = |layer: usize, input: usize, output: usize| Op::Dense {
            layer,
            input,
            output,
        };
        match self {
            Architecture::Linear { input_dim } => vec![dense(0, *input_dim, class_count)],
            Architecture::Mlp { input_dim, hidden } => {
                let mut plan = Vec::new();
                let mut prev = *input_dim;
                for (l, &h) in hidden.iter().enumerate() {
                    plan.push(dense(l, prev, h));
                    plan.push(Op::Relu);
                    prev = h;
                }
                plan.push(dense(hidden.len(), prev, class_count));
                plan
            }
            Architecture::SmallCnn(s) => {
                let (h1, w1) = s.conv1_out();
                let (h2, w2) = s.conv2_out();
                let (p1h, p1w) = s.pool1_out();
                vec![
                    Op::Conv(ops::ConvGeom {
                        layer: 0,
                        height: s.height,
                        width: s.width,
                        channels: s.channels,
                        kernel: s.kernel,
                        filters: s.conv1_filters,
                    }),
                    Op::Relu,
                    Op::MaxPool {
                        height: h1,
                        width: w1,
                        channels: s.conv1_filters,
                    },
                    Op::Conv(ops::ConvGeom {
                        layer: 1,
                        height: p1h,
                        width: p1w,
                        channels: s.conv1_filters,
                        kernel: s.kernel,
                        filters: s.conv2_filters,
                    }),
                    Op::Relu,
                    Op::MaxPool {
                        height: h2,
                        width: w2,
                        channels: s.conv2_filters,
                    },
                    dense(2, s.flat_features(), s.hidden),
                    Op::Relu,
                    dense(3, s.hidden, class_count),
                ]
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear { input_dim } => write!(f, "linear({input_dim})"),
            Architecture::Mlp { input_dim, hidden } => write!(f, "mlp({input_dim};{hidden:?})"),
            Architecture::SmallCnn(s) => write!(
                f,
                "cnn({}x{}x{};k{};{}-{}-{})",
                s.height, s.width, s.channels, s.kernel, s.conv1_filters, s.conv2_filters, s.hidden
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Weight,
    Bias,
}

/// Layer/role tag carried by both parameters and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTag {
    pub layer_index: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSegment {
    pub name: String,
    pub tag: SegmentTag,
    pub values: Tensor,
}

/// Gradient with the same segment partition as its model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    tags: Vec<SegmentTag>,
    values: Vec<Vec<f64>>,
}

impl GradientVector {
    /// Build a gradient from explicit segments. Mostly useful in tests.
    pub fn from_segments(segments: Vec<(SegmentTag, Vec<f64>)>) -> Result<Self> {
        let (tags, values): (Vec<_>, Vec<_>) = segments.into_iter().unzip();
        let g = GradientVector { tags, values };
        g.check_finite()?;
        Ok(g)
    }

    fn zeros_like(model: &Model) -> Self {
        GradientVector {
            tags: model.segments.iter().map(|s| s.tag).collect(),
            values: model.segments.iter().map(|s| vec![0.0; s.values.len()]).collect(),
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = (SegmentTag, &[f64])> {
        self.tags.iter().copied().zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn add_assign(&mut self, other: &GradientVector) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::dim("gradient partitions differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    fn congruent(&self, other: &GradientVector) -> bool {
        self.tags == other.tags
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite gradient".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    class_count: usize,
    segments: Vec<ParameterSegment>,
}

impl Model {
    /// Model with every parameter set to zero.
    pub fn zeros(architecture: Architecture, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::domain("a classifier needs at least two classes"));
        }
        architecture.validate()?;
        let mut segments = Vec::new();
        for op in architecture.plan(class_count) {
            let Some((layer, w_shape, b_len)) = op.parameter_shapes() else {
                continue;
            };
            let kind = match op {
                ops::Op::Conv(_) => "conv",
                _ => "dense",
            };
            segments.push(ParameterSegment {
                name: format!("{kind}{layer}.weight"),
                tag: SegmentTag {
                    layer_index: layer,
                    role: Role::Weight,
                },
                values: Tensor::zeros(w_shape),
            });
            segments.push(ParameterSegment {
                name: format!("{kind}{layer}.bias"),
                tag: SegmentTag {
                    layer_index: layer,
                    role: Role::Bias,
                },
                values: Tensor::zeros(vec![b_len]),
            });
        }
        Ok(Model {
            architecture,
            class_count,
            segments,
        })
    }

    /// Glorot-uniform weights, zero biases, drawn from a generator keyed by `seed`.
    pub fn new(architecture: Architecture, class_count: usize, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(architecture, class_count)?;
        let mut rng = rng_for(seed, Stream::Init, 0);
        for seg in &mut model.segments {
            if seg.tag.role != Role::Weight {
                continue;
            }
            let shape = seg.values.shape();
            // Dense [out, in]; conv [filters, k, k, channels].
            let (fan_in, fan_out) = match shape.len() {
                2 => (shape[1], shape[0]),
                _ => {
                    let receptive = shape[1] * shape[2];
                    (receptive * shape[3], receptive * shape[0])
                }
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            seg.values
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn segments(&self) -> &[ParameterSegment] {
        &self.segments
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut ParameterSegment> {
        self.segments.iter_mut().find(|s| s.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| s.values.data().iter().copied())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for seg in &mut self.segments {
            let n = seg.values.len();
            seg.values.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// In-place `p -= lr * (g + weight_decay * p)`.
    pub(crate) fn apply_update(&mut self, grad: &GradientVector, lr: f64, weight_decay: f64) {
        for (seg, g) in self.segments.iter_mut().zip(&grad.values) {
            seg.values
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(p, g)| *p -= lr * (g + weight_decay * *p));
        }
    }

    pub(crate) fn check_gradient(&self, grad: &GradientVector) -> Result<()> {
        if grad.tags.len() != self.segments.len()
            || self
                .segments
                .iter()
                .zip(grad.segments())
                .any(|(s, (tag, v))| s.tag != tag || s.values.len() != v.len())
        {
            return Err(Error::dim("gradient is not congruent with the model"));
        }
        Ok(())
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let batch = inputs.rows();
        if inputs.shape().len() < 2 || batch == 0 {
            return Err(Error::dim(format!(
                "expected a batch of examples, got shape {:?}",
                inputs.shape()
            )));
        }
        let want = self.architecture.input_len();
        let shape_ok = match (&self.architecture, inputs.shape().len()) {
            (Architecture::SmallCnn(s), 4) => {
                inputs.shape()[1..] == [s.height, s.width, s.channels]
            }
            _ => inputs.row_len() == want,
        };
        if !shape_ok {
            return Err(Error::dim(format!(
                "{} expects {want} inputs per example, got shape {:?}",
                self.architecture,
                inputs.shape()
            )));
        }
        Ok(batch)
    }

    fn run_forward(&self, inputs: &Tensor) -> Result<ops::Trace> {
        let batch = self.check_input(inputs)?;
        let plan = self.architecture.plan(self.class_count);
        let trace = ops::forward(&plan, &self.segments, inputs.data(), batch);
        if trace.output().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(trace)
    }

    /// Logits, `batch × class_count`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let trace = self.run_forward(inputs)?;
        Tensor::new(vec![inputs.rows(), self.class_count], trace.into_output())
    }

    /// Mean cross-entropy and its gradient over the batch (data term only).
    pub fn loss_and_gradient(&self, inputs: &Tensor, labels: &[usize]) -> Result<(f64, GradientVector)> {
        let batch = self.check_input(inputs)?;
        if labels.len() != batch {
            return Err(Error::dim(format!("{batch} examples but {} labels", labels.len())));
        }
        let trace = self.run_forward(inputs)?;
        let logits = Tensor::new(vec![batch, self.class_count], trace.output().to_vec())?;
        let (losses, mut delta) = loss::losses_and_delta(&logits, labels)?;
        let scale = 1.0 / batch as f64;
        delta.iter_mut().for_each(|d| *d *= scale);
        let mut grads = vec![GradientVector::zeros_like(self)];
        let plan = self.architecture.plan(self.class_count);
        ops::backward(&plan, &self.segments, &trace, delta, batch, &mut grads);
        let grad = grads.pop().expect("one accumulator");
        grad.check_finite()?;
        Ok((losses.iter().sum::<f64>() * scale, grad))
    }

    /// `(1/|B|) Σ ∇ loss_i` over a non-empty batch.
    pub fn batch_gradient(&self, inputs: &Tensor, labels: &[usize]) -> Result<GradientVector> {
        if inputs.rows() == 0 || labels.is_empty() {
            return Err(Error::domain("gradient of an empty batch"));
        }
        Ok(self.loss_and_gradient(inputs, labels)?.1)
    }

    /// Gradient of one example's cross-entropy loss.
    pub fn per_example_gradient(&self, example: &[f64], label: usize) -> Result<GradientVector> {
        let mut grads = self.per_example_gradients(&Tensor::new(vec![1, example.len()], example.to_vec())?, &[label])?;
        Ok(grads.pop().expect("one gradient"))
    }

    /// Separate gradients for every example of a batch, sharing one forward pass.
    pub fn per_example_gradients(&self, inputs: &Tensor, labels: &[usize]) -> Result<Vec<GradientVector>> {
        let batch = self.check_input(inputs)?;
        if labels.len() != batch {
            return Err(Error::dim(format!("{batch} examples but {} labels", labels.len())));
        }
        let trace = self.run_forward(inputs)?;
        let logits = Tensor::new(vec![batch, self.class_count], trace.output().to_vec())?;
        let (_, delta) = loss::losses_and_delta(&logits, labels)?;
        let mut grads = vec![GradientVector::zeros_like(self); batch];
        let plan = self.architecture.plan(self.class_count);
        ops::backward(&plan, &self.segments, &trace, delta, batch, &mut grads);
        for g in &grads {
            g.check_finite()?;
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Model = serde_json::from_slice(&fs::read(path)?)?;
        let reference = Model::zeros(model.architecture.clone(), model.class_count)?;
        let congruent = reference.segments.len() == model.segments.len()
            && reference
                .segments
                .iter()
                .zip(&model.segments)
                .all(|(a, b)| {
                    a.tag == b.tag
                        && a.values.shape() == b.values.shape()
                        && a.values.len() == b.values.data().len()
                        && b.values.data().iter().all(|v| v.is_finite())
                });
        if !congruent {
            return Err(Error::Parse(format!(
                "{}: parameters do not match architecture {}",
                path.display(),
                model.architecture
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
