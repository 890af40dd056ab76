//! Model zoo: the small sigmoid-head CNN plus desk-scale residual, VGG-style
//! and densely connected architectures with a replaceable classification
//! head.
//!
//! All parameters come from He-uniform draws off a purpose-keyed stream, so
//! building the same spec twice from the same seed is bitwise identical.
//! The CNN consumes grayscale `1x32x32` inputs scaled to [0, 1]; the deep
//! models consume normalized RGB `3x24x24` (the augment pipeline's output).

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Mode, RunningStats, Tape, Tensor};

/// He-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let t = Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)));
    t.set_requires_grad(true);
    t
}

fn zeros_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    let t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

fn ones_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    let t = Tensor::from_fn(shape, |_| T::ONE);
    t.set_requires_grad(true);
    t
}

/// Convolution layer with owned kernels.
pub struct Conv2dLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2dLayer<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        Conv2dLayer {
            weight: he_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: with_bias.then(|| zeros_param(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Fully connected layer.
pub struct AffineLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> AffineLayer<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        AffineLayer {
            weight: he_uniform(&[d_in, d_out], d_in, rng),
            bias: zeros_param(&[d_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.affine(x, &self.weight, &self.bias)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Batch normalization layer owning its running statistics.
pub struct BatchNorm2dLayer<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Element> BatchNorm2dLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: ones_param(&[channels]),
            beta: zeros_param(&[channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        tape.batchnorm2d(x, &self.gamma, &self.beta, &self.stats, mode)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    fn collect_buffers<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, &'a RefCell<Vec<T>>)>,
    ) {
        out.push((format!("{prefix}.running_mean"), &self.stats.mean));
        out.push((format!("{prefix}.running_var"), &self.stats.var));
    }
}

/// `x + F(x)` with `F = conv-bn-relu-conv-bn` and ReLU after the sum.
/// A 1x1 conv + bn projection aligns the skip when shape changes.
pub struct ResidualBlock<T: Element> {
    pub conv1: Conv2dLayer<T>,
    pub bn1: BatchNorm2dLayer<T>,
    pub conv2: Conv2dLayer<T>,
    pub bn2: BatchNorm2dLayer<T>,
    pub projection: Option<(Conv2dLayer<T>, BatchNorm2dLayer<T>)>,
}

impl<T: Element> ResidualBlock<T> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut RngStream) -> Self {
        let projection = (c_in != c_out || stride != 1).then(|| {
            (
                Conv2dLayer::new(c_in, c_out, 1, stride, 0, false, rng),
                BatchNorm2dLayer::new(c_out),
            )
        });
        ResidualBlock {
            conv1: Conv2dLayer::new(c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm2dLayer::new(c_out),
            conv2: Conv2dLayer::new(c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm2dLayer::new(c_out),
            projection,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let branch = self.conv1.forward(tape, x)?;
        let branch = self.bn1.forward(tape, &branch, mode)?;
        let branch = tape.relu(&branch);
        let branch = self.conv2.forward(tape, &branch)?;
        let branch = self.bn2.forward(tape, &branch, mode)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, &s, mode)?
            }
            None => x.clone(),
        };
        let summed = tape.add(&skip, &branch)?;
        Ok(tape.relu(&summed))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("block", &mut out);
        out
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &self.projection {
            conv.collect(&format!("{prefix}.proj"), out);
            bn.collect(&format!("{prefix}.proj_bn"), out);
        }
    }

    fn collect_buffers<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, &'a RefCell<Vec<T>>)>,
    ) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
        if let Some((_, bn)) = &self.projection {
            bn.collect_buffers(&format!("{prefix}.proj_bn"), out);
        }
    }

    /// Zeroes the residual branch (conv kernels and bn offsets), turning
    /// the block into a pure ReLU pass-through.
    pub fn zero_branch(&self) {
        for t in [
            &self.conv1.weight,
            &self.conv2.weight,
            &self.bn1.beta,
            &self.bn2.beta,
        ] {
            t.set_data(&vec![T::ZERO; t.numel()]);
        }
    }
}

/// Dense block: layer `l` computes `bn-relu-conv3x3(growth)` on the
/// concatenation of the input and all previous layer outputs.
pub struct DenseBlock<T: Element> {
    layers: Vec<(BatchNorm2dLayer<T>, Conv2dLayer<T>)>,
    c_in: usize,
    growth: usize,
}

impl<T: Element> DenseBlock<T> {
    pub fn new(c_in: usize, n_layers: usize, growth: usize, rng: &mut RngStream) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let c = c_in + l * growth;
                (
                    BatchNorm2dLayer::new(c),
                    Conv2dLayer::new(c, growth, 3, 1, 1, false, rng),
                )
            })
            .collect();
        DenseBlock {
            layers,
            c_in,
            growth,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.layers.len() * self.growth
    }

    /// Input channel count seen by each layer, for structural checks.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        (0..self.layers.len())
            .map(|l| self.c_in + l * self.growth)
            .collect()
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut features: Vec<Tensor<T>> = vec![x.clone()];
        for (bn, conv) in &self.layers {
            let cat = if features.len() == 1 {
                features[0].clone()
            } else {
                tape.concat_channels(&features)?
            };
            let h = bn.forward(tape, &cat, mode)?;
            let h = tape.relu(&h);
            let h = conv.forward(tape, &h)?;
            features.push(h);
        }
        if features.len() == 1 {
            Ok(features.pop().unwrap())
        } else {
            tape.concat_channels(&features)
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("dense", &mut out);
        out
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (l, (bn, conv)) in self.layers.iter().enumerate() {
            bn.collect(&format!("{prefix}.layer{l}.bn"), out);
            conv.collect(&format!("{prefix}.layer{l}.conv"), out);
        }
    }

    fn collect_buffers<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, &'a RefCell<Vec<T>>)>,
    ) {
        for (l, (bn, _)) in self.layers.iter().enumerate() {
            bn.collect_buffers(&format!("{prefix}.layer{l}.bn"), out);
        }
    }
}

/// VGG-style stack: per stage, two `conv3x3(pad 1) + ReLU` pairs followed
/// by a 2x2 max pool.
pub struct VggStack<T: Element> {
    stages: Vec<(Conv2dLayer<T>, Conv2dLayer<T>)>,
    stage_channels: Vec<usize>,
}

impl<T: Element> VggStack<T> {
    pub fn new(c_in: usize, stage_channels: &[usize], rng: &mut RngStream) -> Self {
        let mut stages = Vec::new();
        let mut c = c_in;
        for &width in stage_channels {
            stages.push((
                Conv2dLayer::new(c, width, 3, 1, 1, true, rng),
                Conv2dLayer::new(width, width, 3, 1, 1, true, rng),
            ));
            c = width;
        }
        VggStack {
            stages,
            stage_channels: stage_channels.to_vec(),
        }
    }

    pub fn out_channels(&self, c_in: usize) -> usize {
        self.stage_channels.last().copied().unwrap_or(c_in)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv_a, conv_b) in &self.stages {
            let shape = h.shape();
            if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
                return Err(Error::Shape(format!(
                    "vgg stage needs even spatial dims, got {}x{}",
                    shape[2], shape[3]
                )));
            }
            h = tape.relu(&conv_a.forward(tape, &h)?);
            h = tape.relu(&conv_b.forward(tape, &h)?);
            h = tape.maxpool2d(&h, 2, 2)?;
        }
        Ok(h)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("vgg", &mut out);
        out
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (s, (a, b)) in self.stages.iter().enumerate() {
            a.collect(&format!("{prefix}.stage{s}.conv_a"), out);
            b.collect(&format!("{prefix}.stage{s}.conv_b"), out);
        }
    }
}

/// Which architecture a spec describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    CustomCnn,
    TinyResNet,
    TinyVgg,
    TinyDenseNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CustomCnn => "CUSTOM_CNN",
            ModelKind::TinyResNet => "TINY_RESNET",
            ModelKind::TinyVgg => "TINY_VGG",
            ModelKind::TinyDenseNet => "TINY_DENSENET",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "CUSTOM_CNN" => Some(ModelKind::CustomCnn),
            "TINY_RESNET" => Some(ModelKind::TinyResNet),
            "TINY_VGG" => Some(ModelKind::TinyVgg),
            "TINY_DENSENET" => Some(ModelKind::TinyDenseNet),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Build-time description of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub head_classes: usize,
    /// Dense-block growth rate (dense kind only).
    pub growth: usize,
    /// VGG stage widths (vgg kind only).
    pub stages: Vec<usize>,
}

impl ModelSpec {
    pub fn for_kind(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            head_classes: match kind {
                ModelKind::CustomCnn => 1,
                _ => 2,
            },
            growth: 12,
            stages: vec![32, 64],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.head_classes == 0 {
            return Err(Error::Argument("head_classes must be >= 1".into()));
        }
        if self.kind == ModelKind::TinyDenseNet && self.growth == 0 {
            return Err(Error::Argument("growth must be >= 1".into()));
        }
        if self.kind == ModelKind::TinyVgg && self.stages.is_empty() {
            return Err(Error::Argument("vgg needs at least one stage".into()));
        }
        Ok(())
    }
}

/// The sigmoid-head CNN: conv(1->32, 3x3) - ReLU - maxpool(2x2) -
/// flatten(7200) - affine(7200->128) - ReLU - affine(128->head) - sigmoid.
pub struct CustomCnn<T: Element> {
    pub conv: Conv2dLayer<T>,
    pub fc1: AffineLayer<T>,
    pub fc2: AffineLayer<T>,
}

impl<T: Element> CustomCnn<T> {
    fn new(head_classes: usize, rng: &mut RngStream) -> Self {
        CustomCnn {
            conv: Conv2dLayer::new(1, 32, 3, 1, 0, true, rng),
            fc1: AffineLayer::new(32 * 15 * 15, 128, rng),
            fc2: AffineLayer::new(128, head_classes, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward(tape, x)?;
        let h = tape.relu(&h);
        let h = tape.maxpool2d(&h, 2, 2)?;
        let h = tape.flatten(&h)?;
        let h = self.fc1.forward(tape, &h)?;
        let h = tape.relu(&h);
        let h = self.fc2.forward(tape, &h)?;
        Ok(tape.sigmoid(&h))
    }
}

/// Stem conv + three residual stages (16/32/64) + global average pool.
pub struct TinyResNet<T: Element> {
    pub stem: Conv2dLayer<T>,
    pub stem_bn: BatchNorm2dLayer<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: AffineLayer<T>,
}

impl<T: Element> TinyResNet<T> {
    fn new(head_classes: usize, rng: &mut RngStream) -> Self {
        TinyResNet {
            stem: Conv2dLayer::new(3, 16, 3, 1, 1, false, rng),
            stem_bn: BatchNorm2dLayer::new(16),
            blocks: vec![
                ResidualBlock::new(16, 16, 1, rng),
                ResidualBlock::new(16, 32, 2, rng),
                ResidualBlock::new(32, 64, 2, rng),
            ],
            head: AffineLayer::new(64, head_classes, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.stem.forward(tape, x)?;
        let h = self.stem_bn.forward(tape, &h, mode)?;
        let mut h = tape.relu(&h);
        for block in &self.blocks {
            h = block.forward(tape, &h, mode)?;
        }
        let pooled = tape.global_avg_pool(&h)?;
        self.head.forward(tape, &pooled)
    }
}

/// VGG stages + flatten + affine head.
pub struct TinyVgg<T: Element> {
    pub stack: VggStack<T>,
    pub head: AffineLayer<T>,
    head_in: usize,
}

impl<T: Element> TinyVgg<T> {
    fn new(head_classes: usize, stages: &[usize], rng: &mut RngStream) -> Self {
        let stack = VggStack::new(3, stages, rng);
        // 24x24 input halves once per stage.
        let side = 24 >> stages.len();
        let head_in = stack.out_channels(3) * side * side;
        TinyVgg {
            stack,
            head: AffineLayer::new(head_in, head_classes, rng),
            head_in,
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stack.forward(tape, x)?;
        let flat = tape.flatten(&h)?;
        if flat.shape()[1] != self.head_in {
            return Err(Error::Shape(format!(
                "vgg head expects {} features, got {}",
                self.head_in,
                flat.shape()[1]
            )));
        }
        self.head.forward(tape, &flat)
    }
}

/// Stem conv + two dense blocks with a bn-relu-conv1x1-avgpool transition.
pub struct TinyDenseNet<T: Element> {
    pub stem: Conv2dLayer<T>,
    pub block1: DenseBlock<T>,
    pub trans_bn: BatchNorm2dLayer<T>,
    pub trans_conv: Conv2dLayer<T>,
    pub block2: DenseBlock<T>,
    pub final_bn: BatchNorm2dLayer<T>,
    pub head: AffineLayer<T>,
}

impl<T: Element> TinyDenseNet<T> {
    fn new(head_classes: usize, growth: usize, rng: &mut RngStream) -> Self {
        let stem_out = 16;
        let block1 = DenseBlock::new(stem_out, 4, growth, rng);
        let trans_in = block1.out_channels();
        let trans_out = trans_in / 2;
        let block2 = DenseBlock::new(trans_out, 4, growth, rng);
        let final_c = block2.out_channels();
        TinyDenseNet {
            stem: Conv2dLayer::new(3, stem_out, 3, 1, 1, false, rng),
            block1,
            trans_bn: BatchNorm2dLayer::new(trans_in),
            trans_conv: Conv2dLayer::new(trans_in, trans_out, 1, 1, 0, false, rng),
            block2,
            final_bn: BatchNorm2dLayer::new(final_c),
            head: AffineLayer::new(final_c, head_classes, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.stem.forward(tape, x)?;
        let h = self.block1.forward(tape, &h, mode)?;
        let h = self.trans_bn.forward(tape, &h, mode)?;
        let h = tape.relu(&h);
        let h = self.trans_conv.forward(tape, &h)?;
        let h = tape.avgpool2d(&h, 2, 2)?;
        let h = self.block2.forward(tape, &h, mode)?;
        let h = self.final_bn.forward(tape, &h, mode)?;
        let h = tape.relu(&h);
        let pooled = tape.global_avg_pool(&h)?;
        self.head.forward(tape, &pooled)
    }
}

/// Loss pairing for a model's output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sigmoid probabilities against {0, 1} targets.
    BinaryCrossEntropy,
    /// Raw logits against class indices.
    SoftmaxCrossEntropy,
}

/// A built model with its spec and current mode.
pub struct Model<T: Element> {
    spec: ModelSpec,
    seed: u64,
    mode: Mode,
    net: Net<T>,
}

enum Net<T: Element> {
    Cnn(CustomCnn<T>),
    Res(TinyResNet<T>),
    Vgg(TinyVgg<T>),
    Dense(TinyDenseNet<T>),
}

impl<T: Element> Model<T> {
    /// Builds the architecture for `spec`, drawing every parameter from a
    /// stream derived from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::derive(seed, "init", 0, 0);
        let net = match spec.kind {
            ModelKind::CustomCnn => Net::Cnn(CustomCnn::new(spec.head_classes, &mut rng)),
            ModelKind::TinyResNet => Net::Res(TinyResNet::new(spec.head_classes, &mut rng)),
            ModelKind::TinyVgg => {
                Net::Vgg(TinyVgg::new(spec.head_classes, &spec.stages, &mut rng))
            }
            ModelKind::TinyDenseNet => {
                Net::Dense(TinyDenseNet::new(spec.head_classes, spec.growth, &mut rng))
            }
        };
        Ok(Model {
            spec: spec.clone(),
            seed,
            mode: Mode::Train,
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Per-sample input shape `[C, H, W]` the model expects.
    pub fn input_shape(&self) -> [usize; 3] {
        match self.spec.kind {
            ModelKind::CustomCnn => [1, 32, 32],
            _ => [3, 24, 24],
        }
    }

    pub fn default_loss(&self) -> LossKind {
        match self.spec.kind {
            ModelKind::CustomCnn => LossKind::BinaryCrossEntropy,
            _ => LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Runs the forward pass under the model's current mode.
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let want = self.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape(format!(
                "{} expects N x {} x {} x {} input, got {shape:?}",
                self.spec.kind, want[0], want[1], want[2]
            )));
        }
        match &self.net {
            Net::Cnn(m) => m.forward(tape, x),
            Net::Res(m) => m.forward(tape, x, self.mode),
            Net::Vgg(m) => m.forward(tape, x),
            Net::Dense(m) => m.forward(tape, x, self.mode),
        }
    }

    /// P(FAKE) per sample from the head output.
    pub fn positive_scores(&self, output: &Tensor<T>) -> Vec<f64> {
        let data = output.to_vec();
        match self.default_loss() {
            LossKind::BinaryCrossEntropy => data.iter().map(|v| v.to_f64()).collect(),
            LossKind::SoftmaxCrossEntropy => {
                let k = self.spec.head_classes;
                data.chunks(k)
                    .map(|row| {
                        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
                        let exps: Vec<f64> =
                            row.iter().map(|v| (v.to_f64() - mx).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        // Class index 1 = FAKE.
                        exps[1.min(k - 1)] / denom
                    })
                    .collect()
            }
        }
    }

    /// Ordered, named parameter tensors. The ordering is stable and the
    /// final two entries are always the head weight and bias.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        match &self.net {
            Net::Cnn(m) => {
                m.conv.collect("conv", &mut out);
                m.fc1.collect("fc1", &mut out);
                m.fc2.collect("head", &mut out);
            }
            Net::Res(m) => {
                m.stem.collect("stem", &mut out);
                m.stem_bn.collect("stem_bn", &mut out);
                for (i, b) in m.blocks.iter().enumerate() {
                    b.collect(&format!("block{i}"), &mut out);
                }
                m.head.collect("head", &mut out);
            }
            Net::Vgg(m) => {
                m.stack.collect("stack", &mut out);
                m.head.collect("head", &mut out);
            }
            Net::Dense(m) => {
                m.stem.collect("stem", &mut out);
                m.block1.collect("block1", &mut out);
                m.trans_bn.collect("trans_bn", &mut out);
                m.trans_conv.collect("trans_conv", &mut out);
                m.block2.collect("block2", &mut out);
                m.final_bn.collect("final_bn", &mut out);
                m.head.collect("head", &mut out);
            }
        }
        out
    }

    /// Named non-trained buffers (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &RefCell<Vec<T>>)> {
        let mut out = Vec::new();
        match &self.net {
            Net::Cnn(_) => {}
            Net::Res(m) => {
                m.stem_bn.collect_buffers("stem_bn", &mut out);
                for (i, b) in m.blocks.iter().enumerate() {
                    b.collect_buffers(&format!("block{i}"), &mut out);
                }
            }
            Net::Vgg(_) => {}
            Net::Dense(m) => {
                m.block1.collect_buffers("block1", &mut out);
                m.trans_bn.collect_buffers("trans_bn", &mut out);
                m.block2.collect_buffers("block2", &mut out);
                m.final_bn.collect_buffers("final_bn", &mut out);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces the terminal affine layer with a freshly initialized one of
    /// `n_classes` outputs; every upstream parameter is left untouched.
    pub fn replace_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Argument("head must have at least one class".into()));
        }
        let mut rng = RngStream::derive(seed, "head", 0, 0);
        let head = match &mut self.net {
            Net::Cnn(m) => &mut m.fc2,
            Net::Res(m) => &mut m.head,
            Net::Vgg(m) => &mut m.head,
            Net::Dense(m) => &mut m.head,
        };
        *head = AffineLayer::new(head.in_features(), n_classes, &mut rng);
        self.spec.head_classes = n_classes;
        Ok(())
    }

    /// Direct access to the terminal affine layer.
    pub fn head(&self) -> &AffineLayer<T> {
        match &self.net {
            Net::Cnn(m) => &m.fc2,
            Net::Res(m) => &m.head,
            Net::Vgg(m) => &m.head,
            Net::Dense(m) => &m.head,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_max_rel_error;

    fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal(0.0, 1.0))
    }

    #[test]
    fn custom_cnn_shapes_and_range() {
        let model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        let tape = Tape::inference();
        let x = Tensor::from_fn(&[64, 1, 32, 32], |i| (i % 255) as f32 / 255.0);
        let y = model.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), vec![64, 1]);
        assert!(y.to_vec().iter().all(|v| (0.0..1.0).contains(v) || *v == 0.0 || *v == 1.0));
        assert!(y.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn custom_cnn_zero_weights_output_half() {
        let model: Model<f64> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        for (_, p) in model.parameters() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let tape = Tape::inference();
        let x = Tensor::from_fn(&[3, 1, 32, 32], |i| (i as f64 * 0.37).sin());
        let y = model.forward(&tape, &x).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn custom_cnn_parameter_count_closed_form() {
        let model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        assert_eq!(model.parameter_count(), 922_177);
    }

    #[test]
    fn builds_are_bitwise_deterministic() {
        for kind in [
            ModelKind::CustomCnn,
            ModelKind::TinyResNet,
            ModelKind::TinyVgg,
            ModelKind::TinyDenseNet,
        ] {
            let spec = ModelSpec::for_kind(kind);
            let a: Model<f32> = Model::build(&spec, 99).unwrap();
            let b: Model<f32> = Model::build(&spec, 99).unwrap();
            let pa = a.parameters();
            let pb = b.parameters();
            assert_eq!(pa.len(), pb.len());
            for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
                assert_eq!(na, nb);
                assert_eq!(ta.to_vec(), tb.to_vec(), "{kind:?} {na}");
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::TinyResNet), 5).unwrap();
        model.set_mode(Mode::Eval);
        let x = Tensor::from_fn(&[2, 3, 24, 24], |i| ((i * 17 % 100) as f32) / 100.0);
        let t1 = Tape::inference();
        let y1 = model.forward(&t1, &x).unwrap().to_vec();
        let t2 = Tape::inference();
        let y2 = model.forward(&t2, &x).unwrap().to_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn residual_zero_branch_is_relu_passthrough() {
        let mut rng = RngStream::derive(3, "t", 0, 0);
        let block: ResidualBlock<f64> = ResidualBlock::new(4, 4, 1, &mut rng);
        block.zero_branch();
        let x = randn(&[2, 4, 6, 6], &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::inference();
            let y = block.forward(&tape, &x, mode).unwrap();
            let want: Vec<f64> = x.to_vec().iter().map(|v| v.max(0.0)).collect();
            assert_eq!(y.to_vec(), want, "{mode:?}");
        }
    }

    #[test]
    fn residual_block_on_zero_input_is_relu_of_branch_constant() {
        // With x = 0 the skip contributes nothing: out = ReLU(F(0)).
        let mut rng = RngStream::derive(4, "t", 0, 0);
        let block: ResidualBlock<f64> = ResidualBlock::new(2, 2, 1, &mut rng);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let tape = Tape::inference();
        let y = block.forward(&tape, &x, Mode::Eval).unwrap();
        // EVAL with fresh running stats (mean 0 var 1): F(0) = beta2 = 0,
        // so the block collapses to ReLU(0) = 0.
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_block_gradients_match_fd() {
        let mut rng = RngStream::derive(5, "t", 0, 0);
        let block: ResidualBlock<f64> = ResidualBlock::new(3, 3, 1, &mut rng);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        x.set_requires_grad(true);
        let weights: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.normal(0.0, 1.0)).collect();
        let tape = Tape::new();
        let y = block.forward(&tape, &x, Mode::Train).unwrap();
        let loss = tape.weighted_sum(&y, &weights).unwrap();
        tape.backward(&loss).unwrap();
        let mut params: Vec<Tensor<f64>> =
            block.parameters().into_iter().map(|(_, t)| t).collect();
        params.push(x.clone());
        let mut forward = || {
            let t = Tape::inference();
            let y = block.forward(&t, &x, Mode::Train).unwrap();
            t.weighted_sum(&y, &weights).unwrap().item()
        };
        let err = finite_diff_max_rel_error(&params, &mut forward, 1e-5);
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn dense_block_channel_bookkeeping() {
        let mut rng = RngStream::derive(6, "t", 0, 0);
        let block: DenseBlock<f32> = DenseBlock::new(16, 4, 12, &mut rng);
        assert_eq!(block.out_channels(), 64);
        assert_eq!(block.layer_input_channels(), vec![16, 28, 40, 52]);
        let x = Tensor::from_fn(&[1, 16, 6, 6], |i| (i as f32 * 0.01).sin());
        let tape = Tape::inference();
        let y = block.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), vec![1, 64, 6, 6]);
    }

    #[test]
    fn dense_block_with_zero_layers_is_identity() {
        let mut rng = RngStream::derive(7, "t", 0, 0);
        let block: DenseBlock<f64> = DenseBlock::new(5, 0, 12, &mut rng);
        let x = randn(&[2, 5, 3, 3], &mut rng);
        let tape = Tape::inference();
        let y = block.forward(&tape, &x, Mode::Train).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert_eq!(block.out_channels(), 5);
    }

    #[test]
    fn dense_block_gradients_match_fd() {
        let mut rng = RngStream::derive(8, "t", 0, 0);
        let block: DenseBlock<f64> = DenseBlock::new(3, 2, 4, &mut rng);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        x.set_requires_grad(true);
        let out_numel = 2 * block.out_channels() * 16;
        let weights: Vec<f64> = (0..out_numel).map(|_| rng.normal(0.0, 1.0)).collect();
        let tape = Tape::new();
        let y = block.forward(&tape, &x, Mode::Train).unwrap();
        let loss = tape.weighted_sum(&y, &weights).unwrap();
        tape.backward(&loss).unwrap();
        let mut params: Vec<Tensor<f64>> =
            block.parameters().into_iter().map(|(_, t)| t).collect();
        params.push(x.clone());
        let mut forward = || {
            let t = Tape::inference();
            let y = block.forward(&t, &x, Mode::Train).unwrap();
            t.weighted_sum(&y, &weights).unwrap().item()
        };
        let err = finite_diff_max_rel_error(&params, &mut forward, 1e-5);
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn vgg_stack_shapes_and_identity() {
        let mut rng = RngStream::derive(9, "t", 0, 0);
        let stack: VggStack<f32> = VggStack::new(3, &[32, 64], &mut rng);
        let x = Tensor::from_fn(&[1, 3, 24, 24], |i| (i as f32 * 0.003).cos());
        let tape = Tape::inference();
        let y = stack.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), vec![1, 64, 6, 6]);

        let empty: VggStack<f32> = VggStack::new(3, &[], &mut rng);
        let y = empty.forward(&tape, &x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn vgg_stack_rejects_odd_spatial_dims() {
        let mut rng = RngStream::derive(10, "t", 0, 0);
        let stack: VggStack<f32> = VggStack::new(1, &[4], &mut rng);
        let x = Tensor::zeros(&[1, 1, 5, 6]);
        let tape = Tape::inference();
        assert!(matches!(
            stack.forward(&tape, &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn vgg_stack_gradients_match_fd() {
        let mut rng = RngStream::derive(11, "t", 0, 0);
        let stack: VggStack<f64> = VggStack::new(2, &[3], &mut rng);
        let x = randn(&[1, 2, 6, 6], &mut rng);
        x.set_requires_grad(true);
        let weights: Vec<f64> = (0..1 * 3 * 9).map(|_| rng.normal(0.0, 1.0)).collect();
        let tape = Tape::new();
        let y = stack.forward(&tape, &x).unwrap();
        let loss = tape.weighted_sum(&y, &weights).unwrap();
        tape.backward(&loss).unwrap();
        let mut params: Vec<Tensor<f64>> =
            stack.parameters().into_iter().map(|(_, t)| t).collect();
        params.push(x.clone());
        let mut forward = || {
            let t = Tape::inference();
            let y = stack.forward(&t, &x).unwrap();
            t.weighted_sum(&y, &weights).unwrap().item()
        };
        let err = finite_diff_max_rel_error(&params, &mut forward, 1e-5);
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn replace_head_keeps_upstream_bitwise_identical() {
        let mut model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::TinyResNet), 42).unwrap();
        // Stand-in for a wide pretrained head.
        model.replace_head(1000, 7).unwrap();
        let before: Vec<(String, Vec<f32>)> = model
            .parameters()
            .iter()
            .filter(|(n, _)| !n.starts_with("head"))
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        assert_eq!(model.head().out_features(), 1000);

        model.replace_head(2, 9).unwrap();
        assert_eq!(model.head().in_features(), 64);
        assert_eq!(model.head().out_features(), 2);
        let after: Vec<(String, Vec<f32>)> = model
            .parameters()
            .iter()
            .filter(|(n, _)| !n.starts_with("head"))
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn replace_head_is_deterministic_and_reinitializes() {
        let spec = ModelSpec::for_kind(ModelKind::TinyVgg);
        let mut a: Model<f32> = Model::build(&spec, 1).unwrap();
        let mut b: Model<f32> = Model::build(&spec, 1).unwrap();
        a.replace_head(2, 55).unwrap();
        b.replace_head(2, 55).unwrap();
        assert_eq!(a.head().weight.to_vec(), b.head().weight.to_vec());

        // Same class count still redraws the values.
        let old = a.head().weight.to_vec();
        a.replace_head(2, 56).unwrap();
        assert_eq!(a.head().weight.shape(), b.head().weight.shape());
        assert_ne!(a.head().weight.to_vec(), old);
    }

    #[test]
    fn deep_models_forward_to_head_classes() {
        for kind in [ModelKind::TinyResNet, ModelKind::TinyVgg, ModelKind::TinyDenseNet] {
            let mut model: Model<f32> = Model::build(&ModelSpec::for_kind(kind), 3).unwrap();
            model.set_mode(Mode::Eval);
            let x = Tensor::from_fn(&[5, 3, 24, 24], |i| ((i % 97) as f32) / 97.0);
            let tape = Tape::inference();
            let y = model.forward(&tape, &x).unwrap();
            assert_eq!(y.shape(), vec![5, 2], "{kind:?}");
            let scores = model.positive_scores(&y);
            assert_eq!(scores.len(), 5);
            assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        let tape = Tape::inference();
        let x = Tensor::zeros(&[1, 3, 24, 24]);
        assert!(matches!(
            model.forward(&tape, &x),
            Err(Error::Shape(_))
        ));
    }
}
