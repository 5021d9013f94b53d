//! Network architectures: densely connected encoder, upsampling decoder with
//! skip connections, classification head, stroke classifier, and encoder
//! transplantation.
//!
//! The encoder stem downsamples 4x (strided convolution plus max pool); dense
//! blocks are separated by compressing transitions. The segmentation decoder
//! takes one skip from the stem convolution's activation and one from the
//! final concatenated feature map of every dense block, upsampling by
//! transposed convolutions with two convolutions per level, and emits a
//! single sigmoid channel at input resolution. The classifier reuses the
//! same encoder followed by one convolution, global average pooling and a
//! softmax linear layer.
//!
//! Models are `Clone`; inference on a fixed parameter snapshot can run
//! concurrently by giving each worker its own clone.

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    ensure_std4, AvgPool2, BatchNorm2d, Conv2d, ConvTranspose2d, GlobalAvgPool, Linear, MaxPool2,
    Relu,
};
use crate::nn::loss::{sigmoid, softmax_rows};
use crate::nn::{export_tensors, import_subset, scope, TensorSlot, VisitBn, VisitTensors};
use crate::scalar::Scalar;

/// Architecture parameters for the shared encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Channels added by each layer inside a dense block.
    pub growth_rate: usize,
    /// Layers per dense block.
    pub block_layers: Vec<usize>,
    /// Stem convolution output channels.
    pub initial_channels: usize,
    /// Square input side.
    pub input_side: usize,
    /// Transition compression in (0, 1].
    pub compression: f64,
    /// Stem convolution kernel (odd).
    pub stem_kernel: usize,
    /// Bottleneck width multiplier inside dense layers.
    pub bottleneck_factor: usize,
}

impl EncoderSpec {
    /// Small configuration for CPU-scale runs.
    pub fn desk() -> Self {
        EncoderSpec {
            growth_rate: 8,
            block_layers: vec![2, 2, 2],
            initial_channels: 16,
            input_side: 64,
            compression: 0.5,
            stem_kernel: 3,
            bottleneck_factor: 4,
        }
    }

    /// Full-scale configuration (~16M classifier parameters at side 448).
    pub fn full_scale() -> Self {
        EncoderSpec {
            growth_rate: 32,
            block_layers: vec![6, 12, 32, 32],
            initial_channels: 64,
            input_side: 448,
            compression: 0.5,
            stem_kernel: 7,
            bottleneck_factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers.len() < 2 {
            return Err(Error::BadEncoderSpec(
                "need at least two dense blocks".into(),
            ));
        }
        if self.block_layers.contains(&0) {
            return Err(Error::BadEncoderSpec("empty dense block".into()));
        }
        if self.growth_rate == 0 || self.initial_channels == 0 || self.bottleneck_factor == 0 {
            return Err(Error::BadEncoderSpec("zero-sized channel parameter".into()));
        }
        if !(0.0 < self.compression && self.compression <= 1.0) {
            return Err(Error::BadEncoderSpec(
                "compression must be in (0, 1]".into(),
            ));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(Error::BadEncoderSpec("stem kernel must be odd".into()));
        }
        // Stem (x4) + one pooling per transition and one for the decoder
        // bottleneck: the side must survive 2^(blocks + 2) halvings.
        let required = 1usize << (self.block_layers.len() + 2);
        if !self.input_side.is_multiple_of(required) {
            return Err(Error::IndivisibleSide {
                side: self.input_side,
                required,
            });
        }
        Ok(())
    }

    fn compress(&self, channels: usize) -> usize {
        ((channels as f64 * self.compression).floor() as usize).max(1)
    }

    /// Output channels of each dense block, in order.
    pub fn block_output_channels(&self) -> Vec<usize> {
        let mut c = self.initial_channels;
        let mut out = Vec::with_capacity(self.block_layers.len());
        for (b, &layers) in self.block_layers.iter().enumerate() {
            c += layers * self.growth_rate;
            out.push(c);
            if b + 1 < self.block_layers.len() {
                c = self.compress(c);
            }
        }
        out
    }

    /// Channels feeding the decoder/classifier after the last block.
    pub fn final_channels(&self) -> usize {
        *self.block_output_channels().last().unwrap()
    }

    /// Channels of the decoder skip sources: stem activation first, then
    /// each block's concatenated output.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut out = vec![self.initial_channels];
        out.extend(self.block_output_channels());
        out
    }

    /// Decoder working width.
    pub fn decoder_channels(&self) -> usize {
        2 * self.growth_rate
    }

    /// Classifier head convolution width.
    pub fn head_channels(&self) -> usize {
        4 * self.initial_channels
    }
}

/// BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 conv, emitting `growth`
/// channels to be concatenated onto the block input.
#[derive(Clone)]
struct DenseLayer<F> {
    bn1: BatchNorm2d<F>,
    relu1: Relu<F>,
    conv1: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    relu2: Relu<F>,
    conv2: Conv2d<F>,
}

impl<F: Scalar> DenseLayer<F> {
    fn new(in_channels: usize, growth: usize, bottleneck: usize, rng: &mut ChaCha20Rng) -> Self {
        let inter = bottleneck * growth;
        DenseLayer {
            bn1: BatchNorm2d::new(in_channels),
            relu1: Relu::new(),
            conv1: Conv2d::new(in_channels, inter, 1, 1, 0, false, rng),
            bn2: BatchNorm2d::new(inter),
            relu2: Relu::new(),
            conv2: Conv2d::new(inter, growth, 3, 1, 1, false, rng),
        }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let h = self.conv1.forward(
            &self.relu1.forward(&self.bn1.forward(x, train), train),
            train,
        );
        self.conv2.forward(
            &self.relu2.forward(&self.bn2.forward(&h, train), train),
            train,
        )
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let g = self
            .bn2
            .backward(&self.relu2.backward(&self.conv2.backward(gy)));
        self.bn1
            .backward(&self.relu1.backward(&self.conv1.backward(&g)))
    }
}

impl<F: Scalar> VisitTensors<F> for DenseLayer<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.bn1.visit_tensors(&scope(prefix, "bn1"), f);
        self.conv1.visit_tensors(&scope(prefix, "conv1"), f);
        self.bn2.visit_tensors(&scope(prefix, "bn2"), f);
        self.conv2.visit_tensors(&scope(prefix, "conv2"), f);
    }
}

impl<F: Scalar> VisitBn<F> for DenseLayer<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }
}

#[derive(Clone)]
struct DenseBlock<F> {
    layers: Vec<DenseLayer<F>>,
    in_channels: usize,
    growth: usize,
}

impl<F: Scalar> DenseBlock<F> {
    fn new(
        in_channels: usize,
        n_layers: usize,
        growth: usize,
        bottleneck: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| DenseLayer::new(in_channels + l * growth, growth, bottleneck, rng))
            .collect();
        DenseBlock {
            layers,
            in_channels,
            growth,
        }
    }

    fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let mut cat = x.clone();
        for layer in &mut self.layers {
            let y = layer.forward(&cat, train);
            cat = ensure_std4(concatenate![Axis(1), cat, y]);
        }
        debug_assert_eq!(cat.dim().1, self.out_channels());
        cat
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let mut g = gy.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let c_prev = self.in_channels + l * self.growth;
            let g_prev = g.slice(s![.., ..c_prev, .., ..]).to_owned();
            let g_new = g.slice(s![.., c_prev.., .., ..]).to_owned();
            let through = layer.backward(&g_new);
            g = g_prev + through;
        }
        g
    }
}

impl<F: Scalar> VisitTensors<F> for DenseBlock<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_tensors(&scope(prefix, &format!("layer{}", l + 1)), f);
        }
    }
}

impl<F: Scalar> VisitBn<F> for DenseBlock<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        for layer in &mut self.layers {
            layer.visit_bn(f);
        }
    }
}

/// BN -> ReLU -> 1x1 compressing conv -> 2x2 average pool.
#[derive(Clone)]
struct Transition<F> {
    bn: BatchNorm2d<F>,
    relu: Relu<F>,
    conv: Conv2d<F>,
    pool: AvgPool2,
}

impl<F: Scalar> Transition<F> {
    fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        Transition {
            bn: BatchNorm2d::new(in_channels),
            relu: Relu::new(),
            conv: Conv2d::new(in_channels, out_channels, 1, 1, 0, false, rng),
            pool: AvgPool2,
        }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        self.pool.forward(
            &self
                .conv
                .forward(&self.relu.forward(&self.bn.forward(x, train), train), train),
        )
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        self.bn.backward(
            &self
                .relu
                .backward(&self.conv.backward(&self.pool.backward(gy))),
        )
    }
}

impl<F: Scalar> VisitTensors<F> for Transition<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.bn.visit_tensors(&scope(prefix, "bn"), f);
        self.conv.visit_tensors(&scope(prefix, "conv"), f);
    }
}

impl<F: Scalar> VisitBn<F> for Transition<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        f(&mut self.bn);
    }
}

/// Shared feature extractor: stem, dense blocks, transitions, final norm.
#[derive(Clone)]
pub struct Encoder<F> {
    pub spec: EncoderSpec,
    stem_conv: Conv2d<F>,
    stem_bn: BatchNorm2d<F>,
    stem_relu: Relu<F>,
    stem_pool: MaxPool2<F>,
    blocks: Vec<DenseBlock<F>>,
    transitions: Vec<Transition<F>>,
    norm_final: BatchNorm2d<F>,
    relu_final: Relu<F>,
}

pub struct EncoderOutput<F> {
    /// Post-norm features after the last dense block.
    pub features: Array4<F>,
    /// Skip sources: stem activation, then each block's concatenated output.
    pub skips: Vec<Array4<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(spec: &EncoderSpec, rng: &mut ChaCha20Rng) -> Result<Self> {
        spec.validate()?;
        let stem_conv = Conv2d::new(
            3,
            spec.initial_channels,
            spec.stem_kernel,
            2,
            spec.stem_kernel / 2,
            false,
            rng,
        );
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut channels = spec.initial_channels;
        for (b, &layers) in spec.block_layers.iter().enumerate() {
            let block = DenseBlock::new(
                channels,
                layers,
                spec.growth_rate,
                spec.bottleneck_factor,
                rng,
            );
            channels = block.out_channels();
            blocks.push(block);
            if b + 1 < spec.block_layers.len() {
                let out = spec.compress(channels);
                transitions.push(Transition::new(channels, out, rng));
                channels = out;
            }
        }
        Ok(Encoder {
            spec: spec.clone(),
            stem_conv,
            stem_bn: BatchNorm2d::new(spec.initial_channels),
            stem_relu: Relu::new(),
            stem_pool: MaxPool2::new(),
            blocks,
            transitions,
            norm_final: BatchNorm2d::new(channels),
            relu_final: Relu::new(),
        })
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool, want_skips: bool) -> EncoderOutput<F> {
        let mut skips = Vec::new();
        let stem = self.stem_relu.forward(
            &self
                .stem_bn
                .forward(&self.stem_conv.forward(x, train), train),
            train,
        );
        if want_skips {
            skips.push(stem.clone());
        }
        let mut h = self.stem_pool.forward(&stem, train);
        for b in 0..self.blocks.len() {
            h = self.blocks[b].forward(&h, train);
            if want_skips {
                skips.push(h.clone());
            }
            if b < self.transitions.len() {
                h = self.transitions[b].forward(&h, train);
            }
        }
        let features = self
            .relu_final
            .forward(&self.norm_final.forward(&h, train), train);
        EncoderOutput { features, skips }
    }

    /// Backpropagate through the encoder; `g_skips` (when present) must match
    /// the layout of [`EncoderOutput::skips`].
    pub fn backward(&mut self, g_features: &Array4<F>, g_skips: Option<&[Array4<F>]>) -> Array4<F> {
        let mut g = self
            .norm_final
            .backward(&self.relu_final.backward(g_features));
        for b in (0..self.blocks.len()).rev() {
            if let Some(gs) = g_skips {
                g += &gs[b + 1];
            }
            g = self.blocks[b].backward(&g);
            if b > 0 {
                g = self.transitions[b - 1].backward(&g);
            }
        }
        let mut g = self.stem_pool.backward(&g);
        if let Some(gs) = g_skips {
            g += &gs[0];
        }
        self.stem_conv
            .backward(&self.stem_bn.backward(&self.stem_relu.backward(&g)))
    }
}

impl<F: Scalar> VisitTensors<F> for Encoder<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.stem_conv.visit_tensors(&scope(prefix, "stem.conv"), f);
        self.stem_bn.visit_tensors(&scope(prefix, "stem.bn"), f);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_tensors(&scope(prefix, &format!("block{}", b + 1)), f);
        }
        for (t, transition) in self.transitions.iter_mut().enumerate() {
            transition.visit_tensors(&scope(prefix, &format!("transition{}", t + 1)), f);
        }
        self.norm_final
            .visit_tensors(&scope(prefix, "norm_final"), f);
    }
}

impl<F: Scalar> VisitBn<F> for Encoder<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        f(&mut self.stem_bn);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_bn(f);
            if b < self.transitions.len() {
                self.transitions[b].visit_bn(f);
            }
        }
        f(&mut self.norm_final);
    }
}

/// One decoder level: 2x upsampling, optional skip concatenation, two
/// convolutions with batch norm.
#[derive(Clone)]
struct UpLevel<F> {
    up: ConvTranspose2d<F>,
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Relu<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    relu2: Relu<F>,
    skip_channels: usize,
    width: usize,
}

impl<F: Scalar> UpLevel<F> {
    fn new(in_channels: usize, skip_channels: usize, width: usize, rng: &mut ChaCha20Rng) -> Self {
        UpLevel {
            up: ConvTranspose2d::new(in_channels, width, rng),
            conv1: Conv2d::new(width + skip_channels, width, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(width),
            relu1: Relu::new(),
            conv2: Conv2d::new(width, width, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(width),
            relu2: Relu::new(),
            skip_channels,
            width,
        }
    }

    fn forward(&mut self, x: &Array4<F>, skip: Option<&Array4<F>>, train: bool) -> Array4<F> {
        let up = self.up.forward(x, train);
        let cat = match skip {
            Some(sk) => ensure_std4(concatenate![Axis(1), up, sk.clone()]),
            None => up,
        };
        let h = self.relu1.forward(
            &self.bn1.forward(&self.conv1.forward(&cat, train), train),
            train,
        );
        self.relu2.forward(
            &self.bn2.forward(&self.conv2.forward(&h, train), train),
            train,
        )
    }

    /// Returns the gradient wrt the level input and, when a skip was
    /// concatenated, wrt the skip tensor.
    fn backward(&mut self, gy: &Array4<F>) -> (Array4<F>, Option<Array4<F>>) {
        let g = self.conv1.backward(
            &self.bn1.backward(
                &self.relu1.backward(
                    &self
                        .conv2
                        .backward(&self.bn2.backward(&self.relu2.backward(gy))),
                ),
            ),
        );
        if self.skip_channels > 0 {
            let g_up = g.slice(s![.., ..self.width, .., ..]).to_owned();
            let g_skip = g.slice(s![.., self.width.., .., ..]).to_owned();
            (self.up.backward(&g_up), Some(g_skip))
        } else {
            (self.up.backward(&g), None)
        }
    }
}

impl<F: Scalar> VisitTensors<F> for UpLevel<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.up.visit_tensors(&scope(prefix, "up"), f);
        self.conv1.visit_tensors(&scope(prefix, "conv1"), f);
        self.bn1.visit_tensors(&scope(prefix, "bn1"), f);
        self.conv2.visit_tensors(&scope(prefix, "conv2"), f);
        self.bn2.visit_tensors(&scope(prefix, "bn2"), f);
    }
}

impl<F: Scalar> VisitBn<F> for UpLevel<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }
}

/// Segmentation model: encoder, compressing bottleneck, skip-connected
/// decoder, single sigmoid output channel at input resolution.
#[derive(Clone)]
pub struct SegModel<F> {
    pub encoder: Encoder<F>,
    bottleneck_conv: Conv2d<F>,
    bottleneck_pool: AvgPool2,
    levels: Vec<UpLevel<F>>,
    out_conv: Conv2d<F>,
}

impl<F: Scalar> SegModel<F> {
    pub fn build(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoder = Encoder::new(spec, &mut rng)?;
        let final_c = spec.final_channels();
        let bottleneck_out = spec.compress(final_c);
        let width = spec.decoder_channels();
        let skip_channels = spec.skip_channels();
        let n_blocks = spec.block_layers.len();
        let mut levels = Vec::new();
        for i in 0..=n_blocks + 1 {
            let in_c = if i == 0 { bottleneck_out } else { width };
            let skip_c = if i <= n_blocks {
                skip_channels[n_blocks - i]
            } else {
                0
            };
            levels.push(UpLevel::new(in_c, skip_c, width, &mut rng));
        }
        Ok(SegModel {
            encoder,
            bottleneck_conv: Conv2d::new(final_c, bottleneck_out, 1, 1, 0, false, &mut rng),
            bottleneck_pool: AvgPool2,
            levels,
            out_conv: Conv2d::new(width, 1, 1, 1, 0, true, &mut rng),
        })
    }

    pub fn input_side(&self) -> usize {
        self.encoder.spec.input_side
    }

    /// Number of decoder skip connections (dense blocks + 1).
    pub fn skip_count(&self) -> usize {
        self.levels.iter().filter(|l| l.skip_channels > 0).count()
    }

    pub fn forward_logits(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let out = self.encoder.forward(x, train, true);
        let mut h = self
            .bottleneck_pool
            .forward(&self.bottleneck_conv.forward(&out.features, train));
        let n_blocks = self.encoder.spec.block_layers.len();
        for (i, level) in self.levels.iter_mut().enumerate() {
            let skip = if i <= n_blocks {
                Some(&out.skips[n_blocks - i])
            } else {
                None
            };
            h = level.forward(&h, skip, train);
        }
        self.out_conv.forward(&h, train)
    }

    /// Inference probabilities in (0, 1), shape `(N, 1, side, side)`.
    pub fn predict_probs(&mut self, x: &Array4<F>) -> Array4<F> {
        self.forward_logits(x, false).mapv(sigmoid)
    }

    pub fn backward(&mut self, g_logits: &Array4<F>) {
        let mut g = self.out_conv.backward(g_logits);
        let n_blocks = self.encoder.spec.block_layers.len();
        let mut g_skips: Vec<Option<Array4<F>>> = vec![None; n_blocks + 1];
        for (i, level) in self.levels.iter_mut().enumerate().rev() {
            let (g_in, g_skip) = level.backward(&g);
            if let Some(gs) = g_skip {
                g_skips[n_blocks - i] = Some(gs);
            }
            g = g_in;
        }
        let g_feat = self
            .bottleneck_conv
            .backward(&self.bottleneck_pool.backward(&g));
        let g_skips: Vec<Array4<F>> = g_skips
            .into_iter()
            .map(|g| g.expect("every skip receives a gradient"))
            .collect();
        self.encoder.backward(&g_feat, Some(&g_skips));
    }
}

impl<F: Scalar> VisitTensors<F> for SegModel<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.encoder.visit_tensors(&scope(prefix, "encoder"), f);
        self.bottleneck_conv
            .visit_tensors(&scope(prefix, "bottleneck.conv"), f);
        for (i, level) in self.levels.iter_mut().enumerate() {
            level.visit_tensors(&scope(prefix, &format!("decoder.level{i}")), f);
        }
        self.out_conv
            .visit_tensors(&scope(prefix, "decoder.out"), f);
    }
}

impl<F: Scalar> VisitBn<F> for SegModel<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        self.encoder.visit_bn(f);
        for level in &mut self.levels {
            level.visit_bn(f);
        }
    }
}

/// Classifier: encoder, one head convolution, global average pooling, and a
/// linear softmax layer.
#[derive(Clone)]
pub struct ClsModel<F> {
    pub encoder: Encoder<F>,
    head_conv: Conv2d<F>,
    head_relu: Relu<F>,
    gap: GlobalAvgPool,
    fc: Linear<F>,
    n_classes: usize,
}

impl<F: Scalar> ClsModel<F> {
    pub fn build(spec: &EncoderSpec, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoder = Encoder::new(spec, &mut rng)?;
        let head_c = spec.head_channels();
        Ok(ClsModel {
            encoder,
            head_conv: Conv2d::new(spec.final_channels(), head_c, 3, 1, 1, true, &mut rng),
            head_relu: Relu::new(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(head_c, n_classes, &mut rng),
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_side(&self) -> usize {
        self.encoder.spec.input_side
    }

    pub fn forward_logits(&mut self, x: &Array4<F>, train: bool) -> Array2<F> {
        let out = self.encoder.forward(x, train, false);
        let h = self
            .head_relu
            .forward(&self.head_conv.forward(&out.features, train), train);
        let pooled = self.gap.forward(&h, train);
        self.fc.forward(&pooled, train)
    }

    /// Inference probabilities, shape `(N, n_classes)`, rows summing to 1.
    pub fn predict_probs(&mut self, x: &Array4<F>) -> Array2<F> {
        softmax_rows(&self.forward_logits(x, false))
    }

    pub fn backward(&mut self, g_logits: &Array2<F>) {
        let g = self.gap.backward(&self.fc.backward(g_logits));
        let g = self.head_conv.backward(&self.head_relu.backward(&g));
        self.encoder.backward(&g, None);
    }
}

impl<F: Scalar> VisitTensors<F> for ClsModel<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.encoder.visit_tensors(&scope(prefix, "encoder"), f);
        self.head_conv.visit_tensors(&scope(prefix, "head.conv"), f);
        self.fc.visit_tensors(&scope(prefix, "head.fc"), f);
    }
}

impl<F: Scalar> VisitBn<F> for ClsModel<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        self.encoder.visit_bn(f);
    }
}

/// Small convolutional stroke classifier: two conv/pool stages, global
/// pooling, one sigmoid output.
#[derive(Clone)]
pub struct HairNet<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Relu<F>,
    pool1: MaxPool2<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    relu2: Relu<F>,
    pool2: MaxPool2<F>,
    gap: GlobalAvgPool,
    fc: Linear<F>,
    input_side: usize,
    trained_epochs: u32,
}

impl<F: Scalar> HairNet<F> {
    pub fn build(input_side: usize, seed: u64) -> Result<Self> {
        if input_side < 4 || !input_side.is_multiple_of(4) {
            return Err(Error::BadEncoderSpec(
                "stroke classifier input side must be a positive multiple of 4".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(HairNet {
            conv1: Conv2d::new(3, 8, 3, 1, 1, false, &mut rng),
            bn1: BatchNorm2d::new(8),
            relu1: Relu::new(),
            pool1: MaxPool2::new(),
            conv2: Conv2d::new(8, 16, 3, 1, 1, false, &mut rng),
            bn2: BatchNorm2d::new(16),
            relu2: Relu::new(),
            pool2: MaxPool2::new(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(16, 1, &mut rng),
            input_side,
            trained_epochs: 0,
        })
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn is_trained(&self) -> bool {
        self.trained_epochs > 0
    }

    pub fn trained_epochs(&self) -> u32 {
        self.trained_epochs
    }

    pub fn mark_trained(&mut self, epochs: u32) {
        self.trained_epochs = epochs;
    }

    pub fn forward_logits(&mut self, x: &Array4<F>, train: bool) -> Array1<F> {
        let h = self.pool1.forward(
            &self.relu1.forward(
                &self.bn1.forward(&self.conv1.forward(x, train), train),
                train,
            ),
            train,
        );
        let h = self.pool2.forward(
            &self.relu2.forward(
                &self.bn2.forward(&self.conv2.forward(&h, train), train),
                train,
            ),
            train,
        );
        let pooled = self.gap.forward(&h, train);
        let out = self.fc.forward(&pooled, train);
        out.index_axis(Axis(1), 0).to_owned()
    }

    /// Sigmoid scores in [0, 1].
    pub fn scores(&mut self, x: &Array4<F>) -> Array1<F> {
        self.forward_logits(x, false).mapv(sigmoid)
    }

    pub fn backward(&mut self, g_logits: &Array1<F>) {
        let g2 = g_logits
            .view()
            .into_shape_with_order((g_logits.len(), 1))
            .expect("contiguous")
            .to_owned();
        let g = self.gap.backward(&self.fc.backward(&g2));
        let g = self.conv2.backward(
            &self
                .bn2
                .backward(&self.relu2.backward(&self.pool2.backward(&g))),
        );
        self.conv1.backward(
            &self
                .bn1
                .backward(&self.relu1.backward(&self.pool1.backward(&g))),
        );
    }
}

impl<F: Scalar> VisitTensors<F> for HairNet<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        self.conv1.visit_tensors(&scope(prefix, "conv1"), f);
        self.bn1.visit_tensors(&scope(prefix, "bn1"), f);
        self.conv2.visit_tensors(&scope(prefix, "conv2"), f);
        self.bn2.visit_tensors(&scope(prefix, "bn2"), f);
        self.fc.visit_tensors(&scope(prefix, "fc"), f);
    }
}

impl<F: Scalar> VisitBn<F> for HairNet<F> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<F>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }
}

/// Copy a trained segmentation encoder (parameters and batch-norm buffers)
/// into a freshly initialized classifier; head parameters stay at their
/// fresh initialization and nothing is frozen.
pub fn transplant_encoder<F: Scalar>(
    seg: &SegModel<F>,
    spec: &EncoderSpec,
    n_classes: usize,
    head_seed: u64,
) -> Result<ClsModel<F>> {
    if seg.encoder.spec != *spec {
        return Err(Error::SpecMismatch(format!(
            "segmentation encoder was built with {:?}",
            seg.encoder.spec
        )));
    }
    let mut seg = seg.clone();
    let all = export_tensors(&mut seg);
    let encoder_tensors: std::collections::BTreeMap<_, _> = all
        .into_iter()
        .filter(|(name, _)| name.starts_with("encoder."))
        .collect();
    let mut cls = ClsModel::build(spec, n_classes, head_seed)?;
    let used = import_subset(&mut cls, &encoder_tensors)?;
    if used != encoder_tensors.len() {
        return Err(Error::SpecMismatch(format!(
            "{} encoder tensors had no destination in the classifier",
            encoder_tensors.len() - used
        )));
    }
    Ok(cls)
}

/// Run classifier inference over a dataset tensor in fixed-size batches.
pub fn predict_probs_batched<F: Scalar>(
    model: &mut ClsModel<F>,
    images: &Array4<F>,
    batch_size: usize,
) -> Array2<F> {
    let n = images.dim().0;
    let mut out = Array2::<F>::zeros((n, model.n_classes()));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let batch = images.slice(s![start..end, .., .., ..]).to_owned();
        let probs = model.predict_probs(&batch);
        out.slice_mut(s![start..end, ..]).assign(&probs);
        start = end;
    }
    out
}
