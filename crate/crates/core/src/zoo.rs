//! The teacher network and the split slimmable student.
//!
//! Teacher: four conv blocks (3x3, batch norm, ReLU) with channel plan
//! `[16, 32, 64, 64]` and strides `[2, 2, 2, 1]`, taking a 3x64x64 image to a
//! 64x8x8 feature, followed by a 1x1 objectness head.
//!
//! Student: encoder (teacher blocks 1-3) | compressor | bottleneck of `C`
//! channels at 8x8 | decompressor back to 64 channels | frozen copy of teacher
//! block 4 and head. One weight set serves every width in the width set.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::ops::{self, Activation, ConvGeometry, MacCounter};
use crate::slim::{
    BnMode, ConvBlock, LayerMacs, MacReport, Segment, SlimBatchNorm, SlimmableConv, TensorRole, WidthError, WidthMultiplier, WidthSet,
    PARAMS_PER_BLOCK,
};
use crate::tensor::{Element, Shape, Tensor, TensorError};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 64;
pub const GRID: usize = 8;
pub const TEACHER_PLAN: [usize; 4] = [16, 32, 64, 64];
pub const TEACHER_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const DEFAULT_BOTTLENECK: usize = 48;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Width(#[from] WidthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("width {0} is not in the trained width set; enable extrapolation to evaluate it")]
    UntrainedWidth(WidthMultiplier),
    #[error("bottleneck channel mismatch at width {alpha}: expected {expected}, got {actual}")]
    BottleneckChannels {
        alpha: WidthMultiplier,
        expected: usize,
        actual: usize,
    },
    #[error("bottleneck size must be at least 1")]
    EmptyBottleneck,
    #[error("width set is empty")]
    EmptyWidthSet,
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name:?} has shape {found}, model expects {expected}")]
    TensorShape { name: String, expected: Shape, found: Shape },
    #[error("invalid model metadata: {0}")]
    Metadata(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Compressor/decompressor designs around the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressorVariant {
    /// Spatial reduction (3x3 stride-2 conv) then channel reduction (1x1 conv);
    /// the encoder's last block runs at stride 1 so the bottleneck stays 8x8.
    SruCru,
    /// A duplicate of the encoder's final block, once on each side.
    LastLayerPair,
    /// No compressor: the encoder's last block emits the bottleneck directly.
    DecompressorOnly,
}

impl CompressorVariant {
    pub const ALL: [CompressorVariant; 3] = [Self::SruCru, Self::LastLayerPair, Self::DecompressorOnly];

    /// Wire code used in feature packets.
    pub fn code(self) -> u8 {
        match self {
            Self::SruCru => 0,
            Self::LastLayerPair => 1,
            Self::DecompressorOnly => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SruCru => "sru_cru",
            Self::LastLayerPair => "last_layer_pair",
            Self::DecompressorOnly => "decompressor_only",
        }
    }
}

impl fmt::Display for CompressorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompressorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown compressor variant {s:?} (expected sru_cru, last_layer_pair or decompressor_only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BottleneckSpec {
    pub channels: usize,
    pub variant: CompressorVariant,
}

impl BottleneckSpec {
    pub fn new(channels: usize, variant: CompressorVariant) -> Result<Self> {
        if channels == 0 {
            return Err(ModelError::EmptyBottleneck);
        }
        Ok(BottleneckSpec { channels, variant })
    }
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        BottleneckSpec {
            channels: DEFAULT_BOTTLENECK,
            variant: CompressorVariant::LastLayerPair,
        }
    }
}

/// Which convolutions carry slim flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigMode {
    /// Only the bottleneck edge slims: α changes bandwidth, not encoder cost.
    BandwidthOnly,
    /// Every encoder and compressor convolution slims.
    FullConfig,
}

impl ConfigMode {
    pub fn code(self) -> u8 {
        match self {
            Self::BandwidthOnly => 0,
            Self::FullConfig => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BandwidthOnly => "bandwidth_only",
            Self::FullConfig => "full_config",
        }
    }
}

impl fmt::Display for ConfigMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfigMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bandwidth_only" => Ok(Self::BandwidthOnly),
            "full_config" => Ok(Self::FullConfig),
            _ => Err(format!("unknown mode {s:?} (expected bandwidth_only or full_config)")),
        }
    }
}

struct BlockDef<'a> {
    name: &'a str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    bn: bool,
    act: Option<Activation>,
    slim_in: bool,
    slim_out: bool,
}

impl BlockDef<'_> {
    fn build(self, rng: &mut ChaCha8Rng, weight_std: Option<f64>) -> ConvBlock {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let std = weight_std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Tensor::from_fn(Shape::new(self.cout, self.cin, self.k, self.k), |_| normal.sample(rng));
        let bias = Tensor::vector(vec![0.0; self.cout]);
        let conv = SlimmableConv::new(weight, bias, ConvGeometry::new(self.stride, self.k / 2), self.slim_in, self.slim_out)
            .expect("bias matches weight");
        ConvBlock {
            name: self.name.to_string(),
            conv,
            bn: self.bn.then(|| SlimBatchNorm::new(self.cout)),
            act: self.act,
        }
    }
}

fn conv_block(name: &str, cin: usize, cout: usize, k: usize, stride: usize, slim_in: bool, slim_out: bool) -> BlockDef<'_> {
    BlockDef {
        name,
        cin,
        cout,
        k,
        stride,
        bn: true,
        act: Some(Activation::Relu),
        slim_in,
        slim_out,
    }
}

fn head_block(rng: &mut ChaCha8Rng) -> ConvBlock {
    BlockDef {
        name: "head",
        cin: TEACHER_PLAN[3],
        cout: 1,
        k: 1,
        stride: 1,
        bn: false,
        act: None,
        slim_in: false,
        slim_out: false,
    }
    .build(rng, Some(0.01))
}

/// SHA-256 over every stored tensor (names, shapes and little-endian bytes).
fn hash_blocks<'a>(blocks: impl Iterator<Item = &'a ConvBlock>) -> [u8; 32] {
    let mut h = Sha256::new();
    for b in blocks {
        for (name, t, _) in b.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape().dims() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn hash_weights_only<'a>(blocks: impl Iterator<Item = &'a ConvBlock>) -> [u8; 32] {
    let mut h = Sha256::new();
    for b in blocks {
        for (name, t, role) in b.named_tensors() {
            if role == TensorRole::Weight {
                h.update(name.as_bytes());
                h.update(t.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

fn blocks_to_checkpoint<'a>(ck: &mut Checkpoint, blocks: impl Iterator<Item = &'a ConvBlock>) -> Result<()> {
    for b in blocks {
        for (name, t, _) in b.named_tensors() {
            ck.push_f64(name, t)?;
        }
    }
    Ok(())
}

fn blocks_from_checkpoint<'a>(ck: &Checkpoint, blocks: impl Iterator<Item = &'a mut ConvBlock>) -> Result<()> {
    for b in blocks {
        for (name, t) in b.named_tensors_mut() {
            let src = ck.get_f64(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(ModelError::TensorShape {
                    name,
                    expected: t.shape(),
                    found: src.shape(),
                });
            }
            *t = src.clone();
        }
    }
    Ok(())
}

/// Output of an inference forward pass through the teacher.
#[derive(Debug, Clone)]
pub struct TeacherOutput<T> {
    /// Outputs of blocks 1-4.
    pub features: Vec<Tensor<T>>,
    /// Per-cell objectness probability, `(N, 1, 8, 8)`.
    pub head: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherNet {
    pub blocks: Vec<ConvBlock>,
    pub head: ConvBlock,
}

/// He-initialized teacher, deterministic in `seed`.
pub fn build_teacher(seed: u64) -> TeacherNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = INPUT_CHANNELS;
    let mut blocks = Vec::new();
    for (i, (&cout, &stride)) in TEACHER_PLAN.iter().zip(&TEACHER_STRIDES).enumerate() {
        let name = format!("block{}", i + 1);
        blocks.push(conv_block(&name, cin, cout, 3, stride, false, false).build(&mut rng, None));
        cin = cout;
    }
    let head = head_block(&mut rng);
    TeacherNet { blocks, head }
}

impl TeacherNet {
    pub fn all_blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.blocks.iter().chain(std::iter::once(&self.head))
    }

    fn all_blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.blocks.iter_mut().chain(std::iter::once(&mut self.head))
    }

    pub fn param_count(&self) -> usize {
        self.all_blocks().map(ConvBlock::param_count).sum()
    }

    pub fn forward<T: Element>(&self, x: &Tensor<T>) -> Result<TeacherOutput<T>> {
        let full = WidthMultiplier::FULL;
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_infer(&h, full, None)?;
            features.push(h.clone());
        }
        let logits = self.head.forward_infer(&h, full, None)?;
        Ok(TeacherOutput {
            features,
            head: ops::activation(&logits, Activation::Sigmoid),
        })
    }

    /// Records a forward pass; returns block output nodes and the head logits.
    pub fn forward_graph(&mut self, g: &mut Graph, x: NodeId, bn_mode: BnMode) -> Result<(Vec<NodeId>, NodeId)> {
        let full = WidthMultiplier::FULL;
        let mut feats = Vec::new();
        let mut h = x;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            h = b.forward_graph(g, h, full, bn_mode, true, i * PARAMS_PER_BLOCK)?;
            feats.push(h);
        }
        let logits = self
            .head
            .forward_graph(g, h, full, bn_mode, true, self.blocks.len() * PARAMS_PER_BLOCK)?;
        Ok((feats, logits))
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<f64>)> {
        collect_params(self.all_blocks_mut().map(|b| (b, true)))
    }

    pub fn weight_hash(&self) -> [u8; 32] {
        hash_blocks(self.all_blocks())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        blocks_to_checkpoint(&mut ck, self.all_blocks())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = build_teacher(0);
        blocks_from_checkpoint(ck, t.all_blocks_mut())?;
        Ok(t)
    }
}

fn collect_params<'a>(blocks: impl Iterator<Item = (&'a mut ConvBlock, bool)>) -> Vec<(ParamId, &'a mut Tensor<f64>)> {
    let mut out = Vec::new();
    for (i, (b, trainable)) in blocks.enumerate() {
        if !trainable {
            continue;
        }
        let base = i * PARAMS_PER_BLOCK;
        let ConvBlock { conv, bn, .. } = b;
        out.push((base, &mut conv.weight));
        out.push((base + 1, &mut conv.bias));
        if let Some(bn) = bn {
            out.push((base + 2, &mut bn.gamma));
            out.push((base + 3, &mut bn.beta));
        }
    }
    out
}

/// Student construction options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentOptions {
    /// Copy teacher blocks 1-3 into the encoder instead of random init.
    pub pretrained_encoder: bool,
    /// Start compressor and decompressor near identity: random weights
    /// scaled by this factor plus a unit centre tap from input channel `j`
    /// to output channel `j`. `None` keeps plain He init.
    pub near_identity: Option<f64>,
    /// Permit evaluation at widths outside the trained set.
    pub allow_extrapolation: bool,
    pub seed: u64,
}

impl Default for StudentOptions {
    fn default() -> Self {
        StudentOptions {
            pretrained_encoder: true,
            near_identity: Some(0.1),
            allow_extrapolation: false,
            seed: 0,
        }
    }
}

/// Student graph nodes needed by the distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct StudentNodes {
    pub bottleneck: NodeId,
    /// Decompressor output, compared with teacher block 3.
    pub decompressed: NodeId,
    /// Decoder block output, compared with teacher block 4.
    pub decoded: NodeId,
}

/// Server-side outputs for one bottleneck.
#[derive(Debug, Clone)]
pub struct DecodeOutput<T> {
    pub decompressed: Tensor<T>,
    pub decoded: Tensor<T>,
    pub head: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitStudent {
    pub encoder: Vec<ConvBlock>,
    pub compressor: Vec<ConvBlock>,
    pub decompressor: Vec<ConvBlock>,
    pub decoder: Vec<ConvBlock>,
    pub head: ConvBlock,
    pub bottleneck: BottleneckSpec,
    pub width_set: WidthSet,
    pub mode: ConfigMode,
    pub allow_extrapolation: bool,
}

/// Builds the split student around a trained teacher. The decoder (teacher
/// block 4 and head) is copied verbatim and never trained.
pub fn build_student(
    teacher: &TeacherNet,
    spec: BottleneckSpec,
    width_set: WidthSet,
    mode: ConfigMode,
    opts: StudentOptions,
) -> Result<SplitStudent> {
    if width_set.is_empty() {
        return Err(ModelError::EmptyWidthSet);
    }
    if spec.channels == 0 {
        return Err(ModelError::EmptyBottleneck);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut student = SplitStudent::architecture(spec, width_set, mode, &mut rng).with_decoder_from(teacher);
    student.allow_extrapolation = opts.allow_extrapolation;
    if opts.pretrained_encoder {
        for (dst, src) in student.encoder.iter_mut().zip(&teacher.blocks[..3]) {
            copy_block_prefix(dst, src);
        }
    }
    if let Some(scale) = opts.near_identity {
        for b in student.compressor.iter_mut().chain(student.decompressor.iter_mut()) {
            near_identity(&mut b.conv.weight, scale);
        }
    }
    Ok(student)
}

fn near_identity(w: &mut Tensor<f64>, scale: f64) {
    let s = w.shape();
    let centre = (s.h / 2, s.w / 2);
    w.data_mut().iter_mut().for_each(|v| *v *= scale);
    for j in 0..s.n.min(s.c) {
        let i = w.index(j, j, centre.0, centre.1);
        w.data_mut()[i] += 1.0;
    }
}

/// Copies the overlapping prefix of weights, bias and batch-norm tensors.
fn copy_block_prefix(dst: &mut ConvBlock, src: &ConvBlock) {
    let (d, s) = (dst.conv.weight.shape(), src.conv.weight.shape());
    if d.c != s.c || d.h != s.h {
        return;
    }
    let co = d.n.min(s.n);
    let per = s.c * s.h * s.w;
    dst.conv.weight.data_mut()[..co * per].copy_from_slice(&src.conv.weight.data()[..co * per]);
    dst.conv.bias.data_mut()[..co].copy_from_slice(&src.conv.bias.data()[..co]);
    if let (Some(db), Some(sb)) = (&mut dst.bn, &src.bn) {
        db.gamma.data_mut()[..co].copy_from_slice(&sb.gamma.data()[..co]);
        db.beta.data_mut()[..co].copy_from_slice(&sb.beta.data()[..co]);
        db.running_mean.data_mut()[..co].copy_from_slice(&sb.running_mean.data()[..co]);
        db.running_var.data_mut()[..co].copy_from_slice(&sb.running_var.data()[..co]);
    }
}

impl SplitStudent {
    /// Fresh architecture with random weights; the decoder is a placeholder
    /// until copied from a teacher.
    fn architecture(spec: BottleneckSpec, width_set: WidthSet, mode: ConfigMode, rng: &mut ChaCha8Rng) -> SplitStudent {
        let full = mode == ConfigMode::FullConfig;
        let c = spec.channels;
        let [p1, p2, p3, p4] = TEACHER_PLAN;
        let (b3_out, b3_stride) = match spec.variant {
            CompressorVariant::SruCru => (p3, 1),
            CompressorVariant::LastLayerPair => (p3, 2),
            CompressorVariant::DecompressorOnly => (c, 2),
        };
        let b3_is_bottleneck = spec.variant == CompressorVariant::DecompressorOnly;
        let mut encoder = vec![
            conv_block("encoder.block1", INPUT_CHANNELS, p1, 3, 2, false, full).build(rng, None),
            conv_block("encoder.block2", p1, p2, 3, 2, full, full).build(rng, None),
            conv_block("encoder.block3", p2, b3_out, 3, b3_stride, full, full || b3_is_bottleneck).build(rng, None),
        ];
        let mut compressor = match spec.variant {
            CompressorVariant::SruCru => vec![
                conv_block("compressor.sru", p3, p3, 3, 2, full, full).build(rng, None),
                conv_block("compressor.cru", p3, c, 1, 1, full, true).build(rng, None),
            ],
            CompressorVariant::LastLayerPair => vec![conv_block("compressor.ll", p3, c, 3, 1, full, true).build(rng, None)],
            CompressorVariant::DecompressorOnly => Vec::new(),
        };
        let mut decompressor = match spec.variant {
            CompressorVariant::SruCru => vec![
                conv_block("decompressor.cru", c, p3, 1, 1, true, false).build(rng, None),
                conv_block("decompressor.sru", p3, p3, 3, 1, false, false).build(rng, None),
            ],
            CompressorVariant::LastLayerPair | CompressorVariant::DecompressorOnly => {
                vec![conv_block("decompressor.ll", c, p3, 3, 1, true, false).build(rng, None)]
            }
        };
        // Linear bottleneck: the producer keeps batch norm but drops its ReLU.
        compressor.last_mut().unwrap_or(&mut encoder[2]).act = None;
        // The first decompressor conv sees a width-dependent channel count;
        // without batch norm its train and inference behaviour coincide.
        decompressor[0].bn = None;
        let decoder = vec![conv_block("decoder.block4", p3, p4, 3, TEACHER_STRIDES[3], false, false).build(rng, None)];
        let mut head = head_block(rng);
        head.name = "decoder.head".into();
        SplitStudent {
            encoder,
            compressor,
            decompressor,
            decoder,
            head,
            bottleneck: spec,
            width_set,
            mode,
            allow_extrapolation: false,
        }
    }

    fn with_decoder_from(mut self, teacher: &TeacherNet) -> Self {
        self.decoder[0] = teacher.blocks[3].clone();
        self.decoder[0].name = "decoder.block4".into();
        self.head = teacher.head.clone();
        self.head.name = "decoder.head".into();
        self
    }

    pub fn segments(&self) -> impl Iterator<Item = (Segment, &ConvBlock)> {
        self.encoder
            .iter()
            .map(|b| (Segment::Encoder, b))
            .chain(self.compressor.iter().map(|b| (Segment::Compressor, b)))
            .chain(self.decompressor.iter().map(|b| (Segment::Decompressor, b)))
            .chain(self.decoder.iter().map(|b| (Segment::Decoder, b)))
            .chain(std::iter::once((Segment::Decoder, &self.head)))
    }

    fn segments_mut(&mut self) -> impl Iterator<Item = (Segment, &mut ConvBlock)> {
        self.encoder
            .iter_mut()
            .map(|b| (Segment::Encoder, b))
            .chain(self.compressor.iter_mut().map(|b| (Segment::Compressor, b)))
            .chain(self.decompressor.iter_mut().map(|b| (Segment::Decompressor, b)))
            .chain(self.decoder.iter_mut().map(|b| (Segment::Decoder, b)))
            .chain(std::iter::once((Segment::Decoder, &mut self.head)))
    }

    pub fn client_blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder.iter().chain(&self.compressor)
    }

    /// Encoder, compressor and decompressor: the layers distillation trains.
    pub fn trainable_blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder.iter_mut().chain(self.compressor.iter_mut()).chain(self.decompressor.iter_mut())
    }

    /// Checks α against the width set; returns whether it is an extrapolation.
    pub fn check_alpha(&self, alpha: WidthMultiplier) -> Result<bool> {
        if self.width_set.contains(alpha) {
            Ok(false)
        } else if self.allow_extrapolation {
            Ok(true)
        } else {
            Err(ModelError::UntrainedWidth(alpha))
        }
    }

    pub fn bottleneck_channels(&self, alpha: WidthMultiplier) -> usize {
        alpha.resolve(self.bottleneck.channels)
    }

    /// Client side: image to bottleneck at width α.
    pub fn encode<T: Element>(&self, image: &Tensor<T>, alpha: WidthMultiplier) -> Result<Tensor<T>> {
        self.check_alpha(alpha)?;
        let mut h = image.clone();
        for b in self.client_blocks() {
            h = b.forward_infer(&h, alpha, None)?;
        }
        Ok(h)
    }

    /// Server side: bottleneck at width α to per-cell objectness in (0, 1).
    pub fn decode<T: Element>(&self, bottleneck: &Tensor<T>, alpha: WidthMultiplier) -> Result<Tensor<T>> {
        Ok(self.decode_full(bottleneck, alpha)?.head)
    }

    pub fn decode_full<T: Element>(&self, bottleneck: &Tensor<T>, alpha: WidthMultiplier) -> Result<DecodeOutput<T>> {
        self.check_alpha(alpha)?;
        let expected = self.bottleneck_channels(alpha);
        let actual = bottleneck.shape().c;
        if actual != expected {
            return Err(ModelError::BottleneckChannels { alpha, expected, actual });
        }
        let mut h = bottleneck.clone();
        for b in &self.decompressor {
            h = b.forward_infer(&h, alpha, None)?;
        }
        let decompressed = h.clone();
        for b in &self.decoder {
            h = b.forward_infer(&h, alpha, None)?;
        }
        let decoded = h.clone();
        let logits = self.head.forward_infer(&h, alpha, None)?;
        Ok(DecodeOutput {
            decompressed,
            decoded,
            head: ops::activation(&logits, Activation::Sigmoid),
        })
    }

    /// Records the training forward pass. Trainable segments use `bn_mode`;
    /// the decoder enters as constants with inference batch norm.
    pub fn forward_graph(&mut self, g: &mut Graph, x: NodeId, alpha: WidthMultiplier, bn_mode: BnMode) -> Result<StudentNodes> {
        self.check_alpha(alpha)?;
        let mut h = x;
        let mut bottleneck = x;
        let mut decompressed = x;
        let n_client = self.encoder.len() + self.compressor.len();
        let n_trainable = n_client + self.decompressor.len();
        for (i, (_, b)) in self.segments_mut().enumerate() {
            if i == n_trainable + 1 {
                // head is not needed by the feature loss
                break;
            }
            let trainable = i < n_trainable;
            let mode = if trainable { bn_mode } else { BnMode::Infer };
            h = b.forward_graph(g, h, alpha, mode, trainable, i * PARAMS_PER_BLOCK)?;
            if i + 1 == n_client {
                bottleneck = h;
            }
            if i + 1 == n_trainable {
                decompressed = h;
            }
        }
        Ok(StudentNodes {
            bottleneck,
            decompressed,
            decoded: h,
        })
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<f64>)> {
        let n_trainable = self.encoder.len() + self.compressor.len() + self.decompressor.len();
        collect_params(self.segments_mut().enumerate().map(|(i, (_, b))| (b, i < n_trainable)))
    }

    /// Analytic MAC counts for one image at width α.
    pub fn mac_report(&self, alpha: WidthMultiplier) -> MacReport {
        let (mut h, mut w) = (INPUT_SIZE, INPUT_SIZE);
        let mut layers = Vec::new();
        for (segment, b) in self.segments() {
            (h, w) = b.conv.out_dims(h, w);
            layers.push(LayerMacs {
                name: b.name.clone(),
                segment,
                macs: b.conv.mac_count(alpha, h, w),
            });
        }
        MacReport { layers }
    }

    /// MACs counted inside the convolution loops during a real forward pass
    /// of `image` at width α, reported per image.
    pub fn instrumented_macs<T: Element>(&self, image: &Tensor<T>, alpha: WidthMultiplier) -> Result<MacReport> {
        let n = image.shape().n as u64;
        let counter = MacCounter::new();
        let mut layers = Vec::new();
        let mut h = image.clone();
        for (segment, b) in self.segments() {
            h = b.forward_infer(&h, alpha, Some(&counter))?;
            layers.push(LayerMacs {
                name: b.name.clone(),
                segment,
                macs: counter.reset() / n.max(1),
            });
        }
        Ok(MacReport { layers })
    }

    pub fn compressor_param_count(&self) -> usize {
        self.compressor.iter().map(ConvBlock::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.segments().map(|(_, b)| b.param_count()).sum()
    }

    /// Bytes of parameter and statistics storage.
    pub fn storage_bytes(&self) -> usize {
        self.segments()
            .flat_map(|(_, b)| b.named_tensors())
            .map(|(_, t, _)| t.numel() * 8)
            .sum()
    }

    pub fn weight_hash(&self) -> [u8; 32] {
        hash_blocks(self.segments().map(|(_, b)| b))
    }

    /// Hash of learned tensors only (conv weights, biases, gamma, beta).
    pub fn learned_weight_hash(&self) -> [u8; 32] {
        hash_weights_only(self.segments().map(|(_, b)| b))
    }

    pub fn decoder_hash(&self) -> [u8; 32] {
        hash_blocks(self.decoder.iter().chain(std::iter::once(&self.head)))
    }

    /// Whether decoder block and head equal the teacher's bitwise.
    pub fn decoder_matches(&self, teacher: &TeacherNet) -> bool {
        let same = |a: &ConvBlock, b: &ConvBlock| a.conv == b.conv && a.bn == b.bn && a.act == b.act;
        same(&self.decoder[0], &teacher.blocks[3]) && same(&self.head, &teacher.head)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_f64("meta.bottleneck", &Tensor::vector(vec![self.bottleneck.channels as f64]))?;
        ck.push_f64("meta.variant", &Tensor::vector(vec![self.bottleneck.variant.code() as f64]))?;
        ck.push_f64("meta.mode", &Tensor::vector(vec![self.mode.code() as f64]))?;
        ck.push_f64("meta.extrapolation", &Tensor::vector(vec![self.allow_extrapolation as u8 as f64]))?;
        let widths: Vec<f64> = self
            .width_set
            .iter()
            .flat_map(|a| [a.numer() as f64, a.denom() as f64])
            .collect();
        ck.push_f64("meta.widths", &Tensor::vector(widths))?;
        blocks_to_checkpoint(&mut ck, self.segments().map(|(_, b)| b))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |name: &str| -> Result<Vec<f64>> {
            Ok(ck
                .get_f64(name)
                .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?
                .data()
                .to_vec())
        };
        let channels = meta("meta.bottleneck")?[0] as usize;
        let variant = CompressorVariant::from_code(meta("meta.variant")?[0] as u8)
            .ok_or_else(|| ModelError::Metadata("unknown compressor variant".into()))?;
        let mode = match meta("meta.mode")?[0] as u8 {
            0 => ConfigMode::BandwidthOnly,
            1 => ConfigMode::FullConfig,
            m => return Err(ModelError::Metadata(format!("unknown mode code {m}"))),
        };
        let raw = meta("meta.widths")?;
        let widths = raw
            .chunks(2)
            .map(|p| WidthMultiplier::new(p[0] as u32, *p.get(1).unwrap_or(&0.0) as u32))
            .collect::<Result<Vec<_>, _>>()?;
        let width_set = WidthSet::with_any_max(widths)?;
        let spec = BottleneckSpec::new(channels, variant)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = SplitStudent::architecture(spec, width_set, mode, &mut rng);
        s.allow_extrapolation = meta("meta.extrapolation")?[0] != 0.0;
        blocks_from_checkpoint(ck, s.segments_mut().map(|(_, b)| b))?;
        Ok(s)
    }
}
