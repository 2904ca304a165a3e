//! Architecture intermediate representation for resnet-style image generators.
//!
//! A [`GeneratorArch`] is a plain data description: a head (stem and
//! downsampling), a list of residual blocks, and a tail (upsampling and the
//! output projection). Normalization layers carry their per-channel scales
//! and shifts inline, which is what the pruner reads.
//!
//! Two block flavours exist. [`PlainResBlock`] is the conventional
//! two-convolution residual block of the original generators.
//! [`IncResBlock`] replaces it with six parallel operations (conventional or
//! depthwise, kernel 1, 3 or 5), each with `channels / 6` middle channels.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Number of parallel operations in an [`IncResBlock`].
pub const INCRES_BRANCHES: usize = 6;

/// Kernel sizes used by the [`IncResBlock`] operations.
pub const INCRES_KERNELS: [usize; 3] = [1, 3, 5];

/// Slope of the leaky ReLU activation.
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl From<[usize; 3]> for Shape {
    fn from(v: [usize; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.c, s.h, s.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    /// Parses `CxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected shape as CxHxW, got {s:?}"
            )));
        }
        let mut dims = [0usize; 3];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad dimension {p:?} in {s:?}")))?;
            if *d == 0 {
                return Err(Error::InvalidArgument(format!("zero dimension in {s:?}")));
            }
        }
        Ok(Shape::from(dims))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad_mode: PadMode,
        bias: bool,
    },
    DepthwiseConv {
        kernel: usize,
        channels: usize,
        stride: usize,
        pad_mode: PadMode,
    },
    /// Stride-2 upsampling; padding is `kernel / 2`.
    TransposedConv {
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        output_pad: usize,
        bias: bool,
    },
    Norm {
        norm_type: NormKind,
        channels: usize,
        #[serde(serialize_with = "ser_f32s")]
        gamma: Vec<f32>,
        #[serde(serialize_with = "ser_f32s")]
        beta: Vec<f32>,
        tracks_running_stats: bool,
        prunable: bool,
    },
    Activation {
        function: ActivationKind,
    },
    ResidualAdd,
}

fn ser_f32s<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
    // Route through the shortest f32 decimal so the JSON reads `0.1`, not
    // `0.10000000149011612`.
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        let clean: f64 = if x.is_finite() {
            x.to_string().parse().unwrap_or(x as f64)
        } else {
            f64::NAN
        };
        seq.serialize_element(&clean)?;
    }
    seq.end()
}

impl LayerSpec {
    pub fn conv(kernel: usize, in_ch: usize, out_ch: usize, stride: usize, pad_mode: PadMode) -> Self {
        LayerSpec::Conv {
            kernel,
            in_ch,
            out_ch,
            stride,
            pad_mode,
            bias: false,
        }
    }

    pub fn norm(norm_type: NormKind, channels: usize, prunable: bool) -> Self {
        LayerSpec::Norm {
            norm_type,
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            tracks_running_stats: norm_type == NormKind::Batch,
            prunable,
        }
    }

    pub fn activation(function: ActivationKind) -> Self {
        LayerSpec::Activation { function }
    }

    pub fn is_prunable_norm(&self) -> bool {
        matches!(self, LayerSpec::Norm { prunable: true, .. })
    }

    /// Channel count this layer expects on its input, if it constrains it.
    pub fn in_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { in_ch, .. } | LayerSpec::TransposedConv { in_ch, .. } => Some(in_ch),
            LayerSpec::DepthwiseConv { channels, .. } | LayerSpec::Norm { channels, .. } => {
                Some(channels)
            }
            LayerSpec::Activation { .. } | LayerSpec::ResidualAdd => None,
        }
    }

    /// Output shape for a given input, checking channel agreement and
    /// spatial feasibility.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, ShapeIssue> {
        if let Some(expected) = self.in_channels() {
            if expected != input.c {
                return Err(ShapeIssue::Channels {
                    expected,
                    found: input.c,
                });
            }
        }
        match *self {
            LayerSpec::Conv {
                kernel,
                out_ch,
                stride,
                pad_mode,
                ..
            } => conv_out(kernel, stride, pad_mode, input).map(|(h, w)| Shape::new(out_ch, h, w)),
            LayerSpec::DepthwiseConv {
                kernel,
                channels,
                stride,
                pad_mode,
            } => conv_out(kernel, stride, pad_mode, input).map(|(h, w)| Shape::new(channels, h, w)),
            LayerSpec::TransposedConv {
                kernel,
                out_ch,
                stride,
                output_pad,
                ..
            } => {
                if kernel == 0 || stride == 0 {
                    return Err(ShapeIssue::Geometry("zero kernel or stride".into()));
                }
                if output_pad >= stride {
                    return Err(ShapeIssue::Geometry(format!(
                        "output_pad {output_pad} must be smaller than stride {stride}"
                    )));
                }
                let pad = kernel / 2;
                let up = |n: usize| ((n - 1) * stride + kernel + output_pad).checked_sub(2 * pad);
                match (up(input.h), up(input.w)) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(out_ch, h, w)),
                    _ => Err(ShapeIssue::Geometry("transposed conv output is empty".into())),
                }
            }
            LayerSpec::Norm { .. } | LayerSpec::Activation { .. } | LayerSpec::ResidualAdd => Ok(input),
        }
    }
}

fn conv_out(
    kernel: usize,
    stride: usize,
    pad_mode: PadMode,
    input: Shape,
) -> std::result::Result<(usize, usize), ShapeIssue> {
    if kernel % 2 == 0 {
        return Err(ShapeIssue::Geometry(format!("kernel {kernel} must be odd")));
    }
    if !(1..=2).contains(&stride) {
        return Err(ShapeIssue::Geometry(format!("stride {stride} must be 1 or 2")));
    }
    let pad = kernel / 2;
    if pad_mode == PadMode::Reflect && (pad >= input.h || pad >= input.w) {
        return Err(ShapeIssue::Geometry(format!(
            "reflect padding {pad} too large for {}x{} input",
            input.h, input.w
        )));
    }
    let o = |n: usize| (n + 2 * pad - kernel) / stride + 1;
    if input.h == 0 || input.w == 0 {
        return Err(ShapeIssue::Geometry("empty spatial input".into()));
    }
    Ok((o(input.h), o(input.w)))
}

/// Why a layer cannot consume a given input shape.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeIssue {
    Channels { expected: usize, found: usize },
    Geometry(String),
}

impl fmt::Display for ShapeIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeIssue::Channels { expected, found } => {
                write!(f, "expected {expected} input channels, found {found}")
            }
            ShapeIssue::Geometry(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchOp {
    Conventional,
    Depthwise,
}

/// One operation of an [`IncResBlock`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub op: BranchOp,
    pub kernel: usize,
    pub mid_ch: usize,
    pub alive: bool,
    pub layers: Vec<LayerSpec>,
}

/// Index of the prunable normalization layer inside every branch.
pub const BRANCH_PRUNABLE_NORM: usize = 1;

impl Branch {
    pub fn new(op: BranchOp, kernel: usize, channels: usize, mid_ch: usize, norm: NormKind) -> Self {
        use ActivationKind::Relu;
        let layers = match op {
            BranchOp::Conventional => vec![
                LayerSpec::conv(kernel, channels, mid_ch, 1, PadMode::Zero),
                LayerSpec::norm(norm, mid_ch, true),
                LayerSpec::activation(Relu),
                LayerSpec::conv(kernel, mid_ch, channels, 1, PadMode::Zero),
                LayerSpec::norm(norm, channels, false),
            ],
            BranchOp::Depthwise => vec![
                LayerSpec::conv(1, channels, mid_ch, 1, PadMode::Zero),
                LayerSpec::norm(norm, mid_ch, true),
                LayerSpec::activation(Relu),
                LayerSpec::DepthwiseConv {
                    kernel,
                    channels: mid_ch,
                    stride: 1,
                    pad_mode: PadMode::Zero,
                },
                LayerSpec::norm(norm, mid_ch, false),
                LayerSpec::activation(Relu),
                LayerSpec::conv(1, mid_ch, channels, 1, PadMode::Zero),
                LayerSpec::norm(norm, channels, false),
            ],
        };
        Branch {
            op,
            kernel,
            mid_ch,
            alive: mid_ch > 0,
            layers,
        }
    }

    /// Layer kinds this branch must have, in order.
    fn schema(&self) -> &'static [&'static str] {
        match self.op {
            BranchOp::Conventional => &["conv", "norm", "activation", "conv", "norm"],
            BranchOp::Depthwise => &[
                "conv",
                "norm",
                "activation",
                "depthwise_conv",
                "norm",
                "activation",
                "conv",
                "norm",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncResBlock {
    pub channels: usize,
    pub branches: Vec<Branch>,
}

impl IncResBlock {
    pub fn new(channels: usize, norm: NormKind) -> Self {
        let mid = channels / INCRES_BRANCHES;
        let mut branches = Vec::with_capacity(INCRES_BRANCHES);
        for op in [BranchOp::Conventional, BranchOp::Depthwise] {
            for k in INCRES_KERNELS {
                branches.push(Branch::new(op, k, channels, mid, norm));
            }
        }
        IncResBlock { channels, branches }
    }

    pub fn alive_branches(&self) -> usize {
        self.branches.iter().filter(|b| b.alive).count()
    }
}

/// Conventional residual block: conv3x3, norm, relu, conv3x3, norm, add.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainResBlock {
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl PlainResBlock {
    pub fn new(channels: usize, norm: NormKind) -> Self {
        PlainResBlock {
            channels,
            layers: vec![
                LayerSpec::conv(3, channels, channels, 1, PadMode::Zero),
                LayerSpec::norm(norm, channels, false),
                LayerSpec::activation(ActivationKind::Relu),
                LayerSpec::conv(3, channels, channels, 1, PadMode::Zero),
                LayerSpec::norm(norm, channels, false),
                LayerSpec::ResidualAdd,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    IncRes(IncResBlock),
    Plain(PlainResBlock),
}

impl Block {
    pub fn channels(&self) -> usize {
        match self {
            Block::IncRes(b) => b.channels,
            Block::Plain(b) => b.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub format_version: u32,
    pub name: String,
    pub input_shape: [usize; 3],
    pub head: Vec<LayerSpec>,
    pub blocks: Vec<Block>,
    pub tail: Vec<LayerSpec>,
}

pub fn head_id(i: usize) -> String {
    format!("head.{i}")
}

pub fn tail_id(i: usize) -> String {
    format!("tail.{i}")
}

pub fn branch_layer_id(block: usize, branch: usize, layer: usize) -> String {
    format!("blocks.{block}.branches.{branch}.{layer}")
}

pub fn plain_layer_id(block: usize, layer: usize) -> String {
    format!("blocks.{block}.layers.{layer}")
}

/// Where a prunable normalization layer lives; decides whether the floor
/// applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSite {
    /// Head or tail, outside any residual block.
    Outer,
    Branch { block: usize, branch: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct PrunableNorm<'a> {
    pub site: NormSite,
    pub gamma: &'a [f32],
}

impl GeneratorArch {
    pub fn empty(name: impl Into<String>, input_shape: Shape) -> Self {
        GeneratorArch {
            format_version: FORMAT_VERSION,
            name: name.into(),
            input_shape: input_shape.into(),
            head: Vec::new(),
            blocks: Vec::new(),
            tail: Vec::new(),
        }
    }

    pub fn input(&self) -> Shape {
        Shape::from(self.input_shape)
    }

    /// Width of the residual stream, i.e. the channel count entering the
    /// first block.
    pub fn stream_channels(&self) -> Option<usize> {
        self.blocks.first().map(Block::channels)
    }

    /// All prunable normalization layers keyed by layer id, in execution
    /// order (head, blocks, tail). Dead branches are skipped.
    pub fn prunable_norms(&self) -> Vec<(String, PrunableNorm<'_>)> {
        let mut out = Vec::new();
        fn outer<'a>(layers: &'a [LayerSpec], id: fn(usize) -> String, out: &mut Vec<(String, PrunableNorm<'a>)>) {
            for (i, l) in layers.iter().enumerate() {
                if let LayerSpec::Norm {
                    prunable: true,
                    gamma,
                    ..
                } = l
                {
                    out.push((
                        id(i),
                        PrunableNorm {
                            site: NormSite::Outer,
                            gamma: gamma.as_slice(),
                        },
                    ));
                }
            }
        }
        outer(&self.head, head_id, &mut out);
        for (b, block) in self.blocks.iter().enumerate() {
            if let Block::IncRes(inc) = block {
                for (j, br) in inc.branches.iter().enumerate() {
                    if !br.alive {
                        continue;
                    }
                    for (i, l) in br.layers.iter().enumerate() {
                        if let LayerSpec::Norm {
                            prunable: true,
                            gamma,
                            ..
                        } = l
                        {
                            out.push((
                                branch_layer_id(b, j, i),
                                PrunableNorm {
                                    site: NormSite::Branch { block: b, branch: j },
                                    gamma: gamma.as_slice(),
                                },
                            ));
                        }
                    }
                }
            }
        }
        outer(&self.tail, tail_id, &mut out);
        out
    }

    /// Mutable access to every normalization layer's scale and shift, in a
    /// fixed traversal order.
    pub fn norms_mut(&mut self) -> Vec<(&mut Vec<f32>, &mut Vec<f32>)> {
        fn collect<'a>(layers: &'a mut [LayerSpec], out: &mut Vec<(&'a mut Vec<f32>, &'a mut Vec<f32>)>) {
            for l in layers {
                if let LayerSpec::Norm { gamma, beta, .. } = l {
                    out.push((gamma, beta));
                }
            }
        }
        let mut out = Vec::new();
        collect(&mut self.head, &mut out);
        for block in &mut self.blocks {
            match block {
                Block::IncRes(inc) => {
                    for br in &mut inc.branches {
                        collect(&mut br.layers, &mut out);
                    }
                }
                Block::Plain(p) => collect(&mut p.layers, &mut out),
            }
        }
        collect(&mut self.tail, &mut out);
        out
    }

    /// Resets every normalization layer to scale ~ N(mean, std) and zero
    /// shift.
    pub fn randomize_scales<R: Rng + ?Sized>(&mut self, rng: &mut R, mean: f32, std: f32) {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        for (gamma, beta) in self.norms_mut() {
            for g in gamma.iter_mut() {
                *g = dist.sample(rng);
            }
            beta.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Hex digest of the architecture's structure: every field except the
    /// normalization scales and shifts, which change during training.
    pub fn structure_hash(&self) -> String {
        let mut stripped = self.clone();
        for (gamma, beta) in stripped.norms_mut() {
            gamma.clear();
            beta.clear();
        }
        let mut h = Sha256::new();
        h.update(stripped.to_json().as_bytes());
        hex_digest(h)
    }

    /// Canonical JSON: keys sorted, two-space indentation, trailing LF.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("architecture is always serializable");
        let mut s = serde_json::to_string_pretty(&value).expect("value is always serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: GeneratorArch = serde_json::from_str(text).map_err(json_error)?;
        if arch.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "format_version: unsupported value {}, expected {FORMAT_VERSION}",
                arch.format_version
            )));
        }
        Ok(arch)
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<ValidationError>> {
        validate(self)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn json_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        Category::Io | Category::Syntax | Category::Eof => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        <[usize; 3]>::deserialize(d).map(Shape::from)
    }
}

impl Serialize for Shape {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        <[usize; 3]>::from(*self).serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("{layer}: expected {expected} input channels, found {found}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("{layer}: {channels} channels but gamma has {gamma_len} and beta {beta_len} entries")]
    GammaLengthMismatch {
        layer: String,
        channels: usize,
        gamma_len: usize,
        beta_len: usize,
    },
    #[error("{layer}: prunable norm does not directly follow a convolution producing its channels")]
    OrphanPrunableNorm { layer: String },
    #[error("{layer}: layer has zero channels outside a residual branch")]
    EmptyLayer { layer: String },
    #[error("{layer}: {message}")]
    Geometry { layer: String, message: String },
    #[error("{block}: incres block has {found} branches, expected {INCRES_BRANCHES}")]
    BranchCount { block: String, found: usize },
    #[error("{layer}: {message}")]
    BranchState { layer: String, message: String },
    #[error("{block}: residual body maps {input} to {output}")]
    ResidualShape {
        block: String,
        input: Shape,
        output: Shape,
    },
    #[error("unsupported format_version {0}")]
    FormatVersion(u32),
}

fn layer_kind(l: &LayerSpec) -> &'static str {
    match l {
        LayerSpec::Conv { .. } => "conv",
        LayerSpec::DepthwiseConv { .. } => "depthwise_conv",
        LayerSpec::TransposedConv { .. } => "transposed_conv",
        LayerSpec::Norm { .. } => "norm",
        LayerSpec::Activation { .. } => "activation",
        LayerSpec::ResidualAdd => "residual_add",
    }
}

/// Walks a layer sequence, recording issues. Returns the output shape,
/// continuing past channel mismatches with the producer's declared count.
fn check_sequence(
    layers: &[LayerSpec],
    mut shape: Shape,
    id: &dyn Fn(usize) -> String,
    allow_empty: bool,
    errors: &mut Vec<ValidationError>,
) -> Shape {
    for (i, layer) in layers.iter().enumerate() {
        let lid = id(i);
        if let LayerSpec::Norm {
            channels,
            gamma,
            beta,
            prunable,
            ..
        } = layer
        {
            if gamma.len() != *channels || beta.len() != *channels {
                errors.push(ValidationError::GammaLengthMismatch {
                    layer: lid.clone(),
                    channels: *channels,
                    gamma_len: gamma.len(),
                    beta_len: beta.len(),
                });
            }
            if *prunable {
                let producer = i.checked_sub(1).map(|p| &layers[p]);
                let ok = match producer {
                    Some(LayerSpec::Conv { out_ch, .. }) | Some(LayerSpec::TransposedConv { out_ch, .. }) => {
                        out_ch == channels
                    }
                    Some(LayerSpec::DepthwiseConv { channels: c, .. }) => c == channels,
                    _ => false,
                };
                if !ok {
                    errors.push(ValidationError::OrphanPrunableNorm { layer: lid.clone() });
                }
            }
        }
        let next = match layer.output_shape(shape) {
            Ok(s) => s,
            Err(ShapeIssue::Channels { expected, found }) => {
                errors.push(ValidationError::ChannelMismatch {
                    layer: lid.clone(),
                    expected,
                    found,
                });
                // Resume as if the input had matched.
                layer
                    .output_shape(Shape { c: expected, ..shape })
                    .unwrap_or(Shape { c: expected, ..shape })
            }
            Err(ShapeIssue::Geometry(message)) => {
                errors.push(ValidationError::Geometry {
                    layer: lid.clone(),
                    message,
                });
                return shape;
            }
        };
        if next.c == 0 && !allow_empty {
            errors.push(ValidationError::EmptyLayer { layer: lid });
        }
        shape = next;
    }
    shape
}

pub fn validate(arch: &GeneratorArch) -> std::result::Result<(), Vec<ValidationError>> {
    let mut errors = Vec::new();
    if arch.format_version != FORMAT_VERSION {
        errors.push(ValidationError::FormatVersion(arch.format_version));
    }
    let mut shape = check_sequence(&arch.head, arch.input(), &head_id, false, &mut errors);
    for (b, block) in arch.blocks.iter().enumerate() {
        let bid = format!("blocks.{b}");
        if block.channels() != shape.c {
            errors.push(ValidationError::ChannelMismatch {
                layer: bid.clone(),
                expected: block.channels(),
                found: shape.c,
            });
            shape.c = block.channels();
        }
        match block {
            Block::IncRes(inc) => {
                if inc.branches.len() != INCRES_BRANCHES {
                    errors.push(ValidationError::BranchCount {
                        block: bid.clone(),
                        found: inc.branches.len(),
                    });
                }
                for (j, br) in inc.branches.iter().enumerate() {
                    check_branch(b, j, br, shape, &mut errors);
                }
            }
            Block::Plain(p) => {
                let id = |i| plain_layer_id(b, i);
                if p.layers.iter().filter(|l| l.is_prunable_norm()).count() > 0 {
                    // Prunable norms inside plain bodies are not supported by
                    // the pruner; report them.
                    for (i, l) in p.layers.iter().enumerate() {
                        if l.is_prunable_norm() {
                            errors.push(ValidationError::BranchState {
                                layer: id(i),
                                message: "plain residual blocks cannot hold prunable norms".into(),
                            });
                        }
                    }
                }
                if !matches!(p.layers.last(), Some(LayerSpec::ResidualAdd)) {
                    errors.push(ValidationError::BranchState {
                        layer: bid.clone(),
                        message: "plain block body must end with residual_add".into(),
                    });
                }
                let out = check_sequence(&p.layers, shape, &id, false, &mut errors);
                if out != shape {
                    errors.push(ValidationError::ResidualShape {
                        block: bid.clone(),
                        input: shape,
                        output: out,
                    });
                }
            }
        }
    }
    check_sequence(&arch.tail, shape, &tail_id, false, &mut errors);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn check_branch(b: usize, j: usize, br: &Branch, input: Shape, errors: &mut Vec<ValidationError>) {
    let id = |i| branch_layer_id(b, j, i);
    let bid = format!("blocks.{b}.branches.{j}");
    if br.alive != (br.mid_ch > 0) {
        errors.push(ValidationError::BranchState {
            layer: bid.clone(),
            message: format!("alive={} inconsistent with mid_ch={}", br.alive, br.mid_ch),
        });
    }
    if !INCRES_KERNELS.contains(&br.kernel) {
        errors.push(ValidationError::BranchState {
            layer: bid.clone(),
            message: format!("kernel {} not in {:?}", br.kernel, INCRES_KERNELS),
        });
    }
    let kinds: Vec<&str> = br.layers.iter().map(layer_kind).collect();
    if kinds != br.schema() {
        errors.push(ValidationError::BranchState {
            layer: bid.clone(),
            message: format!("layer sequence {kinds:?} does not match {:?} schema", br.op),
        });
        return;
    }
    let prunable: Vec<usize> = (0..br.layers.len())
        .filter(|&i| br.layers[i].is_prunable_norm())
        .collect();
    if prunable != [BRANCH_PRUNABLE_NORM] {
        errors.push(ValidationError::BranchState {
            layer: bid.clone(),
            message: format!("prunable norms at {prunable:?}, expected exactly [{BRANCH_PRUNABLE_NORM}]"),
        });
    }
    match &br.layers[0] {
        LayerSpec::Conv { out_ch, kernel, .. } => {
            if *out_ch != br.mid_ch {
                errors.push(ValidationError::BranchState {
                    layer: id(0),
                    message: format!("first conv produces {out_ch} channels, mid_ch is {}", br.mid_ch),
                });
            }
            let want = if br.op == BranchOp::Conventional { br.kernel } else { 1 };
            if *kernel != want {
                errors.push(ValidationError::BranchState {
                    layer: id(0),
                    message: format!("first conv kernel {kernel}, expected {want}"),
                });
            }
        }
        _ => unreachable!("schema checked above"),
    }
    let out = check_sequence(&br.layers, input, &id, true, errors);
    if out != input {
        errors.push(ValidationError::ResidualShape {
            block: bid,
            input,
            output: out,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Plain,
    #[serde(alias = "incres")]
    IncRes,
}

pub const DESK_BASE_CHANNELS: usize = 12;
pub const DESK_BLOCKS: usize = 9;

/// Options for [`build_resnet_template`] beyond the positional ones.
#[derive(Debug, Clone)]
pub struct TemplateOptions {
    pub base_ch: usize,
    pub n_blocks: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub block_kind: BlockKind,
    pub norm: NormKind,
    pub height: usize,
    pub width: usize,
}

impl TemplateOptions {
    pub fn new(base_ch: usize, n_blocks: usize, in_ch: usize, out_ch: usize, block_kind: BlockKind) -> Self {
        TemplateOptions {
            base_ch,
            n_blocks,
            in_ch,
            out_ch,
            block_kind,
            norm: NormKind::Instance,
            height: 256,
            width: 256,
        }
    }

    /// The incres teacher used with the synthetic task: one input channel,
    /// three output channels, square images of side `size`.
    pub fn desk(size: usize) -> Self {
        TemplateOptions::new(DESK_BASE_CHANNELS, DESK_BLOCKS, 1, 3, BlockKind::IncRes).with_size(size, size)
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn build(&self) -> Result<GeneratorArch> {
        let underflow = |what: &str, value: usize| -> Result<()> {
            if value < 1 {
                Err(Error::ChannelUnderflow {
                    what: what.into(),
                    value,
                })
            } else {
                Ok(())
            }
        };
        underflow("base channels", self.base_ch)?;
        underflow("input channels", self.in_ch)?;
        underflow("output channels", self.out_ch)?;
        if self.n_blocks < 1 {
            return Err(Error::InvalidArgument("n_blocks must be at least 1".into()));
        }
        let c1 = self.base_ch;
        let c2 = 2 * c1;
        let c4 = 4 * c1;
        if self.block_kind == BlockKind::IncRes {
            underflow("incres branch mid channels", c4 / INCRES_BRANCHES)?;
        }
        let norm = self.norm;
        let relu = || LayerSpec::activation(ActivationKind::Relu);
        let head = vec![
            LayerSpec::conv(7, self.in_ch, c1, 1, PadMode::Reflect),
            LayerSpec::norm(norm, c1, true),
            relu(),
            LayerSpec::conv(3, c1, c2, 2, PadMode::Zero),
            LayerSpec::norm(norm, c2, true),
            relu(),
            LayerSpec::conv(3, c2, c4, 2, PadMode::Zero),
            LayerSpec::norm(norm, c4, true),
            relu(),
        ];
        let blocks = (0..self.n_blocks)
            .map(|_| match self.block_kind {
                BlockKind::Plain => Block::Plain(PlainResBlock::new(c4, norm)),
                BlockKind::IncRes => Block::IncRes(IncResBlock::new(c4, norm)),
            })
            .collect();
        let up = |i, o| LayerSpec::TransposedConv {
            kernel: 3,
            in_ch: i,
            out_ch: o,
            stride: 2,
            output_pad: 1,
            bias: false,
        };
        let tail = vec![
            up(c4, c2),
            LayerSpec::norm(norm, c2, true),
            relu(),
            up(c2, c1),
            LayerSpec::norm(norm, c1, true),
            relu(),
            LayerSpec::Conv {
                kernel: 7,
                in_ch: c1,
                out_ch: self.out_ch,
                stride: 1,
                pad_mode: PadMode::Reflect,
                bias: true,
            },
            LayerSpec::activation(ActivationKind::Tanh),
        ];
        let kind = match self.block_kind {
            BlockKind::Plain => "plain",
            BlockKind::IncRes => "incres",
        };
        Ok(GeneratorArch {
            format_version: FORMAT_VERSION,
            name: format!("{kind}-resnet-{}x{}", self.base_ch, self.n_blocks),
            input_shape: [self.in_ch, self.height, self.width],
            head,
            blocks,
            tail,
        })
    }
}

/// Resnet generator: c7s1 stem, two stride-2 downsamplings, `n_blocks`
/// residual blocks at `4 * base_ch` channels, two stride-2 upsamplings and a
/// 7x7 output conv with tanh. Instance norm, 3x256x256-style input of
/// `in_ch` channels at 256x256.
pub fn build_resnet_template(
    base_ch: usize,
    n_blocks: usize,
    in_ch: usize,
    out_ch: usize,
    block_kind: BlockKind,
) -> Result<GeneratorArch> {
    TemplateOptions::new(base_ch, n_blocks, in_ch, out_ch, block_kind).build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn incres(base: usize, n: usize) -> GeneratorArch {
        build_resnet_template(base, n, 3, 3, BlockKind::IncRes).unwrap()
    }

    #[test]
    fn templates_validate() {
        for base in [6, 7, 12, 64] {
            for n in [1, 2, 9, 16] {
                for kind in [BlockKind::Plain, BlockKind::IncRes] {
                    let a = build_resnet_template(base, n, 3, 3, kind).unwrap();
                    assert_eq!(a.validate(), Ok(()), "base {base} n {n} {kind:?}");
                }
            }
        }
    }

    #[test]
    fn branch_mid_channels_are_floor_of_sixth() {
        let a = build_resnet_template(6, 1, 1, 3, BlockKind::IncRes).unwrap();
        let Block::IncRes(b) = &a.blocks[0] else { panic!() };
        assert_eq!(b.branches.len(), 6);
        assert!(b.branches.iter().all(|br| br.mid_ch == 4 && br.alive));

        let a = build_resnet_template(7, 1, 1, 3, BlockKind::IncRes).unwrap();
        let Block::IncRes(b) = &a.blocks[0] else { panic!() };
        assert!(b.branches.iter().all(|br| br.mid_ch == 28 / 6));
    }

    #[test]
    fn underflow_is_reported() {
        assert!(matches!(
            build_resnet_template(1, 1, 3, 3, BlockKind::IncRes),
            Err(Error::ChannelUnderflow { .. })
        ));
        assert!(matches!(
            build_resnet_template(0, 1, 3, 3, BlockKind::Plain),
            Err(Error::ChannelUnderflow { .. })
        ));
        assert!(build_resnet_template(4, 0, 3, 3, BlockKind::Plain).is_err());
    }

    #[test]
    fn gamma_length_mismatch_detected() {
        let mut a = incres(6, 1);
        if let LayerSpec::Norm { gamma, .. } = &mut a.head[1] {
            gamma.pop();
        }
        let errs = a.validate().unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, ValidationError::GammaLengthMismatch { layer, .. } if layer == "head.1")));
    }

    #[test]
    fn branch_channel_mismatch_detected() {
        let mut a = incres(6, 1);
        let Block::IncRes(b) = &mut a.blocks[0] else { panic!() };
        if let LayerSpec::Conv { in_ch, .. } = &mut b.branches[1].layers[3] {
            *in_ch += 1;
        }
        let errs = a.validate().unwrap_err();
        assert!(errs.iter().any(|e| matches!(
            e,
            ValidationError::ChannelMismatch { layer, expected: 5, found: 4 } if layer == "blocks.0.branches.1.3"
        )), "{errs:?}");
    }

    #[test]
    fn orphan_prunable_norm_detected() {
        let mut a = incres(6, 1);
        // right after the relu at tail.2
        a.tail.insert(3, LayerSpec::norm(NormKind::Instance, 12, true));
        let errs = a.validate().unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, ValidationError::OrphanPrunableNorm { .. })));
    }

    #[test]
    fn roundtrip_and_stable_bytes() {
        let mut a = incres(6, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        a.randomize_scales(&mut rng, 1.0, 0.3);
        let text = a.to_json();
        let b = GeneratorArch::from_json(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_json());
        assert!(text.ends_with('\n') && !text.contains('\r'));
        // keys sorted: "blocks" precedes "format_version" precedes "head"
        let p = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(p("blocks") < p("format_version") && p("format_version") < p("head"));
    }

    use rand::SeedableRng;

    #[test]
    fn malformed_json_is_parse_error() {
        match GeneratorArch::from_json("{\"name\": \n ]") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_layer_kind_is_schema_error() {
        let a = incres(6, 1);
        let text = a.to_json().replacen("\"kind\": \"conv\"", "\"kind\": \"conv9d\"", 1);
        match GeneratorArch::from_json(&text) {
            Err(Error::Schema(m)) => assert!(m.contains("conv9d"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_format_version_is_schema_error() {
        let a = incres(6, 1);
        let text = a.to_json().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(GeneratorArch::from_json(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn structure_hash_ignores_scales() {
        let a = incres(6, 1);
        let mut b = a.clone();
        b.randomize_scales(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1), 1.0, 0.1);
        assert_eq!(a.structure_hash(), b.structure_hash());
        let c = incres(6, 2);
        assert_ne!(a.structure_hash(), c.structure_hash());
    }

    #[test]
    fn shape_parse() {
        assert_eq!("3x256x256".parse::<Shape>().unwrap(), Shape::new(3, 256, 256));
        assert!("3x256".parse::<Shape>().is_err());
        assert!("0x4x4".parse::<Shape>().is_err());
    }
}
