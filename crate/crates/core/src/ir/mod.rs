//! Network graph representation and the on-disk container format.
//!
//! A container is a directory holding `manifest.json` (topology, attributes,
//! quantization parameters) and `tensors.bin` (every tensor payload, see
//! [`blob`]). The same layout stores calibration datasets.

pub mod blob;
mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizers::QuantSpec;
use crate::tensor::Tensor;

pub use manifest::{load_dataset, load_model, save_dataset, save_model, save_quantized};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum IrError {
    #[error("bad magic {0:?}, expected \"HPTQ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unexpected end of container")]
    UnexpectedEof,
    #[error("shape inconsistency: {0}")]
    ShapeMismatch(String),
    #[error("dangling edge: `{node}` reads `{tensor}` which nothing produces")]
    DanglingEdge { node: String, tensor: String },
    #[error("tensor `{0}` has more than one producer")]
    DuplicateProducer(String),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),
    #[error("tensor `{0}` missing from container")]
    MissingTensor(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("invalid attribute on `{node}`: {reason}")]
    InvalidAttribute { node: String, reason: String },
    #[error("missing quantization parameters for `{0}`")]
    MissingQuantization(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IrError {
    /// Stable numeric code, one per failure class.
    pub fn code(&self) -> u32 {
        match self {
            IrError::BadMagic(_) => 1,
            IrError::VersionMismatch { .. } => 2,
            IrError::UnexpectedEof => 3,
            IrError::ShapeMismatch(_) => 4,
            IrError::DanglingEdge { .. } => 5,
            IrError::DuplicateProducer(_) => 6,
            IrError::Cycle(_) => 7,
            IrError::UnsupportedOp(_) => 8,
            IrError::MissingTensor(_) => 9,
            IrError::UnknownDtype(_) => 10,
            IrError::InvalidAttribute { .. } => 11,
            IrError::MissingQuantization(_) => 12,
            IrError::Manifest(_) => 13,
            IrError::Io(_) => 14,
        }
    }
}

type IrResult<T> = Result<T, IrError>;

pub type NodeId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Output size `ceil(in / stride)`, extra padding on the trailing side.
    Same,
}

/// Convolution parameters. Regular kernels are kh×kw×cin×cout; depthwise
/// kernels are kh×kw×1×c.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: [usize; 2],
    pub padding: Padding,
    /// Value used for padded positions (0 unless a shift was folded in).
    pub pad_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// cin×cout
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub size: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Relu6,
    /// `min(max(x, 0), clip)`; one clip value, or one per channel.
    ClippedRelu { clip: Vec<f64> },
    LeakyRelu { slope: f64 },
    /// Negative-side slope per channel (or a single shared slope).
    Prelu { slopes: Vec<f64> },
    Swish,
    Selu,
    Hswish,
    Identity,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Relu6 => "relu6",
            ActivationKind::ClippedRelu { .. } => "clipped_relu",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
            ActivationKind::Prelu { .. } => "prelu",
            ActivationKind::Swish => "swish",
            ActivationKind::Selu => "selu",
            ActivationKind::Hswish => "hswish",
            ActivationKind::Identity => "identity",
        }
    }
}

/// Elementwise non-linearity, optionally followed by a constant shift
/// (`φ(x) + shift`, used by shift negative correction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    #[serde(flatten)]
    pub kind: ActivationKind,
    #[serde(default)]
    pub shift: f64,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, shift: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv2d(Conv2d),
    DepthwiseConv2d(Conv2d),
    Dense(Dense),
    BatchNorm(BatchNorm),
    Activation(Activation),
    Add,
    GlobalAvgPool,
    MaxPool(Pool),
    Flatten,
    Softmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::DepthwiseConv2d(_) => "depthwise_conv2d",
            Op::Dense(_) => "dense",
            Op::BatchNorm(_) => "batch_norm",
            Op::Activation(_) => "activation",
            Op::Add => "add",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::MaxPool(_) => "max_pool",
            Op::Flatten => "flatten",
            Op::Softmax => "softmax",
        }
    }

    /// Conv, depthwise conv and dense: the ops that carry a weight tensor.
    pub fn is_linear(&self) -> bool {
        matches!(self, Op::Conv2d(_) | Op::DepthwiseConv2d(_) | Op::Dense(_))
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => Some(&c.weight),
            Op::Dense(d) => Some(&d.weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => Some(&mut c.weight),
            Op::Dense(d) => Some(&mut d.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => Some(&c.bias),
            Op::Dense(d) => Some(&d.bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => Some(&mut c.bias),
            Op::Dense(d) => Some(&mut d.bias),
            _ => None,
        }
    }
}

/// Per-output-channel weight quantizers of a linear node (always signed).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub bits: u32,
    pub exponents: Vec<i32>,
}

impl WeightQuant {
    pub fn spec(&self, channel: usize) -> QuantSpec {
        QuantSpec {
            bits: self.bits,
            signed: true,
            exponent: self.exponents[channel],
        }
    }
}

/// How a rewritten tensor relates to the same-named tensor of the source
/// float model: `source = (value - offset) * scale[k]`, `k` indexing the
/// last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMap {
    #[serde(default)]
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
}

impl SourceMap {
    pub fn apply(&self, value: &Tensor) -> Tensor {
        let mut out = value.map(|v| v - self.offset);
        if let Some(scale) = &self.scale {
            for row in out.data_mut().chunks_exact_mut(scale.len()) {
                row.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
    /// Output activation quantizer.
    pub quant: Option<QuantSpec>,
    pub weight_quant: Option<WeightQuant>,
    pub source_map: Option<SourceMap>,
}

impl Node {
    pub fn new(id: NodeId, name: impl Into<String>, op: Op, inputs: Vec<String>) -> Self {
        let name = name.into();
        Self {
            id,
            output: name.clone(),
            name,
            op,
            inputs,
            quant: None,
            weight_quant: None,
            source_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<usize>,
    pub quant: Option<QuantSpec>,
}

/// Which parts of a graph carry quantizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScope {
    pub activations: bool,
    pub weights: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub input: GraphInput,
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
    /// `None` for float graphs.
    pub scope: Option<QuantScope>,
}

/// Samples used for calibration (and, with labels, for evaluation).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Tensor>,
    pub labels: Option<Vec<u32>>,
    /// Free-form preprocessing description recorded by the producer.
    pub preprocessing: Option<serde_json::Value>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Tensor>) -> Self {
        Self {
            samples,
            labels: None,
            preprocessing: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn conv_out(len: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => (len >= k).then(|| (len - k) / stride + 1),
        Padding::Same => Some(len.div_ceil(stride)),
    }
}

/// Leading padding (rows or columns) for a window op.
pub fn pad_before(len: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let out = len.div_ceil(stride);
            ((out - 1) * stride + k).saturating_sub(len) / 2
        }
    }
}

impl Graph {
    /// Builds and validates a float graph; nodes are put in deterministic
    /// topological order.
    pub fn new(input: GraphInput, outputs: Vec<String>, nodes: Vec<Node>) -> IrResult<Self> {
        let mut g = Self {
            input,
            outputs,
            nodes,
            scope: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn is_quantized(&self) -> bool {
        self.scope.is_some()
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.output == tensor)
    }

    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == tensor))
            .collect()
    }

    pub fn is_output(&self, tensor: &str) -> bool {
        self.outputs.iter().any(|o| o == tensor)
    }

    /// Linear or batch-norm output consumed only by an activation. Such
    /// tensors are fused with the activation and never quantized.
    pub fn is_fused(&self, node: &Node) -> bool {
        if !(node.op.is_linear() || matches!(node.op, Op::BatchNorm(_))) || self.is_output(&node.output)
        {
            return false;
        }
        let consumers = self.consumers(&node.output);
        consumers.len() == 1 && matches!(consumers[0].op, Op::Activation(_))
    }

    /// Tensors that receive an activation quantizer: the graph input and every
    /// node output except fused linear outputs and reshapes.
    pub fn quantization_points(&self) -> Vec<String> {
        std::iter::once(self.input.name.clone())
            .chain(
                self.nodes
                    .iter()
                    .filter(|n| !self.is_fused(n) && !matches!(n.op, Op::Flatten))
                    .map(|n| n.output.clone()),
            )
            .collect()
    }

    pub fn linear_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.op.is_linear())
    }

    /// Checks topology, attributes and shapes, and re-sorts nodes.
    pub fn validate(&mut self) -> IrResult<()> {
        let mut producers: HashMap<&str, usize> = HashMap::new();
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !names.insert(n.name.as_str()) || !ids.insert(n.id) {
                return Err(IrError::InvalidAttribute {
                    node: n.name.clone(),
                    reason: "duplicate node name or id".into(),
                });
            }
            if n.output == self.input.name || producers.insert(&n.output, i).is_some() {
                return Err(IrError::DuplicateProducer(n.output.clone()));
            }
        }
        for n in &self.nodes {
            for t in &n.inputs {
                if t != &self.input.name && !producers.contains_key(t.as_str()) {
                    return Err(IrError::DanglingEdge {
                        node: n.name.clone(),
                        tensor: t.clone(),
                    });
                }
            }
        }
        for o in &self.outputs {
            if o != &self.input.name && !producers.contains_key(o.as_str()) {
                return Err(IrError::DanglingEdge {
                    node: "<graph outputs>".into(),
                    tensor: o.clone(),
                });
            }
        }
        if self.outputs.is_empty() {
            return Err(IrError::InvalidAttribute {
                node: "<graph>".into(),
                reason: "graph has no outputs".into(),
            });
        }

        // Kahn's algorithm, always releasing the smallest ready id first.
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for t in &node.inputs {
                if let Some(&p) = producers.get(t.as_str()) {
                    indegree[i] += 1;
                    dependents[p].push(i);
                }
            }
        }
        let mut ready: BTreeSet<(NodeId, usize)> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| (self.nodes[i].id, i))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&first) = ready.iter().next() {
            ready.remove(&first);
            let i = first.1;
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert((self.nodes[d].id, d));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
            return Err(IrError::Cycle(self.nodes[stuck].name.clone()));
        }
        let mut slots: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| slots[i].take().unwrap()).collect();

        self.infer_shapes()?;
        Ok(())
    }

    /// Shapes of every tensor, keyed by tensor name.
    pub fn infer_shapes(&self) -> IrResult<BTreeMap<String, Vec<usize>>> {
        let mut shapes = BTreeMap::new();
        if self.input.shape.is_empty() || self.input.shape.contains(&0) {
            return Err(IrError::ShapeMismatch(format!(
                "graph input shape {:?}",
                self.input.shape
            )));
        }
        shapes.insert(self.input.name.clone(), self.input.shape.clone());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node
                .inputs
                .iter()
                .map(|t| {
                    shapes.get(t).ok_or_else(|| IrError::DanglingEdge {
                        node: node.name.clone(),
                        tensor: t.clone(),
                    })
                })
                .collect::<IrResult<_>>()?;
            let out = node_output_shape(node, &ins)?;
            shapes.insert(node.output.clone(), out);
        }
        Ok(shapes)
    }
}

fn node_output_shape(node: &Node, ins: &[&Vec<usize>]) -> IrResult<Vec<usize>> {
    let bad = |reason: String| IrError::ShapeMismatch(format!("`{}`: {reason}", node.name));
    let attr = |reason: &str| IrError::InvalidAttribute {
        node: node.name.clone(),
        reason: reason.to_string(),
    };
    let arity = if matches!(node.op, Op::Add) { 2 } else { 1 };
    if ins.len() != arity {
        return Err(bad(format!("expects {arity} input(s), got {}", ins.len())));
    }
    let x = ins[0];
    let channels = *x.last().unwrap();
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    match &node.op {
        Op::Conv2d(c) | Op::DepthwiseConv2d(c) => {
            let depthwise = matches!(node.op, Op::DepthwiseConv2d(_));
            let wd = c.weight.dims();
            if x.len() != 3 || wd.len() != 4 {
                return Err(bad(format!("input {x:?} / kernel {wd:?} ranks")));
            }
            let (cin_w, cout) = (wd[2], wd[3]);
            if depthwise && (cin_w != 1 || cout != x[2]) {
                return Err(bad(format!("depthwise kernel {wd:?} for input {x:?}")));
            }
            if !depthwise && cin_w != x[2] {
                return Err(bad(format!("kernel {wd:?} for input {x:?}")));
            }
            if c.bias.len() != cout {
                return Err(bad(format!("bias length {} for {cout} channels", c.bias.len())));
            }
            if c.stride.contains(&0) || !c.pad_value.is_finite() {
                return Err(attr("stride must be positive and pad value finite"));
            }
            let oh = conv_out(x[0], wd[0], c.stride[0], c.padding);
            let ow = conv_out(x[1], wd[1], c.stride[1], c.padding);
            match (oh, ow) {
                (Some(h), Some(w)) => Ok(vec![h, w, cout]),
                _ => Err(bad(format!("kernel {wd:?} larger than input {x:?}"))),
            }
        }
        Op::Dense(d) => {
            let wd = d.weight.dims();
            if x.len() != 1 || wd.len() != 2 || wd[0] != x[0] {
                return Err(bad(format!("dense kernel {wd:?} for input {x:?}")));
            }
            if d.bias.len() != wd[1] {
                return Err(bad(format!("bias length {} for {} outputs", d.bias.len(), wd[1])));
            }
            Ok(vec![wd[1]])
        }
        Op::BatchNorm(bn) => {
            let lens = [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()];
            if lens.iter().any(|&l| l != channels) {
                return Err(bad(format!("batch_norm params {lens:?} for {channels} channels")));
            }
            if !(bn.epsilon >= 0.0) || bn.var.iter().any(|v| !(*v + bn.epsilon > 0.0)) {
                return Err(attr("variance + epsilon must be positive"));
            }
            Ok(x.clone())
        }
        Op::Activation(a) => {
            let per_channel_ok = |v: &[f64]| v.len() == 1 || v.len() == channels;
            match &a.kind {
                ActivationKind::ClippedRelu { clip } => {
                    if !per_channel_ok(clip) || !finite(clip) || clip.iter().any(|&c| c <= 0.0) {
                        return Err(attr("clip values must be positive, one or one per channel"));
                    }
                }
                ActivationKind::Prelu { slopes } => {
                    if !per_channel_ok(slopes) || !finite(slopes) {
                        return Err(attr("prelu slopes must be finite, one or one per channel"));
                    }
                }
                ActivationKind::LeakyRelu { slope } if !slope.is_finite() => {
                    return Err(attr("leaky_relu slope must be finite"));
                }
                _ => {}
            }
            if !a.shift.is_finite() {
                return Err(attr("shift must be finite"));
            }
            Ok(x.clone())
        }
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(bad(format!("add of {:?} and {:?}", ins[0], ins[1])));
            }
            Ok(x.clone())
        }
        Op::GlobalAvgPool => {
            if x.len() != 3 {
                return Err(bad(format!("global_avg_pool needs h×w×c, got {x:?}")));
            }
            Ok(vec![x[2]])
        }
        Op::MaxPool(p) => {
            if x.len() != 3 || p.size.contains(&0) || p.stride.contains(&0) {
                return Err(bad(format!("max_pool on {x:?}")));
            }
            let oh = conv_out(x[0], p.size[0], p.stride[0], p.padding);
            let ow = conv_out(x[1], p.size[1], p.stride[1], p.padding);
            match (oh, ow) {
                (Some(h), Some(w)) => Ok(vec![h, w, x[2]]),
                _ => Err(bad(format!("pool window larger than input {x:?}"))),
            }
        }
        Op::Flatten => Ok(vec![x.iter().product()]),
        Op::Softmax => Ok(x.clone()),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::tensor::Layout;

    pub fn input(shape: Vec<usize>) -> GraphInput {
        GraphInput {
            name: "input".into(),
            shape,
            quant: None,
        }
    }

    pub fn conv(weight: Tensor, bias: Vec<f64>, padding: Padding) -> Op {
        Op::Conv2d(Conv2d {
            weight: weight.with_layout(Layout::Weight),
            bias,
            stride: [1, 1],
            padding,
            pad_value: 0.0,
        })
    }

    pub fn dense(cin: usize, cout: usize, w: Vec<f64>, b: Vec<f64>) -> Op {
        Op::Dense(Dense {
            weight: Tensor::new(vec![cin, cout], w, Layout::Weight).unwrap(),
            bias: b,
        })
    }

    pub fn act(kind: ActivationKind) -> Op {
        Op::Activation(Activation::new(kind))
    }
}
