//! Enhanced-FPN as an explicit feature graph.
//!
//! Topology for backbone maps C2..C5 (strides 4, 8, 16, 32):
//!
//! ```text
//! top-down:     L_i = conv1x1(C_i)
//!               T_5 = L_5,  T_i = L_i + up2x(T_{i+1})
//!               M_i = conv3x3/s1(T_i)
//! enhancement:  P_2 = M_2
//!               P_i = relu(conv3x3/s2(P_{i-1}) + M_i)     i = 3, 4, 5
//! ```
//!
//! The enhancement pathway gives every upper level a direct short path from
//! the bottom map. All convolutions carry a bias. Graphs are plain data, so a
//! different wiring only needs another constructor.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EfpnError {
    #[error("node {node} ({name}): {detail}")]
    ShapeMismatch {
        node: NodeId,
        name: String,
        detail: String,
    },
    #[error("convolution output would be empty: dim {dim}, kernel {kernel}, stride {stride}, padding {padding}")]
    InvalidGeometry {
        dim: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self, EfpnError> {
        if data.len() != shape.len() {
            return Err(EfpnError::DataLength {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn random(shape: Shape, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Kernel `[out, in, kh, kw]` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2dWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, EfpnError> {
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if expected == 0 {
            return Err(EfpnError::Weights("zero-sized convolution".into()));
        }
        if weight.len() != expected || bias.len() != out_channels {
            return Err(EfpnError::Weights(format!(
                "expected {expected} weights and {out_channels} biases, got {} and {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weight,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weight: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `floor((dim + 2 * padding - kernel) / stride) + 1`, or `None` if below 1.
pub fn conv_output_dim(dim: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = dim + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d(input: &Tensor, weights: &Conv2dWeights, stride: usize, padding: usize) -> Result<Tensor, EfpnError> {
    if weights.in_channels != input.channels() {
        return Err(EfpnError::Config(format!(
            "convolution expects {} input channels, got {}",
            weights.in_channels,
            input.channels()
        )));
    }
    let geometry = |dim, kernel| {
        conv_output_dim(dim, kernel, stride, padding).ok_or(EfpnError::InvalidGeometry {
            dim,
            kernel,
            stride,
            padding,
        })
    };
    let out_h = geometry(input.height(), weights.kernel_h)?;
    let out_w = geometry(input.width(), weights.kernel_w)?;
    let (in_h, in_w) = (input.height() as isize, input.width() as isize);
    let mut out = vec![0.0; weights.out_channels * out_h * out_w];

    for o in 0..weights.out_channels {
        let plane = &mut out[o * out_h * out_w..(o + 1) * out_h * out_w];
        plane.fill(weights.bias[o]);
        for i in 0..weights.in_channels {
            let src = &input.data[i * input.height() * input.width()..(i + 1) * input.height() * input.width()];
            for ky in 0..weights.kernel_h {
                for kx in 0..weights.kernel_w {
                    let w = weights.get(o, i, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= in_h {
                            continue;
                        }
                        let row = &src[iy as usize * in_w as usize..(iy as usize + 1) * in_w as usize];
                        let dst = &mut plane[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < in_w {
                                *d += w * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(weights.out_channels, out_h, out_w), out)
}

fn upsample_nearest_2x(t: &Tensor) -> Tensor {
    let s = Shape::new(t.channels(), t.height() * 2, t.width() * 2);
    Tensor::from_fn(s, |c, y, x| t.get(c, y / 2, x / 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OpKind {
    Input {
        level: usize,
        channels: usize,
        stride: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    UpsampleNearest2x,
    Add,
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::Input { .. } => 0,
            OpKind::Add => 2,
            _ => 1,
        }
    }

    pub fn parameter_count(&self) -> u64 {
        match *self {
            OpKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel + out_channels) as u64,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
}

/// DAG whose node list is in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    nodes: Vec<Node>,
    inputs: [NodeId; 4],
    outputs: [NodeId; 4],
}

/// Backbone strides of C2..C5.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: String, op: OpKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { id, name, op, inputs });
        id
    }

    fn conv(&mut self, name: String, input: NodeId, cin: usize, cout: usize, kernel: usize, stride: usize) -> NodeId {
        let op = OpKind::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
        };
        self.push(name, op, vec![input])
    }
}

pub fn build_enhanced_fpn(backbone_channels: [usize; 4], out_channels: usize) -> Result<FeatureGraph, EfpnError> {
    if out_channels == 0 || backbone_channels.contains(&0) {
        return Err(EfpnError::Config("channel counts must be >= 1".into()));
    }
    let mut b = Builder { nodes: Vec::new() };
    let inputs: [NodeId; 4] = std::array::from_fn(|i| {
        b.push(
            format!("C{}", i + 2),
            OpKind::Input {
                level: i + 2,
                channels: backbone_channels[i],
                stride: LEVEL_STRIDES[i],
            },
            vec![],
        )
    });
    let laterals: [NodeId; 4] = std::array::from_fn(|i| {
        b.conv(format!("L{}", i + 2), inputs[i], backbone_channels[i], out_channels, 1, 1)
    });

    let mut top_down = [0; 4];
    top_down[3] = laterals[3];
    for i in (0..3).rev() {
        let up = b.push(format!("U{}", i + 3), OpKind::UpsampleNearest2x, vec![top_down[i + 1]]);
        top_down[i] = b.push(format!("T{}", i + 2), OpKind::Add, vec![laterals[i], up]);
    }
    let smoothed: [NodeId; 4] = std::array::from_fn(|i| {
        b.conv(format!("M{}", i + 2), top_down[i], out_channels, out_channels, 3, 1)
    });

    let mut outputs = [smoothed[0]; 4];
    for i in 1..4 {
        let down = b.conv(format!("D{}", i + 1), outputs[i - 1], out_channels, out_channels, 3, 2);
        let sum = b.push(format!("S{}", i + 2), OpKind::Add, vec![down, smoothed[i]]);
        outputs[i] = b.push(format!("P{}", i + 2), OpKind::Relu, vec![sum]);
    }

    let graph = FeatureGraph {
        nodes: b.nodes,
        inputs,
        outputs,
    };
    graph.check_structure()?;
    Ok(graph)
}

impl FeatureGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn inputs(&self) -> [NodeId; 4] {
        self.inputs
    }

    /// Node ids of P2..P5.
    pub fn outputs(&self) -> [NodeId; 4] {
        self.outputs
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&src| (src, n.id)))
            .collect()
    }

    /// Acyclicity (every input precedes its consumer) and operator arity.
    pub fn check_structure(&self) -> Result<(), EfpnError> {
        for n in &self.nodes {
            if n.inputs.len() != n.op.arity() {
                return Err(self.mismatch(n.id, format!("expects {} inputs, has {}", n.op.arity(), n.inputs.len())));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&src| src >= n.id) {
                return Err(self.mismatch(n.id, format!("input {bad} does not precede it")));
            }
        }
        Ok(())
    }

    fn mismatch(&self, node: NodeId, detail: String) -> EfpnError {
        EfpnError::ShapeMismatch {
            node,
            name: self.nodes[node].name.clone(),
            detail,
        }
    }

    pub fn parameter_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.op.parameter_count()).sum()
    }

    /// Backbone input shapes for an image of `height x width` at the level strides.
    pub fn input_shapes_for_image(&self, height: usize, width: usize) -> [Shape; 4] {
        std::array::from_fn(|i| match self.nodes[self.inputs[i]].op {
            OpKind::Input { channels, stride, .. } => Shape::new(channels, height / stride, width / stride),
            _ => unreachable!("input ids point at input nodes"),
        })
    }

    /// Shape of every node given the four backbone shapes.
    pub fn infer_shapes(&self, input_shapes: &[Shape; 4]) -> Result<Vec<Shape>, EfpnError> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let s = match n.op {
                OpKind::Input { level, channels, .. } => {
                    let s = input_shapes[level - 2];
                    if s.channels != channels {
                        return Err(self.mismatch(n.id, format!("expects {channels} channels, got {}", s.channels)));
                    }
                    if s.height == 0 || s.width == 0 {
                        return Err(self.mismatch(n.id, "empty spatial extent".into()));
                    }
                    s
                }
                OpKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let src = shapes[n.inputs[0]];
                    if src.channels != in_channels {
                        return Err(self.mismatch(n.id, format!("expects {in_channels} channels, got {}", src.channels)));
                    }
                    let h = conv_output_dim(src.height, kernel, stride, padding);
                    let w = conv_output_dim(src.width, kernel, stride, padding);
                    match (h, w) {
                        (Some(h), Some(w)) => Shape::new(out_channels, h, w),
                        _ => return Err(self.mismatch(n.id, format!("convolution on {src:?} yields nothing"))),
                    }
                }
                OpKind::Relu => shapes[n.inputs[0]],
                OpKind::UpsampleNearest2x => {
                    let s = shapes[n.inputs[0]];
                    Shape::new(s.channels, s.height * 2, s.width * 2)
                }
                OpKind::Add => {
                    let (a, b) = (shapes[n.inputs[0]], shapes[n.inputs[1]]);
                    if a != b {
                        return Err(self.mismatch(n.id, format!("adds {a:?} and {b:?}")));
                    }
                    a
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Serializable description for an image of `height x width`.
    pub fn report(&self, height: usize, width: usize) -> Result<GraphReport, EfpnError> {
        let shapes = self.infer_shapes(&self.input_shapes_for_image(height, width))?;
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeReport {
                id: n.id,
                name: n.name.clone(),
                op: n.op.clone(),
                inputs: n.inputs.clone(),
                shape: shapes[n.id],
                parameters: n.op.parameter_count(),
            })
            .collect();
        let levels = self
            .outputs
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let s = shapes[id];
                LevelReport {
                    level: format!("P{}", i + 2),
                    node: id,
                    shape: s,
                    stride: height / s.height,
                }
            })
            .collect();
        Ok(GraphReport {
            image_height: height,
            image_width: width,
            nodes,
            edges: self.edges(),
            outputs: levels,
            total_parameters: self.parameter_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: NodeId,
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub parameters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: String,
    pub node: NodeId,
    pub shape: Shape,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub image_height: usize,
    pub image_width: usize,
    pub nodes: Vec<NodeReport>,
    pub edges: Vec<(NodeId, NodeId)>,
    pub outputs: Vec<LevelReport>,
    pub total_parameters: u64,
}

/// Convolution parameters keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    convs: BTreeMap<NodeId, Conv2dWeights>,
}

impl ParamStore {
    fn build(graph: &FeatureGraph, mut make: impl FnMut(usize, usize, usize) -> Conv2dWeights) -> Self {
        let convs = graph
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                OpKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some((n.id, make(out_channels, in_channels, kernel))),
                _ => None,
            })
            .collect();
        Self { convs }
    }

    pub fn zeros(graph: &FeatureGraph) -> Self {
        Self::build(graph, |o, i, k| Conv2dWeights::zeros(o, i, k, k))
    }

    /// Uniform weights in `+-1/sqrt(fan_in)`, zero biases.
    pub fn random(graph: &FeatureGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(graph, |o, i, k| {
            let bound = 1.0 / ((i * k * k) as f64).sqrt();
            let mut w = Conv2dWeights::zeros(o, i, k, k);
            for v in &mut w.weight {
                *v = rng.gen_range(-bound..bound);
            }
            w
        })
    }

    pub fn get(&self, id: NodeId) -> Option<&Conv2dWeights> {
        self.convs.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Conv2dWeights> {
        self.convs.get_mut(&id)
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.values().map(Conv2dWeights::parameter_count).sum()
    }

    /// Little-endian `f32` values: each convolution in node order, its kernel
    /// in `[out, in, kh, kw]` order followed by its biases.
    pub fn to_le_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.parameter_count() * 4);
        for w in self.convs.values() {
            for v in w.weight.iter().chain(&w.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_le_f32_bytes(graph: &FeatureGraph, bytes: &[u8]) -> Result<Self, EfpnError> {
        let expected = graph.parameter_count() as usize * 4;
        if bytes.len() != expected {
            return Err(EfpnError::Weights(format!(
                "weight file has {} bytes, graph needs {expected}",
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        Ok(Self::build(graph, |o, i, k| {
            let mut w = Conv2dWeights::zeros(o, i, k, k);
            for v in w.weight.iter_mut().chain(w.bias.iter_mut()) {
                *v = values.next().expect("length checked above");
            }
            w
        }))
    }
}

/// Values of every node, evaluated in topological order. A node listed in
/// `overrides` takes the given value instead of being computed.
pub fn forward_all(
    graph: &FeatureGraph,
    backbone_maps: &[Tensor; 4],
    params: &ParamStore,
    overrides: &HashMap<NodeId, Tensor>,
) -> Result<Vec<Tensor>, EfpnError> {
    let shapes: [Shape; 4] = std::array::from_fn(|i| backbone_maps[i].shape());
    let expected = graph.infer_shapes(&shapes)?;
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for n in &graph.nodes {
        let v = if let Some(t) = overrides.get(&n.id) {
            if t.shape() != expected[n.id] {
                return Err(graph.mismatch(n.id, format!("override {:?} vs {:?}", t.shape(), expected[n.id])));
            }
            t.clone()
        } else {
            match n.op {
                OpKind::Input { level, .. } => backbone_maps[level - 2].clone(),
                OpKind::Conv { stride, padding, .. } => {
                    let w = params
                        .get(n.id)
                        .ok_or_else(|| graph.mismatch(n.id, "no weights".into()))?;
                    conv2d(&values[n.inputs[0]], w, stride, padding)
                        .map_err(|e| graph.mismatch(n.id, e.to_string()))?
                }
                OpKind::Relu => values[n.inputs[0]].map(|v| v.max(0.0)),
                OpKind::UpsampleNearest2x => upsample_nearest_2x(&values[n.inputs[0]]),
                OpKind::Add => {
                    let (a, b) = (&values[n.inputs[0]], &values[n.inputs[1]]);
                    if a.shape() != b.shape() {
                        return Err(graph.mismatch(n.id, format!("adds {:?} and {:?}", a.shape(), b.shape())));
                    }
                    Tensor {
                        shape: a.shape,
                        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    }
                }
            }
        };
        if v.shape() != expected[n.id] {
            return Err(graph.mismatch(n.id, format!("computed {:?}, inferred {:?}", v.shape(), expected[n.id])));
        }
        values.push(v);
    }
    Ok(values)
}

/// P2..P5 for the given backbone maps.
pub fn forward(graph: &FeatureGraph, backbone_maps: &[Tensor; 4], params: &ParamStore) -> Result<[Tensor; 4], EfpnError> {
    let mut values = forward_all(graph, backbone_maps, params, &HashMap::new())?;
    let outputs = graph.outputs();
    Ok(std::array::from_fn(|i| std::mem::replace(&mut values[outputs[i]], Tensor::zeros(Shape::new(0, 0, 0)))))
}
