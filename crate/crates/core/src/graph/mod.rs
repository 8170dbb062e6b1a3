//! Model intermediate representation.
//!
//! A [`ModelGraph`] is a DAG of [`LayerNode`]s reading from a single graph
//! input (referenced by the reserved id [`GRAPH_INPUT`]) and producing a single
//! output (the only node without consumers). Parameters live in a name-keyed
//! map of tensors; conv weights are OIHW, FC weights are `[out, in]`.

mod fixtures;
mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fixtures::{conv_relu_chain, residual_block, single_conv, toy_mobilenet, toy_resnet, FixtureSpec};
pub use manifest::{
    load_model, load_model_with_extension, save_model, save_model_with_extension, Manifest, MANIFEST_FILE,
};

/// Reserved id naming the graph input in `LayerNode::inputs`.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvAttrs {
    pub fn new(out_channels: usize, kernel_size: usize) -> Self {
        Self { out_channels, kernel_size, stride: 1, padding: kernel_size / 2, groups: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum LayerKind {
    Conv2D(ConvAttrs),
    BatchNorm { eps: f32 },
    ReLU,
    Add,
    AvgPool { kernel: usize },
    MaxPool { kernel: usize },
    FullyConnected { out_features: usize },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2D(_) => "Conv2D",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::Add => "Add",
            LayerKind::AvgPool { .. } => "AvgPool",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::FullyConnected { .. } => "FullyConnected",
            LayerKind::Softmax => "Softmax",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Conv and FC layers: the integer-kernel layers.
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerKind::Conv2D(_) | LayerKind::FullyConnected { .. })
    }

    /// Allowed number of parameter references, inclusive range.
    fn param_count(&self) -> (usize, usize) {
        match self {
            LayerKind::Conv2D(_) | LayerKind::FullyConnected { .. } => (1, 2),
            LayerKind::BatchNorm { .. } => (4, 4),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Conv/FC: `[weight, bias?]`. BatchNorm: `[gamma, beta, mean, var]`.
    #[serde(default)]
    pub params: Vec<String>,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self { id: id.into(), kind, params: Vec::new(), inputs: inputs.iter().map(|s| s.to_string()).collect() }
    }

    pub fn with_params(mut self, params: &[&str]) -> Self {
        self.params = params.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn weight_name(&self) -> Option<&str> {
        if self.kind.is_linear() {
            self.params.first().map(String::as_str)
        } else {
            None
        }
    }

    pub fn bias_name(&self) -> Option<&str> {
        if self.kind.is_linear() {
            self.params.get(1).map(String::as_str)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    Signed,
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteReason {
    AfterReluUnsigned,
    AddInputSkipped,
    DefaultSigned,
}

/// Placement decision for one edge that feeds a conv, FC or Add node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSiteAnnotation {
    /// (producer id, consumer id); the producer may be [`GRAPH_INPUT`].
    pub edge: (String, String),
    /// Position of the edge among the consumer's inputs.
    pub input_index: usize,
    pub quantize: bool,
    pub signedness: Signedness,
    pub reason: SiteReason,
}

impl QuantSiteAnnotation {
    /// Stable site id `consumer:index`; survives BN folding, which renames producers.
    pub fn site_id(&self) -> String {
        site_id(&self.edge.1, self.input_index)
    }
}

pub fn site_id(consumer: &str, input_index: usize) -> String {
    format!("{consumer}:{input_index}")
}

/// Batch-norm parameters of one BN node, copied out of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - eps; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::validation("batch-norm parameter lengths differ"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::validation("batch-norm eps must be positive"));
        }
        if self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::validation("batch-norm variance must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<LayerNode>,
    pub params: BTreeMap<String, Tensor>,
    pub quant_sites: Vec<QuantSiteAnnotation>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Self { name: name.into(), input_shape, nodes: Vec::new(), params: BTreeMap::new(), quant_sites: Vec::new() }
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
    }

    pub fn param_f32(&self, name: &str) -> Result<&[f32]> {
        self.param(name)?.as_f32()
    }

    /// Ids of the nodes consuming `id`, in node-list order.
    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == id)).collect()
    }

    pub fn output_id(&self) -> Result<&str> {
        let consumed: BTreeSet<&str> = self.nodes.iter().flat_map(|n| n.inputs.iter().map(String::as_str)).collect();
        let outputs: Vec<&str> = self.nodes.iter().map(|n| n.id.as_str()).filter(|id| !consumed.contains(id)).collect();
        match outputs.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::validation("graph has no output node")),
            many => Err(Error::validation(format!("graph has multiple outputs: {many:?}"))),
        }
    }

    pub fn bn_params(&self, node: &LayerNode) -> Result<BnParams> {
        let eps = match node.kind {
            LayerKind::BatchNorm { eps } => eps,
            _ => return Err(Error::validation(format!("`{}` is not a BatchNorm node", node.id))),
        };
        let get = |i: usize| -> Result<Vec<f32>> {
            let name =
                node.params.get(i).ok_or_else(|| Error::validation(format!("`{}` lacks BN parameter {i}", node.id)))?;
            Ok(self.param_f32(name)?.to_vec())
        };
        let bn = BnParams { gamma: get(0)?, beta: get(1)?, mean: get(2)?, var: get(3)?, eps };
        bn.validate()?;
        Ok(bn)
    }

    /// Names of all conv/FC weight tensors, in node order.
    pub fn weight_names(&self) -> Vec<String> {
        self.nodes.iter().filter_map(|n| n.weight_name().map(str::to_string)).collect()
    }

    /// Conv nodes whose sole consumer is a BatchNorm node: `(conv id, bn id)`.
    pub fn conv_bn_pairs(&self) -> Vec<(String, String)> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv2D(_)))
            .filter_map(|conv| {
                let consumers = self.consumers(&conv.id);
                match consumers.as_slice() {
                    [bn] if matches!(bn.kind, LayerKind::BatchNorm { .. }) => Some((conv.id.clone(), bn.id.clone())),
                    _ => None,
                }
            })
            .collect()
    }

    /// Site annotation for `consumer:index`, if planned.
    pub fn site(&self, consumer: &str, input_index: usize) -> Option<&QuantSiteAnnotation> {
        self.quant_sites.iter().find(|s| s.edge.1 == consumer && s.input_index == input_index)
    }

    /// Full structural validation; returns per-node output shapes `[C, H, W]`.
    pub fn validate(&self) -> Result<HashMap<String, [usize; 3]>> {
        if self.nodes.is_empty() {
            return Err(Error::validation("graph has no nodes"));
        }
        if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "input shape must be [C, H, W] with positive dims, got {:?}",
                self.input_shape
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if n.id == GRAPH_INPUT {
                return Err(Error::validation(format!("node id `{GRAPH_INPUT}` is reserved")));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(Error::validation(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &self.nodes {
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::validation(format!(
                    "{} node `{}` needs {} inputs, has {}",
                    n.kind.name(),
                    n.id,
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
            for i in &n.inputs {
                if i != GRAPH_INPUT && !seen.contains(i.as_str()) {
                    return Err(Error::validation(format!("`{}` reads unknown node `{i}`", n.id)));
                }
            }
            let (lo, hi) = n.kind.param_count();
            if n.params.len() < lo || n.params.len() > hi {
                return Err(Error::validation(format!(
                    "`{}` has {} parameter refs, expected {lo}..={hi}",
                    n.id,
                    n.params.len()
                )));
            }
            for p in &n.params {
                self.param(p)?;
            }
        }
        if !self.nodes.iter().any(|n| n.inputs.iter().any(|i| i == GRAPH_INPUT)) {
            return Err(Error::validation("no node reads the graph input"));
        }
        self.output_id()?;
        let order = topo_order(self)?;
        self.infer_shapes(&order)
    }

    fn infer_shapes(&self, order: &[&LayerNode]) -> Result<HashMap<String, [usize; 3]>> {
        let mut shapes: HashMap<String, [usize; 3]> = HashMap::new();
        let input = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        for n in order {
            let in_shape = |k: usize| -> [usize; 3] {
                let src = &n.inputs[k];
                if src == GRAPH_INPUT {
                    input
                } else {
                    shapes[src]
                }
            };
            let [c, h, w] = in_shape(0);
            let out = match &n.kind {
                LayerKind::Conv2D(a) => {
                    let wt = self.param(&n.params[0])?;
                    let k = a.kernel_size;
                    if a.groups == 0 || c % a.groups != 0 || a.out_channels % a.groups != 0 {
                        return Err(Error::validation(format!(
                            "`{}`: groups {} incompatible with channels {c}->{}",
                            n.id, a.groups, a.out_channels
                        )));
                    }
                    let expect = [a.out_channels, c / a.groups, k, k];
                    if wt.shape() != expect {
                        return Err(Error::validation(format!(
                            "`{}`: weight shape {:?} does not match declared {:?}",
                            n.id,
                            wt.shape(),
                            expect
                        )));
                    }
                    if a.stride == 0 || h + 2 * a.padding < k || w + 2 * a.padding < k {
                        return Err(Error::validation(format!("`{}`: bad conv geometry", n.id)));
                    }
                    if let Some(b) = n.params.get(1) {
                        if self.param(b)?.shape() != [a.out_channels] {
                            return Err(Error::validation(format!("`{}`: bias shape mismatch", n.id)));
                        }
                    }
                    [a.out_channels, (h + 2 * a.padding - k) / a.stride + 1, (w + 2 * a.padding - k) / a.stride + 1]
                }
                LayerKind::BatchNorm { .. } => {
                    let bn = self.bn_params(n)?;
                    if bn.channels() != c {
                        return Err(Error::validation(format!(
                            "`{}`: {} BN channels for {c} input channels",
                            n.id,
                            bn.channels()
                        )));
                    }
                    [c, h, w]
                }
                LayerKind::ReLU | LayerKind::Softmax => [c, h, w],
                LayerKind::Add => {
                    if in_shape(1) != [c, h, w] {
                        return Err(Error::validation(format!("`{}`: Add input shapes differ", n.id)));
                    }
                    [c, h, w]
                }
                LayerKind::AvgPool { kernel } | LayerKind::MaxPool { kernel } => {
                    if *kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                        return Err(Error::validation(format!(
                            "`{}`: pool kernel {kernel} does not tile {h}x{w}",
                            n.id
                        )));
                    }
                    [c, h / kernel, w / kernel]
                }
                LayerKind::FullyConnected { out_features } => {
                    let wt = self.param(&n.params[0])?;
                    if wt.shape() != [*out_features, c * h * w] {
                        return Err(Error::validation(format!(
                            "`{}`: FC weight shape {:?} does not match [{out_features}, {}]",
                            n.id,
                            wt.shape(),
                            c * h * w
                        )));
                    }
                    if let Some(b) = n.params.get(1) {
                        if self.param(b)?.shape() != [*out_features] {
                            return Err(Error::validation(format!("`{}`: bias shape mismatch", n.id)));
                        }
                    }
                    [*out_features, 1, 1]
                }
            };
            shapes.insert(n.id.clone(), out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let shapes = self.validate()?;
        Ok(shapes[self.output_id()?])
    }
}

/// Kahn ordering; ties broken by lexicographic node id.
pub fn topo_order(g: &ModelGraph) -> Result<Vec<&LayerNode>> {
    let index: HashMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut indegree = vec![0usize; g.nodes.len()];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for src in &n.inputs {
            if src == GRAPH_INPUT {
                continue;
            }
            let &j = index
                .get(src.as_str())
                .ok_or_else(|| Error::validation(format!("`{}` reads unknown node `{src}`", n.id)))?;
            indegree[i] += 1;
            children[j].push(i);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> =
        g.nodes.iter().enumerate().filter(|(i, _)| indegree[*i] == 0).map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(&g.nodes[i]);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((g.nodes[c].id.as_str(), c));
            }
        }
    }
    if order.len() != g.nodes.len() {
        return Err(Error::validation("graph contains a cycle"));
    }
    Ok(order)
}
