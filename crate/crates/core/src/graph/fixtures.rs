//! Toy architectures: a bottleneck ResNet and a depthwise-separable MobileNet.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvAttrs, LayerKind, LayerNode, ModelGraph};
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { in_channels: 3, image_size: 8, classes: 10, seed: 0 }
    }
}

struct Builder {
    g: ModelGraph,
    rng: ChaCha8Rng,
    last: String,
    channels: usize,
    spatial: usize,
}

impl Builder {
    fn new(name: &str, c: usize, hw: usize, seed: u64) -> Self {
        Self {
            g: ModelGraph::new(name, vec![c, hw, hw]),
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: super::GRAPH_INPUT.to_string(),
            channels: c,
            spatial: hw,
        }
    }

    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn push(&mut self, node: LayerNode) -> String {
        let id = node.id.clone();
        self.g.nodes.push(node);
        self.last = id.clone();
        id
    }

    fn conv_from(&mut self, id: &str, input: &str, in_c: usize, attrs: ConvAttrs, bias: bool) -> String {
        let k = attrs.kernel_size;
        let fan_in = (in_c / attrs.groups) * k * k;
        let wname = format!("{id}.weight");
        let w = self.normal(attrs.out_channels * fan_in, (2.0 / fan_in as f32).sqrt());
        self.g
            .params
            .insert(wname.clone(), Tensor::from_f32(vec![attrs.out_channels, in_c / attrs.groups, k, k], w).unwrap());
        let mut params = vec![wname];
        if bias {
            let bname = format!("{id}.bias");
            self.g.params.insert(bname.clone(), Tensor::zeros(vec![attrs.out_channels]).unwrap());
            params.push(bname);
        }
        self.spatial = (self.spatial + 2 * attrs.padding - k) / attrs.stride + 1;
        self.channels = attrs.out_channels;
        let mut node = LayerNode::new(id, LayerKind::Conv2D(attrs), &[input]);
        node.params = params;
        self.push(node)
    }

    fn conv(&mut self, id: &str, attrs: ConvAttrs) -> String {
        let input = self.last.clone();
        let c = self.channels;
        self.conv_from(id, &input, c, attrs, false)
    }

    fn bn(&mut self, id: &str) -> String {
        let c = self.channels;
        let names = ["gamma", "beta", "mean", "var"].map(|p| format!("{id}.{p}"));
        let init = [1.0f32, 0.0, 0.0, 1.0];
        for (n, v) in names.iter().zip(init) {
            self.g.params.insert(n.clone(), Tensor::from_f32(vec![c], vec![v; c]).unwrap());
        }
        let input = self.last.clone();
        let mut node = LayerNode::new(id, LayerKind::BatchNorm { eps: BN_EPS }, &[&input]);
        node.params = names.to_vec();
        self.push(node)
    }

    fn relu(&mut self, id: &str) -> String {
        let input = self.last.clone();
        self.push(LayerNode::new(id, LayerKind::ReLU, &[&input]))
    }

    fn conv_bn_relu(&mut self, prefix: &str, attrs: ConvAttrs) -> String {
        self.conv(&format!("{prefix}.conv"), attrs);
        self.bn(&format!("{prefix}.bn"));
        self.relu(&format!("{prefix}.relu"))
    }

    fn head(&mut self, classes: usize) {
        let input = self.last.clone();
        let kernel = self.spatial;
        self.push(LayerNode::new("pool", LayerKind::AvgPool { kernel }, &[&input]));
        let c = self.channels;
        let w = self.normal(classes * c, (1.0 / c as f32).sqrt());
        self.g.params.insert("fc.weight".into(), Tensor::from_f32(vec![classes, c], w).unwrap());
        self.g.params.insert("fc.bias".into(), Tensor::zeros(vec![classes]).unwrap());
        let node = LayerNode::new("fc", LayerKind::FullyConnected { out_features: classes }, &["pool"])
            .with_params(&["fc.weight", "fc.bias"]);
        self.push(node);
    }

    fn finish(self) -> ModelGraph {
        self.g.validate().expect("fixture graph is valid");
        self.g
    }
}

/// Stem conv plus three bottleneck residual blocks (1x1 reduce, 3x3, 1x1
/// expand, shortcut Add, ReLU), global average pool and FC head.
pub fn toy_resnet(spec: &FixtureSpec) -> ModelGraph {
    let width = 16;
    let mid = 8;
    let mut b = Builder::new("ToyResNet", spec.in_channels, spec.image_size, spec.seed);
    b.conv_bn_relu("stem", ConvAttrs::new(width, 3));
    for i in 1..=3 {
        let shortcut = b.last.clone();
        let p = format!("block{i}");
        b.conv(&format!("{p}.conv1"), ConvAttrs::new(mid, 1));
        b.bn(&format!("{p}.bn1"));
        b.relu(&format!("{p}.relu1"));
        b.conv(&format!("{p}.conv2"), ConvAttrs::new(mid, 3));
        b.bn(&format!("{p}.bn2"));
        b.relu(&format!("{p}.relu2"));
        b.conv(&format!("{p}.conv3"), ConvAttrs::new(width, 1));
        let branch = b.bn(&format!("{p}.bn3"));
        b.push(LayerNode::new(format!("{p}.add"), LayerKind::Add, &[&branch, &shortcut]));
        b.relu(&format!("{p}.relu_out"));
    }
    b.head(spec.classes);
    b.finish()
}

/// Stem conv plus three depthwise-separable blocks (3x3 depthwise, 1x1
/// pointwise, each with BN and ReLU), global average pool and FC head.
pub fn toy_mobilenet(spec: &FixtureSpec) -> ModelGraph {
    let mut b = Builder::new("ToyMobileNet", spec.in_channels, spec.image_size, spec.seed);
    b.conv_bn_relu("stem", ConvAttrs::new(16, 3));
    let plan = [(16usize, 1usize), (32, 2), (32, 1)];
    for (i, (out, stride)) in plan.into_iter().enumerate() {
        let p = format!("block{}", i + 1);
        let c = b.channels;
        b.conv_bn_relu(&format!("{p}.dw"), ConvAttrs::new(c, 3).groups(c).stride(stride));
        b.conv_bn_relu(&format!("{p}.pw"), ConvAttrs::new(out, 1));
    }
    b.head(spec.classes);
    b.finish()
}

/// conv-BN-ReLU twice, then an Add with the block input: 7 nodes.
pub fn residual_block(seed: u64) -> ModelGraph {
    let mut b = Builder::new("ResidualBlock", 4, 6, seed);
    b.conv_bn_relu("c1", ConvAttrs::new(4, 3));
    let r2 = b.conv_bn_relu("c2", ConvAttrs::new(4, 3));
    b.push(LayerNode::new("add", LayerKind::Add, &[&r2, super::GRAPH_INPUT]));
    b.finish()
}

/// One conv node without bias; input `[in_channels, 4, 4]`.
pub fn single_conv(in_channels: usize, out_channels: usize, kernel: usize) -> ModelGraph {
    let mut b = Builder::new("SingleConv", in_channels, 4, 0);
    b.conv("conv", ConvAttrs::new(out_channels, kernel));
    b.finish()
}

/// conv -> ReLU -> conv, biased convs, input `[2, 5, 5]`.
pub fn conv_relu_chain(seed: u64) -> ModelGraph {
    let mut b = Builder::new("ConvReluChain", 2, 5, seed);
    b.conv_from("conv1", super::GRAPH_INPUT, 2, ConvAttrs::new(3, 3), true);
    b.relu("relu");
    b.conv_from("conv2", "relu", 3, ConvAttrs::new(2, 3), true);
    b.finish()
}
