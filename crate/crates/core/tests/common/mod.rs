#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;

use oracles::{OracleQuantizer, OracleReport};
use quantkit::calib::{calibrate, CalibConfig, CalibrationProfile, Histogram, QuantParams, NUM_BINS};
use quantkit::graph::{
    toy_mobilenet, toy_resnet, ConvAttrs, FixtureSpec, LayerKind, LayerNode, ModelGraph, GRAPH_INPUT,
};
use quantkit::nnexec::{loss_and_grads_with, make_toy_dataset, trainable_params, BnMode, DatasetSplit, ExecOptions};
use quantkit::qat::FakeQuantPlan;
use quantkit::quantize::plan_placement;
use quantkit::tensor::TensorData;
use quantkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Activation-like histograms of several shapes: exponential and half-normal
/// bodies, sparse tails, bimodal mixtures and partly empty ranges.
pub fn random_histogram(seed: u64) -> Histogram {
    let mut r = rng(seed);
    let shape = r.random_range(0..4u32);
    let scale = 10f64.powf(r.random_range(1.0..4.0));
    let decay = r.random_range(30.0..900.0);
    let occupied = r.random_range(200..=NUM_BINS);
    let second = r.random_range(100..NUM_BINS) as f64;
    let bins = (0..NUM_BINS)
        .map(|i| {
            let x = i as f64;
            let density = match shape {
                0 => (-x / decay).exp(),
                1 => (-(x * x) / (2.0 * decay * decay)).exp(),
                2 => (-x / decay).exp() + 0.3 * (-((x - second) / 40.0).powi(2)).exp(),
                _ => {
                    if r.random_bool(0.3) {
                        0.0
                    } else {
                        (-x / decay).exp()
                    }
                }
            };
            if i >= occupied {
                return u64::from(r.random_bool(0.002));
            }
            (scale * density * r.random_range(0.5..1.5)).round() as u64
        })
        .collect::<Vec<_>>();
    let mut bins = bins;
    if bins.iter().all(|&b| b == 0) {
        bins[0] = 1;
    }
    let max = r.random_range(0.5..20.0);
    Histogram::from_bins(bins, max).unwrap()
}

/// Replaces every BN's statistics and affine terms with random values;
/// about one gamma in five is negative.
pub fn randomize_bn(g: &mut ModelGraph, seed: u64) {
    let mut r = rng(seed);
    let bns: Vec<Vec<String>> =
        g.nodes.iter().filter(|n| matches!(n.kind, LayerKind::BatchNorm { .. })).map(|n| n.params.clone()).collect();
    for names in bns {
        let c = g.params[&names[0]].numel();
        let gamma = (0..c)
            .map(|_| {
                let m = r.random_range(0.5f32..1.5);
                if r.random_bool(0.2) {
                    -m
                } else {
                    m
                }
            })
            .collect();
        let beta = normal_vec(&mut r, c, 0.2);
        let mean = normal_vec(&mut r, c, 0.2);
        let var = (0..c).map(|_| r.random_range(0.3f32..2.0)).collect();
        for (name, v) in names.iter().zip([gamma, beta, mean, var]) {
            g.params.insert(name.clone(), Tensor::from_f32(vec![c], v).unwrap());
        }
    }
}

/// Random valid DAG over `[c, 6, 6]` inputs: convs (dense or depthwise, with
/// or without bias), BN, ReLU, Add and 1x1 pools, joined into one output.
pub fn random_graph(seed: u64, len: usize) -> ModelGraph {
    let mut r = rng(seed);
    let c = r.random_range(1..4usize);
    let mut g = ModelGraph::new(format!("random{seed}"), vec![c, 6, 6]);
    let mut values = vec![GRAPH_INPUT.to_string()];
    for i in 0..len {
        let id = format!("n{i:02}");
        let src = values[r.random_range(0..values.len())].clone();
        let node = match r.random_range(0..6u32) {
            0 | 1 => {
                let k = if r.random_bool(0.5) { 1 } else { 3 };
                let groups = if r.random_bool(0.3) { c } else { 1 };
                let shape = vec![c, c / groups, k, k];
                let n: usize = shape.iter().product();
                let wname = format!("{id}.weight");
                g.params.insert(wname.clone(), Tensor::from_f32(shape, normal_vec(&mut r, n, 0.5)).unwrap());
                let mut node = LayerNode::new(&id, LayerKind::Conv2D(ConvAttrs::new(c, k).groups(groups)), &[&src]);
                node.params.push(wname);
                if r.random_bool(0.5) {
                    let bname = format!("{id}.bias");
                    g.params.insert(bname.clone(), Tensor::from_f32(vec![c], normal_vec(&mut r, c, 0.1)).unwrap());
                    node.params.push(bname);
                }
                node
            }
            2 => {
                let names: Vec<String> = ["gamma", "beta", "mean", "var"].iter().map(|p| format!("{id}.{p}")).collect();
                for (name, v) in names.iter().zip([1.0f32, 0.0, 0.0, 1.0]) {
                    g.params.insert(name.clone(), Tensor::from_f32(vec![c], vec![v; c]).unwrap());
                }
                let mut node = LayerNode::new(&id, LayerKind::BatchNorm { eps: 1e-5 }, &[&src]);
                node.params = names;
                node
            }
            3 => LayerNode::new(&id, LayerKind::ReLU, &[&src]),
            4 => {
                let other = values[r.random_range(0..values.len())].clone();
                LayerNode::new(&id, LayerKind::Add, &[&src, &other])
            }
            _ => {
                let kind = if r.random_bool(0.5) {
                    LayerKind::MaxPool { kernel: 1 }
                } else {
                    LayerKind::AvgPool { kernel: 1 }
                };
                LayerNode::new(&id, kind, &[&src])
            }
        };
        g.nodes.push(node);
        values.push(id);
    }
    if !g.nodes.iter().any(|n| n.inputs.iter().any(|i| i == GRAPH_INPUT)) {
        g.nodes.push(LayerNode::new(format!("n{len:02}"), LayerKind::ReLU, &[GRAPH_INPUT]));
    }
    // Join every dangling value into a single output.
    let mut k = 0;
    loop {
        let sinks: Vec<String> =
            g.nodes.iter().filter(|n| g.consumers(&n.id).is_empty()).map(|n| n.id.clone()).collect();
        if sinks.len() < 2 {
            break;
        }
        g.nodes.push(LayerNode::new(format!("join{k:02}"), LayerKind::Add, &[&sinks[0], &sinks[1]]));
        k += 1;
    }
    g.validate().unwrap();
    g
}

/// Random tensor of any dtype, rank 1..=4 and dims 1..=6; f32 payloads are
/// arbitrary bit patterns, NaNs included.
pub fn random_tensor(r: &mut ChaCha8Rng) -> Tensor {
    let rank = r.random_range(1..=4usize);
    let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=6usize)).collect();
    let n: usize = shape.iter().product();
    let data = match r.random_range(0..5u32) {
        0 => TensorData::F32((0..n).map(|_| f32::from_bits(r.random())).collect()),
        1 => TensorData::I8((0..n).map(|_| r.random()).collect()),
        2 => TensorData::U8((0..n).map(|_| r.random()).collect()),
        3 => TensorData::I16((0..n).map(|_| r.random()).collect()),
        _ => TensorData::I32((0..n).map(|_| r.random()).collect()),
    };
    Tensor::new(shape, data).unwrap()
}

/// Random conv (dense, grouped or strided, biased or not) followed by a BN
/// with random statistics.
pub fn conv_bn_fixture(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let c = r.random_range(1..5usize);
    let o = [c, 2 * c, 3][r.random_range(0..3usize)];
    let k = [1, 3, 5][r.random_range(0..3usize)];
    let groups = if o % c == 0 && r.random_bool(0.3) { c } else { 1 };
    let attrs = ConvAttrs::new(o, k).stride(r.random_range(1..3)).groups(groups);
    let hw = r.random_range(k.max(3)..9);
    let mut g = ModelGraph::new("conv_bn", vec![c, hw, hw]);
    let shape = vec![o, c / groups, k, k];
    let n: usize = shape.iter().product();
    g.params.insert("w".into(), Tensor::from_f32(shape, normal_vec(&mut r, n, 0.5)).unwrap());
    let mut conv = LayerNode::new("conv", LayerKind::Conv2D(attrs), &[GRAPH_INPUT]).with_params(&["w"]);
    if r.random_bool(0.5) {
        g.params.insert("b".into(), Tensor::from_f32(vec![o], normal_vec(&mut r, o, 0.3)).unwrap());
        conv.params.push("b".into());
    }
    g.nodes.push(conv);
    for (p, v) in ["gamma", "beta", "mean", "var"].iter().zip([1.0f32, 0.0, 0.0, 1.0]) {
        g.params.insert(format!("bn.{p}"), Tensor::from_f32(vec![o], vec![v; o]).unwrap());
    }
    g.nodes.push(
        LayerNode::new("bn", LayerKind::BatchNorm { eps: 1e-5 }, &["conv"])
            .with_params(&["bn.gamma", "bn.beta", "bn.mean", "bn.var"]),
    );
    randomize_bn(&mut g, seed ^ 0x5eed);
    g
}

/// f64 reference quantizer with the same scales and code range.
pub fn oracle_quantizer(p: &QuantParams) -> OracleQuantizer {
    OracleQuantizer {
        scales: p.scales.iter().map(|&s| s as f64).collect(),
        qmin: p.qmin() as f64,
        qmax: p.qmax() as f64,
    }
}

pub fn toy_setup(resnet: bool, bits: u8) -> (ModelGraph, CalibrationProfile, DatasetSplit) {
    let spec = FixtureSpec { seed: 3, ..Default::default() };
    let mut g = if resnet { toy_resnet(&spec) } else { toy_mobilenet(&spec) };
    randomize_bn(&mut g, 12);
    let g = plan_placement(&g);
    let data = make_toy_dataset(6, 10, 12, 8).unwrap();
    let cfg = CalibConfig { batches: 2, batch_size: 16, bits, ..Default::default() };
    let profile = calibrate(&g, &data.train, &cfg).unwrap();
    (g, profile, data)
}

/// Implementation gradients under fake quantization against central
/// differences of the straight-through surrogate, sampled entries of every
/// trainable parameter.
pub fn network_gradient_report(resnet: bool, bits: u8) -> OracleReport {
    let (g, profile, data) = toy_setup(resnet, bits);
    let plan = FakeQuantPlan::from_profile(&g, &profile, bits).unwrap();
    let weights: BTreeMap<String, OracleQuantizer> = plan
        .weights
        .iter()
        .map(|(id, q)| (g.node(id).unwrap().params[0].clone(), oracle_quantizer(&q.params)))
        .collect();
    let acts: BTreeMap<String, OracleQuantizer> =
        plan.activations.iter().map(|(site, q)| (site.clone(), oracle_quantizer(&q.params))).collect();
    let n = 2;
    let (xs, _, labels) = data.train.batch(&[0, 1]);
    let x = Tensor::from_f32(vec![n, 3, 8, 8], xs.clone()).unwrap();
    let opts = ExecOptions { bn_mode: BnMode::Inference, fake_quant: Some(&plan) };
    let (_, grads) = loss_and_grads_with(&g, &x, &labels, &opts).unwrap();
    let xs: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
    let mut report = OracleReport::default();
    let mut r = rng(21);
    for name in trainable_params(&g) {
        let len = g.param(&name).unwrap().numel();
        for _ in 0..3 {
            let i = r.random_range(0..len);
            let e = oracles::ste_finite_diff(&g, &weights, &acts, &name, i, &xs, &labels, 1e-5);
            let got = grads[&name][i] as f64;
            let (_, rel) = report.compare(|| format!("{name}[{i}]"), e, got, 1e-4);
            if rel > 1e-2 {
                report.fail(format!("{name}[{i}]: {got} vs {e}"));
            }
        }
    }
    report
}
