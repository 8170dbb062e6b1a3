//! Building, running and storing integer models.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::codec::{fake_quant_slice, quantize_slice};
use super::fold::{fold_batchnorm, fold_bn, fold_integer_weights};
use super::intkern::{check_accum_contract, quantized_conv, quantized_fc, AccumMode, IntOperand, OverflowAudit};
use crate::calib::{minmax_scale, CalibrationProfile, Granularity, QuantParams};
use crate::error::{Error, Result};
use crate::graph::{
    load_model_with_extension, save_model_with_extension, site_id, topo_order, LayerKind, ModelGraph, Signedness,
    GRAPH_INPUT,
};
use crate::nnexec::kernels::{self as k, Dims};
use crate::nnexec::{evaluate_fn, input_batch, output_tensor, Accuracy, Dataset};
use crate::tensor::{load_blob, save_blob, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizeConfig {
    pub weight_bits: u8,
    pub granularity: Granularity,
    pub accum: AccumMode,
    /// Layers kept in fp32 (weights and input activation).
    pub fp_layers: Vec<String>,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self { weight_bits: 8, granularity: Granularity::ChannelWise, accum: AccumMode::Int32, fp_layers: Vec::new() }
    }
}

/// Where weight scales come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightScales<'a> {
    /// MinMax on the folded weights.
    MinMax,
    /// Fixed raw-weight scales per conv/FC node id, folded through BN.
    Frozen(&'a BTreeMap<String, QuantParams>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    /// Integer codes, same shape as the folded weights.
    pub codes: Tensor,
    pub params: QuantParams,
}

/// BN-folded graph plus integer weights and activation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Folded graph; conv/FC weights here are the fp folded weights.
    pub graph: ModelGraph,
    pub weights: BTreeMap<String, QuantLayer>,
    /// Site id to activation parameters. Add inputs appear only when the
    /// placement quantizes them.
    pub activations: BTreeMap<String, QuantParams>,
    pub accum: AccumMode,
    pub fp_layers: Vec<String>,
}

pub fn build_quantized(g: &ModelGraph, profile: &CalibrationProfile, cfg: &QuantizeConfig) -> Result<QuantizedModel> {
    build_quantized_with(g, profile, cfg, WeightScales::MinMax)
}

/// Folds BN, quantizes every conv/FC weight and attaches the calibrated
/// activation parameters. `g` must carry a placement plan.
pub fn build_quantized_with(
    g: &ModelGraph,
    profile: &CalibrationProfile,
    cfg: &QuantizeConfig,
    scales: WeightScales,
) -> Result<QuantizedModel> {
    if !(2..=16).contains(&cfg.weight_bits) {
        return Err(Error::validation(format!("weight bitwidth {} out of range", cfg.weight_bits)));
    }
    if g.quant_sites.is_empty() {
        return Err(Error::validation("graph has no placement plan"));
    }
    for id in &cfg.fp_layers {
        if !g.node(id).is_some_and(|n| n.kind.is_linear()) {
            return Err(Error::validation(format!("fp layer `{id}` is not a conv/FC node")));
        }
    }
    let pairs: BTreeMap<String, String> = g.conv_bn_pairs().into_iter().collect();
    let folded = fold_batchnorm(g)?;
    let fp: BTreeSet<&str> = cfg.fp_layers.iter().map(String::as_str).collect();

    // Activation parameters. Quantized Add inputs share the larger scale.
    let mut activations = BTreeMap::new();
    for s in folded.quant_sites.iter().filter(|s| s.quantize && !fp.contains(s.edge.1.as_str())) {
        let id = s.site_id();
        let p = profile.params(&id).ok_or_else(|| Error::validation(format!("profile lacks site `{id}`")))?;
        activations.insert(id, p.clone());
    }
    for n in folded.nodes.iter().filter(|n| matches!(n.kind, LayerKind::Add)) {
        let ids = [site_id(&n.id, 0), site_id(&n.id, 1)];
        if let (Some(a), Some(b)) = (activations.get(&ids[0]), activations.get(&ids[1])) {
            let shared = QuantParams::layer_wise(
                a.max_scale().max(b.max_scale()),
                a.bitwidth.max(b.bitwidth),
                Signedness::Signed,
            );
            for id in ids {
                activations.insert(id, shared.clone());
            }
        }
    }

    let shapes = folded.validate()?;
    let mut weights = BTreeMap::new();
    for n in folded.nodes.iter().filter(|n| n.kind.is_linear() && !fp.contains(n.id.as_str())) {
        let wname = &n.params[0];
        let layer = match scales {
            WeightScales::MinMax => {
                let w_hat = folded.param(wname)?;
                let params = minmax_scale(w_hat, cfg.weight_bits, cfg.granularity)?;
                let codes = quantize_slice(w_hat.as_f32()?, &params)?;
                QuantLayer { codes: codes_tensor(w_hat.shape(), codes)?, params }
            }
            WeightScales::Frozen(map) => {
                let raw_params = map
                    .get(&n.id)
                    .ok_or_else(|| Error::validation(format!("no frozen weight scale for `{}`", n.id)))?;
                let raw = g.param(wname)?;
                let oc = raw.shape()[0];
                let per_channel: Vec<f32> = (0..oc).map(|o| raw_params.scale_for(o)).collect();
                let raw_params = QuantParams::channel_wise(per_channel, raw_params.bitwidth);
                let codes = quantize_slice(raw.as_f32()?, &raw_params)?;
                match pairs.get(&n.id) {
                    Some(bn_id) => {
                        let bn = g.bn_params(g.node(bn_id).expect("paired BN"))?;
                        let bias = g.node(&n.id).and_then(|c| c.params.get(1)).map(|b| g.param_f32(b)).transpose()?;
                        let f = fold_bn(raw, bias, &bn, Some(&raw_params.scales))?;
                        let params =
                            QuantParams::channel_wise(f.s_w_hat.expect("scales supplied"), raw_params.bitwidth);
                        let codes = fold_integer_weights(&codes, &bn.gamma);
                        QuantLayer { codes: codes_tensor(raw.shape(), codes)?, params }
                    }
                    None => QuantLayer { codes: codes_tensor(raw.shape(), codes)?, params: raw_params },
                }
            }
        };
        layer.params.validate()?;
        let a = activations
            .get(&site_id(&n.id, 0))
            .ok_or_else(|| Error::validation(format!("no activation parameters for `{}`", n.id)))?;
        let fan_in = match &n.kind {
            LayerKind::Conv2D(attrs) => {
                let src = &n.inputs[0];
                let c_in = if src == GRAPH_INPUT { folded.input_shape[0] } else { shapes[src][0] };
                c_in / attrs.groups * attrs.kernel_size * attrs.kernel_size
            }
            _ => layer.codes.numel() / layer.codes.shape()[0],
        };
        check_accum_contract(a, &layer.params, fan_in, cfg.accum)
            .map_err(|e| Error::validation(format!("layer `{}`: {e}", n.id)))?;
        weights.insert(n.id.clone(), layer);
    }
    Ok(QuantizedModel { graph: folded, weights, activations, accum: cfg.accum, fp_layers: cfg.fp_layers.clone() })
}

fn codes_tensor(shape: &[usize], codes: Vec<i32>) -> Result<Tensor> {
    let data = if codes.iter().all(|&c| (i8::MIN as i32..=i8::MAX as i32).contains(&c)) {
        crate::tensor::TensorData::I8(codes.into_iter().map(|c| c as i8).collect())
    } else {
        crate::tensor::TensorData::I16(codes.into_iter().map(|c| c as i16).collect())
    };
    Tensor::new(shape.to_vec(), data)
}

impl QuantizedModel {
    /// Executes a flat NCHW batch; activations are quantized at annotated
    /// sites only and Add runs in fp32.
    pub(crate) fn run_flat(&self, x: Vec<f32>, xd: Dims) -> Result<(Vec<f32>, Dims, OverflowAudit)> {
        let g = &self.graph;
        let order = topo_order(g)?;
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        slot.insert(GRAPH_INPUT, 0);
        let mut values: Vec<(Vec<f32>, Dims)> = vec![(x, xd)];
        let mut audit = OverflowAudit::default();
        for node in &order {
            let ins: Vec<&(Vec<f32>, Dims)> = node.inputs.iter().map(|i| &values[slot[i.as_str()]]).collect();
            let (x0, d0) = (&ins[0].0, ins[0].1);
            let out = match &node.kind {
                LayerKind::Conv2D(attrs) => match self.weights.get(&node.id) {
                    Some(layer) => {
                        let a = &self.activations[&site_id(&node.id, 0)];
                        let codes = quantize_slice(x0, a)?;
                        let w = layer.codes.to_i32_vec()?;
                        let bias = node.params.get(1).map(|b| g.param_f32(b)).transpose()?;
                        let (y, yd, la) = quantized_conv(
                            IntOperand { codes: &codes, params: a },
                            d0,
                            IntOperand { codes: &w, params: &layer.params },
                            bias,
                            attrs,
                            self.accum,
                        )?;
                        audit.record(&node.id, la);
                        (y, yd)
                    }
                    None => {
                        let bias = node.params.get(1).map(|b| g.param_f32(b)).transpose()?;
                        k::conv2d_forward(x0, d0, g.param_f32(&node.params[0])?, bias, attrs)
                    }
                },
                LayerKind::FullyConnected { out_features } => {
                    let bias = node.params.get(1).map(|b| g.param_f32(b)).transpose()?;
                    let y = match self.weights.get(&node.id) {
                        Some(layer) => {
                            let a = &self.activations[&site_id(&node.id, 0)];
                            let codes = quantize_slice(x0, a)?;
                            let w = layer.codes.to_i32_vec()?;
                            let (y, la) = quantized_fc(
                                IntOperand { codes: &codes, params: a },
                                d0.n,
                                IntOperand { codes: &w, params: &layer.params },
                                bias,
                                *out_features,
                                self.accum,
                            )?;
                            audit.record(&node.id, la);
                            y
                        }
                        None => k::fc_forward(x0, d0.n, g.param_f32(&node.params[0])?, bias, *out_features),
                    };
                    (y, Dims::new(d0.n, *out_features, 1, 1))
                }
                LayerKind::BatchNorm { eps } => {
                    let bn = g.bn_params(node)?;
                    (k::bn_inference(x0, d0, &bn.gamma, &bn.beta, &bn.mean, &bn.var, *eps), d0)
                }
                LayerKind::ReLU => (k::relu(x0), d0),
                LayerKind::Add => {
                    let side = |i: usize| -> Result<Vec<f32>> {
                        match self.activations.get(&site_id(&node.id, i)) {
                            Some(p) => fake_quant_slice(&ins[i].0, p),
                            None => Ok(ins[i].0.clone()),
                        }
                    };
                    (k::add(&side(0)?, &side(1)?), d0)
                }
                LayerKind::AvgPool { kernel } => k::avg_pool(x0, d0, *kernel),
                LayerKind::MaxPool { kernel } => {
                    let (y, yd, _) = k::max_pool(x0, d0, *kernel);
                    (y, yd)
                }
                LayerKind::Softmax => (k::softmax(x0, d0.n, d0.per_sample()), d0),
            };
            slot.insert(node.id.as_str(), values.len());
            values.push(out);
        }
        let (v, d) = values.pop().expect("graph has nodes");
        Ok((v, d, audit))
    }
}

/// Runs one `[C, H, W]` input or an `[N, C, H, W]` batch.
pub fn run_quantized(qm: &QuantizedModel, x: &Tensor) -> Result<(Tensor, OverflowAudit)> {
    let (xv, xd, batched) = input_batch(&qm.graph, x)?;
    let (v, d, audit) = qm.run_flat(xv, xd)?;
    Ok((output_tensor(v, d, batched)?, audit))
}

/// Accuracy of the integer model and the audit summed over the whole set.
pub fn evaluate_quantized(qm: &QuantizedModel, set: &Dataset) -> Result<(Accuracy, OverflowAudit)> {
    let audits = Mutex::new(OverflowAudit::default());
    let acc = evaluate_fn(set, |x, xd| {
        let (v, _, a) = qm.run_flat(x, xd)?;
        audits.lock().expect("audit lock").merge(&a);
        Ok(v)
    })?;
    Ok((acc, audits.into_inner().expect("audit lock")))
}

#[derive(Serialize, Deserialize)]
struct QuantSection {
    accum: AccumMode,
    fp_layers: Vec<String>,
    activations: BTreeMap<String, QuantParams>,
    weights: BTreeMap<String, WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    #[serde(flatten)]
    params: QuantParams,
    file: String,
}

/// Writes the folded graph manifest with a quantization section and the
/// integer weights under `qweights/`.
pub fn save_quantized(qm: &QuantizedModel, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("qweights"))?;
    let mut weights = BTreeMap::new();
    for (id, l) in &qm.weights {
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::validation(format!("layer id `{id}` is not file-safe")));
        }
        let file = format!("qweights/{id}.qt");
        save_blob(&l.codes, dir.join(&file))?;
        weights.insert(id.clone(), WeightEntry { params: l.params.clone(), file });
    }
    let section =
        QuantSection { accum: qm.accum, fp_layers: qm.fp_layers.clone(), activations: qm.activations.clone(), weights };
    save_model_with_extension(&qm.graph, dir, Some(serde_json::to_value(section)?))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let (graph, ext) = load_model_with_extension(path)?;
    let ext = ext.ok_or_else(|| Error::format("model has no quantization section"))?;
    let section: QuantSection = serde_json::from_value(ext)?;
    let root = if path.is_dir() { path.to_path_buf() } else { path.parent().unwrap_or(Path::new(".")).to_path_buf() };
    let mut weights = BTreeMap::new();
    for (id, e) in section.weights {
        if e.file.contains("..") {
            return Err(Error::format(format!("weight file `{}` escapes the model directory", e.file)));
        }
        e.params.validate()?;
        let codes = load_blob(root.join(&e.file))?;
        weights.insert(id, QuantLayer { codes, params: e.params });
    }
    for p in section.activations.values() {
        p.validate()?;
    }
    Ok(QuantizedModel {
        graph,
        weights,
        activations: section.activations,
        accum: section.accum,
        fp_layers: section.fp_layers,
    })
}
