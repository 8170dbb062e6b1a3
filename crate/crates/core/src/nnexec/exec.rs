//! Graph interpreter with a reverse-mode tape.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self as k, Dims};
use crate::error::{Error, Result};
use crate::graph::{site_id, topo_order, LayerKind, LayerNode, ModelGraph, GRAPH_INPUT};
use crate::qat::FakeQuantPlan;
use crate::quantize::{fake_quant_slice, in_range_mask};

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics (full-precision training).
    Training,
    /// Running statistics.
    Inference,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions<'a> {
    pub bn_mode: BnMode,
    pub fake_quant: Option<&'a FakeQuantPlan>,
}

impl ExecOptions<'_> {
    pub fn inference() -> Self {
        Self { bn_mode: BnMode::Inference, fake_quant: None }
    }

    pub fn training() -> Self {
        Self { bn_mode: BnMode::Training, fake_quant: None }
    }
}

/// Parameter name to gradient, same layout as the parameter tensor.
pub type Gradients = BTreeMap<String, Vec<f32>>;

enum Aux {
    None,
    BnBatch {
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    MaxArg(Vec<usize>),
    /// Conv weights actually used; `mask` is the STE pass-through set for the
    /// raw weights; `fold` carries `(inv_std, quantized raw weights)` for a
    /// folded conv+BN pair.
    Weights {
        used: Vec<f32>,
        mask: Option<Vec<bool>>,
        fold: Option<(Vec<f32>, Vec<f32>)>,
    },
}

pub(crate) struct Tape {
    values: Vec<Vec<f32>>,
    dims: Vec<Dims>,
    aux: Vec<Aux>,
    /// Fake-quantized copy of each node input, when a site quantizer is active.
    quant_inputs: Vec<Vec<Option<Vec<f32>>>>,
}

impl Tape {
    pub(crate) fn slot(&self, slot: usize) -> (&[f32], Dims) {
        (&self.values[slot], self.dims[slot])
    }
}

pub(crate) struct Program<'g> {
    g: &'g ModelGraph,
    order: Vec<&'g LayerNode>,
    /// Input slots per node; slot 0 is the graph input, node `i` writes slot `i + 1`.
    inputs: Vec<Vec<usize>>,
    slot_of: HashMap<&'g str, usize>,
    /// conv position -> BN position, for conv+BN pairs executed folded.
    fold_partner: HashMap<usize, usize>,
    folded_bn: Vec<bool>,
}

impl<'g> Program<'g> {
    pub(crate) fn new(g: &'g ModelGraph, opts: &ExecOptions) -> Result<Self> {
        g.validate()?;
        let order = topo_order(g)?;
        let mut slot_of: HashMap<&str, usize> = HashMap::new();
        slot_of.insert(GRAPH_INPUT, 0);
        for (i, n) in order.iter().enumerate() {
            slot_of.insert(n.id.as_str(), i + 1);
        }
        let inputs = order.iter().map(|n| n.inputs.iter().map(|s| slot_of[s.as_str()]).collect()).collect();
        let mut fold_partner = HashMap::new();
        let mut folded_bn = vec![false; order.len()];
        if opts.fake_quant.is_some_and(|p| p.fold_bn) {
            for (conv, bn) in g.conv_bn_pairs() {
                let ci = slot_of[conv.as_str()] - 1;
                let bi = slot_of[bn.as_str()] - 1;
                fold_partner.insert(ci, bi);
                folded_bn[bi] = true;
            }
        }
        Ok(Self { g, order, inputs, slot_of, fold_partner, folded_bn })
    }

    pub(crate) fn output_slot(&self) -> usize {
        self.order.len()
    }

    pub(crate) fn slot_of(&self, id: &str) -> Option<usize> {
        self.slot_of.get(id).copied()
    }

    pub(crate) fn output_node(&self) -> &LayerNode {
        self.order[self.order.len() - 1]
    }

    fn param(&self, name: &str) -> Result<&'g [f32]> {
        self.g.param_f32(name)
    }

    pub(crate) fn forward(&self, x: Vec<f32>, xd: Dims, opts: &ExecOptions) -> Result<Tape> {
        let n_slots = self.order.len() + 1;
        let mut values: Vec<Vec<f32>> = Vec::with_capacity(n_slots);
        let mut dims = Vec::with_capacity(n_slots);
        values.push(x);
        dims.push(xd);
        let mut aux = Vec::with_capacity(self.order.len());
        let mut quant_inputs = Vec::with_capacity(self.order.len());
        let plan = opts.fake_quant;

        for (i, node) in self.order.iter().enumerate() {
            let mut qin: Vec<Option<Vec<f32>>> = vec![None; node.inputs.len()];
            if let Some(plan) = plan {
                for (k, &s) in self.inputs[i].iter().enumerate() {
                    if let Some(fq) = plan.activations.get(&site_id(&node.id, k)) {
                        if fq.enabled {
                            qin[k] = Some(fake_quant_slice(&values[s], &fq.params)?);
                        }
                    }
                }
            }
            let input = |k: usize| -> &[f32] { qin[k].as_deref().unwrap_or(&values[self.inputs[i][k]]) };
            let d0 = dims[self.inputs[i][0]];
            let (out, od, a) = match &node.kind {
                LayerKind::Conv2D(attrs) => {
                    let (w, mask, fold, bias) = self.effective_conv_weights(i, node, plan)?;
                    let (y, yd) = k::conv2d_forward(input(0), d0, &w, bias.as_deref(), attrs);
                    (y, yd, Aux::Weights { used: w, mask, fold })
                }
                LayerKind::FullyConnected { out_features } => {
                    let (w, mask, _, bias) = self.effective_conv_weights(i, node, plan)?;
                    let y = k::fc_forward(input(0), d0.n, &w, bias.as_deref(), *out_features);
                    (y, Dims::new(d0.n, *out_features, 1, 1), Aux::Weights { used: w, mask, fold: None })
                }
                LayerKind::BatchNorm { eps } => {
                    if self.folded_bn[i] {
                        (input(0).to_vec(), d0, Aux::None)
                    } else {
                        let [g, b, m, v] = self.bn_slices(node)?;
                        match opts.bn_mode {
                            BnMode::Inference => (k::bn_inference(input(0), d0, g, b, m, v, *eps), d0, Aux::None),
                            BnMode::Training => {
                                let (mean, var) = k::channel_stats(input(0), d0);
                                let y = k::bn_inference(input(0), d0, g, b, &mean, &var, *eps);
                                (y, d0, Aux::BnBatch { mean, var })
                            }
                        }
                    }
                }
                LayerKind::ReLU => (k::relu(input(0)), d0, Aux::None),
                LayerKind::Add => (k::add(input(0), input(1)), d0, Aux::None),
                LayerKind::AvgPool { kernel } => {
                    let (y, yd) = k::avg_pool(input(0), d0, *kernel);
                    (y, yd, Aux::None)
                }
                LayerKind::MaxPool { kernel } => {
                    let (y, yd, arg) = k::max_pool(input(0), d0, *kernel);
                    (y, yd, Aux::MaxArg(arg))
                }
                LayerKind::Softmax => {
                    let y = k::softmax(input(0), d0.n, d0.per_sample());
                    (y, d0, Aux::None)
                }
            };
            values.push(out);
            dims.push(od);
            aux.push(a);
            quant_inputs.push(qin);
        }
        Ok(Tape { values, dims, aux, quant_inputs })
    }

    fn bn_slices(&self, node: &LayerNode) -> Result<[&'g [f32]; 4]> {
        Ok([
            self.param(&node.params[0])?,
            self.param(&node.params[1])?,
            self.param(&node.params[2])?,
            self.param(&node.params[3])?,
        ])
    }

    /// Weights and bias a conv/FC node computes with, after optional weight
    /// fake-quantization and optional BN folding.
    #[allow(clippy::type_complexity)]
    fn effective_conv_weights(
        &self,
        i: usize,
        node: &LayerNode,
        plan: Option<&FakeQuantPlan>,
    ) -> Result<(Vec<f32>, Option<Vec<bool>>, Option<(Vec<f32>, Vec<f32>)>, Option<Vec<f32>>)> {
        let raw = self.param(&node.params[0])?;
        let bias = node.params.get(1).map(|b| self.param(b)).transpose()?;
        let (wq, mask) = match plan.and_then(|p| p.weights.get(&node.id)).filter(|f| f.enabled) {
            Some(fq) => (fake_quant_slice(raw, &fq.params)?, Some(in_range_mask(raw, &fq.params)?)),
            None => (raw.to_vec(), None),
        };
        let Some(&bi) = self.fold_partner.get(&i) else {
            return Ok((wq, mask, None, bias.map(<[f32]>::to_vec)));
        };
        let bn_node = self.order[bi];
        let eps = match bn_node.kind {
            LayerKind::BatchNorm { eps } => eps,
            _ => unreachable!("fold partner is a BN node"),
        };
        let [gamma, beta, mean, var] = self.bn_slices(bn_node)?;
        let oc = gamma.len();
        let per = wq.len() / oc;
        let mut inv = Vec::with_capacity(oc);
        for o in 0..oc {
            let d = var[o] + eps;
            if !(d > 0.0) {
                return Err(Error::numeric(format!("`{}`: var + eps <= 0 in channel {o}", bn_node.id)));
            }
            inv.push(1.0 / d.sqrt());
        }
        let mut used = wq.clone();
        for o in 0..oc {
            let f = gamma[o] * inv[o];
            used[o * per..(o + 1) * per].iter_mut().for_each(|w| *w *= f);
        }
        let b_hat = (0..oc)
            .map(|o| beta[o] - gamma[o] * mean[o] * inv[o] + bias.map_or(0.0, |b| gamma[o] * b[o] * inv[o]))
            .collect();
        Ok((used, mask, Some((inv, wq)), Some(b_hat)))
    }

    /// Backpropagates `g_out` (gradient wrt the output slot). Returns parameter
    /// gradients and the gradient wrt the graph input.
    pub(crate) fn backward(&self, tape: &Tape, g_out: Vec<f32>, opts: &ExecOptions) -> Result<(Gradients, Vec<f32>)> {
        let n_slots = self.order.len() + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n_slots];
        grads[n_slots - 1] = Some(g_out);
        let mut pgrads = Gradients::new();
        let mut acc_param = |name: &str, g: Vec<f32>| match pgrads.get_mut(name) {
            Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                pgrads.insert(name.to_string(), g);
            }
        };

        for i in (0..self.order.len()).rev() {
            let Some(gy) = grads[i + 1].take() else {
                continue;
            };
            let node = self.order[i];
            let ins = &self.inputs[i];
            let input = |k: usize| -> &[f32] { tape.quant_inputs[i][k].as_deref().unwrap_or(&tape.values[ins[k]]) };
            let d0 = tape.dims[ins[0]];
            let mut gin: Vec<Vec<f32>> = match &node.kind {
                LayerKind::Conv2D(attrs) => {
                    let Aux::Weights { used, mask, fold } = &tape.aux[i] else { unreachable!() };
                    let (gx, gw, gb) = k::conv2d_backward(input(0), d0, used, attrs, &gy, true);
                    self.linear_param_grads(i, node, gw, gb, mask.as_deref(), fold.as_ref(), &mut acc_param)?;
                    vec![gx]
                }
                LayerKind::FullyConnected { out_features } => {
                    let Aux::Weights { used, mask, .. } = &tape.aux[i] else { unreachable!() };
                    let (gx, gw, gb) = k::fc_backward(input(0), d0.n, used, *out_features, &gy, true);
                    self.linear_param_grads(i, node, gw, gb, mask.as_deref(), None, &mut acc_param)?;
                    vec![gx]
                }
                LayerKind::BatchNorm { eps } => {
                    if self.folded_bn[i] {
                        vec![gy]
                    } else {
                        let [g, _, m, v] = self.bn_slices(node)?;
                        let (gx, gg, gb) = match (&tape.aux[i], opts.bn_mode) {
                            (Aux::BnBatch { mean, var }, BnMode::Training) => {
                                k::bn_training_backward(input(0), d0, g, mean, var, *eps, &gy)
                            }
                            _ => k::bn_inference_backward(input(0), d0, g, m, v, *eps, &gy),
                        };
                        acc_param(&node.params[0], gg);
                        acc_param(&node.params[1], gb);
                        vec![gx]
                    }
                }
                LayerKind::ReLU => vec![k::relu_backward(input(0), &gy)],
                LayerKind::Add => vec![gy.clone(), gy],
                LayerKind::AvgPool { kernel } => vec![k::avg_pool_backward(d0, *kernel, &gy)],
                LayerKind::MaxPool { .. } => {
                    let Aux::MaxArg(arg) = &tape.aux[i] else { unreachable!() };
                    vec![k::max_pool_backward(d0.numel(), arg, &gy)]
                }
                LayerKind::Softmax => {
                    let y = &tape.values[i + 1];
                    vec![k::softmax_backward(y, d0.n, d0.per_sample(), &gy)]
                }
            };
            // Straight-through estimator across active site quantizers.
            if let Some(plan) = opts.fake_quant {
                for (k, g) in gin.iter_mut().enumerate() {
                    if let Some(fq) = plan.activations.get(&site_id(&node.id, k)).filter(|f| f.enabled) {
                        let mask = in_range_mask(&tape.values[ins[k]], &fq.params)?;
                        g.iter_mut().zip(mask).for_each(|(v, m)| {
                            if !m {
                                *v = 0.0
                            }
                        });
                    }
                }
            }
            for (k, g) in gin.into_iter().enumerate() {
                let s = ins[k];
                match &mut grads[s] {
                    Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let gx = grads[0].take().unwrap_or_else(|| vec![0.0; tape.values[0].len()]);
        Ok((pgrads, gx))
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_param_grads(
        &self,
        i: usize,
        node: &LayerNode,
        mut gw: Vec<f32>,
        gb: Vec<f32>,
        mask: Option<&[bool]>,
        fold: Option<&(Vec<f32>, Vec<f32>)>,
        acc: &mut impl FnMut(&str, Vec<f32>),
    ) -> Result<()> {
        let Some((inv, wq)) = fold else {
            if let Some(m) = mask {
                gw.iter_mut().zip(m).for_each(|(g, &keep)| {
                    if !keep {
                        *g = 0.0
                    }
                });
            }
            acc(&node.params[0], gw);
            if let Some(b) = node.params.get(1) {
                acc(b, gb);
            }
            return Ok(());
        };
        // Unfold: W_hat = gamma * inv * q(W), B_hat = beta + gamma * inv * (bias - mean).
        let bn_node = self.order[self.fold_partner[&i]];
        let [gamma, _, mean, _] = self.bn_slices(bn_node)?;
        let bias = node.params.get(1).map(|b| self.param(b)).transpose()?;
        let oc = gamma.len();
        let per = gw.len() / oc;
        let mut g_gamma = vec![0.0f32; oc];
        let mut g_w = vec![0.0f32; gw.len()];
        for o in 0..oc {
            let f = gamma[o] * inv[o];
            let mut dot = 0.0f32;
            for j in o * per..(o + 1) * per {
                dot += gw[j] * wq[j];
                let pass = mask.is_none_or(|m| m[j]);
                g_w[j] = if pass { gw[j] * f } else { 0.0 };
            }
            let shift = bias.map_or(0.0, |b| b[o]) - mean[o];
            g_gamma[o] = dot * inv[o] + gb[o] * shift * inv[o];
        }
        acc(&node.params[0], g_w);
        if let Some(b) = node.params.get(1) {
            acc(b, (0..oc).map(|o| gb[o] * gamma[o] * inv[o]).collect());
        }
        acc(&bn_node.params[0], g_gamma);
        acc(&bn_node.params[1], gb);
        Ok(())
    }

    /// Id of the first node whose output holds a non-finite value.
    pub(crate) fn first_non_finite(&self, tape: &Tape) -> Option<String> {
        if tape.values[0].iter().any(|v| !v.is_finite()) {
            return Some(GRAPH_INPUT.to_string());
        }
        self.order
            .iter()
            .enumerate()
            .find(|(i, _)| tape.values[i + 1].iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n.id.clone())
    }

    /// Running-statistics update targets: `(mean param, var param, batch mean, batch var, count)`.
    pub(crate) fn batch_stats<'t>(&self, tape: &'t Tape) -> Vec<(&'g str, &'g str, &'t [f32], &'t [f32], usize)> {
        self.order
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &tape.aux[i] {
                Aux::BnBatch { mean, var } => {
                    let d = tape.dims[self.inputs[i][0]];
                    Some((n.params[2].as_str(), n.params[3].as_str(), mean.as_slice(), var.as_slice(), d.n * d.plane()))
                }
                _ => None,
            })
            .collect()
    }
}
