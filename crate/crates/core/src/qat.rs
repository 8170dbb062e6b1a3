//! Quantization-aware fine-tuning: fake quantization with a straight-through
//! gradient, conv+BN folded in the forward pass and unfolded in the backward
//! pass, frozen weight and activation scales.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{minmax_scale, CalibrationProfile, Granularity, QuantParams};
use crate::error::{Error, Result};
use crate::graph::{site_id, BnParams, ConvAttrs, LayerKind, LayerNode, ModelGraph, Signedness};
use crate::nnexec::{
    train_with, Augmentation, BnMode, Dataset, Dims, ExecOptions, Gradients, Program, TrainConfig, TrainHooks,
};
use crate::prune::PruneMask;
use crate::quantize::{fake_quant_slice, in_range_mask};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeQuantNode {
    pub params: QuantParams,
    pub enabled: bool,
    /// Scale stays fixed during fine-tuning.
    pub frozen_scale: bool,
}

/// Quantizers used by the executor during QAT.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FakeQuantPlan {
    /// Conv/FC node id to the raw-weight quantizer. For a conv followed by BN
    /// the effective weights are `gamma / sqrt(var + eps) * fq(W)`, which is
    /// the folded weights quantized with the folded scale.
    pub weights: BTreeMap<String, FakeQuantNode>,
    /// Site id to activation quantizer.
    pub activations: BTreeMap<String, FakeQuantNode>,
    /// Execute conv+BN pairs folded, with BN running statistics.
    pub fold_bn: bool,
}

impl FakeQuantPlan {
    /// Channel-wise MinMax scales on the raw conv/FC weights and the
    /// calibrated activation scales of every planned site.
    pub fn from_profile(g: &ModelGraph, profile: &CalibrationProfile, weight_bits: u8) -> Result<Self> {
        if g.quant_sites.is_empty() {
            return Err(Error::validation("graph has no placement plan"));
        }
        let mut weights = BTreeMap::new();
        for n in g.nodes.iter().filter(|n| n.kind.is_linear()) {
            let params = minmax_scale(g.param(&n.params[0])?, weight_bits, Granularity::ChannelWise)?;
            weights.insert(n.id.clone(), FakeQuantNode { params, enabled: true, frozen_scale: true });
        }
        let mut acts: BTreeMap<String, QuantParams> = BTreeMap::new();
        for s in g.quant_sites.iter().filter(|s| s.quantize) {
            let id = s.site_id();
            let p = profile.params(&id).ok_or_else(|| Error::validation(format!("profile lacks site `{id}`")))?;
            acts.insert(id, p.clone());
        }
        for n in g.nodes.iter().filter(|n| matches!(n.kind, LayerKind::Add)) {
            let ids = [site_id(&n.id, 0), site_id(&n.id, 1)];
            if let (Some(a), Some(b)) = (acts.get(&ids[0]), acts.get(&ids[1])) {
                let shared = QuantParams::layer_wise(a.max_scale().max(b.max_scale()), a.bitwidth, Signedness::Signed);
                for id in ids {
                    acts.insert(id, shared.clone());
                }
            }
        }
        let activations = acts
            .into_iter()
            .map(|(k, params)| (k, FakeQuantNode { params, enabled: true, frozen_scale: true }))
            .collect();
        Ok(Self { weights, activations, fold_bn: true })
    }

    /// Same scales with every quantizer and the folding switched off.
    pub fn disabled(mut self) -> Self {
        self.weights.values_mut().for_each(|n| n.enabled = false);
        self.activations.values_mut().for_each(|n| n.enabled = false);
        self.fold_bn = false;
        self
    }

    /// Raw-weight scales per conv/FC node.
    pub fn weight_scales(&self) -> BTreeMap<String, QuantParams> {
        self.weights.iter().map(|(k, v)| (k.clone(), v.params.clone())).collect()
    }
}

/// `dequantize(quantize(x))`.
pub fn fake_quant_forward(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Tensor::from_f32(x.shape().to_vec(), fake_quant_slice(x.as_f32()?, p)?)
}

/// Straight-through gradient: `g` where `x` is inside the clamp range
/// (bounds included), zero elsewhere.
pub fn fake_quant_backward(g: &[f32], x: &[f32], p: &QuantParams) -> Result<Vec<f32>> {
    if g.len() != x.len() {
        return Err(Error::validation("gradient and input lengths differ"));
    }
    let mask = in_range_mask(x, p)?;
    Ok(g.iter().zip(mask).map(|(&v, m)| if m { v } else { 0.0 }).collect())
}

/// Output and parameter gradients of one folded conv+BN pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldGrads {
    pub output: Vec<f32>,
    pub out_dims: Dims,
    pub grad_w: Vec<f32>,
    pub grad_bias: Option<Vec<f32>>,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
}

/// Runs `conv -> BN` folded (running statistics) with an optional weight
/// quantizer on the raw weights, then backpropagates `gy` through the folding
/// to separate gradients for the conv weights and BN gamma/beta.
pub fn fold_forward_unfold_backward(
    w: &Tensor,
    bias: Option<&[f32]>,
    attrs: &ConvAttrs,
    bn: &BnParams,
    x: &[f32],
    xd: Dims,
    gy: &[f32],
    weight_quant: Option<&QuantParams>,
) -> Result<FoldGrads> {
    let mut g = ModelGraph::new("fold", vec![xd.c, xd.h, xd.w]);
    let mut conv_params = vec!["w"];
    g.params.insert("w".into(), w.clone());
    if let Some(b) = bias {
        g.params.insert("b".into(), Tensor::from_f32(vec![b.len()], b.to_vec())?);
        conv_params.push("b");
    }
    g.nodes.push(LayerNode::new("conv", LayerKind::Conv2D(attrs.clone()), &["input"]).with_params(&conv_params));
    g.nodes.push(
        LayerNode::new("bn", LayerKind::BatchNorm { eps: bn.eps }, &["conv"])
            .with_params(&["gamma", "beta", "mean", "var"]),
    );
    let c = bn.channels();
    for (name, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
        g.params.insert(name.into(), Tensor::from_f32(vec![c], v.clone())?);
    }
    let mut plan = FakeQuantPlan { fold_bn: true, ..Default::default() };
    if let Some(p) = weight_quant {
        plan.weights.insert("conv".into(), FakeQuantNode { params: p.clone(), enabled: true, frozen_scale: true });
    }
    crate::quantize::inv_std(bn, "bn")?;
    let opts = ExecOptions { bn_mode: BnMode::Inference, fake_quant: Some(&plan) };
    let prog = Program::new(&g, &opts)?;
    let tape = prog.forward(x.to_vec(), xd, &opts)?;
    let (y, yd) = tape.slot(prog.output_slot());
    let (output, out_dims) = (y.to_vec(), yd);
    if gy.len() != output.len() {
        return Err(Error::validation("upstream gradient has the wrong length"));
    }
    let (mut grads, _): (Gradients, _) = prog.backward(&tape, gy.to_vec(), &opts)?;
    let take = |grads: &mut Gradients, k: &str, n: usize| grads.remove(k).unwrap_or_else(|| vec![0.0; n]);
    Ok(FoldGrads {
        output,
        out_dims,
        grad_w: take(&mut grads, "w", w.numel()),
        grad_bias: bias.map(|b| take(&mut grads, "b", b.len())),
        grad_gamma: take(&mut grads, "gamma", c),
        grad_beta: take(&mut grads, "beta", c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatConfig {
    pub epochs: usize,
    pub lr: f32,
    pub lr_decay: f32,
    pub decay_epoch: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub weight_bits: u8,
    /// When false the forward pass runs without quantizers or folding.
    pub quantizers_enabled: bool,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 5e-4,
            lr_decay: 5.0,
            decay_epoch: 10,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            augmentation: Augmentation::WeakCrop,
            seed: 0,
            weight_bits: 8,
            quantizers_enabled: true,
        }
    }
}

impl QatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::validation("QAT learning rate must be positive"));
        }
        if !(2..=16).contains(&self.weight_bits) {
            return Err(Error::validation(format!("weight bitwidth {} out of range", self.weight_bits)));
        }
        self.train_config().validate()
    }

    /// Equivalent trainer settings; BN stays in inference mode.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_epochs: vec![self.decay_epoch],
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            augmentation: self.augmentation,
            freeze_bn: true,
        }
    }
}

/// Fine-tuned fp master weights and the frozen quantizers they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct QatOutcome {
    pub model: ModelGraph,
    pub plan: FakeQuantPlan,
    pub epoch_loss: Vec<f32>,
}

/// Fine-tunes a placed fp model under the quantizers implied by its PTQ
/// profile. Feed `plan.weight_scales()` to the quantizer as frozen scales to
/// get the final integer model.
pub fn qat_finetune(
    g: &ModelGraph,
    profile: &CalibrationProfile,
    set: &Dataset,
    cfg: &QatConfig,
) -> Result<QatOutcome> {
    qat_finetune_with(g, profile, set, cfg, None, None)
}

pub fn qat_finetune_with(
    g: &ModelGraph,
    profile: &CalibrationProfile,
    set: &Dataset,
    cfg: &QatConfig,
    mask: Option<&PruneMask>,
    checkpoint_dir: Option<&Path>,
) -> Result<QatOutcome> {
    cfg.validate()?;
    let mut plan = FakeQuantPlan::from_profile(g, profile, cfg.weight_bits)?;
    if cfg.epochs == 0 {
        return Ok(QatOutcome { model: g.clone(), plan, epoch_loss: Vec::new() });
    }
    if !cfg.quantizers_enabled {
        plan = plan.disabled();
    }
    let hooks = TrainHooks { fake_quant: Some(&plan), mask, checkpoint_dir };
    let (model, log) = train_with(g, set, &cfg.train_config(), hooks)?;
    Ok(QatOutcome { model, plan, epoch_loss: log.epoch_loss })
}
