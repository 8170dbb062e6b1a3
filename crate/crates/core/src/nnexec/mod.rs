//! fp32 reference executor, softmax cross-entropy gradients and a momentum
//! SGD trainer.

pub mod data;
mod exec;
pub mod kernels;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    augment, load_dataset, make_toy_dataset, make_toy_dataset_with, save_dataset, Augmentation, Dataset, DatasetSplit,
    ToyDataConfig,
};
pub(crate) use exec::Program;
pub use exec::{BnMode, ExecOptions, Gradients};
pub use kernels::Dims;

use crate::error::{Error, Result};
use crate::graph::{save_model, LayerKind, ModelGraph};
use crate::par;
use crate::prune::PruneMask;
use crate::qat::FakeQuantPlan;
use crate::tensor::Tensor;

/// Activations captured at requested sites during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionTrace {
    pub activations: BTreeMap<String, Tensor>,
}

/// Splits a `[C, H, W]` or `[N, C, H, W]` input into a flat batch.
pub(crate) fn input_batch(g: &ModelGraph, x: &Tensor) -> Result<(Vec<f32>, Dims, bool)> {
    let s = x.shape();
    let (dims, batched) = match s.len() {
        3 => (Dims::new(1, s[0], s[1], s[2]), false),
        4 => (Dims::new(s[0], s[1], s[2], s[3]), true),
        _ => return Err(Error::validation(format!("input of rank {} (expected 3 or 4)", s.len()))),
    };
    if [dims.c, dims.h, dims.w] != g.input_shape[..] {
        return Err(Error::validation(format!(
            "input shape {:?} does not match graph input {:?}",
            &s[s.len() - 3..],
            g.input_shape
        )));
    }
    Ok((x.as_f32()?.to_vec(), dims, batched))
}

/// Tensor shape for a batch slot: `[N, C]` when spatially flat, else NCHW.
/// The batch axis is dropped for unbatched inputs.
pub(crate) fn output_tensor(v: Vec<f32>, d: Dims, batched: bool) -> Result<Tensor> {
    let mut shape = if d.h == 1 && d.w == 1 { vec![d.n, d.c] } else { vec![d.n, d.c, d.h, d.w] };
    if !batched {
        shape.remove(0);
    }
    Tensor::from_f32(shape, v)
}

/// Inference-mode forward pass, recording the inputs of the listed sites
/// (`consumer:input_index`). Site values are taken before any quantizer.
pub fn forward(g: &ModelGraph, x: &Tensor, sites: Option<&[String]>) -> Result<(Tensor, ExecutionTrace)> {
    forward_with(g, x, sites, &ExecOptions::inference())
}

pub fn forward_with(
    g: &ModelGraph,
    x: &Tensor,
    sites: Option<&[String]>,
    opts: &ExecOptions,
) -> Result<(Tensor, ExecutionTrace)> {
    let (xv, xd, batched) = input_batch(g, x)?;
    let prog = Program::new(g, opts)?;
    let tape = prog.forward(xv, xd, opts)?;
    let mut trace = ExecutionTrace::default();
    for site in sites.unwrap_or_default() {
        let slot = site_source_slot(g, &prog, site)?;
        let (v, d) = tape.slot(slot);
        trace.activations.insert(site.clone(), output_tensor(v.to_vec(), d, batched)?);
    }
    let (v, d) = tape.slot(prog.output_slot());
    Ok((output_tensor(v.to_vec(), d, batched)?, trace))
}

/// Slot holding the value that flows into site `consumer:k`.
pub(crate) fn site_source_slot(g: &ModelGraph, prog: &Program, site: &str) -> Result<usize> {
    let bad = || Error::validation(format!("unknown site `{site}`"));
    let (consumer, k) = site.rsplit_once(':').ok_or_else(bad)?;
    let k: usize = k.parse().map_err(|_| bad())?;
    let node = g.node(consumer).ok_or_else(bad)?;
    let src = node.inputs.get(k).ok_or_else(bad)?;
    prog.slot_of(src).ok_or_else(bad)
}

/// Logits (or the output node's values) for a flat batch.
pub(crate) fn run_batch(prog: &Program, x: Vec<f32>, xd: Dims, opts: &ExecOptions) -> Result<(Vec<f32>, Dims)> {
    let tape = prog.forward(x, xd, opts)?;
    let (v, d) = tape.slot(prog.output_slot());
    Ok((v.to_vec(), d))
}

/// Parameters updated by the optimizer: conv/FC weights and biases and BN
/// gamma/beta. BN running statistics are excluded.
pub fn trainable_params(g: &ModelGraph) -> Vec<String> {
    let mut out = Vec::new();
    for n in &g.nodes {
        match n.kind {
            LayerKind::BatchNorm { .. } => out.extend(n.params[..2].iter().cloned()),
            _ => out.extend(n.params.iter().cloned()),
        }
    }
    out.sort();
    out
}

/// Mean softmax cross-entropy on a labelled batch and the gradient of every
/// trainable parameter. BN uses running statistics.
pub fn loss_and_grads(g: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<(f32, Gradients)> {
    loss_and_grads_with(g, x, labels, &ExecOptions::inference())
}

pub fn loss_and_grads_with(
    g: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    opts: &ExecOptions,
) -> Result<(f32, Gradients)> {
    let (xv, xd, _) = input_batch(g, x)?;
    let prog = Program::new(g, opts)?;
    let (loss, grads, _) = step_grads(g, &prog, xv, xd, labels, opts)?;
    Ok((loss, grads))
}

type StepOut = (f32, Gradients, Vec<(String, String, Vec<f32>, Vec<f32>, usize)>);

fn step_grads(
    g: &ModelGraph,
    prog: &Program,
    x: Vec<f32>,
    xd: Dims,
    labels: &[usize],
    opts: &ExecOptions,
) -> Result<StepOut> {
    if xd.n == 0 || labels.len() != xd.n {
        return Err(Error::validation(format!("{} labels for a batch of {}", labels.len(), xd.n)));
    }
    let tape = prog.forward(x, xd, opts)?;
    let (out, od) = tape.slot(prog.output_slot());
    let k = od.per_sample();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {bad} outside [0, {k})")));
    }
    let (loss, g_out) = if matches!(prog.output_node().kind, LayerKind::Softmax) {
        // Cross-entropy directly on probabilities.
        let n = xd.n as f32;
        let mut loss = 0.0f64;
        let mut g = vec![0.0f32; out.len()];
        for (s, &l) in labels.iter().enumerate() {
            let p = out[s * k + l].max(f32::MIN_POSITIVE);
            loss -= (p as f64).ln();
            g[s * k + l] = -1.0 / (p * n);
        }
        ((loss / xd.n as f64) as f32, g)
    } else {
        kernels::softmax_cross_entropy(out, xd.n, k, labels)
    };
    if !loss.is_finite() {
        let at = prog.first_non_finite(&tape).unwrap_or_else(|| "loss".to_string());
        return Err(Error::numeric(format!("non-finite loss {loss} (first non-finite value at `{at}`)")));
    }
    let (mut grads, _) = prog.backward(&tape, g_out, opts)?;
    for name in trainable_params(g) {
        if !grads.contains_key(&name) {
            let n = g.param(&name)?.numel();
            grads.insert(name, vec![0.0; n]);
        }
    }
    let stats = prog
        .batch_stats(&tape)
        .into_iter()
        .map(|(m, v, bm, bv, c)| (m.to_string(), v.to_string(), bm.to_vec(), bv.to_vec(), c))
        .collect();
    Ok((loss, grads, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    /// The learning rate is divided by this at every decay epoch.
    pub lr_decay: f32,
    /// Zero-based epochs at whose start the decay applies.
    pub decay_epochs: Vec<usize>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Keep BN in inference mode (running statistics, no updates).
    pub freeze_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lr_decay: 10.0,
            decay_epochs: vec![20],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            augmentation: Augmentation::None,
            freeze_bn: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::validation("lr decay factor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight decay must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_decay.powi(k as i32)
    }
}

/// Optional extras for [`train_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainHooks<'a> {
    /// Run the forward pass through these quantizers (BN then stays frozen).
    pub fake_quant: Option<&'a FakeQuantPlan>,
    /// Re-applied after every optimizer step.
    pub mask: Option<&'a PruneMask>,
    /// A model directory `epoch_NNN` is written here after every epoch.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f32>,
}

const BN_MOMENTUM: f32 = 0.1;

pub fn train(g: &ModelGraph, set: &Dataset, cfg: &TrainConfig) -> Result<ModelGraph> {
    train_with(g, set, cfg, TrainHooks::default()).map(|(m, _)| m)
}

/// Single-threaded, seeded momentum SGD. Bit-reproducible for a fixed seed.
pub fn train_with(
    g: &ModelGraph,
    set: &Dataset,
    cfg: &TrainConfig,
    hooks: TrainHooks,
) -> Result<(ModelGraph, TrainLog)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if set.sample_shape() != g.input_shape.as_slice() {
        return Err(Error::validation("dataset sample shape does not match graph input"));
    }
    par::with_sequential(|| train_loop(g, set, cfg, hooks))
}

fn train_loop(g: &ModelGraph, set: &Dataset, cfg: &TrainConfig, hooks: TrainHooks) -> Result<(ModelGraph, TrainLog)> {
    let mut model = g.clone();
    let bn_mode = if cfg.freeze_bn || hooks.fake_quant.is_some() { BnMode::Inference } else { BnMode::Training };
    let opts = ExecOptions { bn_mode, fake_quant: hooks.fake_quant };
    let names = trainable_params(&model);
    let mut velocity: BTreeMap<String, Vec<f32>> =
        names.iter().map(|n| Ok((n.clone(), vec![0.0; model.param(n)?.numel()]))).collect::<Result<_>>()?;
    if let Some(m) = hooks.mask {
        m.apply_in_place(&mut model)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let shape = set.sample_shape().to_vec();
    let mut log = TrainLog { epoch_loss: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (mut x, xd, y) = set.batch(idx);
            if cfg.augmentation != Augmentation::None {
                let per = xd.per_sample();
                for s in 0..xd.n {
                    let a = augment(&x[s * per..(s + 1) * per], &shape, cfg.augmentation, &mut rng);
                    x[s * per..(s + 1) * per].copy_from_slice(&a);
                }
            }
            let (loss, grads, stats) = {
                let prog = Program::new(&model, &opts)?;
                step_grads(&model, &prog, x, xd, &y, &opts).map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?
            };
            loss_sum += loss as f64;
            batches += 1;
            for name in &names {
                let gr = &grads[name];
                let v = velocity.get_mut(name).expect("velocity for every trainable param");
                let w = model.params.get_mut(name).expect("trainable param exists").as_f32_mut()?;
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
                    *wi -= lr * *vi;
                }
            }
            for (mean_name, var_name, bm, bv, count) in stats {
                let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
                let rm = model.params.get_mut(&mean_name).expect("bn mean").as_f32_mut()?;
                rm.iter_mut().zip(&bm).for_each(|(r, b)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
                let rv = model.params.get_mut(&var_name).expect("bn var").as_f32_mut()?;
                rv.iter_mut().zip(&bv).for_each(|(r, b)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias);
            }
            if let Some(m) = hooks.mask {
                m.apply_in_place(&mut model)?;
            }
        }
        log.epoch_loss.push((loss_sum / batches.max(1) as f64) as f32);
        if let Some(dir) = hooks.checkpoint_dir {
            save_model(&model, dir.join(format!("epoch_{epoch:03}")))?;
        }
    }
    Ok((model, log))
}

/// Top-1 (and top-5 when there are at least five classes) accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
    pub correct1: usize,
    pub correct5: usize,
    pub total: usize,
}

const EVAL_CHUNK: usize = 64;

/// Rank of the true label among the scores, 0 for the best. Ties count
/// against the label (a lower index wins a tie).
pub(crate) fn label_rank(scores: &[f32], label: usize) -> usize {
    let t = scores[label];
    scores.iter().enumerate().filter(|&(i, &s)| s > t || (s == t && i < label)).count()
}

pub fn evaluate(g: &ModelGraph, set: &Dataset) -> Result<Accuracy> {
    let opts = ExecOptions::inference();
    let prog = Program::new(g, &opts)?;
    if set.sample_shape() != g.input_shape.as_slice() {
        return Err(Error::validation("dataset sample shape does not match graph input"));
    }
    evaluate_fn(set, |x, xd| run_batch(&prog, x, xd, &opts).map(|(v, _)| v))
}

/// Scores the eval set with any batch scorer returning `[n, classes]`.
/// Chunks may run in parallel; counts are summed in chunk order.
pub fn evaluate_fn<F>(set: &Dataset, score: F) -> Result<Accuracy>
where
    F: Fn(Vec<f32>, Dims) -> Result<Vec<f32>> + Sync + Send,
{
    if set.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let chunks = set.len().div_ceil(EVAL_CHUNK);
    let counts = par::map_range(chunks, |c| -> Result<(usize, usize)> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(set.len())).collect();
        let (x, xd, y) = set.batch(&idx);
        let out = score(x, xd)?;
        let k = out.len() / xd.n;
        if k != set.classes {
            return Err(Error::validation(format!("model emits {k} scores for {} classes", set.classes)));
        }
        let (mut c1, mut c5) = (0, 0);
        for (s, &l) in y.iter().enumerate() {
            let r = label_rank(&out[s * k..(s + 1) * k], l);
            c1 += usize::from(r == 0);
            c5 += usize::from(r < 5);
        }
        Ok((c1, c5))
    });
    let (mut c1, mut c5) = (0, 0);
    for c in counts {
        let (a, b) = c?;
        c1 += a;
        c5 += b;
    }
    let total = set.len();
    Ok(Accuracy {
        top1: c1 as f64 / total as f64,
        top5: (set.classes >= 5).then(|| c5 as f64 / total as f64),
        correct1: c1,
        correct5: c5,
        total,
    })
}
