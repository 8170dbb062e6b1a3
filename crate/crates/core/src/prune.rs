//! Global magnitude pruning and the prune -> fine-tune -> PTQ -> QAT pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, CalibConfig};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::nnexec::{evaluate, train_with, Accuracy, DatasetSplit, TrainConfig, TrainHooks};
use crate::qat::{qat_finetune_with, QatConfig};
use crate::quantize::{
    build_quantized, build_quantized_with, evaluate_quantized, plan_placement, QuantizeConfig, QuantizedModel,
    WeightScales,
};

/// Keep-masks over conv/FC weight tensors; `false` marks a pruned weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub masks: BTreeMap<String, Vec<bool>>,
    pub sparsity: f64,
}

impl PruneMask {
    /// Keeps everything.
    pub fn all_keep(g: &ModelGraph) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for name in g.weight_names() {
            masks.insert(name.clone(), vec![true; g.param(&name)?.numel()]);
        }
        Ok(Self { masks, sparsity: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kept(&self) -> usize {
        self.masks.values().flatten().filter(|&&k| k).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    /// Zeroes masked positions in place.
    pub fn apply_in_place(&self, g: &mut ModelGraph) -> Result<()> {
        for (name, m) in &self.masks {
            let t = g
                .params
                .get_mut(name)
                .ok_or_else(|| Error::validation(format!("mask refers to missing parameter `{name}`")))?;
            if t.numel() != m.len() {
                return Err(Error::validation(format!(
                    "mask for `{name}` has {} entries, tensor has {}",
                    m.len(),
                    t.numel()
                )));
            }
            t.as_f32_mut()?.iter_mut().zip(m).filter(|(_, &k)| !k).for_each(|(w, _)| *w = 0.0);
        }
        Ok(())
    }
}

/// Zeroes the `floor(s * N)` smallest-magnitude conv/FC weights across the
/// whole model. Ties go to the lower flat index, with tensors concatenated in
/// name order.
pub fn magnitude_prune(g: &ModelGraph, s: f64) -> Result<(ModelGraph, PruneMask)> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::validation(format!("sparsity {s} outside [0, 1)")));
    }
    let mut names = g.weight_names();
    names.sort();
    let mut flat: Vec<(f32, usize)> = Vec::new();
    for name in &names {
        let base = flat.len();
        flat.extend(g.param_f32(name)?.iter().enumerate().map(|(i, w)| (w.abs(), base + i)));
    }
    let n_prune = (s * flat.len() as f64).floor() as usize;
    flat.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep = vec![true; flat.len()];
    flat[..n_prune].iter().for_each(|&(_, i)| keep[i] = false);
    let mut masks = BTreeMap::new();
    let mut off = 0;
    for name in &names {
        let n = g.param(name)?.numel();
        masks.insert(name.clone(), keep[off..off + n].to_vec());
        off += n;
    }
    let mask = PruneMask { masks, sparsity: s };
    Ok((apply_mask(g, &mask)?, mask))
}

pub fn apply_mask(g: &ModelGraph, mask: &PruneMask) -> Result<ModelGraph> {
    let mut out = g.clone();
    mask.apply_in_place(&mut out)?;
    Ok(out)
}

/// Nonzero count over the masked weight tensors.
pub fn masked_nnz(g: &ModelGraph, mask: &PruneMask) -> Result<usize> {
    let mut n = 0;
    for name in mask.masks.keys() {
        n += g.param(name)?.count_nonzero();
    }
    Ok(n)
}

/// Whether every pruned position quantizes to integer 0.
pub fn pruned_codes_are_zero(qm: &QuantizedModel, source: &ModelGraph, mask: &PruneMask) -> Result<bool> {
    for (id, layer) in &qm.weights {
        let node = source.node(id).ok_or_else(|| Error::validation(format!("unknown layer `{id}`")))?;
        let Some(m) = mask.masks.get(&node.params[0]) else {
            continue;
        };
        let codes = layer.codes.to_i32_vec()?;
        if codes.iter().zip(m).any(|(&c, &k)| !k && c != 0) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub finetune: TrainConfig,
    pub calib: CalibConfig,
    pub quantize: QuantizeConfig,
    pub qat: QatConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            finetune: TrainConfig {
                lr: 5e-3,
                lr_decay: 5.0,
                decay_epochs: vec![5],
                epochs: 8,
                augmentation: crate::nnexec::Augmentation::WeakCrop,
                ..Default::default()
            },
            calib: CalibConfig::default(),
            quantize: QuantizeConfig::default(),
            qat: QatConfig { epochs: 4, decay_epoch: 2, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Pruned,
    FineTuned,
    PostTrainingQuantized,
    QuantizationAwareTrained,
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub sparsity: f64,
    pub nnz: usize,
    pub top1: f64,
    pub top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub target_sparsity: f64,
    pub total_weights: usize,
    pub rows: Vec<StageRow>,
}

impl PipelineReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,sparsity,nnz,top1,top5\n");
        for r in &self.rows {
            let top5 = r.top5.map(|v| format!("{:.4}", v * 100.0)).unwrap_or_default();
            writeln!(s, "{},{:.4},{},{:.4},{}", r.stage, r.sparsity, r.nnz, r.top1 * 100.0, top5)
                .expect("write to String");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>9} {:>9} {:>8} {:>8}\n", "stage", "sparsity", "nnz", "top1", "top5");
        for r in &self.rows {
            let top5 = r.top5.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into());
            writeln!(s, "{:<10} {:>9.3} {:>9} {:>8.2} {:>8}", r.stage, r.sparsity, r.nnz, r.top1 * 100.0, top5)
                .expect("write to String");
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pipeline_report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("pipeline_report.csv"), self.to_csv())?;
        fs::write(dir.join("pipeline_report.txt"), self.to_text())?;
        Ok(())
    }
}

/// Every stage model plus the shared mask.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub m1: ModelGraph,
    pub m2: ModelGraph,
    pub m3: QuantizedModel,
    /// QAT fp master weights; `m4` is their integer model.
    pub m4_master: ModelGraph,
    pub m4: QuantizedModel,
    pub mask: PruneMask,
    pub stage: Stage,
    pub report: PipelineReport,
}

fn row(stage: &str, nnz: usize, total: usize, acc: &Accuracy) -> StageRow {
    StageRow {
        stage: stage.into(),
        sparsity: 1.0 - nnz as f64 / total.max(1) as f64,
        nnz,
        top1: acc.top1,
        top5: acc.top5,
    }
}

/// Prune, fine-tune under the mask, quantize, then QAT under the mask.
pub fn run_pipeline(m: &ModelGraph, s: f64, data: &DatasetSplit, cfg: &PipelineConfig) -> Result<PipelineState> {
    cfg.finetune.validate()?;
    cfg.calib.validate()?;
    cfg.qat.validate()?;
    let (m1, mask) = magnitude_prune(m, s)?;
    let total = mask.len();
    let mut rows = vec![row("M0", masked_nnz(m, &mask)?, total, &evaluate(m, &data.eval)?)];
    rows.push(row("M1", masked_nnz(&m1, &mask)?, total, &evaluate(&m1, &data.eval)?));

    let hooks = TrainHooks { mask: Some(&mask), ..Default::default() };
    let (m2, _) = train_with(&m1, &data.train, &cfg.finetune, hooks)?;
    rows.push(row("M2", masked_nnz(&m2, &mask)?, total, &evaluate(&m2, &data.eval)?));

    let placed = plan_placement(&m2);
    let profile = calibrate(&placed, &data.train, &cfg.calib)?;
    let m3 = build_quantized(&placed, &profile, &cfg.quantize)?;
    if !pruned_codes_are_zero(&m3, &placed, &mask)? {
        return Err(Error::numeric("a pruned weight quantized to a nonzero code in M3"));
    }
    let (acc3, _) = evaluate_quantized(&m3, &data.eval)?;
    rows.push(row("M3", masked_nnz(&m2, &mask)?, total, &acc3));

    let qat_cfg = QatConfig { weight_bits: cfg.quantize.weight_bits, ..cfg.qat.clone() };
    let qat = qat_finetune_with(&placed, &profile, &data.train, &qat_cfg, Some(&mask), None)?;
    let scales = qat.plan.weight_scales();
    let m4 = build_quantized_with(&qat.model, &profile, &cfg.quantize, WeightScales::Frozen(&scales))?;
    if !pruned_codes_are_zero(&m4, &qat.model, &mask)? {
        return Err(Error::numeric("a pruned weight quantized to a nonzero code in M4"));
    }
    let (acc4, _) = evaluate_quantized(&m4, &data.eval)?;
    rows.push(row("M4", masked_nnz(&qat.model, &mask)?, total, &acc4));

    Ok(PipelineState {
        m1,
        m2,
        m3,
        m4_master: qat.model,
        m4,
        mask,
        stage: Stage::QuantizationAwareTrained,
        report: PipelineReport { target_sparsity: s, total_weights: total, rows },
    })
}
