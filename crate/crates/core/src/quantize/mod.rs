//! BN folding, quantization placement, integer kernels and the quantized
//! model runtime.

mod codec;
mod fold;
mod intkern;
mod model;

pub use codec::{
    dequantize_slice, dequantize_tensor, fake_quant_slice, in_range_mask, quantize_slice, quantize_tensor,
    quantize_value,
};
pub(crate) use fold::inv_std;
pub use fold::{fold_batchnorm, fold_bn, fold_integer_weights, FoldedConv};
pub use intkern::{
    accumulate, check_accum_contract, quantized_conv, quantized_fc, AccumMode, Accumulator, IntOperand, LayerAudit,
    OverflowAudit, INT16_BIT_BUDGET,
};
pub use model::{
    build_quantized, build_quantized_with, evaluate_quantized, load_quantized, run_quantized, save_quantized,
    QuantLayer, QuantizeConfig, QuantizedModel, WeightScales,
};

use serde::{Deserialize, Serialize};

use crate::graph::{LayerKind, ModelGraph, QuantSiteAnnotation, Signedness, SiteReason, GRAPH_INPUT};

/// Switches for [`plan_placement_with`]; the default follows every guideline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementOptions {
    /// Also quantize both inputs of every Add (signed, one shared scale).
    pub quantize_add_inputs: bool,
    /// Use unsigned codes for sites fed by ReLU outputs.
    pub unsigned_relu: bool,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        Self { quantize_add_inputs: false, unsigned_relu: true }
    }
}

/// Annotates every edge feeding a conv, FC or Add node.
pub fn plan_placement(g: &ModelGraph) -> ModelGraph {
    plan_placement_with(g, PlacementOptions::default())
}

pub fn plan_placement_with(g: &ModelGraph, opts: PlacementOptions) -> ModelGraph {
    let mut out = g.clone();
    out.quant_sites.clear();
    for node in &g.nodes {
        let is_add = matches!(node.kind, LayerKind::Add);
        if !(node.kind.is_linear() || is_add) {
            continue;
        }
        for (k, src) in node.inputs.iter().enumerate() {
            let quantize = !is_add || opts.quantize_add_inputs;
            let (signedness, reason) = if is_add && !quantize {
                (Signedness::Signed, SiteReason::AddInputSkipped)
            } else if !is_add && opts.unsigned_relu && non_negative(g, src) {
                (Signedness::Unsigned, SiteReason::AfterReluUnsigned)
            } else {
                (Signedness::Signed, SiteReason::DefaultSigned)
            };
            out.quant_sites.push(QuantSiteAnnotation {
                edge: (src.clone(), node.id.clone()),
                input_index: k,
                quantize,
                signedness,
                reason,
            });
        }
    }
    out
}

/// ReLU outputs, and pooling of ReLU outputs, are never negative.
fn non_negative(g: &ModelGraph, id: &str) -> bool {
    if id == GRAPH_INPUT {
        return false;
    }
    match g.node(id) {
        Some(n) => match n.kind {
            LayerKind::ReLU => true,
            LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => non_negative(g, &n.inputs[0]),
            _ => false,
        },
        None => false,
    }
}
