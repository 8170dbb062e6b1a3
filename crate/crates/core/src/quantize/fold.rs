//! Folding batch-norm into the preceding convolution.

use crate::error::{Error, Result};
use crate::graph::{BnParams, ModelGraph};
use crate::tensor::Tensor;

/// Conv weights and bias with a following BN absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv {
    pub w_hat: Tensor,
    pub b_hat: Vec<f32>,
    /// Folded per-channel weight scales, when the raw scales were supplied.
    /// Always positive; a negative gamma flips the weights instead.
    pub s_w_hat: Option<Vec<f32>>,
}

/// `1 / sqrt(var + eps)` per channel.
pub(crate) fn inv_std(bn: &BnParams, what: &str) -> Result<Vec<f32>> {
    bn.var
        .iter()
        .enumerate()
        .map(|(o, &v)| {
            let d = v + bn.eps;
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::numeric(format!("{what}: var + eps <= 0 in channel {o}")))
            }
        })
        .collect()
}

fn check_channels(w: &Tensor, bias: Option<&[f32]>, bn: &BnParams) -> Result<usize> {
    let oc = w.shape()[0];
    let c = bn.channels();
    if c != oc || bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
        return Err(Error::validation(format!("BN has {c} channels but conv has {oc} outputs")));
    }
    if bias.is_some_and(|b| b.len() != oc) {
        return Err(Error::validation("conv bias length differs from output channels"));
    }
    Ok(oc)
}

/// `W_hat = gamma W / sqrt(var + eps)`,
/// `B_hat = beta - gamma mean / sqrt(var + eps) + gamma bias / sqrt(var + eps)`,
/// `S_W_hat = |gamma| S_W / sqrt(var + eps)`.
pub fn fold_bn(w: &Tensor, bias: Option<&[f32]>, bn: &BnParams, s_w: Option<&[f32]>) -> Result<FoldedConv> {
    let oc = check_channels(w, bias, bn)?;
    let inv = inv_std(bn, "fold")?;
    let mut w_hat = w.as_f32()?.to_vec();
    let per = w_hat.len() / oc;
    for o in 0..oc {
        let f = bn.gamma[o] * inv[o];
        w_hat[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= f);
    }
    let b_hat = (0..oc)
        .map(|o| {
            let mut b = bn.beta[o] - bn.gamma[o] * bn.mean[o] * inv[o];
            if let Some(bias) = bias {
                b += bn.gamma[o] * bias[o] * inv[o];
            }
            b
        })
        .collect();
    let s_w_hat = match s_w {
        None => None,
        Some(s) if s.len() != oc => {
            return Err(Error::validation(format!("{} weight scales for {oc} channels", s.len())));
        }
        Some(s) => {
            let out: Vec<f32> = (0..oc).map(|o| bn.gamma[o].abs() * s[o] * inv[o]).collect();
            if out.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::numeric("folded weight scale is not positive (gamma = 0?)"));
            }
            Some(out)
        }
    };
    Ok(FoldedConv { w_hat: Tensor::from_f32(w.shape().to_vec(), w_hat)?, b_hat, s_w_hat })
}

/// Integer weights quantized with the raw scale, re-expressed against the
/// folded scale: the sign of gamma moves into the codes.
pub fn fold_integer_weights(w_int: &[i32], gamma: &[f32]) -> Vec<i32> {
    let per = w_int.len() / gamma.len();
    w_int.chunks(per).zip(gamma).flat_map(|(c, &g)| c.iter().map(move |&q| if g < 0.0 { -q } else { q })).collect()
}

/// Returns the graph with every conv->BN pair replaced by one conv holding
/// the folded weights and bias. Site annotations keep their ids.
pub fn fold_batchnorm(g: &ModelGraph) -> Result<ModelGraph> {
    g.validate()?;
    let mut out = g.clone();
    for (conv_id, bn_id) in g.conv_bn_pairs() {
        let conv = g.node(&conv_id).expect("pair from graph");
        let bn_node = g.node(&bn_id).expect("pair from graph");
        let bn = g.bn_params(bn_node)?;
        let wname = conv.params[0].clone();
        let bias = conv.params.get(1).map(|b| g.param_f32(b)).transpose()?;
        let f = fold_bn(g.param(&wname)?, bias, &bn, None).map_err(|e| match e {
            Error::Numeric(m) => Error::numeric(format!("`{bn_id}`: {m}")),
            other => other,
        })?;
        out.params.insert(wname, f.w_hat);
        let bname = match conv.params.get(1) {
            Some(b) => b.clone(),
            None => {
                let mut name = format!("{conv_id}.bias");
                while out.params.contains_key(&name) {
                    name.push('_');
                }
                out.node_mut(&conv_id).expect("conv exists").params.push(name.clone());
                name
            }
        };
        out.params.insert(bname, Tensor::from_f32(vec![f.b_hat.len()], f.b_hat)?);
        for p in &bn_node.params {
            out.params.remove(p);
        }
        out.nodes.retain(|n| n.id != bn_id);
        for n in &mut out.nodes {
            n.inputs.iter_mut().filter(|i| **i == bn_id).for_each(|i| *i = conv_id.clone());
        }
        for s in &mut out.quant_sites {
            if s.edge.0 == bn_id {
                s.edge.0 = conv_id.clone();
            }
        }
    }
    out.validate()?;
    Ok(out)
}
