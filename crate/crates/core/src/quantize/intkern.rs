//! Integer convolution with saturating INT16 / INT32 accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calib::QuantParams;
use crate::error::{Error, Result};
use crate::graph::ConvAttrs;
use crate::nnexec::kernels::{conv_out_dims, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AccumMode {
    Int16,
    #[default]
    Int32,
}

impl AccumMode {
    fn bounds(self) -> (i64, i64) {
        match self {
            AccumMode::Int16 => (i16::MIN as i64, i16::MAX as i64),
            AccumMode::Int32 => (i32::MIN as i64, i32::MAX as i64),
        }
    }
}

/// Largest operand bitwidth sum allowed with 16-bit accumulators.
pub const INT16_BIT_BUDGET: u32 = 14;

/// Saturation events of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerAudit {
    /// Multiply-accumulate steps that hit the accumulator bound.
    pub saturated: u64,
    /// All multiply-accumulate steps.
    pub total: u64,
}

/// Per-layer saturation counts; merged across inputs by summation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverflowAudit {
    pub layers: BTreeMap<String, LayerAudit>,
}

impl OverflowAudit {
    pub fn record(&mut self, layer: &str, a: LayerAudit) {
        let e = self.layers.entry(layer.to_string()).or_default();
        e.saturated += a.saturated;
        e.total += a.total;
    }

    pub fn merge(&mut self, other: &OverflowAudit) {
        for (k, v) in &other.layers {
            self.record(k, *v);
        }
    }

    pub fn saturated(&self) -> u64 {
        self.layers.values().map(|a| a.saturated).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.values().map(|a| a.total).sum()
    }
}

/// Saturating accumulator of the given width.
#[derive(Debug, Clone, Copy)]
pub struct Accumulator {
    value: i64,
    lo: i64,
    hi: i64,
    pub saturated: u64,
    pub steps: u64,
}

impl Accumulator {
    pub fn new(mode: AccumMode) -> Self {
        let (lo, hi) = mode.bounds();
        Self { value: 0, lo, hi, saturated: 0, steps: 0 }
    }

    /// Adds one product; clamps and counts an event when the sum leaves range.
    #[inline]
    pub fn mac(&mut self, a: i32, b: i32) {
        let s = self.value + a as i64 * b as i64;
        self.steps += 1;
        self.value = if s > self.hi {
            self.saturated += 1;
            self.hi
        } else if s < self.lo {
            self.saturated += 1;
            self.lo
        } else {
            s
        };
    }

    pub fn value(&self) -> i32 {
        self.value as i32
    }
}

/// Accumulates a list of products; returns `(final value, saturation events)`.
pub fn accumulate(products: &[i32], mode: AccumMode) -> (i32, u64) {
    let mut acc = Accumulator::new(mode);
    products.iter().for_each(|&p| acc.mac(p, 1));
    (acc.value(), acc.saturated)
}

/// Rejects operand widths the accumulator cannot hold: INT16 needs
/// `a_bits + w_bits <= 14`; INT32 needs the worst-case dot product of length
/// `k` to fit.
pub fn check_accum_contract(a: &QuantParams, w: &QuantParams, k: usize, mode: AccumMode) -> Result<()> {
    match mode {
        AccumMode::Int16 => {
            let bits = a.bitwidth as u32 + w.bitwidth as u32;
            if bits > INT16_BIT_BUDGET {
                return Err(Error::validation(format!(
                    "INT16 accumulation needs activation + weight bits <= {INT16_BIT_BUDGET}, got {} + {}",
                    a.bitwidth, w.bitwidth
                )));
            }
        }
        AccumMode::Int32 => {
            let worst = k as i128 * a.qmax().max(-a.qmin()) as i128 * w.qmax().max(-w.qmin()) as i128;
            if worst > i32::MAX as i128 {
                return Err(Error::validation(format!("INT32 accumulator can overflow for {k}-term dot products")));
            }
        }
    }
    Ok(())
}

/// Integer operand: codes plus the parameters that produced them.
#[derive(Debug, Clone, Copy)]
pub struct IntOperand<'a> {
    pub codes: &'a [i32],
    pub params: &'a QuantParams,
}

/// Integer convolution: `O = acc * S_A * S_W[o] + bias[o]`.
pub fn quantized_conv(
    a: IntOperand,
    ad: Dims,
    w: IntOperand,
    bias: Option<&[f32]>,
    attrs: &ConvAttrs,
    mode: AccumMode,
) -> Result<(Vec<f32>, Dims, LayerAudit)> {
    let k = attrs.kernel_size;
    let cin_g = ad.c / attrs.groups;
    check_accum_contract(a.params, w.params, cin_g * k * k, mode)?;
    if a.codes.len() != ad.numel() || w.codes.len() != attrs.out_channels * cin_g * k * k {
        return Err(Error::validation("integer conv operand sizes do not match"));
    }
    let yd = conv_out_dims(ad, attrs);
    let cout_g = attrs.out_channels / attrs.groups;
    let s_a = a.params.scale_for(0);
    let mut y = vec![0.0f32; yd.numel()];
    let mut audit = LayerAudit::default();
    for n in 0..ad.n {
        for oc in 0..attrs.out_channels {
            let g = oc / cout_g;
            let out_scale = s_a * w.params.scale_for(oc);
            let b = bias.map_or(0.0, |b| b[oc]);
            for oy in 0..yd.h {
                for ox in 0..yd.w {
                    let mut acc = Accumulator::new(mode);
                    for ic in 0..cin_g {
                        let xc = g * cin_g + ic;
                        for ky in 0..k {
                            let iy = (oy * attrs.stride + ky) as isize - attrs.padding as isize;
                            if iy < 0 || iy as usize >= ad.h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * attrs.stride + kx) as isize - attrs.padding as isize;
                                if ix < 0 || ix as usize >= ad.w {
                                    continue;
                                }
                                let av = a.codes[((n * ad.c + xc) * ad.h + iy as usize) * ad.w + ix as usize];
                                let wv = w.codes[((oc * cin_g + ic) * k + ky) * k + kx];
                                acc.mac(av, wv);
                            }
                        }
                    }
                    audit.saturated += acc.saturated;
                    audit.total += acc.steps;
                    y[((n * yd.c + oc) * yd.h + oy) * yd.w + ox] = acc.value() as f32 * out_scale + b;
                }
            }
        }
    }
    Ok((y, yd, audit))
}

/// Fully connected layer as a 1x1 convolution over the flattened input.
pub fn quantized_fc(
    a: IntOperand,
    n: usize,
    w: IntOperand,
    bias: Option<&[f32]>,
    out_features: usize,
    mode: AccumMode,
) -> Result<(Vec<f32>, LayerAudit)> {
    let inf = a.codes.len() / n.max(1);
    let attrs = ConvAttrs::new(out_features, 1);
    let (y, _, audit) = quantized_conv(a, Dims::new(n, inf, 1, 1), w, bias, &attrs, mode)?;
    Ok((y, audit))
}
