//! Symmetric quantize / dequantize with half-away-from-zero rounding.

use crate::calib::{Granularity, QuantParams};
use crate::error::{Error, Result};
use crate::graph::Signedness;
use crate::tensor::{Tensor, TensorData};

#[inline]
pub fn quantize_value(x: f32, scale: f32, qmin: i32, qmax: i32) -> i32 {
    // f32::round rounds half away from zero.
    let q = (x / scale).round();
    if q >= qmax as f32 {
        qmax
    } else if q <= qmin as f32 {
        qmin
    } else {
        q as i32
    }
}

/// Elements per scale: the whole tensor, or one output channel (dim 0).
fn channel_len(p: &QuantParams, numel: usize) -> Result<usize> {
    match p.granularity {
        Granularity::LayerWise => Ok(numel),
        Granularity::ChannelWise => {
            if numel % p.scales.len() != 0 {
                return Err(Error::validation(format!(
                    "{} channel scales do not divide {numel} elements",
                    p.scales.len()
                )));
            }
            Ok(numel / p.scales.len())
        }
    }
}

/// Integer codes as i32; see [`quantize_tensor`] for the typed variant.
pub fn quantize_slice(x: &[f32], p: &QuantParams) -> Result<Vec<i32>> {
    p.validate()?;
    let per = channel_len(p, x.len())?;
    let (lo, hi) = (p.qmin(), p.qmax());
    Ok(x.chunks(per)
        .enumerate()
        .flat_map(|(c, chunk)| {
            let s = p.scale_for(c);
            chunk.iter().map(move |&v| quantize_value(v, s, lo, hi))
        })
        .collect())
}

/// `clamp(round(x / scale))`, stored as I8/U8 up to 8 bits and I16 above.
pub fn quantize_tensor(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let q = quantize_slice(x.as_f32()?, p)?;
    let data = match (p.signedness, p.bitwidth) {
        (Signedness::Signed, b) if b <= 8 => TensorData::I8(q.iter().map(|&v| v as i8).collect()),
        (Signedness::Unsigned, b) if b <= 8 => TensorData::U8(q.iter().map(|&v| v as u8).collect()),
        _ => TensorData::I16(q.iter().map(|&v| v as i16).collect()),
    };
    Tensor::new(x.shape().to_vec(), data)
}

pub fn dequantize_slice(q: &[i32], p: &QuantParams) -> Result<Vec<f32>> {
    p.validate()?;
    let per = channel_len(p, q.len())?;
    Ok(q.chunks(per)
        .enumerate()
        .flat_map(|(c, chunk)| {
            let s = p.scale_for(c);
            chunk.iter().map(move |&v| v as f32 * s)
        })
        .collect())
}

/// `q * scale`, per channel where applicable.
pub fn dequantize_tensor(q: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let x = dequantize_slice(&q.to_i32_vec()?, p)?;
    Tensor::from_f32(q.shape().to_vec(), x)
}

/// Quantize-dequantize in fp32.
pub fn fake_quant_slice(x: &[f32], p: &QuantParams) -> Result<Vec<f32>> {
    p.validate()?;
    let per = channel_len(p, x.len())?;
    let (lo, hi) = (p.qmin(), p.qmax());
    Ok(x.chunks(per)
        .enumerate()
        .flat_map(|(c, chunk)| {
            let s = p.scale_for(c);
            chunk.iter().map(move |&v| quantize_value(v, s, lo, hi) as f32 * s)
        })
        .collect())
}

/// True where `qmin * scale <= x <= qmax * scale` (bounds inclusive).
pub fn in_range_mask(x: &[f32], p: &QuantParams) -> Result<Vec<bool>> {
    let per = channel_len(p, x.len())?;
    let (lo, hi) = (p.qmin() as f32, p.qmax() as f32);
    Ok(x.chunks(per)
        .enumerate()
        .flat_map(|(c, chunk)| {
            let s = p.scale_for(c);
            chunk.iter().map(move |&v| v >= lo * s && v <= hi * s)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signed8(scale: f32) -> QuantParams {
        QuantParams::layer_wise(scale, 8, Signedness::Signed)
    }

    #[test]
    fn zero_maps_to_zero() {
        for s in [1e-6f32, 0.3, 7.0] {
            assert_eq!(quantize_value(0.0, s, -127, 127), 0);
            assert_eq!(quantize_value(-0.0, s, 0, 255), 0);
        }
    }

    #[test]
    fn rounding_examples() {
        let x = Tensor::from_f32(vec![1], vec![1.26]).unwrap();
        let q = quantize_tensor(&x, &signed8(0.5)).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![3]);
        assert_eq!(quantize_value(2.5, 1.0, -127, 127), 3);
        assert_eq!(quantize_value(-2.5, 1.0, -127, 127), -3);
    }

    #[test]
    fn saturation_signed_vs_unsigned() {
        let x = Tensor::from_f32(vec![1], vec![200.0]).unwrap();
        let s = quantize_tensor(&x, &signed8(1.0)).unwrap();
        assert_eq!(s.to_i32_vec().unwrap(), vec![127]);
        let u = quantize_tensor(&x, &QuantParams::layer_wise(1.0, 8, Signedness::Unsigned)).unwrap();
        assert_eq!(u.to_i32_vec().unwrap(), vec![200]);
        assert_eq!(u.dtype(), crate::tensor::DType::U8);
        // -128 is never produced.
        assert_eq!(quantize_value(-1000.0, 1.0, -127, 127), -127);
    }

    #[test]
    fn dequantize_examples() {
        let p = signed8(0.5);
        assert_eq!(dequantize_slice(&[0], &p).unwrap(), vec![0.0]);
        assert_eq!(dequantize_slice(&[3], &p).unwrap(), vec![1.5]);
    }

    #[test]
    fn channel_wise_uses_per_channel_scale() {
        let p = QuantParams::channel_wise(vec![1.0, 0.01], 8);
        let q = quantize_slice(&[1.0, 2.0, 0.05, -0.05], &p).unwrap();
        assert_eq!(q, vec![1, 2, 5, -5]);
        let back = dequantize_slice(&q, &p).unwrap();
        assert!((back[2] - 0.05).abs() < 1e-7);
    }

    #[test]
    fn clamp_bound_is_inclusive() {
        let p = signed8(0.5);
        let m = in_range_mask(&[63.5, 63.6, -63.5, -63.6, 0.0], &p).unwrap();
        assert_eq!(m, vec![true, false, true, false, true]);
    }
}
