use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Signedness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    LayerWise,
    ChannelWise,
}

/// Symmetric quantization parameters for one tensor or site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// One scale (layer-wise) or one per output channel (channel-wise).
    pub scales: Vec<f32>,
    pub bitwidth: u8,
    pub signedness: Signedness,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn layer_wise(scale: f32, bitwidth: u8, signedness: Signedness) -> Self {
        Self { scales: vec![scale], bitwidth, signedness, granularity: Granularity::LayerWise }
    }

    pub fn channel_wise(scales: Vec<f32>, bitwidth: u8) -> Self {
        Self { scales, bitwidth, signedness: Signedness::Signed, granularity: Granularity::ChannelWise }
    }

    /// Smallest representable integer: `-(2^(b-1) - 1)` or 0.
    pub fn qmin(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => -self.qmax(),
            Signedness::Unsigned => 0,
        }
    }

    /// Largest representable integer: `2^(b-1) - 1` or `2^b - 1`.
    pub fn qmax(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => (1i32 << (self.bitwidth - 1)) - 1,
            Signedness::Unsigned => (1i32 << self.bitwidth) - 1,
        }
    }

    /// Calibration level count L.
    pub fn levels(&self) -> usize {
        level_count(self.bitwidth, self.signedness)
    }

    pub fn scale_for(&self, channel: usize) -> f32 {
        match self.granularity {
            Granularity::LayerWise => self.scales[0],
            Granularity::ChannelWise => self.scales[channel],
        }
    }

    /// Largest scale across channels.
    pub fn max_scale(&self) -> f32 {
        self.scales.iter().copied().fold(0.0, f32::max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bitwidth) {
            return Err(Error::validation(format!("bitwidth {} out of range", self.bitwidth)));
        }
        if self.scales.is_empty() {
            return Err(Error::validation("quantization params without scales"));
        }
        if self.granularity == Granularity::LayerWise && self.scales.len() != 1 {
            return Err(Error::validation("layer-wise params need exactly one scale"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::validation(format!("non-positive quantization scale {s}")));
        }
        Ok(())
    }
}

/// `2^(b-1)` for signed and `2^b - 1` for unsigned sites.
pub fn level_count(bitwidth: u8, signedness: Signedness) -> usize {
    match signedness {
        Signedness::Signed => 1usize << (bitwidth - 1),
        Signedness::Unsigned => (1usize << bitwidth) - 1,
    }
}
