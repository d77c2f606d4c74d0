//! PCM ingestion, μ-law quantization, and training-window geometry.

mod corpus;
mod mulaw;
mod wav;
mod window;

pub use corpus::{plan_epoch, read_manifest, EpochPlan};
pub use mulaw::{cell_width, mu_law_decode, mu_law_encode};
pub use wav::{decode_wav, encode_wav, load_wav, write_wav};
pub use window::{chunk, make_window, WindowSpec};

use crate::error::{Error, Result};

/// Float waveform in [−1, 1] at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveformClip {
    /// Quantize to 8-bit μ-law codes, the modeling substrate.
    pub fn quantize(&self) -> QuantizedClip {
        QuantizedClip {
            codes: self.samples.iter().map(|&s| mu_law_encode(s)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Sequence of 8-bit μ-law sample codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedClip {
    pub codes: Vec<u8>,
    pub sample_rate: u32,
}

impl QuantizedClip {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Decode back to a float waveform.
    pub fn dequantize(&self) -> WaveformClip {
        WaveformClip {
            samples: self.codes.iter().map(|&c| mu_law_decode(c)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn check_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::RateMismatch { found: self.sample_rate, expected });
        }
        Ok(())
    }
}
