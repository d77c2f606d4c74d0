//! Training-window extraction and the chunk grid.

use crate::audio::{mu_law_decode, QuantizedClip};
use crate::error::{Error, Result};

/// Geometry of one (context, target) training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Context length in samples; must be a multiple of `chunk_len`.
    pub context_len: usize,
    /// Absolute index of the sample to predict.
    pub target_index: usize,
    /// Chunk length in samples.
    pub chunk_len: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.context_len == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if !self.context_len.is_multiple_of(self.chunk_len) {
            return Err(Error::Config(format!(
                "context_len {} is not a multiple of chunk_len {}",
                self.context_len, self.chunk_len
            )));
        }
        if self.target_index < self.context_len {
            return Err(Error::Window(format!(
                "target index {} admits only {} samples of history, context needs {}",
                self.target_index, self.target_index, self.context_len
            )));
        }
        Ok(())
    }
}

/// Slice the context immediately before the target and the target itself.
pub fn make_window<'a>(clip: &'a QuantizedClip, spec: &WindowSpec) -> Result<(&'a [u8], u8)> {
    spec.validate()?;
    if spec.target_index >= clip.codes.len() {
        return Err(Error::Window(format!(
            "target index {} beyond clip of {} samples",
            spec.target_index,
            clip.codes.len()
        )));
    }
    let context = &clip.codes[spec.target_index - spec.context_len..spec.target_index];
    Ok((context, clip.codes[spec.target_index]))
}

/// Split a context into non-overlapping chunks of decoded floats, in
/// temporal order. The grid anchors backwards from the prediction point:
/// the final chunk always covers the freshest `chunk_len` samples.
pub fn chunk(context: &[u8], chunk_len: usize) -> Result<Vec<Vec<f32>>> {
    if chunk_len == 0 || !context.len().is_multiple_of(chunk_len) {
        return Err(Error::Config(format!(
            "context of {} samples does not divide into chunks of {}",
            context.len(),
            chunk_len
        )));
    }
    Ok(context
        .chunks_exact(chunk_len)
        .map(|c| c.iter().map(|&code| mu_law_decode(code)).collect())
        .collect())
}
