//! The architecture: shared convolutional chunk encoder, sinusoidal
//! positional encodings, a Transformer encoder stack, and a classification
//! head over the 256 next-sample codes.

mod forward;
mod params;
mod pe;

pub use forward::{
    encode_chunk, forward, forward_from_latents, token_dropout, transformer_stack,
};
pub use params::{AttnParams, ConvLayer, Dense, EncoderLayer, ModelParams, Norm};
pub use pe::positional_encoding;

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_same_geometry;

/// Layer-norm epsilon used throughout the stack.
pub const LN_EPS: f32 = 1e-5;

/// Every architecture hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Samples per chunk (one latent token each).
    pub chunk_len: usize,
    pub conv_channels: [usize; 5],
    pub conv_strides: [usize; 5],
    pub conv_kernel: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub attn_dropout: f32,
    pub token_dropout: f32,
    pub conv_dropout: f32,
    /// Classification head widths; the last must be 256.
    pub head_dims: Vec<usize>,
    pub head_dropout: f32,
    /// Token count the training context is built from.
    pub n_tokens_train: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            chunk_len: 2000,
            conv_channels: [256, 256, 128, 128, 32],
            conv_strides: [2, 3, 2, 3, 2],
            conv_kernel: 7,
            embed_dim: 128,
            n_layers: 3,
            ff_dim: 256,
            n_heads: 8,
            attn_dropout: 0.1,
            token_dropout: 0.1,
            conv_dropout: 0.2,
            head_dims: vec![1024, 256],
            head_dropout: 0.2,
            n_tokens_train: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 {
            return Err(Error::Config("chunk_len must be positive".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be positive and even (positional encoding pairs), got {}",
                self.embed_dim
            )));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must divide evenly into {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.conv_strides.contains(&0) {
            return Err(Error::Config("conv strides must be at least 1".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        if self.head_dims.last() != Some(&256) {
            return Err(Error::Config(format!(
                "final head dimension must be 256 (one logit per code), got {:?}",
                self.head_dims
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.n_tokens_train == 0 {
            return Err(Error::Config("n_tokens_train must be at least 1".into()));
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("token_dropout", self.token_dropout),
            ("conv_dropout", self.conv_dropout),
            ("head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Training context length in samples.
    pub fn context_len(&self) -> usize {
        self.n_tokens_train * self.chunk_len
    }

    /// Sequence length after each conv layer.
    pub fn conv_output_lengths(&self) -> [usize; 5] {
        let mut out = [0usize; 5];
        let mut len = self.chunk_len;
        for (i, &stride) in self.conv_strides.iter().enumerate() {
            len = conv_same_geometry(len, self.conv_kernel, stride).0;
            out[i] = len;
        }
        out
    }

    /// Flattened width feeding the chunk-latent projection.
    pub fn flattened_dim(&self) -> usize {
        self.conv_channels[4] * self.conv_output_lengths()[4]
    }
}

/// Exact per-section scalar counts for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Conv stack plus the flatten projection.
    pub encoder: usize,
    /// One transformer layer (attention + feed-forward + norms).
    pub per_layer: usize,
    /// Classification head.
    pub head: usize,
    pub total: usize,
}

/// Count every scalar in the parameter set, without allocating it.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let mut encoder = 0usize;
    let mut cin = 1usize;
    for &cout in &cfg.conv_channels {
        encoder += cout * cin * cfg.conv_kernel + cout;
        cin = cout;
    }
    encoder += cfg.flattened_dim() * cfg.embed_dim + cfg.embed_dim;

    let d = cfg.embed_dim;
    let attn = 4 * (d * d + d);
    let ff = (d * cfg.ff_dim + cfg.ff_dim) + (cfg.ff_dim * d + d);
    let norms = 2 * (2 * d);
    let per_layer = attn + ff + norms;

    let mut head = 0usize;
    let mut hin = d;
    for &hd in &cfg.head_dims {
        head += hin * hd + hd;
        hin = hd;
    }

    ParamCount { encoder, per_layer, head, total: encoder + cfg.n_layers * per_layer + head }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn default_conv_lengths_follow_the_stride_chain() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.conv_output_lengths(), [1000, 334, 167, 56, 28]);
        assert_eq!(cfg.flattened_dim(), 32 * 28);
    }

    #[test]
    fn default_param_count() {
        let c = param_count(&ModelConfig::default());
        assert_eq!(c.encoder, 948_896);
        assert_eq!(c.per_layer, 132_480);
        assert_eq!(c.head, 394_496);
        assert_eq!(c.total, 1_740_832);
    }

    #[test]
    fn validation_catches_bad_fields() {
        // 128 % 7 != 0
        let cfg = ModelConfig { n_heads: 7, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig { conv_kernel: 6, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig { head_dims: vec![1024, 128], ..ModelConfig::default() };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig { attn_dropout: 1.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
