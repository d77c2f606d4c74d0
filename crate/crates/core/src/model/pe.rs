//! Sinusoidal positional encodings.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
///
/// Deterministic in (n_tokens, embed_dim), so any token count works with the
/// same trained weights.
pub fn positional_encoding(n_tokens: usize, embed_dim: usize) -> Result<Tensor> {
    if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even embedding dim, got {embed_dim}"
        )));
    }
    if n_tokens == 0 {
        return Err(Error::Config("positional encoding needs at least one token".into()));
    }
    let mut data = vec![0.0f32; n_tokens * embed_dim];
    for i in 0..embed_dim / 2 {
        let inv_freq = 10_000f32.powf(-((2 * i) as f32) / embed_dim as f32);
        for pos in 0..n_tokens {
            let angle = pos as f32 * inv_freq;
            data[pos * embed_dim + 2 * i] = angle.sin();
            data[pos * embed_dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(data, &[n_tokens, embed_dim])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_zeros_and_ones() {
        let pe = positional_encoding(3, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.data()[2 * i], 0.0, "sin(0)");
            assert_eq!(pe.data()[2 * i + 1], 1.0, "cos(0)");
        }
    }

    #[test]
    fn first_position_first_channel_is_sin_one() {
        let pe = positional_encoding(2, 8).unwrap();
        let v = pe.data()[8]; // pos 1, channel 0
        assert!((v - 1f32.sin()).abs() < 1e-6, "{v}");
        assert!((v - 0.84147).abs() < 1e-4);
    }

    #[test]
    fn works_at_250_tokens() {
        let pe = positional_encoding(250, 128).unwrap();
        assert_eq!(pe.shape(), &[250, 128]);
        assert!(pe.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn odd_embedding_dim_rejected() {
        assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
    }
}
