//! The differentiable forward map: context codes → next-sample logits.

use crate::audio;
use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::model::{positional_encoding, ModelConfig, LN_EPS};
use crate::numerics::{Tape, Tensor};
use crate::rng::DetRng;

fn maybe_dropout(
    tape: &mut Tape,
    x: &Tensor,
    p: f32,
    rng: &mut Option<&mut DetRng>,
) -> Result<Tensor> {
    if !tape.is_training() || p == 0.0 {
        return Ok(x.clone());
    }
    let r = rng
        .as_deref_mut()
        .ok_or_else(|| Error::Usage("training-mode forward needs a dropout rng".into()))?;
    tape.dropout(x, p, r)
}

/// Zero whole token vectors with probability p (inverted scaling), identity
/// outside training mode.
pub fn token_dropout(
    tape: &mut Tape,
    tokens: &Tensor,
    p: f32,
    rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if !tape.is_training() || p == 0.0 {
        return Ok(tokens.clone());
    }
    let r = rng
        .ok_or_else(|| Error::Usage("training-mode token dropout needs an rng".into()))?;
    tape.row_dropout(tokens, p, r)
}

/// Encode one chunk of decoded samples into a latent token. Weights are
/// shared across chunks; position enters only through the positional
/// encoding added later.
pub fn encode_chunk(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    chunk: &Tensor,
    mut rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if chunk.shape() != [cfg.chunk_len] {
        return Err(crate::error::shape_err(
            "encode_chunk",
            format!("chunk {:?} must be [{}]", chunk.shape(), cfg.chunk_len),
        ));
    }
    let mut x = tape.reshape(chunk, &[1, cfg.chunk_len])?;
    for (layer, &stride) in params.conv.iter().zip(&cfg.conv_strides) {
        x = tape.conv1d_same(&x, &layer.w, &layer.b, stride)?;
        x = tape.relu(&x);
        x = maybe_dropout(tape, &x, cfg.conv_dropout, &mut rng)?;
    }
    let flat = tape.reshape(&x, &[cfg.flattened_dim()])?;
    tape.linear(&flat, &params.proj.w, &params.proj.b)
}

/// Run the encoder stack over latent tokens [n, d] (positional encoding
/// already added). Post-norm layers: attention + residual + norm, then
/// feed-forward + residual + norm, with token dropout after each layer.
pub fn transformer_stack(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &Tensor,
    mut rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if tokens.shape().len() != 2 || tokens.shape()[1] != cfg.embed_dim {
        return Err(crate::error::shape_err(
            "transformer_stack",
            format!("tokens {:?} must be [n, {}]", tokens.shape(), cfg.embed_dim),
        ));
    }
    let mut x = tokens.clone();
    for layer in &params.layers {
        let q = tape.linear(&x, &layer.attn.q.w, &layer.attn.q.b)?;
        let k = tape.linear(&x, &layer.attn.k.w, &layer.attn.k.b)?;
        let v = tape.linear(&x, &layer.attn.v.w, &layer.attn.v.b)?;
        let qh = tape.split_heads(&q, cfg.n_heads)?;
        let kh = tape.split_heads(&k, cfg.n_heads)?;
        let vh = tape.split_heads(&v, cfg.n_heads)?;
        let att = tape.attention_dropped(&qh, &kh, &vh, cfg.attn_dropout, rng.as_deref_mut())?;
        let att = tape.merge_heads(&att)?;
        let att = tape.linear(&att, &layer.attn.out.w, &layer.attn.out.b)?;
        let res = tape.add(&x, &att)?;
        x = tape.layer_norm(&res, &layer.norm_attn.gain, &layer.norm_attn.shift, LN_EPS)?;

        let f = tape.linear(&x, &layer.ff1.w, &layer.ff1.b)?;
        let f = tape.relu(&f);
        let f = maybe_dropout(tape, &f, cfg.attn_dropout, &mut rng)?;
        let f = tape.linear(&f, &layer.ff2.w, &layer.ff2.b)?;
        let res = tape.add(&x, &f)?;
        x = tape.layer_norm(&res, &layer.norm_ff.gain, &layer.norm_ff.shift, LN_EPS)?;

        x = token_dropout(tape, &x, cfg.token_dropout, rng.as_deref_mut())?;
    }
    Ok(x)
}

/// Full forward pass from precomputed chunk latents: add positional
/// encoding, token dropout, run the stack, take the last token as the
/// classification token, and apply the head. Returns logits over the 256
/// codes (softmax is applied only where a distribution is required).
pub fn forward_from_latents(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    latents: &[Tensor],
    mut rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if latents.is_empty() {
        return Err(Error::Config("forward needs at least one latent token".into()));
    }
    let stacked = tape.stack_rows(latents)?;
    let pe = positional_encoding(latents.len(), cfg.embed_dim)?;
    let x = tape.add(&stacked, &pe)?;
    let x = token_dropout(tape, &x, cfg.token_dropout, rng.as_deref_mut())?;
    let x = transformer_stack(tape, params, cfg, &x, rng.as_deref_mut())?;
    let mut h = tape.select_row(&x, latents.len() - 1)?;
    let n_head = params.head.len();
    for (i, layer) in params.head.iter().enumerate() {
        h = tape.linear(&h, &layer.w, &layer.b)?;
        if i + 1 < n_head {
            h = tape.relu(&h);
            h = maybe_dropout(tape, &h, cfg.head_dropout, &mut rng)?;
        }
    }
    Ok(h)
}

/// Forward pass from raw context codes. The context length must be a
/// positive multiple of the chunk length; any token count works with the
/// same weights.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    context: &[u8],
    mut rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if context.is_empty() {
        return Err(Error::Config("context must be non-empty".into()));
    }
    let chunks = audio::chunk(context, cfg.chunk_len)?;
    let mut latents = Vec::with_capacity(chunks.len());
    for c in chunks {
        let t = Tensor::from_vec(c, &[cfg.chunk_len])?;
        latents.push(encode_chunk(tape, params, cfg, &t, rng.as_deref_mut())?);
    }
    forward_from_latents(tape, params, cfg, &latents, rng)
}
