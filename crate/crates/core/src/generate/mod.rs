//! Autoregressive synthesis: roll the context forward one sample at a time.

use crate::audio::{mu_law_decode, QuantizedClip};
use crate::error::{Error, Result};
use crate::model::{encode_chunk, forward_from_latents, ModelConfig, ModelParams};
use crate::numerics::{kernels, Tape, Tensor};
use crate::rng::{seed_rng, split, DetRng};

/// μ-law code of digital silence; used to left-pad short seeds.
pub const SILENCE_CODE: u8 = 128;

/// How chunk latents are reused between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Recompute every chunk latent at every step. Correctness-first default.
    Exact,
    /// Recompute only the final chunk each step; refresh older latents every
    /// `chunk_len` steps. The backward-anchored grid shifts every step, so
    /// between refreshes the cached latents cover slightly stale spans —
    /// a documented approximation traded for an ~n_tokens× speedup.
    StaleChunk,
}

impl std::fmt::Display for CacheMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CacheMode::Exact => "exact",
            CacheMode::StaleChunk => "stale-chunk",
        })
    }
}

impl std::str::FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CacheMode::Exact),
            "stale-chunk" => Ok(CacheMode::StaleChunk),
            other => Err(Error::Config(format!(
                "unknown cache mode {other:?} (want exact or stale-chunk)"
            ))),
        }
    }
}

/// Sampling knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f32,
    /// Keep only the k most likely codes (0 disables).
    pub top_k: usize,
    /// Always take the most likely code (ties break toward the lower code).
    pub greedy: bool,
    pub seed: u64,
    pub n_samples: usize,
    pub cache_mode: CacheMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: 0,
            greedy: false,
            seed: 0,
            n_samples: 16_000,
            cache_mode: CacheMode::Exact,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.greedy && self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive unless sampling greedily, got {}",
                self.temperature
            )));
        }
        if self.top_k > 256 {
            return Err(Error::Config(format!("top_k must be at most 256, got {}", self.top_k)));
        }
        Ok(())
    }
}

/// Probability vector over the 256 next-sample codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDistribution {
    probs: Vec<f32>,
}

impl SampleDistribution {
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.len() != 256 {
            return Err(Error::Data(format!("distribution needs 256 entries, got {}", probs.len())));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Data("distribution has negative or non-finite mass".into()));
        }
        let sum: f32 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("distribution sums to {sum}, not 1")));
        }
        Ok(SampleDistribution { probs })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f32 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f32>()
    }
}

/// Index of the largest logit, ties broken toward the lower code.
pub fn argmax_code(logits: &[f32]) -> u8 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8
}

/// Temperature- and top-k-adjusted distribution over next codes.
pub fn adjust_distribution(
    logits: &[f32],
    temperature: f32,
    top_k: usize,
    greedy: bool,
) -> Result<SampleDistribution> {
    if logits.len() != 256 {
        return Err(Error::Data(format!("expected 256 logits, got {}", logits.len())));
    }
    if greedy {
        let mut probs = vec![0.0f32; 256];
        probs[argmax_code(logits) as usize] = 1.0;
        return SampleDistribution::new(probs);
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive unless sampling greedily, got {temperature}"
        )));
    }
    if top_k > 256 {
        return Err(Error::Config(format!("top_k must be at most 256, got {top_k}")));
    }
    let mut scaled: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    if top_k > 0 && top_k < 256 {
        // Keep the k largest; ties at the boundary favor lower codes.
        let mut order: Vec<usize> = (0..256).collect();
        order.sort_by(|&a, &b| {
            scaled[b].partial_cmp(&scaled[a]).expect("finite logits").then(a.cmp(&b))
        });
        for &i in &order[top_k..] {
            scaled[i] = f32::NEG_INFINITY;
        }
    }
    SampleDistribution::new(kernels::softmax_rows(&scaled, 1, 256))
}

/// Inverse-CDF draw from a distribution; deterministic given the rng state.
pub fn draw(dist: &SampleDistribution, rng: &mut DetRng) -> u8 {
    use rand::Rng;
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0f64;
    let mut last_nonzero = 0usize;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p as f64;
        if u < cum {
            return i as u8;
        }
    }
    last_nonzero as u8
}

fn latents_for(params: &ModelParams, cfg: &ModelConfig, context: &[u8]) -> Result<Vec<Tensor>> {
    let chunks = crate::audio::chunk(context, cfg.chunk_len)?;
    let mut tape = Tape::inference();
    let mut latents = Vec::with_capacity(chunks.len());
    for c in chunks {
        let t = Tensor::from_vec(c, &[cfg.chunk_len])?;
        latents.push(encode_chunk(&mut tape, params, cfg, &t, None)?);
    }
    Ok(latents)
}

/// Rolling generation buffer plus the stale-chunk latent cache.
pub struct GenerationState {
    buffer: Vec<u8>,
    context_len: usize,
    cache_mode: CacheMode,
    emitted: usize,
    cache: Vec<Tensor>,
}

impl GenerationState {
    /// Seed the buffer; seeds shorter than the context are left-padded with
    /// the μ-law silence code 128.
    pub fn new(
        seed_codes: &[u8],
        context_len: usize,
        cfg: &ModelConfig,
        cache_mode: CacheMode,
    ) -> Result<Self> {
        if context_len == 0 || !context_len.is_multiple_of(cfg.chunk_len) {
            return Err(Error::Config(format!(
                "generation context {} must be a positive multiple of chunk_len {}",
                context_len, cfg.chunk_len
            )));
        }
        let mut buffer = Vec::with_capacity(context_len.max(seed_codes.len()));
        if seed_codes.len() < context_len {
            buffer.resize(context_len - seed_codes.len(), SILENCE_CODE);
        }
        buffer.extend_from_slice(if seed_codes.len() > context_len {
            &seed_codes[seed_codes.len() - context_len..]
        } else {
            seed_codes
        });
        Ok(GenerationState { buffer, context_len, cache_mode, emitted: 0, cache: Vec::new() })
    }

    pub fn codes(&self) -> &[u8] {
        &self.buffer
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    fn context(&self) -> &[u8] {
        &self.buffer[self.buffer.len() - self.context_len..]
    }

    /// Logits from a full recomputation of every chunk latent on the current
    /// buffer — the same forward path evaluation uses.
    pub fn exact_logits(&self, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
        let latents = latents_for(params, cfg, self.context())?;
        let mut tape = Tape::inference();
        forward_from_latents(&mut tape, params, cfg, &latents, None)
    }

    /// Logits for the next sample under the configured cache mode.
    pub fn next_logits(&mut self, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
        match self.cache_mode {
            CacheMode::Exact => self.exact_logits(params, cfg),
            CacheMode::StaleChunk => {
                let n_tokens = self.context_len / cfg.chunk_len;
                if self.emitted.is_multiple_of(cfg.chunk_len) {
                    // Refresh: recompute the whole grid, keep all but the
                    // final latent for the steps until the next refresh.
                    let latents = latents_for(params, cfg, self.context())?;
                    self.cache = latents[..n_tokens - 1].to_vec();
                    let mut tape = Tape::inference();
                    return forward_from_latents(&mut tape, params, cfg, &latents, None);
                }
                let ctx = self.context();
                let fresh = &ctx[ctx.len() - cfg.chunk_len..];
                let floats: Vec<f32> = fresh.iter().map(|&c| mu_law_decode(c)).collect();
                let mut tape = Tape::inference();
                let t = Tensor::from_vec(floats, &[cfg.chunk_len])?;
                let final_latent = encode_chunk(&mut tape, params, cfg, &t, None)?;
                let mut latents = self.cache.clone();
                latents.push(final_latent);
                forward_from_latents(&mut tape, params, cfg, &latents, None)
            }
        }
    }

    /// Append a generated code.
    pub fn push(&mut self, code: u8) {
        self.buffer.push(code);
        self.emitted += 1;
    }
}

/// Result of a generation run.
pub struct GenerationOutput {
    /// Full rolling buffer: the (possibly padded) seed tail followed by
    /// every generated code.
    pub clip: QuantizedClip,
    /// Number of leading codes that came from the seed, not the model.
    pub n_seed: usize,
    /// Shannon entropy (bits) of each step's adjusted distribution.
    pub entropies: Vec<f32>,
}

impl GenerationOutput {
    /// Just the generated codes.
    pub fn generated(&self) -> &[u8] {
        &self.clip.codes[self.n_seed..]
    }
}

/// Autoregressive loop: form the backward-anchored context, evaluate the
/// model, adjust, draw, append — `n_samples` times.
pub fn generate(
    params: &ModelParams,
    cfg: &ModelConfig,
    seed_clip: &QuantizedClip,
    sampler: &SamplerConfig,
    context_len: usize,
) -> Result<GenerationOutput> {
    sampler.validate()?;
    let mut state = GenerationState::new(&seed_clip.codes, context_len, cfg, sampler.cache_mode)?;
    let n_seed = state.codes().len();
    let mut rng = seed_rng(split(sampler.seed, "sampler"));
    let mut entropies = Vec::with_capacity(sampler.n_samples);
    for _ in 0..sampler.n_samples {
        let logits = state.next_logits(params, cfg)?;
        let dist = adjust_distribution(logits.data(), sampler.temperature, sampler.top_k, sampler.greedy)?;
        entropies.push(dist.entropy_bits());
        let code = if sampler.greedy { argmax_code(logits.data()) } else { draw(&dist, &mut rng) };
        state.push(code);
    }
    Ok(GenerationOutput {
        clip: QuantizedClip { codes: state.buffer, sample_rate: seed_clip.sample_rate },
        n_seed,
        entropies,
    })
}
