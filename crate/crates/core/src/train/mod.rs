//! Optimization: next-sample cross-entropy with Adam, deterministic
//! gradient sharding, NLL evaluation, and checkpointing.

mod checkpoint;
mod driver;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use driver::{run_training, TrainOutcome};
pub use optim::{adam_step, clip_grads, lr_at, AdamState, LrSchedule};

use std::collections::HashMap;
use std::time::Instant;

use crate::audio::{make_window, QuantizedClip, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::numerics::{kernels, Tape};
use crate::rng::{seed_rng, split_indexed};

/// What one optimizer step measured.
#[derive(Debug, Clone, Copy)]
pub struct TrainMetrics {
    /// Completed steps after this update (1-based).
    pub step: u64,
    /// Mean batch loss in nats per sample.
    pub nats: f64,
    /// Same loss in bits per sample (nats / ln 2).
    pub bits: f64,
    pub lr: f32,
    pub wallclock_s: f64,
}

/// One metrics-log line: `step<TAB>split<TAB>nats<TAB>bits<TAB>lr<TAB>wallclock_s`.
pub fn metrics_line(step: u64, split: &str, nats: f64, bits: f64, lr: f32, wallclock_s: f64) -> String {
    format!("{step}\t{split}\t{nats:.6}\t{bits:.6}\t{lr:.8}\t{wallclock_s:.3}")
}

/// Knobs for [`train_step`] beyond the schedule.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Gradient shard workers; 1 means in-line single-shard.
    pub shards: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f32,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { shards: 1, grad_clip: 0.0 }
    }
}

type GradMap = HashMap<usize, Vec<f32>>;

/// Forward/backward over one shard of the batch. Returns the summed loss in
/// nats and the gradient of the shard's *mean* loss, keyed by grad cell.
fn shard_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &[(&[u8], u8)],
    global_offset: usize,
    step: u64,
    dropout_seed: u64,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::training();
    let mut losses = Vec::with_capacity(windows.len());
    for (i, (context, target)) in windows.iter().enumerate() {
        // Per-window stream keyed by (step, global window index) so masks do
        // not depend on how the batch is sharded.
        let mut rng = seed_rng(split_indexed(dropout_seed, "dropout", step, (global_offset + i) as u64));
        let logits = forward(&mut tape, params, cfg, context, Some(&mut rng))?;
        losses.push(tape.softmax_xent(&logits, *target as usize)?);
    }
    let sum_nats: f64 = losses.iter().map(|l| l.item() as f64).sum();
    let mean = tape.mean_of(&losses)?;
    let grads = tape.backward_grads(&mean)?;
    Ok((sum_nats, grads))
}

/// Mean-loss gradients over a batch, reduced across shards in fixed order.
/// Returns the summed loss in nats and one gradient buffer per parameter in
/// canonical order. Per-window dropout streams are keyed by the window's
/// global batch index, so the result is independent of the shard count up
/// to float associativity.
pub(crate) fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(&[u8], u8)],
    step: u64,
    dropout_seed: u64,
    shards: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let n_shards = shards.max(1).min(batch.len());

    // Contiguous shards, sizes differing by at most one.
    let base = batch.len() / n_shards;
    let extra = batch.len() % n_shards;
    let mut bounds = Vec::with_capacity(n_shards + 1);
    bounds.push(0usize);
    for s in 0..n_shards {
        bounds.push(bounds[s] + base + usize::from(s < extra));
    }

    let mut shard_results: Vec<Result<(f64, GradMap)>> = Vec::with_capacity(n_shards);
    if n_shards == 1 {
        shard_results.push(shard_pass(params, cfg, batch, 0, step, dropout_seed));
    } else {
        let params_ref = params;
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(n_shards);
            for s in 0..n_shards {
                let windows = &batch[bounds[s]..bounds[s + 1]];
                let offset = bounds[s];
                handles.push(scope.spawn(move || {
                    shard_pass(params_ref, cfg, windows, offset, step, dropout_seed)
                }));
            }
            for h in handles {
                shard_results.push(h.join().expect("shard worker panicked"));
            }
        });
    }

    // Reduce in fixed shard order, weighting each shard's mean-gradient by
    // its share of the batch; accumulate in f64 so the result matches the
    // single-shard gradient to float tolerance.
    let batch_len = batch.len() as f64;
    let keys: Vec<usize> = {
        let mut v = Vec::new();
        params.for_each(|_, t| v.push(t.grad_key().expect("params always carry grad cells")));
        v
    };
    let sizes: Vec<usize> = {
        let mut v = Vec::new();
        params.for_each(|_, t| v.push(t.numel()));
        v
    };
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0f64; n]).collect();
    let mut sum_nats = 0.0f64;
    for (s, res) in shard_results.into_iter().enumerate() {
        let (shard_nats, map) = res?;
        sum_nats += shard_nats;
        let weight = (bounds[s + 1] - bounds[s]) as f64 / batch_len;
        for (k, key) in keys.iter().enumerate() {
            if let Some(g) = map.get(key) {
                for (a, &v) in acc[k].iter_mut().zip(g) {
                    *a += weight * v as f64;
                }
            }
        }
    }
    let grads: Vec<Vec<f32>> = acc
        .into_iter()
        .map(|g| g.into_iter().map(|v| v as f32).collect())
        .collect();
    Ok((sum_nats, grads))
}

/// One optimizer step over a batch of (context, target) windows: forward in
/// training mode, mean cross-entropy, backward, deterministic reduction
/// across shards, Adam update at the scheduled rate. Any error aborts the
/// step with parameters untouched.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    adam: &mut AdamState,
    schedule: &LrSchedule,
    batch: &[(&[u8], u8)],
    dropout_seed: u64,
    opts: &StepOptions,
) -> Result<TrainMetrics> {
    let started = Instant::now();
    if batch.is_empty() {
        return Err(Error::Usage("train_step needs a non-empty batch".into()));
    }
    let ctx_len = batch[0].0.len();
    if batch.iter().any(|(c, _)| c.len() != ctx_len) {
        return Err(Error::Data("batch contexts must all have the same length".into()));
    }
    let (sum_nats, mut grads) =
        batch_gradients(params, cfg, batch, adam.step, dropout_seed, opts.shards)?;

    if grads.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite gradient; step aborted with no parameter change".into()));
    }
    clip_grads(&mut grads, opts.grad_clip);

    let lr = lr_at(adam.step, schedule);
    adam_step(params, &grads, adam, lr)?;

    let mut bad_param: Option<String> = None;
    params.for_each(|name, t| {
        if bad_param.is_none() && t.data().iter().any(|v| !v.is_finite()) {
            bad_param = Some(name);
        }
    });
    if let Some(name) = bad_param {
        return Err(Error::Data(format!("parameter {name} became non-finite after the update")));
    }

    let nats = sum_nats / batch.len() as f64;
    Ok(TrainMetrics {
        step: adam.step,
        nats,
        bits: nats / std::f64::consts::LN_2,
        lr,
        wallclock_s: started.elapsed().as_secs_f64(),
    })
}

/// Mean negative log-likelihood, in bits per sample, of the true next codes
/// at the given (clip, target) positions. Dropout disabled; 64-bit mean.
pub fn evaluate_nll(
    params: &ModelParams,
    cfg: &ModelConfig,
    clips: &[QuantizedClip],
    positions: &[(usize, usize)],
    context_len: usize,
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Usage("evaluate_nll needs at least one position".into()));
    }
    let mut sum_nats = 0.0f64;
    for &(ci, target_index) in positions {
        let clip = clips
            .get(ci)
            .ok_or_else(|| Error::Data(format!("clip index {ci} out of range")))?;
        let spec = WindowSpec { context_len, target_index, chunk_len: cfg.chunk_len };
        let (context, target) = make_window(clip, &spec)?;
        let mut tape = Tape::inference();
        let logits = forward(&mut tape, params, cfg, context, None)?;
        let nats = kernels::log_sum_exp(logits.data()) - logits.data()[target as usize];
        sum_nats += nats as f64;
    }
    Ok(sum_nats / positions.len() as f64 / std::f64::consts::LN_2)
}
