//! Parameter storage, initialization, and canonical traversal order.
//!
//! The traversal order fixed by `for_each` is load-bearing: the optimizer
//! state, checkpoint layout, and shard gradient reduction all index
//! parameters by it.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::rng::{seed_rng, split};

/// Weight + bias of an affine map.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// One conv layer of the chunk encoder.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// [out_channels, in_channels, kernel]
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
}

/// Layer-norm gain and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttnParams,
    pub norm_attn: Norm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub norm_ff: Norm,
}

/// All trainable tensors of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub conv: Vec<ConvLayer>,
    /// Flatten projection to the embedding width.
    pub proj: Dense,
    pub layers: Vec<EncoderLayer>,
    pub head: Vec<Dense>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit norms — and a zero-initialized
    /// final head layer, which forces exactly uniform initial predictions.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_opts(cfg, seed, true)
    }

    /// As [`ModelParams::init`], optionally leaving the final head layer
    /// random (gradient checks need gradient flow through it).
    pub fn init_opts(cfg: &ModelConfig, seed: u64, zero_final_head: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed_rng(split(seed, "init"));
        let k = cfg.conv_kernel;

        let mut conv = Vec::with_capacity(5);
        let mut cin = 1usize;
        for &cout in &cfg.conv_channels {
            conv.push(ConvLayer {
                w: Tensor::glorot(&[cout, cin, k], cin * k, cout * k, &mut rng).with_grad(),
                b: Tensor::zeros(&[cout]).with_grad(),
            });
            cin = cout;
        }

        let flat = cfg.flattened_dim();
        let d = cfg.embed_dim;
        let dense = |i: usize, o: usize, rng: &mut crate::rng::DetRng| Dense {
            w: Tensor::glorot(&[i, o], i, o, rng).with_grad(),
            b: Tensor::zeros(&[o]).with_grad(),
        };
        let proj = dense(flat, d, &mut rng);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(EncoderLayer {
                attn: AttnParams {
                    q: dense(d, d, &mut rng),
                    k: dense(d, d, &mut rng),
                    v: dense(d, d, &mut rng),
                    out: dense(d, d, &mut rng),
                },
                norm_attn: Norm {
                    gain: Tensor::full(&[d], 1.0).with_grad(),
                    shift: Tensor::zeros(&[d]).with_grad(),
                },
                ff1: dense(d, cfg.ff_dim, &mut rng),
                ff2: dense(cfg.ff_dim, d, &mut rng),
                norm_ff: Norm {
                    gain: Tensor::full(&[d], 1.0).with_grad(),
                    shift: Tensor::zeros(&[d]).with_grad(),
                },
            });
        }

        let mut head = Vec::with_capacity(cfg.head_dims.len());
        let mut hin = d;
        for (i, &hd) in cfg.head_dims.iter().enumerate() {
            let last = i + 1 == cfg.head_dims.len();
            head.push(if last && zero_final_head {
                Dense { w: Tensor::zeros(&[hin, hd]).with_grad(), b: Tensor::zeros(&[hd]).with_grad() }
            } else {
                dense(hin, hd, &mut rng)
            });
            hin = hd;
        }

        Ok(ModelParams { conv, proj, layers, head })
    }

    /// All-zero parameters with unit norm gains; shaped by the config.
    /// Checkpoint loading fills these in.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.conv_kernel;
        let mut conv = Vec::with_capacity(5);
        let mut cin = 1usize;
        for &cout in &cfg.conv_channels {
            conv.push(ConvLayer {
                w: Tensor::zeros(&[cout, cin, k]).with_grad(),
                b: Tensor::zeros(&[cout]).with_grad(),
            });
            cin = cout;
        }
        let flat = cfg.flattened_dim();
        let d = cfg.embed_dim;
        let zdense = |i: usize, o: usize| Dense {
            w: Tensor::zeros(&[i, o]).with_grad(),
            b: Tensor::zeros(&[o]).with_grad(),
        };
        let proj = zdense(flat, d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(EncoderLayer {
                attn: AttnParams {
                    q: zdense(d, d),
                    k: zdense(d, d),
                    v: zdense(d, d),
                    out: zdense(d, d),
                },
                norm_attn: Norm {
                    gain: Tensor::full(&[d], 1.0).with_grad(),
                    shift: Tensor::zeros(&[d]).with_grad(),
                },
                ff1: zdense(d, cfg.ff_dim),
                ff2: zdense(cfg.ff_dim, d),
                norm_ff: Norm {
                    gain: Tensor::full(&[d], 1.0).with_grad(),
                    shift: Tensor::zeros(&[d]).with_grad(),
                },
            });
        }
        let mut head = Vec::with_capacity(cfg.head_dims.len());
        let mut hin = d;
        for &hd in &cfg.head_dims {
            head.push(zdense(hin, hd));
            hin = hd;
        }
        Ok(ModelParams { conv, proj, layers, head })
    }

    /// Visit every parameter tensor in the canonical order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        for (i, c) in self.conv.iter().enumerate() {
            f(format!("conv{i}.w"), &c.w);
            f(format!("conv{i}.b"), &c.b);
        }
        f("proj.w".into(), &self.proj.w);
        f("proj.b".into(), &self.proj.b);
        for (i, l) in self.layers.iter().enumerate() {
            for (tag, d) in [("q", &l.attn.q), ("k", &l.attn.k), ("v", &l.attn.v), ("out", &l.attn.out)] {
                f(format!("layer{i}.attn.{tag}.w"), &d.w);
                f(format!("layer{i}.attn.{tag}.b"), &d.b);
            }
            f(format!("layer{i}.ln1.gain"), &l.norm_attn.gain);
            f(format!("layer{i}.ln1.shift"), &l.norm_attn.shift);
            f(format!("layer{i}.ff1.w"), &l.ff1.w);
            f(format!("layer{i}.ff1.b"), &l.ff1.b);
            f(format!("layer{i}.ff2.w"), &l.ff2.w);
            f(format!("layer{i}.ff2.b"), &l.ff2.b);
            f(format!("layer{i}.ln2.gain"), &l.norm_ff.gain);
            f(format!("layer{i}.ln2.shift"), &l.norm_ff.shift);
        }
        for (i, d) in self.head.iter().enumerate() {
            f(format!("head{i}.w"), &d.w);
            f(format!("head{i}.b"), &d.b);
        }
    }

    /// Visit every parameter tensor mutably, same order as `for_each`.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (i, c) in self.conv.iter_mut().enumerate() {
            f(format!("conv{i}.w"), &mut c.w);
            f(format!("conv{i}.b"), &mut c.b);
        }
        f("proj.w".into(), &mut self.proj.w);
        f("proj.b".into(), &mut self.proj.b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (tag, d) in [
                ("q", &mut l.attn.q),
                ("k", &mut l.attn.k),
                ("v", &mut l.attn.v),
                ("out", &mut l.attn.out),
            ] {
                f(format!("layer{i}.attn.{tag}.w"), &mut d.w);
                f(format!("layer{i}.attn.{tag}.b"), &mut d.b);
            }
            f(format!("layer{i}.ln1.gain"), &mut l.norm_attn.gain);
            f(format!("layer{i}.ln1.shift"), &mut l.norm_attn.shift);
            f(format!("layer{i}.ff1.w"), &mut l.ff1.w);
            f(format!("layer{i}.ff1.b"), &mut l.ff1.b);
            f(format!("layer{i}.ff2.w"), &mut l.ff2.w);
            f(format!("layer{i}.ff2.b"), &mut l.ff2.b);
            f(format!("layer{i}.ln2.gain"), &mut l.norm_ff.gain);
            f(format!("layer{i}.ln2.shift"), &mut l.norm_ff.shift);
        }
        for (i, d) in self.head.iter_mut().enumerate() {
            f(format!("head{i}.w"), &mut d.w);
            f(format!("head{i}.b"), &mut d.b);
        }
    }

    /// Named tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.for_each(|name, t| v.push((name, t)));
        v
    }

    /// Total scalar count actually allocated.
    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Clear accumulated gradients on every parameter.
    pub fn zero_grads(&self) {
        self.for_each(|_, t| t.zero_grad());
    }

    /// Collect gradients in canonical order; errors if any parameter is
    /// missing one.
    pub fn collect_grads(&self) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::new();
        let mut missing = None;
        self.for_each(|name, t| match t.grad() {
            Some(g) => out.push(g),
            None => {
                if missing.is_none() {
                    missing = Some(name);
                }
            }
        });
        match missing {
            Some(name) => Err(Error::Usage(format!("parameter {name} has no gradient"))),
            None => Ok(out),
        }
    }
}
