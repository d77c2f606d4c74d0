//! Operator surface: `train`, `eval`, `generate`, and `inspect`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wavelm::audio::{load_wav, plan_epoch, read_manifest, write_wav, QuantizedClip};
use wavelm::config::RunConfig;
use wavelm::generate::{generate, SamplerConfig};
use wavelm::model::param_count;
use wavelm::rng::split;
use wavelm::train::{evaluate_nll, load_checkpoint, run_training};
use wavelm::{Error, Result};

/// Environment variable that overrides the output root directory.
const OUT_ENV: &str = "WAVELM_OUT";

#[derive(Parser)]
#[command(name = "wavelm", version, about = "Long-context raw-audio language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. --set batch_size=8. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Report bits/sample of a checkpoint over a corpus manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Context length in samples (default: the checkpoint's training context).
        #[arg(long)]
        context: Option<usize>,
        /// Number of evaluation positions, sampled uniformly.
        #[arg(long, default_value_t = 256)]
        positions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "sample-rate", default_value_t = 16_000)]
        sample_rate: u32,
    },
    /// Sample new audio autoregressively from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// WAV file seeding the context (short seeds are padded with silence).
        #[arg(long = "seed-wav")]
        seed_wav: PathBuf,
        #[arg(long = "n-samples")]
        n_samples: usize,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long = "top-k")]
        top_k: Option<usize>,
        /// Always take the most likely code.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// exact (default) or stale-chunk.
        #[arg(long = "cache-mode")]
        cache_mode: Option<String>,
        /// Context length in samples (default: the checkpoint's training context).
        #[arg(long)]
        context: Option<usize>,
        /// Output WAV path (default: `<out root>/generated.wav`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-step entropy diagnostic, one float per line.
        #[arg(long = "entropy-file")]
        entropy_file: Option<PathBuf>,
        #[arg(long = "sample-rate", default_value_t = 16_000)]
        sample_rate: u32,
    },
    /// Print the resolved config, parameter counts, and derived shapes.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn load_run_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
    let mut run = RunConfig::parse(&text)?;
    for s in sets {
        run.apply_override(s)?;
    }
    if let Ok(root) = std::env::var(OUT_ENV) {
        if !root.is_empty() {
            run.out_dir = PathBuf::from(root);
        }
    }
    Ok(run)
}

fn load_quantized_corpus(manifest: &Path, sample_rate: u32) -> Result<Vec<QuantizedClip>> {
    let paths = read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no files", manifest.display())));
    }
    paths.iter().map(|p| Ok(load_wav(p, sample_rate)?.quantize())).collect()
}

fn cmd_train(config: &Path, resume: Option<&Path>, sets: &[String]) -> Result<()> {
    let run = load_run_config(config, sets)?;
    let outcome = run_training(&run, resume)?;
    println!(
        "finished at step {} (best validation {} bits); checkpoint: {}",
        outcome.final_step,
        if outcome.best_valid_bits.is_finite() {
            format!("{:.4}", outcome.best_valid_bits)
        } else {
            "n/a".into()
        },
        outcome.last_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    manifest: &Path,
    context: Option<usize>,
    positions: usize,
    seed: u64,
    sample_rate: u32,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let clips = load_quantized_corpus(manifest, sample_rate)?;
    let context_len = context.unwrap_or_else(|| ckpt.config.context_len());
    let lens: Vec<usize> = clips.iter().map(|c| c.len()).collect();
    let eligible: usize = lens.iter().map(|&l| l.saturating_sub(context_len)).sum();
    if eligible == 0 {
        return Err(Error::Data(format!(
            "no clip admits a full {context_len}-sample context"
        )));
    }
    let plan = plan_epoch(&lens, positions.min(eligible), context_len, split(seed, "eval"))?;
    let bits = evaluate_nll(&ckpt.params, &ckpt.config, &clips, &plan.pairs, context_len)?;
    println!(
        "nll: {bits:.4} bits/sample ({:.4} nats) over {} positions at context {context_len}",
        bits * std::f64::consts::LN_2,
        plan.pairs.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    ckpt_path: &Path,
    seed_wav: &Path,
    n_samples: usize,
    temperature: Option<f32>,
    top_k: Option<usize>,
    greedy: bool,
    seed: Option<u64>,
    cache_mode: Option<&str>,
    context: Option<usize>,
    out: Option<PathBuf>,
    entropy_file: Option<&Path>,
    sample_rate: u32,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let seed_clip = load_wav(seed_wav, sample_rate)?.quantize();
    let mut sampler = SamplerConfig { n_samples, greedy, ..Default::default() };
    if let Some(t) = temperature {
        sampler.temperature = t;
    }
    if let Some(k) = top_k {
        sampler.top_k = k;
    }
    if let Some(s) = seed {
        sampler.seed = s;
    }
    if let Some(m) = cache_mode {
        sampler.cache_mode = m.parse()?;
    }
    let context_len = context.unwrap_or_else(|| ckpt.config.context_len());
    let output = generate(&ckpt.params, &ckpt.config, &seed_clip, &sampler, context_len)?;

    let out_path = out.unwrap_or_else(|| {
        let root = std::env::var(OUT_ENV).unwrap_or_else(|_| "runs".into());
        PathBuf::from(root).join("generated.wav")
    });
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let generated = QuantizedClip {
        codes: output.generated().to_vec(),
        sample_rate: output.clip.sample_rate,
    };
    write_wav(&out_path, &generated.dequantize())?;
    if let Some(p) = entropy_file {
        let mut text = String::new();
        for e in &output.entropies {
            text.push_str(&format!("{e}\n"));
        }
        fs::write(p, text)?;
    }
    println!("wrote {} samples to {}", generated.len(), out_path.display());
    Ok(())
}

fn cmd_inspect(config: &Path, sets: &[String]) -> Result<()> {
    let run = load_run_config(config, sets)?;
    let counts = param_count(&run.model);
    let lengths = run.model.conv_output_lengths();
    print!("{}", run.resolved_text());
    println!("tokens_per_context = {}", run.n_tokens());
    println!(
        "conv_output_lengths = {}",
        lengths.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    );
    println!("flattened_dim = {}", run.model.flattened_dim());
    println!("params_encoder = {}", counts.encoder);
    println!("params_per_layer = {}", counts.per_layer);
    println!("params_head = {}", counts.head);
    println!("params_total = {}", counts.total);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, set } => cmd_train(&config, resume.as_deref(), &set),
        Command::Eval { ckpt, manifest, context, positions, seed, sample_rate } => {
            cmd_eval(&ckpt, &manifest, context, positions, seed, sample_rate)
        }
        Command::Generate {
            ckpt,
            seed_wav,
            n_samples,
            temperature,
            top_k,
            greedy,
            seed,
            cache_mode,
            context,
            out,
            entropy_file,
            sample_rate,
        } => cmd_generate(
            &ckpt,
            &seed_wav,
            n_samples,
            temperature,
            top_k,
            greedy,
            seed,
            cache_mode.as_deref(),
            context,
            out,
            entropy_file.as_deref(),
            sample_rate,
        ),
        Command::Inspect { config, set } => cmd_inspect(&config, &set),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
