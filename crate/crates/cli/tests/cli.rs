//! End-to-end tests of the `wavelm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wavelm::audio::{encode_wav, load_wav, WaveformClip};
use wavelm::model::{ModelConfig, ModelParams};
use wavelm::train::{save_checkpoint, AdamState, Checkpoint, LrSchedule};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wavelm"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn wavelm");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        chunk_len: 16,
        conv_channels: [4, 4, 4, 4, 4],
        conv_strides: [2, 3, 2, 3, 2],
        conv_kernel: 3,
        embed_dim: 8,
        n_layers: 1,
        ff_dim: 16,
        n_heads: 2,
        attn_dropout: 0.1,
        token_dropout: 0.1,
        conv_dropout: 0.1,
        head_dims: vec![16, 256],
        head_dropout: 0.1,
        n_tokens_train: 4,
    }
}

fn write_fresh_checkpoint(path: &Path, cfg: &ModelConfig) {
    let params = ModelParams::init(cfg, 7).unwrap();
    let adam = AdamState::new(&params);
    save_checkpoint(
        path,
        &Checkpoint {
            config: cfg.clone(),
            schedule: LrSchedule::default(),
            params,
            adam,
            step: 0,
            epoch: 0,
            epoch_pos: 0,
            root_seed: 7,
            best_valid_bits: f64::INFINITY,
            evals_since_improve: 0,
        },
    )
    .unwrap();
}

fn write_sine(dir: &Path, name: &str, len: usize, period: usize) -> PathBuf {
    let clip = WaveformClip {
        samples: (0..len)
            .map(|i| ((i % period) as f32 / period as f32 * std::f32::consts::TAU).sin() * 0.6)
            .collect(),
        sample_rate: 16_000,
    };
    let p = dir.join(name);
    fs::write(&p, encode_wav(&clip)).unwrap();
    p
}

#[test]
fn inspect_default_config_is_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "").unwrap();
    let out = run_ok(bin().arg("inspect").arg("--config").arg(&cfg).env_remove("WAVELM_OUT"));
    let want = "\
sample_rate = 16000
context_len = 128000
chunk_len = 2000
conv_channels = 256,256,128,128,32
conv_strides = 2,3,2,3,2
conv_kernel = 7
embed_dim = 128
n_layers = 3
ff_dim = 256
n_heads = 8
attn_dropout = 0.1
token_dropout = 0.1
conv_dropout = 0.2
head_dims = 1024,256
head_dropout = 0.2
lr_initial = 0.0001
lr_final = 0.000005
lr_switch_step = 250000
batch_size = 40
max_steps = 500000
max_epochs = 2
positions_per_epoch = 10000000
eval_every = 1000
eval_positions = 256
checkpoint_every = 1000
shards = 1
grad_clip = 0
seed = 0
temperature = 1
top_k = 0
greedy = false
n_samples = 16000
cache_mode = exact
out_dir = runs
tokens_per_context = 64
conv_output_lengths = 1000,334,167,56,28
flattened_dim = 896
params_encoder = 948896
params_per_layer = 132480
params_head = 394496
params_total = 1740832
";
    assert_eq!(stdout(&out), want);
}

#[test]
fn inspect_reports_250_tokens_at_half_million_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "context_len = 500000\n").unwrap();
    let out = run_ok(bin().arg("inspect").arg("--config").arg(&cfg));
    assert!(stdout(&out).contains("tokens_per_context = 250"));
}

#[test]
fn invalid_config_exits_nonzero_naming_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\ncontext_len = 1999\n").unwrap();
    let out = bin().arg("inspect").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("context_len") && err.contains("line 2"), "stderr: {err}");
}

#[test]
fn missing_checkpoint_is_a_clean_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "nothing.wav\n").unwrap();
    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(dir.path().join("no-such.ckpt"))
        .arg("--manifest")
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn eval_fresh_checkpoint_prints_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model_config();
    let ckpt = dir.path().join("fresh.ckpt");
    write_fresh_checkpoint(&ckpt, &cfg);
    write_sine(dir.path(), "a.wav", 400, 25);
    fs::write(dir.path().join("m.txt"), "a.wav\n").unwrap();
    let out = run_ok(
        bin()
            .arg("eval")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--manifest")
            .arg(dir.path().join("m.txt"))
            .arg("--positions")
            .arg("16"),
    );
    assert!(stdout(&out).contains("8.0000 bits"), "stdout: {}", stdout(&out));
}

#[test]
fn generate_writes_a_one_second_wav() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model_config();
    let ckpt = dir.path().join("model.ckpt");
    write_fresh_checkpoint(&ckpt, &cfg);
    let seed_wav = write_sine(dir.path(), "seed.wav", 100, 25);
    let out_wav = dir.path().join("out/gen.wav");
    let entropy = dir.path().join("entropy.txt");
    run_ok(
        bin()
            .arg("generate")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--seed-wav")
            .arg(&seed_wav)
            .arg("--n-samples")
            .arg("16000")
            .arg("--temperature")
            .arg("0.9")
            .arg("--top-k")
            .arg("32")
            .arg("--seed")
            .arg("3")
            .arg("--out")
            .arg(&out_wav)
            .arg("--entropy-file")
            .arg(&entropy),
    );
    let clip = load_wav(&out_wav, 16_000).unwrap();
    assert_eq!(clip.samples.len(), 16_000, "one second at 16 kHz");
    let lines = fs::read_to_string(&entropy).unwrap();
    assert_eq!(lines.lines().count(), 16_000);
    assert!(lines.lines().all(|l| l.parse::<f32>().is_ok()));
}

#[test]
fn train_and_resume_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    write_sine(dir.path(), "a.wav", 600, 25);
    write_sine(dir.path(), "b.wav", 600, 40);
    fs::write(dir.path().join("train.txt"), "a.wav\nb.wav\n").unwrap();
    let out_dir = dir.path().join("out");
    let cfg_text = format!(
        "context_len = 64\nchunk_len = 16\nconv_channels = 4,4,4,4,4\nconv_strides = 2,3,2,3,2\n\
         conv_kernel = 3\nembed_dim = 8\nn_layers = 1\nff_dim = 16\nn_heads = 2\n\
         head_dims = 16,256\nbatch_size = 4\nmax_steps = 4\nmax_epochs = 8\n\
         positions_per_epoch = 64\neval_every = 100\ncheckpoint_every = 2\nseed = 5\n\
         train_manifest = {}\nout_dir = {}\n",
        dir.path().join("train.txt").display(),
        out_dir.display(),
    );
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, &cfg_text).unwrap();

    let out = run_ok(bin().arg("train").arg("--config").arg(&cfg).env_remove("WAVELM_OUT"));
    assert!(stdout(&out).contains("finished at step 4"));
    let ckpt = out_dir.join("last.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("config.resolved").exists());
    assert!(out_dir.join("metrics.log").exists());

    // resume two more steps through the binary
    let out = run_ok(
        bin()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--resume")
            .arg(&ckpt)
            .arg("--set")
            .arg("max_steps=6")
            .env_remove("WAVELM_OUT"),
    );
    assert!(stdout(&out).contains("finished at step 6"), "stdout: {}", stdout(&out));
}

#[test]
fn out_env_var_overrides_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model_config();
    let ckpt = dir.path().join("model.ckpt");
    write_fresh_checkpoint(&ckpt, &cfg);
    let seed_wav = write_sine(dir.path(), "seed.wav", 100, 25);
    let root = dir.path().join("env-root");
    run_ok(
        bin()
            .arg("generate")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--seed-wav")
            .arg(&seed_wav)
            .arg("--n-samples")
            .arg("8")
            .env("WAVELM_OUT", &root),
    );
    assert!(root.join("generated.wav").exists());
}
