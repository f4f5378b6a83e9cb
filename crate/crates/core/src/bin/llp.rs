//! Command-line front door: train, eval, generate, complexity, probe and
//! gradcheck subcommands over the library. Settings resolve in three steps:
//! preset defaults, then a flat key=value config file, then command-line
//! flags. The effective configuration is echoed so any run can be repeated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use llp_core::complexity::{complexity_report, report_to_csv, ComplexityInputs};
use llp_core::error::Error;
use llp_core::gradcheck::grad_check;
use llp_core::lm::{
    self, generate, metrics_to_csv, perplexity, presets, tokenize_bytes, AdamState, Schedule,
    TrainConfig,
};
use llp_core::model::{build_model, loss_graph_with, ModelConfig, Variant};
use llp_core::receptive::{probe_weight_std, verify_propagation};
use llp_core::{checkpoint, PeKind};

type Result<T> = llp_core::Result<T>;

#[derive(Parser)]
#[command(
    name = "llp",
    version,
    about = "Efficient-attention transformer variants: training harness, cost model and propagation probes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a variant on a byte-level text corpus
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a corpus
    Eval(EvalArgs),
    /// Sample bytes from a checkpoint
    Generate(GenerateArgs),
    /// Attention-step cost table across all variants
    Complexity(ComplexityArgs),
    /// Verify llp receptive-field propagation empirically
    Probe(ProbeArgs),
    /// Finite-difference check of a variant's gradients
    Gradcheck(GradcheckArgs),
}

// ── shared model/train flag blocks ───────────────────────────────────

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Architecture: full | baseline | v1 | v2 | v3 | llp
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, visible_alias = "seq")]
    seq_len: Option<usize>,
    #[arg(long, visible_alias = "latent")]
    latent_len: Option<usize>,
    #[arg(long, visible_alias = "segment")]
    segment_size: Option<usize>,
    #[arg(long, visible_alias = "proj")]
    projection_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long, visible_alias = "heads")]
    num_heads: Option<usize>,
    #[arg(long, visible_alias = "layers")]
    num_layers: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    ffn_multiplier: Option<usize>,
    /// learned-absolute | rotary
    #[arg(long)]
    pe_kind: Option<String>,
    #[arg(long)]
    share_llp_block_weights: Option<bool>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, visible_alias = "iterations")]
    total_iterations: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup_iterations: Option<usize>,
    /// cosine | constant
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

#[derive(Default)]
struct Extras {
    corpus: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

/// One key=value assignment from a config file, applied onto the resolved
/// settings. Unknown keys are rejected.
fn apply_setting(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    extras: &mut Extras,
    key: &str,
    value: &str,
) -> Result<()> {
    let parse_usize = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Input(format!("`{key}` expects an integer, got `{v}`")))
    };
    match key {
        "preset" | "parameters" => {} // resolved in the first pass / informational
        "variant" => model.variant = Variant::from_str(value)?,
        "seq-len" => model.seq_len = parse_usize(value)?,
        "latent-len" => model.latent_len = parse_usize(value)?,
        "segment-size" => model.segment_size = parse_usize(value)?,
        "projection-len" => model.projection_len = parse_usize(value)?,
        "d-model" => model.d_model = parse_usize(value)?,
        "num-heads" => model.num_heads = parse_usize(value)?,
        "num-layers" => model.num_layers = parse_usize(value)?,
        "vocab-size" => model.vocab_size = parse_usize(value)?,
        "ffn-multiplier" => model.ffn_multiplier = parse_usize(value)?,
        "pe-kind" => model.pe_kind = PeKind::from_str(value)?,
        "share-llp-block-weights" => {
            model.share_llp_block_weights = value
                .parse()
                .map_err(|_| Error::Input(format!("`{key}` expects true/false, got `{value}`")))?
        }
        "batch-size" => train.batch_size = parse_usize(value)?,
        "total-iterations" => train.total_iterations = parse_usize(value)?,
        "base-lr" => {
            train.base_lr = value
                .parse()
                .map_err(|_| Error::Input(format!("`{key}` expects a float, got `{value}`")))?
        }
        "warmup-iterations" => train.warmup_iterations = parse_usize(value)?,
        "schedule" => train.schedule = Schedule::from_str(value)?,
        "seed" => {
            train.seed = value
                .parse()
                .map_err(|_| Error::Input(format!("`{key}` expects an integer, got `{value}`")))?
        }
        "eval-interval" => train.eval_interval = parse_usize(value)?,
        "corpus" => extras.corpus = Some(PathBuf::from(value)),
        "out-dir" => extras.out_dir = Some(PathBuf::from(value)),
        other => return Err(Error::Input(format!("unknown configuration key `{other}`"))),
    }
    Ok(())
}

fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Input(format!(
                "{}:{}: expected key = value, got `{line}`",
                path.display(),
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolve preset < config file < flags into a concrete configuration.
fn resolve(
    preset_flag: &Option<String>,
    config_file: &Option<PathBuf>,
    model_flags: &ModelFlags,
    train_flags: &TrainFlags,
) -> Result<(ModelConfig, TrainConfig, Extras)> {
    let file_kv = match config_file {
        Some(path) => read_kv_file(path)?,
        None => Vec::new(),
    };
    let from_file = |key: &str| {
        file_kv
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    };
    let preset_name = preset_flag
        .clone()
        .or_else(|| from_file("preset"))
        .unwrap_or_else(|| "desk".to_string());
    // the variant must be known before the preset is instantiated
    let variant_str = model_flags
        .variant
        .clone()
        .or_else(|| from_file("variant"))
        .unwrap_or_else(|| "llp".to_string());
    let variant = Variant::from_str(&variant_str)?;
    let (mut model, mut train) = presets::by_name(&preset_name, variant)?;
    let mut extras = Extras::default();
    for (k, v) in &file_kv {
        apply_setting(&mut model, &mut train, &mut extras, k, v)?;
    }
    apply_model_flags(&mut model, model_flags)?;
    apply_train_flags(&mut train, train_flags)?;
    Ok((model, train, extras))
}

fn apply_model_flags(model: &mut ModelConfig, f: &ModelFlags) -> Result<()> {
    if let Some(v) = &f.variant {
        model.variant = Variant::from_str(v)?;
    }
    if let Some(v) = f.seq_len {
        model.seq_len = v;
    }
    if let Some(v) = f.latent_len {
        model.latent_len = v;
    }
    if let Some(v) = f.segment_size {
        model.segment_size = v;
    }
    if let Some(v) = f.projection_len {
        model.projection_len = v;
    }
    if let Some(v) = f.d_model {
        model.d_model = v;
    }
    if let Some(v) = f.num_heads {
        model.num_heads = v;
    }
    if let Some(v) = f.num_layers {
        model.num_layers = v;
    }
    if let Some(v) = f.vocab_size {
        model.vocab_size = v;
    }
    if let Some(v) = f.ffn_multiplier {
        model.ffn_multiplier = v;
    }
    if let Some(v) = &f.pe_kind {
        model.pe_kind = PeKind::from_str(v)?;
    }
    if let Some(v) = f.share_llp_block_weights {
        model.share_llp_block_weights = v;
    }
    Ok(())
}

fn apply_train_flags(train: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = f.total_iterations {
        train.total_iterations = v;
    }
    if let Some(v) = f.base_lr {
        train.base_lr = v;
    }
    if let Some(v) = f.warmup_iterations {
        train.warmup_iterations = v;
    }
    if let Some(v) = &f.schedule {
        train.schedule = Schedule::from_str(v)?;
    }
    if let Some(v) = f.seed {
        train.seed = v;
    }
    if let Some(v) = f.eval_interval {
        train.eval_interval = v;
    }
    Ok(())
}

/// Echo the resolved settings in the same key=value format the config file
/// accepts, so the output can be fed straight back via --config.
fn effective_config(model: &ModelConfig, train: &TrainConfig, extras: &[(&str, String)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("variant = {}\n", model.variant));
    out.push_str(&format!("seq-len = {}\n", model.seq_len));
    out.push_str(&format!("latent-len = {}\n", model.latent_len));
    out.push_str(&format!("segment-size = {}\n", model.segment_size));
    out.push_str(&format!("projection-len = {}\n", model.projection_len));
    out.push_str(&format!("d-model = {}\n", model.d_model));
    out.push_str(&format!("num-heads = {}\n", model.num_heads));
    out.push_str(&format!("num-layers = {}\n", model.num_layers));
    out.push_str(&format!("vocab-size = {}\n", model.vocab_size));
    out.push_str(&format!("ffn-multiplier = {}\n", model.ffn_multiplier));
    out.push_str(&format!("pe-kind = {}\n", model.pe_kind));
    out.push_str(&format!(
        "share-llp-block-weights = {}\n",
        model.share_llp_block_weights
    ));
    out.push_str(&format!("batch-size = {}\n", train.batch_size));
    out.push_str(&format!("total-iterations = {}\n", train.total_iterations));
    out.push_str(&format!("base-lr = {}\n", train.base_lr));
    out.push_str(&format!("warmup-iterations = {}\n", train.warmup_iterations));
    out.push_str(&format!("schedule = {}\n", train.schedule));
    out.push_str(&format!("seed = {}\n", train.seed));
    out.push_str(&format!("eval-interval = {}\n", train.eval_interval));
    for (k, v) in extras {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    /// Text corpus (plain bytes)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Preset: desk | a | b | c
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Corpus for a post-training perplexity evaluation
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, mut tc, extras) = resolve(&args.preset, &args.config, &args.model, &args.train)?;
    cfg.validate()?;
    let out_dir = extras.out_dir.unwrap_or_else(|| args.out_dir.clone());
    let corpus_path = args
        .corpus
        .clone()
        .or(extras.corpus)
        .ok_or_else(|| Error::Input("train needs --corpus".into()))?;
    fs::create_dir_all(&out_dir)?;
    tc.checkpoint_path = Some(out_dir.join("checkpoint.bin"));

    let echo = effective_config(
        &cfg,
        &tc,
        &[
            ("corpus", corpus_path.display().to_string()),
            ("out-dir", out_dir.display().to_string()),
        ],
    );
    print!("{echo}");
    fs::write(out_dir.join("config.txt"), &echo)?;

    let corpus = fs::read(&corpus_path)?;
    let (mut model, mut opt, start) = match &args.resume {
        Some(path) => {
            let (model, opt, it) = checkpoint::load_checkpoint(path)?;
            if model.cfg != cfg {
                eprintln!("note: resuming with the checkpoint's stored configuration");
            }
            (model, opt, it as usize)
        }
        None => (build_model(&cfg, tc.seed)?, AdamState::new(), 0),
    };
    println!("parameters = {}", model.param_count());

    let started = Instant::now();
    let mut rows = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut final_smoothed = f64::NAN;
    // run in eval_interval chunks so progress is visible; chunked runs are
    // bit-identical to one uninterrupted run
    let mut at = start;
    while at < tc.total_iterations {
        let stop = (at + tc.eval_interval).min(tc.total_iterations);
        let r = lm::train_range(&mut model, &mut opt, at, stop, &corpus, &tc)?;
        if initial_loss.is_nan() {
            initial_loss = r.initial_loss;
        }
        final_loss = r.final_loss;
        final_smoothed = r.final_smoothed_loss;
        for row in &r.rows {
            println!(
                "iter {:>6}  loss {:.4}  smoothed {:.4}  lr {:.2e}  tok/s {:.0}",
                row.iteration, row.loss, row.smoothed_loss, row.lr, row.tokens_per_sec
            );
        }
        rows.extend(r.rows);
        at = stop;
    }
    fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&rows))?;

    let eval_ppl = match &args.eval_corpus {
        Some(path) => {
            let eval_corpus = fs::read(path)?;
            Some(perplexity(&model, &eval_corpus, model.cfg.target_len())?)
        }
        None => None,
    };
    let summary = serde_json::json!({
        "variant": cfg.variant.to_string(),
        "parameters": model.param_count(),
        "iterations": tc.total_iterations,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "final_smoothed_loss": final_smoothed,
        "eval_perplexity": eval_ppl,
        "elapsed_sec": started.elapsed().as_secs_f64(),
        "checkpoint": tc.checkpoint_path.as_ref().map(|p| p.display().to_string()),
    });
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary is valid json"),
    )?;
    println!("{summary}");
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Window advance; defaults to the model's trainable length
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _, iteration) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let corpus = fs::read(&args.corpus)?;
    let stride = args.stride.unwrap_or_else(|| model.cfg.target_len());
    let ppl = perplexity(&model, &corpus, stride)?;
    let out = serde_json::json!({
        "variant": model.cfg.variant.to_string(),
        "checkpoint": args.checkpoint.display().to_string(),
        "checkpoint_iteration": iteration,
        "corpus": args.corpus.display().to_string(),
        "corpus_bytes": corpus.len(),
        "stride": stride,
        "perplexity": ppl,
    });
    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&out).expect("valid json"),
    )?;
    println!("{out}");
    Ok(())
}

// ── generate ─────────────────────────────────────────────────────────

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Number of bytes to sample
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    /// 0 = greedy argmax
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the sampled bytes here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (model, _, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let prompt: Vec<u8> = match (&args.prompt, &args.prompt_file) {
        (Some(p), None) => p.clone().into_bytes(),
        (None, Some(path)) => fs::read(path)?,
        _ => {
            return Err(Error::Input(
                "generate needs exactly one of --prompt / --prompt-file".into(),
            ))
        }
    };
    // raw bytes go to stdout, so the run settings echo on stderr
    eprintln!(
        "generate: variant={} tokens={} temperature={} seed={}",
        model.cfg.variant, args.tokens, args.temperature, args.seed
    );
    let bytes = generate(&model, &prompt, args.tokens, args.temperature, args.seed)?;
    match &args.out {
        Some(path) => fs::write(path, &bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            std::io::stdout().flush()?;
        }
    }
    Ok(())
}

// ── complexity ───────────────────────────────────────────────────────

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long, default_value_t = 4096)]
    n: u128,
    #[arg(long, default_value_t = 48)]
    layers: u128,
    #[arg(long, default_value_t = 24)]
    heads: u128,
    #[arg(long, default_value_t = 256)]
    segment: u128,
    #[arg(long, default_value_t = 256)]
    proj: u128,
    /// Latent length; defaults to n/2 as in the reference table
    #[arg(long)]
    latent: Option<u128>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn cmd_complexity(args: &ComplexityArgs) -> Result<()> {
    let mut inputs =
        ComplexityInputs::reference(args.n, args.layers, args.heads, args.segment, args.proj);
    inputs.latent_len = args.latent;
    let rows = complexity_report(&inputs)?;
    println!(
        "n = {}\nlayers = {}\nheads = {}\nsegment = {}\nproj = {}",
        args.n, args.layers, args.heads, args.segment, args.proj
    );
    println!(
        "{:<10} {:>16} {:>10} {:>9} {:>7} {:>9}",
        "variant", "steps", "millions", "percent", "paper%", "mismatch"
    );
    for r in &rows {
        println!(
            "{:<10} {:>16} {:>10} {:>8.1}% {:>7} {:>9}",
            r.variant.to_string(),
            r.steps_exact,
            r.steps_millions,
            r.percent_computed,
            r.percent_paper
                .map(|p| format!("{p}%"))
                .unwrap_or_else(|| "-".into()),
            if r.paper_value_mismatch { "yes" } else { "" },
        );
        if let Some(note) = &r.note {
            println!("{:<10} note: {note}", "");
        }
    }
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("complexity.csv"), report_to_csv(&rows))?;
    fs::write(
        args.out_dir.join("complexity.json"),
        serde_json::to_string_pretty(&rows).expect("valid json"),
    )?;
    Ok(())
}

// ── probe ────────────────────────────────────────────────────────────

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value = "llp")]
    variant: String,
    #[arg(long, visible_alias = "seq-len", default_value_t = 512)]
    seq: usize,
    #[arg(long, visible_alias = "segment-size", default_value_t = 128)]
    segment: usize,
    #[arg(long, visible_alias = "num-layers", default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, visible_alias = "num-heads", default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the block-visibility text grid
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn cmd_probe(args: &ProbeArgs) -> Result<ExitCode> {
    let cfg = ModelConfig {
        variant: Variant::from_str(&args.variant)?,
        seq_len: args.seq,
        latent_len: args.seq / 2,
        segment_size: args.segment,
        projection_len: (args.seq / 4).max(1),
        d_model: args.d_model,
        num_heads: args.heads,
        num_layers: args.layers,
        vocab_size: lm::BYTE_VOCAB,
        ffn_multiplier: 2,
        pe_kind: PeKind::LearnedAbsolute,
        share_llp_block_weights: true,
    };
    println!(
        "variant = {}\nseq = {}\nsegment = {}\nlayers = {}\nd-model = {}\nheads = {}\nseed = {}",
        cfg.variant, args.seq, args.segment, args.layers, args.d_model, args.heads, args.seed
    );
    let report = verify_propagation(&cfg, args.seed)?;
    if args.grid {
        print!("{}", report.text_grid());
    }
    for layer in &report.per_layer {
        println!(
            "layers {:>2}: {} (last block reaches {} of {} input blocks)",
            layer.layers,
            if layer.matches { "match" } else { "MISMATCH" },
            layer.observed[report.num_blocks - 1].len(),
            report.num_blocks
        );
    }
    match report.first_full_coverage {
        Some(at) => println!("full coverage first reached at {at} layer(s)"),
        None => println!(
            "full coverage not reached within {} layer(s) (expected-partial)",
            args.layers
        ),
    }
    println!(
        "propagation check: {}",
        if report.pass { "PASS" } else { "FAIL" }
    );
    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("probe.json"),
        serde_json::to_string_pretty(&report).expect("valid json"),
    )?;
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    /// Use the 2-layer tiny configuration (n=16, d=8, 2 heads)
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 500)]
    entries: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
}

/// The 2-layer tiny configuration used for gradient verification.
fn tiny_gradcheck_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        seq_len: 16,
        latent_len: 8,
        segment_size: if variant == Variant::Llp { 8 } else { 4 },
        projection_len: 4,
        d_model: 8,
        num_heads: 2,
        num_layers: 2,
        vocab_size: lm::BYTE_VOCAB,
        ffn_multiplier: 2,
        pe_kind: PeKind::LearnedAbsolute,
        share_llp_block_weights: true,
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let variant = match &args.model.variant {
        Some(v) => Variant::from_str(v)?,
        None => Variant::Llp,
    };
    let mut cfg = tiny_gradcheck_cfg(variant);
    if !args.tiny {
        apply_model_flags(&mut cfg, &args.model)?;
    }
    cfg.validate()?;
    let mut model = build_model(&cfg, args.seed)?;
    model
        .params
        .randomize_matrices(args.seed ^ 0xda7a, probe_weight_std(cfg.d_model));

    // one deterministic window of byte tokens
    let corpus = lm::synthetic_text(4 * cfg.seq_len + 2, args.seed);
    let tokens = tokenize_bytes(&corpus);
    let batch = lm::make_batch(&tokens, &cfg, 1, args.seed, 0)?;
    let (inputs, targets) = (batch.inputs[0].clone(), batch.targets[0].clone());

    let report = grad_check(
        &mut model.params,
        |s| loss_graph_with(&cfg, s, &inputs, &targets),
        args.eps,
        args.tol,
        args.entries,
        args.seed,
    )?;
    println!("variant = {variant}");
    println!("{report}");
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

// ── entry ────────────────────────────────────────────────────────────

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config { .. }
        | Error::Input(_)
        | Error::Mask(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. } => ExitCode::from(1),
        Error::Diverged { .. } | Error::Format { .. } | Error::Io(_) => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            // help/version are not usage errors
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args).map(|_| ExitCode::SUCCESS),
        Cmd::Eval(args) => cmd_eval(args).map(|_| ExitCode::SUCCESS),
        Cmd::Generate(args) => cmd_generate(args).map(|_| ExitCode::SUCCESS),
        Cmd::Complexity(args) => cmd_complexity(args).map(|_| ExitCode::SUCCESS),
        Cmd::Probe(args) => cmd_probe(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
