//! Byte-level autoregressive language-modeling harness: tokenization,
//! deterministic batch sampling, Adam training with warmup and clipping,
//! strided perplexity evaluation and temperature sampling.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, loss_graph, Model, ModelConfig, Variant};

pub const BYTE_VOCAB: usize = 256;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;
/// Exponential smoothing factor for the reported training loss.
pub const LOSS_SMOOTHING: f64 = 0.01;

// ── tokenization ─────────────────────────────────────────────────────

/// Identity byte→id map, vocab 256.
pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| {
                Error::Input(format!("token id {id} is not a byte"))
            })
        })
        .collect()
}

// ── batches ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    /// [batch × n]
    pub inputs: Vec<Vec<u32>>,
    /// [batch × target_len], next-token ids aligned to trainable positions.
    pub targets: Vec<Vec<u32>>,
}

fn mix_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 of (seed, iteration) so any iteration's batch can be
    // regenerated without replaying the stream; resume stays bit-exact
    let mut z = seed ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The batch for one training iteration: window starts drawn uniformly from
/// a generator keyed on (seed, iteration). Windows span n+1 tokens so every
/// trainable position has a next-token target.
pub fn make_batch(
    tokens: &[u32],
    cfg: &ModelConfig,
    batch_size: usize,
    seed: u64,
    iteration: u64,
) -> Result<TokenBatch> {
    let n = cfg.seq_len;
    if tokens.len() <= n + 1 {
        return Err(Error::Input(format!(
            "corpus has {} tokens; need more than {}",
            tokens.len(),
            n + 1
        )));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iteration));
    let max_start = tokens.len() - (n + 1);
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let start = rng.gen_range(0..=max_start);
        let window = &tokens[start..start + n + 1];
        inputs.push(window[..n].to_vec());
        targets.push(match cfg.variant {
            // latent rows r predict window[h+1+r]
            Variant::Baseline | Variant::V1 | Variant::V2 | Variant::V3 => {
                window[cfg.history_len() + 1..n + 1].to_vec()
            }
            // all positions except the last predict the next token in-window
            Variant::Full | Variant::Llp => window[1..n].to_vec(),
        });
    }
    Ok(TokenBatch { inputs, targets })
}

/// Deterministic stream of batches, one per iteration.
pub fn batch_stream<'a>(
    tokens: &'a [u32],
    cfg: &'a ModelConfig,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Result<TokenBatch>> + 'a {
    (0u64..).map(move |i| make_batch(tokens, cfg, batch_size, seed, i))
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adaptive-moment state, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// One bias-corrected update from the store's accumulated gradients.
    pub fn update(&mut self, params: &mut crate::params::ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, param) in params.iter_mut() {
            let numel = param.value.numel();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; numel]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; numel]);
            let crate::params::Param { value, grad } = param;
            let grad = grad.data();
            for (i, val) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *val -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::config(
                "schedule",
                format!("unknown schedule `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Schedule::Cosine => write!(f, "cosine"),
            Schedule::Constant => write!(f, "constant"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub base_lr: f64,
    pub warmup_iterations: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_interval: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if self.warmup_iterations > self.total_iterations {
            return Err(Error::config(
                "warmup_iterations",
                "warmup exceeds total iterations",
            ));
        }
        Ok(())
    }

    /// Linear warmup, then the configured schedule.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_iterations {
            return self.base_lr * (iteration + 1) as f64 / self.warmup_iterations as f64;
        }
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine => {
                let span = (self.total_iterations - self.warmup_iterations).max(1);
                let progress = (iteration - self.warmup_iterations) as f64 / span as f64;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub smoothed_loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_smoothed_loss: f64,
    pub rows: Vec<MetricsRow>,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,loss,smoothed_loss,lr,tokens_per_sec\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.8},{:.1}\n",
            r.iteration, r.loss, r.smoothed_loss, r.lr, r.tokens_per_sec
        ));
    }
    out
}

/// Train from scratch: fresh optimizer, iteration 0.
pub fn train(model: &mut Model, corpus: &[u8], tc: &TrainConfig) -> Result<TrainReport> {
    let mut opt = AdamState::new();
    train_range(model, &mut opt, 0, tc.total_iterations, corpus, tc)
}

/// Continue training from `start_iteration` up to the configured total.
pub fn train_resume(
    model: &mut Model,
    opt: &mut AdamState,
    start_iteration: usize,
    corpus: &[u8],
    tc: &TrainConfig,
) -> Result<TrainReport> {
    train_range(model, opt, start_iteration, tc.total_iterations, corpus, tc)
}

/// Run iterations `start..stop` of a schedule spanning
/// `tc.total_iterations`. Batch sampling, the learning-rate schedule and the
/// optimizer moments all key off the global iteration index, so an
/// interrupted-and-resumed run is bit-identical to an uninterrupted one.
pub fn train_range(
    model: &mut Model,
    opt: &mut AdamState,
    start_iteration: usize,
    stop_iteration: usize,
    corpus: &[u8],
    tc: &TrainConfig,
) -> Result<TrainReport> {
    tc.validate()?;
    if stop_iteration > tc.total_iterations {
        return Err(Error::config(
            "total_iterations",
            "stop iteration exceeds the schedule length",
        ));
    }
    let tokens = tokenize_bytes(corpus);
    let target_len = model.cfg.target_len();

    let mut rows = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut smoothed = f64::NAN;
    let mut clock = Instant::now();
    let mut tokens_done = 0usize;

    for it in start_iteration..stop_iteration {
        let lr = tc.lr_at(it);
        let batch = make_batch(&tokens, &model.cfg, tc.batch_size, tc.seed, it as u64)?;
        model.params.zero_grads();
        let mut batch_loss = 0.0;
        for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
            let (mut g, loss) = loss_graph(model, inputs, targets)?;
            batch_loss += g.value(loss).data()[0];
            g.backward(loss)?;
            g.export_grads(&mut model.params)?;
        }
        batch_loss /= tc.batch_size as f64;
        model.params.scale_grads(1.0 / tc.batch_size as f64);

        let grad_norm = model.params.grad_norm();
        if !batch_loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: batch_loss,
                lr,
                grad_norm,
            });
        }
        if grad_norm > GRAD_CLIP {
            model.params.scale_grads(GRAD_CLIP / grad_norm);
        }
        opt.update(&mut model.params, lr);

        if initial_loss.is_nan() {
            initial_loss = batch_loss;
            smoothed = batch_loss;
        } else {
            smoothed += LOSS_SMOOTHING * (batch_loss - smoothed);
        }
        last_loss = batch_loss;
        tokens_done += tc.batch_size * target_len;

        let done = it + 1;
        if done % tc.eval_interval == 0 || done == stop_iteration {
            let dt = clock.elapsed().as_secs_f64().max(1e-9);
            rows.push(MetricsRow {
                iteration: done,
                loss: batch_loss,
                smoothed_loss: smoothed,
                lr,
                tokens_per_sec: tokens_done as f64 / dt,
            });
            clock = Instant::now();
            tokens_done = 0;
        }
    }

    if let Some(path) = &tc.checkpoint_path {
        crate::checkpoint::save_checkpoint(path, model, opt, stop_iteration as u64)?;
    }

    Ok(TrainReport {
        iterations_run: stop_iteration.saturating_sub(start_iteration),
        initial_loss,
        final_loss: last_loss,
        final_smoothed_loss: smoothed,
        rows,
    })
}

// ── evaluation ───────────────────────────────────────────────────────

/// exp(mean next-token NLL) over windows advanced by `stride`, scoring each
/// window's trainable region; with stride < trainable length only the final
/// `stride` positions are scored so no token is counted twice.
pub fn perplexity(model: &Model, corpus: &[u8], stride: usize) -> Result<f64> {
    let tokens = tokenize_bytes(corpus);
    let n = model.cfg.seq_len;
    let target_len = model.cfg.target_len();
    if stride == 0 || stride > target_len {
        return Err(Error::Input(format!(
            "stride must be in 1..={target_len}, got {stride}"
        )));
    }
    if tokens.len() < n + 1 {
        return Err(Error::Input(format!(
            "corpus has {} tokens; one evaluation window needs {}",
            tokens.len(),
            n + 1
        )));
    }
    let mut total_nll = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + n + 1 <= tokens.len() {
        let window = &tokens[start..start + n + 1];
        let (nll, scored) = window_nll(model, window, stride)?;
        total_nll += nll;
        count += scored;
        start += stride;
    }
    Ok((total_nll / count as f64).exp())
}

/// Sum of NLLs over the scored suffix of the trainable region of one window.
fn window_nll(model: &Model, window: &[u32], stride: usize) -> Result<(f64, usize)> {
    let cfg = &model.cfg;
    let n = cfg.seq_len;
    let logits = forward(model, &window[..n])?;
    // (logit row, target token) pairs over the trainable region
    let pairs: Vec<(usize, u32)> = match cfg.variant {
        Variant::Baseline | Variant::V1 | Variant::V2 | Variant::V3 => (0..cfg.latent_len)
            .map(|r| (r, window[cfg.history_len() + 1 + r]))
            .collect(),
        Variant::Full | Variant::Llp => (0..n - 1).map(|r| (r, window[r + 1])).collect(),
    };
    let skip = pairs.len().saturating_sub(stride);
    let mut nll = 0.0;
    for &(row, target) in &pairs[skip..] {
        let r = logits.row(row);
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + r.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        nll += lse - r[target as usize];
    }
    Ok((nll, pairs.len() - skip))
}

// ── generation ───────────────────────────────────────────────────────

/// Autoregressive sampling of `k` bytes. The context is left-filled with
/// byte 0 up to the window length; temperature 0 is greedy argmax with ties
/// broken toward the lowest id.
pub fn generate(
    model: &Model,
    prompt: &[u8],
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must hold at least one byte".into()));
    }
    if k == 0 {
        return Err(Error::Input("token count must be positive".into()));
    }
    if temperature < 0.0 {
        return Err(Error::Input("temperature must be non-negative".into()));
    }
    let n = model.cfg.seq_len;
    let mut ctx = tokenize_bytes(prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut window = vec![0u32; n.saturating_sub(ctx.len())];
        let tail = &ctx[ctx.len().saturating_sub(n)..];
        window.extend_from_slice(tail);
        let logits = forward(model, &window)?;
        let last = logits.row(logits.shape()[0] - 1);
        let next = if temperature == 0.0 {
            argmax(last) as u32
        } else {
            sample_softmax(last, temperature, &mut rng) as u32
        };
        ctx.push(next);
        out.push(next as u8);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&x| ((x - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}

// ── deterministic corpus ─────────────────────────────────────────────

const WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "he", "for", "it", "with", "as", "his",
    "on", "be", "at", "by", "had", "not", "are", "but", "from", "or", "have", "an", "they",
    "which", "one", "you", "were", "her", "all", "she", "there", "would", "their", "we", "him",
    "been", "has", "when", "who", "will", "more", "no", "if", "out", "so", "said", "what", "up",
    "its", "about", "into", "than", "them", "can", "only", "other", "new", "some", "could",
    "time", "these", "two", "may", "then", "do", "first", "any", "my", "now", "such", "like",
    "our", "over", "man", "me", "even", "most", "made", "after", "also", "did", "many", "before",
    "must", "through", "years", "where", "much", "your", "way", "well", "down", "should",
    "because", "each", "just", "those", "people", "how", "too", "little", "state", "good",
    "very", "make", "world", "still", "own", "see", "men", "work", "long", "get", "here",
    "between", "both", "life", "being", "under", "never", "day", "same", "another", "know",
    "while", "last", "might", "great", "old", "year", "off", "come", "since", "against", "go",
    "came", "right", "used", "take", "three",
];

/// Seeded English-like filler text: Zipf-weighted words, sentences and
/// paragraph breaks. Useful as a training corpus when none is supplied.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Zipf weights 1/(rank+1)
    let weights: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| -> &'static str {
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return WORDS[i];
            }
        }
        WORDS[WORDS.len() - 1]
    };
    let mut out: Vec<u8> = Vec::with_capacity(len + 64);
    let mut sentences_in_paragraph = 0;
    while out.len() < len {
        let words = rng.gen_range(4..=11);
        for w in 0..words {
            let word = pick(&mut rng);
            if w == 0 {
                let mut chars = word.chars();
                let first = chars.next().unwrap().to_ascii_uppercase();
                out.push(first as u8);
                out.extend(chars.as_str().bytes());
            } else {
                out.push(b' ');
                if w + 1 < words && rng.gen::<f64>() < 0.08 {
                    out.pop();
                    out.extend(b", ");
                }
                out.extend(word.bytes());
            }
        }
        out.push(b'.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= rng.gen_range(3..=6) {
            out.extend(b"\n\n");
            sentences_in_paragraph = 0;
        } else {
            out.push(b' ');
        }
    }
    out.truncate(len);
    out
}

// ── presets ──────────────────────────────────────────────────────────

pub mod presets {
    use super::{Schedule, TrainConfig};
    use crate::attention::PeKind;
    use crate::error::{Error, Result};
    use crate::model::{ModelConfig, Variant};

    fn model(
        variant: Variant,
        n: usize,
        latent: usize,
        segment: usize,
        proj: usize,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> ModelConfig {
        ModelConfig {
            variant,
            seq_len: n,
            latent_len: latent,
            segment_size: segment,
            projection_len: proj,
            d_model: d,
            num_heads: heads,
            num_layers: layers,
            vocab_size: super::BYTE_VOCAB,
            ffn_multiplier: 4,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        }
    }

    /// Desk-scale sanity preset: d=128, 4 heads, 4 layers, n=256, llp
    /// segment 64, latent 128, batch 16 for 2000 iterations. The optimizer
    /// settings (lr 3e-4, warmup 100, cosine) and the narrow FFN (2×,
    /// keeping the preset inside a single-core time budget) are this
    /// project's choices.
    pub fn desk(variant: Variant) -> (ModelConfig, TrainConfig) {
        let mut m = model(variant, 256, 128, 64, 64, 128, 4, 4);
        m.ffn_multiplier = 2;
        (
            m,
            TrainConfig {
                batch_size: 16,
                total_iterations: 2000,
                base_lr: 3e-4,
                warmup_iterations: 100,
                schedule: Schedule::Cosine,
                seed: 42,
                eval_interval: 50,
                checkpoint_path: None,
            },
        )
    }

    /// Configuration A: n=1024, d=512, 8 heads, 8 layers, latent 512,
    /// v2 segment 256, v3 compression 128. Batch size, iteration count,
    /// learning rate and warmup are this project's choices (not from the
    /// reference configuration).
    pub fn config_a(variant: Variant) -> (ModelConfig, TrainConfig) {
        (
            model(variant, 1024, 512, 256, 128, 512, 8, 8),
            TrainConfig {
                batch_size: 8,
                total_iterations: 100_000,
                base_lr: 2e-4,
                warmup_iterations: 2000,
                schedule: Schedule::Cosine,
                seed: 42,
                eval_interval: 500,
                checkpoint_path: None,
            },
        )
    }

    /// Configuration B: n=2048, d=768, 6 heads, 6 layers, latent 1024,
    /// v2 segment 512, 200k iterations at starting lr 2e-4 (reading the
    /// printed 2^-4 as a typo for 2·10⁻⁴). Batch size and warmup are this
    /// project's choices.
    pub fn config_b(variant: Variant) -> (ModelConfig, TrainConfig) {
        (
            model(variant, 2048, 1024, 512, 256, 768, 6, 6),
            TrainConfig {
                batch_size: 8,
                total_iterations: 200_000,
                base_lr: 2e-4,
                warmup_iterations: 2000,
                schedule: Schedule::Cosine,
                seed: 42,
                eval_interval: 500,
                checkpoint_path: None,
            },
        )
    }

    /// Configuration C: as B but v3 compression 256 and 500k iterations.
    pub fn config_c(variant: Variant) -> (ModelConfig, TrainConfig) {
        let (m, mut t) = config_b(variant);
        let mut m = m;
        m.projection_len = 256;
        t.total_iterations = 500_000;
        (m, t)
    }

    pub fn by_name(name: &str, variant: Variant) -> Result<(ModelConfig, TrainConfig)> {
        match name {
            "desk" => Ok(desk(variant)),
            "a" => Ok(config_a(variant)),
            "b" => Ok(config_b(variant)),
            "c" => Ok(config_c(variant)),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected desk|a|b|c)"),
            )),
        }
    }
}
