//! Builders and forward passes for the six architectures: full-attention
//! reference, the latent cross-attention baseline, enhanced V1 (history
//! self-attention in every layer), V2 (segmented history), V3 (projected
//! history) and LLP (overlapping half-segment blocks).
//!
//! All layers are pre-norm residual: `y = x + attn(norm1(x))`,
//! `out = y + ffn(norm2(y))`. For the two-region variants the attention
//! stage concatenates the history output and the latent output before the
//! shared position-wise FFN.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PeKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::{causal_mask, MaskSpec};
use crate::params::{normal_tensor, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Baseline,
    V1,
    V2,
    V3,
    Llp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Baseline,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::Llp,
    ];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::Llp => "llp",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "baseline" | "perceiver-baseline" | "perceiver_baseline" => Ok(Variant::Baseline),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "llp" => Ok(Variant::Llp),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }
}

/// Full architectural description.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Input sequence length n.
    pub seq_len: usize,
    /// Latent length for baseline/v1/v2/v3; ignored by full/llp.
    pub latent_len: usize,
    /// History segment size (v2) or overlapping segment size (llp).
    pub segment_size: usize,
    /// Compressed history length p (v3 only).
    pub projection_len: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub ffn_multiplier: usize,
    pub pe_kind: PeKind,
    /// Share one PAR-block parameter set per llp layer (default) or give
    /// every block its own set.
    pub share_llp_block_weights: bool,
}

impl ModelConfig {
    pub fn history_len(&self) -> usize {
        self.seq_len - self.latent_len
    }

    /// Half-segment length for llp.
    pub fn half_segment(&self) -> usize {
        self.segment_size / 2
    }

    /// Number of llp half-segment blocks.
    pub fn num_blocks(&self) -> usize {
        self.seq_len / self.half_segment()
    }

    /// Rows that receive logits.
    pub fn logit_rows(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::Llp => self.seq_len,
            _ => self.latent_len,
        }
    }

    /// Targets per window: the latent region for perceiver-style variants;
    /// all positions except the last for full/llp.
    pub fn target_len(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::Llp => self.seq_len - 1,
            _ => self.latent_len,
        }
    }

    /// Absolute input position of logit row `row`.
    pub fn logit_row_position(&self, row: usize) -> usize {
        match self.variant {
            Variant::Full | Variant::Llp => row,
            _ => self.history_len() + row,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!(
                    "d_model {} must be divisible by num_heads {}",
                    self.d_model, self.num_heads
                ),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::config("ffn_multiplier", "must be positive"));
        }
        if self.pe_kind == PeKind::Rotary && (self.d_model / self.num_heads) % 2 != 0 {
            return Err(Error::config(
                "pe_kind",
                "rotary encoding needs an even head dimension",
            ));
        }
        match self.variant {
            Variant::Full => {}
            Variant::Baseline => {
                if self.latent_len == 0 || self.latent_len > self.seq_len {
                    return Err(Error::config(
                        "latent_len",
                        format!("need 0 < latent_len ≤ seq_len, got {}", self.latent_len),
                    ));
                }
            }
            Variant::V1 | Variant::V2 | Variant::V3 => {
                if self.latent_len == 0 || self.latent_len > self.seq_len {
                    return Err(Error::config(
                        "latent_len",
                        format!("need 0 < latent_len ≤ seq_len, got {}", self.latent_len),
                    ));
                }
                if self.history_len() == 0 {
                    return Err(Error::config(
                        "latent_len",
                        "history is empty; use the baseline or full variant instead",
                    ));
                }
                if self.variant == Variant::V2 {
                    if self.segment_size == 0 || self.history_len() % self.segment_size != 0 {
                        return Err(Error::config(
                            "segment_size",
                            format!(
                                "history length {} must be divisible by segment size {}",
                                self.history_len(),
                                self.segment_size
                            ),
                        ));
                    }
                }
                if self.variant == Variant::V3 {
                    if self.projection_len == 0 || self.projection_len > self.history_len() {
                        return Err(Error::config(
                            "projection_len",
                            format!(
                                "need 0 < projection_len ≤ history length {}, got {}",
                                self.history_len(),
                                self.projection_len
                            ),
                        ));
                    }
                }
            }
            Variant::Llp => {
                if self.segment_size == 0 || self.segment_size % 2 != 0 {
                    return Err(Error::config(
                        "segment_size",
                        format!("llp segment size must be even, got {}", self.segment_size),
                    ));
                }
                if self.seq_len % self.half_segment() != 0 {
                    return Err(Error::config(
                        "segment_size",
                        format!(
                            "seq_len {} must be divisible by half segment {}",
                            self.seq_len,
                            self.half_segment()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in construction order. The
    /// single source of truth for initialization, counting and tying.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ffn_multiplier * d;
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        specs.push(("embed.weight".into(), vec![self.vocab_size, d]));
        if self.pe_kind == PeKind::LearnedAbsolute {
            specs.push(("pos_embed.weight".into(), vec![self.seq_len, d]));
        }
        if self.variant == Variant::V3 {
            specs.push((
                "history_proj.weight".into(),
                vec![self.projection_len, self.history_len()],
            ));
        }
        let attn_set = |specs: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("{prefix}.{w}"), vec![d, d]));
            }
        };
        for j in 0..self.num_layers {
            let base = format!("layers.{j}");
            specs.push((format!("{base}.norm1.gain"), vec![d]));
            specs.push((format!("{base}.norm1.bias"), vec![d]));
            match self.variant {
                Variant::Full | Variant::Baseline => attn_set(&mut specs, &format!("{base}.attn")),
                Variant::V1 | Variant::V2 | Variant::V3 => {
                    attn_set(&mut specs, &format!("{base}.hist_attn"));
                    attn_set(&mut specs, &format!("{base}.lat_attn"));
                }
                Variant::Llp => {
                    attn_set(&mut specs, &format!("{base}.attn_block"));
                    if self.share_llp_block_weights {
                        attn_set(&mut specs, &format!("{base}.par"));
                    } else {
                        for i in 1..self.num_blocks() {
                            attn_set(&mut specs, &format!("{base}.par{i}"));
                        }
                    }
                }
            }
            specs.push((format!("{base}.norm2.gain"), vec![d]));
            specs.push((format!("{base}.norm2.bias"), vec![d]));
            specs.push((format!("{base}.ffn.w1"), vec![d, f]));
            specs.push((format!("{base}.ffn.b1"), vec![f]));
            specs.push((format!("{base}.ffn.w2"), vec![f, d]));
            specs.push((format!("{base}.ffn.b2"), vec![d]));
        }
        specs.push(("final_norm.gain".into(), vec![d]));
        specs.push(("final_norm.bias".into(), vec![d]));
        specs.push(("classifier.weight".into(), vec![d, self.vocab_size]));
        specs
    }

    /// Total scalar parameter count, without building anything.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }
}

/// Deterministic initialization: weight matrices N(0, 0.02), norm gains 1,
/// all biases 0 and a zero classification head (so a fresh model emits
/// uniform logits).
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape) in cfg.param_specs() {
        let tensor = if name.ends_with(".gain") {
            Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            Tensor::zeros(shape)
        } else if name == "classifier.weight" {
            Tensor::zeros(shape)
        } else {
            normal_tensor(&mut rng, shape, INIT_STD)
        };
        params.insert(name, tensor)?;
    }
    Ok(Model {
        cfg: cfg.clone(),
        params,
    })
}

// ── graph builders ───────────────────────────────────────────────────

struct AttnIds {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

fn attn_ids(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<AttnIds> {
    Ok(AttnIds {
        wq: g.param(store, &format!("{prefix}.wq"))?,
        wk: g.param(store, &format!("{prefix}.wk"))?,
        wv: g.param(store, &format!("{prefix}.wv"))?,
        wo: g.param(store, &format!("{prefix}.wo"))?,
    })
}

type Positions = Arc<Vec<usize>>;

fn positions(range: std::ops::Range<usize>) -> Positions {
    Arc::new(range.collect())
}

/// Multi-head attention on the graph: project, run the fused per-head
/// attention core (with optional rotary rotation of Q/K), apply the output
/// projection.
fn mha(
    g: &mut Graph,
    ids: &AttnIds,
    x_q: NodeId,
    x_kv: NodeId,
    mask: &MaskSpec,
    num_heads: usize,
    rot: Option<(&Positions, &Positions)>,
) -> Result<NodeId> {
    let q = g.matmul(x_q, ids.wq)?;
    let k = g.matmul(x_kv, ids.wk)?;
    let v = g.matmul(x_kv, ids.wv)?;
    let rot = rot.map(|(a, b)| (a.clone(), b.clone()));
    let core = g.attend_heads(q, k, v, mask, num_heads, rot)?;
    g.matmul(core, ids.wo)
}

struct LayerIds {
    n1_gain: NodeId,
    n1_bias: NodeId,
    n2_gain: NodeId,
    n2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

fn layer_ids(g: &mut Graph, store: &ParamStore, j: usize) -> Result<LayerIds> {
    Ok(LayerIds {
        n1_gain: g.param(store, &format!("layers.{j}.norm1.gain"))?,
        n1_bias: g.param(store, &format!("layers.{j}.norm1.bias"))?,
        n2_gain: g.param(store, &format!("layers.{j}.norm2.gain"))?,
        n2_bias: g.param(store, &format!("layers.{j}.norm2.bias"))?,
        w1: g.param(store, &format!("layers.{j}.ffn.w1"))?,
        b1: g.param(store, &format!("layers.{j}.ffn.b1"))?,
        w2: g.param(store, &format!("layers.{j}.ffn.w2"))?,
        b2: g.param(store, &format!("layers.{j}.ffn.b2"))?,
    })
}

/// `y + ffn(norm2(y))` with GELU between the two affine maps.
fn ffn_residual(g: &mut Graph, ids: &LayerIds, y: NodeId) -> Result<NodeId> {
    let normed = g.layer_norm(y, ids.n2_gain, ids.n2_bias)?;
    let h = g.matmul(normed, ids.w1)?;
    let hb = g.add_bias(h, ids.b1)?;
    let act = g.gelu(hb);
    let f = g.matmul(act, ids.w2)?;
    let fb = g.add_bias(f, ids.b2)?;
    g.add(y, fb)
}

/// Per-variant forward over an embedded stream node; returns the final
/// stream ([n×d] for full/v1/v2/llp, [latent×d] for baseline after layer 1,
/// [(p+latent)×d] for v3).
fn build_stream(g: &mut Graph, cfg: &ModelConfig, store: &ParamStore, x_emb: NodeId) -> Result<NodeId> {
    let n = cfg.seq_len;
    let heads = cfg.num_heads;
    let rotary = cfg.pe_kind == PeKind::Rotary;
    let mut x = x_emb;

    match cfg.variant {
        Variant::Full => {
            let mask = causal_mask(n, n, 0)?;
            let pos = positions(0..n);
            for j in 0..cfg.num_layers {
                let lids = layer_ids(g, store, j)?;
                let aids = attn_ids(g, store, &format!("layers.{j}.attn"))?;
                let normed = g.layer_norm(x, lids.n1_gain, lids.n1_bias)?;
                let rot = rotary.then_some((&pos, &pos));
                let attn = mha(g, &aids, normed, normed, &mask, heads, rot)?;
                let y = g.add(x, attn)?;
                x = ffn_residual(g, &lids, y)?;
            }
        }
        Variant::Baseline => {
            let h = cfg.history_len();
            let l = cfg.latent_len;
            let cross_mask = causal_mask(l, n, h)?;
            let latent_mask = causal_mask(l, l, 0)?;
            let lat_pos = positions(h..n);
            let all_pos = positions(0..n);
            for j in 0..cfg.num_layers {
                let lids = layer_ids(g, store, j)?;
                let aids = attn_ids(g, store, &format!("layers.{j}.attn"))?;
                let normed = g.layer_norm(x, lids.n1_gain, lids.n1_bias)?;
                let (attn, residual_in) = if j == 0 {
                    let q_in = g.slice_rows(normed, h, l)?;
                    let rot = rotary.then_some((&lat_pos, &all_pos));
                    let attn = mha(g, &aids, q_in, normed, &cross_mask, heads, rot)?;
                    (attn, g.slice_rows(x, h, l)?)
                } else {
                    let rot = rotary.then_some((&lat_pos, &lat_pos));
                    (mha(g, &aids, normed, normed, &latent_mask, heads, rot)?, x)
                };
                let y = g.add(residual_in, attn)?;
                x = ffn_residual(g, &lids, y)?;
            }
        }
        Variant::V1 | Variant::V2 => {
            let h = cfg.history_len();
            let l = cfg.latent_len;
            let s = if cfg.variant == Variant::V2 {
                cfg.segment_size
            } else {
                h
            };
            let segments = h / s;
            let lat_mask = causal_mask(l, n, h)?;
            let seg_mask = MaskSpec::full(s, s);
            let lat_pos = positions(h..n);
            let all_pos = positions(0..n);
            let seg_pos: Vec<Positions> =
                (0..segments).map(|k| positions(k * s..(k + 1) * s)).collect();
            for j in 0..cfg.num_layers {
                let lids = layer_ids(g, store, j)?;
                let hist_ids = attn_ids(g, store, &format!("layers.{j}.hist_attn"))?;
                let lat_ids = attn_ids(g, store, &format!("layers.{j}.lat_attn"))?;
                let normed = g.layer_norm(x, lids.n1_gain, lids.n1_bias)?;
                // unmasked self-attention within each history segment; the
                // projections are shared, so project the history once and
                // slice per segment
                let hist_in = g.slice_rows(normed, 0, h)?;
                let qf = g.matmul(hist_in, hist_ids.wq)?;
                let kf = g.matmul(hist_in, hist_ids.wk)?;
                let vf = g.matmul(hist_in, hist_ids.wv)?;
                let mut parts = Vec::with_capacity(segments + 1);
                for k in 0..segments {
                    let (qs, ks, vs) = if segments == 1 {
                        (qf, kf, vf)
                    } else {
                        (
                            g.slice_rows(qf, k * s, s)?,
                            g.slice_rows(kf, k * s, s)?,
                            g.slice_rows(vf, k * s, s)?,
                        )
                    };
                    let rot = rotary.then(|| (seg_pos[k].clone(), seg_pos[k].clone()));
                    let core = g.attend_heads(qs, ks, vs, &seg_mask, heads, rot)?;
                    parts.push(core);
                }
                let hist_cat = g.concat_rows(&parts)?;
                let hist_out = g.matmul(hist_cat, hist_ids.wo)?;
                // latent queries over the whole stream
                let q_in = g.slice_rows(normed, h, l)?;
                let rot = rotary.then_some((&lat_pos, &all_pos));
                let lat_out = mha(g, &lat_ids, q_in, normed, &lat_mask, heads, rot)?;
                let attn_stage = g.concat_rows(&[hist_out, lat_out])?;
                let y = g.add(x, attn_stage)?;
                x = ffn_residual(g, &lids, y)?;
            }
        }
        Variant::V3 => {
            let h = cfg.history_len();
            let l = cfg.latent_len;
            let p = cfg.projection_len;
            // layer-1 compression of the history along the sequence dimension
            let proj = g.param(store, "history_proj.weight")?;
            let hist = g.slice_rows(x, 0, h)?;
            let compressed = g.matmul(proj, hist)?;
            let latent = g.slice_rows(x, h, l)?;
            x = g.concat_rows(&[compressed, latent])?;

            let lat_mask = causal_mask(l, p + l, p)?;
            let hist_mask = MaskSpec::full(p, p);
            // compressed rows have no token positions; use stream-local ones
            let hist_pos = positions(0..p);
            let lat_pos = positions(p..p + l);
            let all_pos = positions(0..p + l);
            for j in 0..cfg.num_layers {
                let lids = layer_ids(g, store, j)?;
                let hist_ids = attn_ids(g, store, &format!("layers.{j}.hist_attn"))?;
                let lat_ids = attn_ids(g, store, &format!("layers.{j}.lat_attn"))?;
                let normed = g.layer_norm(x, lids.n1_gain, lids.n1_bias)?;
                let hist_in = g.slice_rows(normed, 0, p)?;
                let rot = rotary.then_some((&hist_pos, &hist_pos));
                let hist_out = mha(g, &hist_ids, hist_in, hist_in, &hist_mask, heads, rot)?;
                let q_in = g.slice_rows(normed, p, l)?;
                let rot = rotary.then_some((&lat_pos, &all_pos));
                let lat_out = mha(g, &lat_ids, q_in, normed, &lat_mask, heads, rot)?;
                let attn_stage = g.concat_rows(&[hist_out, lat_out])?;
                let y = g.add(x, attn_stage)?;
                x = ffn_residual(g, &lids, y)?;
            }
        }
        Variant::Llp => {
            let half = cfg.half_segment();
            let s = cfg.segment_size;
            let blocks = cfg.num_blocks();
            let first_mask = causal_mask(half, half, 0)?;
            let par_mask = causal_mask(half, s, half)?;
            let q_pos: Vec<Positions> = (0..blocks)
                .map(|i| positions(i * half..(i + 1) * half))
                .collect();
            let kv_pos: Vec<Positions> = (1..blocks)
                .map(|i| positions((i - 1) * half..(i + 1) * half))
                .collect();
            for j in 0..cfg.num_layers {
                let lids = layer_ids(g, store, j)?;
                let first_ids = attn_ids(g, store, &format!("layers.{j}.attn_block"))?;
                let normed = g.layer_norm(x, lids.n1_gain, lids.n1_bias)?;
                let mut parts = Vec::with_capacity(2);
                let first_in = g.slice_rows(normed, 0, half)?;
                let rot = rotary.then_some((&q_pos[0], &q_pos[0]));
                parts.push(mha(g, &first_ids, first_in, first_in, &first_mask, heads, rot)?);
                if blocks > 1 && cfg.share_llp_block_weights {
                    // one parameter set across PAR blocks: project the whole
                    // stream once and attend on row slices
                    let par_ids = attn_ids(g, store, &format!("layers.{j}.par"))?;
                    let qf = g.matmul(normed, par_ids.wq)?;
                    let kf = g.matmul(normed, par_ids.wk)?;
                    let vf = g.matmul(normed, par_ids.wv)?;
                    let mut cores = Vec::with_capacity(blocks - 1);
                    for i in 1..blocks {
                        let qb = g.slice_rows(qf, i * half, half)?;
                        let kb = g.slice_rows(kf, (i - 1) * half, s)?;
                        let vb = g.slice_rows(vf, (i - 1) * half, s)?;
                        let rot = rotary.then(|| (q_pos[i].clone(), kv_pos[i - 1].clone()));
                        cores.push(g.attend_heads(qb, kb, vb, &par_mask, heads, rot)?);
                    }
                    let cat = g.concat_rows(&cores)?;
                    parts.push(g.matmul(cat, par_ids.wo)?);
                } else {
                    for i in 1..blocks {
                        let ids = attn_ids(g, store, &format!("layers.{j}.par{i}"))?;
                        let q_in = g.slice_rows(normed, i * half, half)?;
                        let kv_in = g.slice_rows(normed, (i - 1) * half, s)?;
                        let rot = rotary.then_some((&q_pos[i], &kv_pos[i - 1]));
                        parts.push(mha(g, &ids, q_in, kv_in, &par_mask, heads, rot)?);
                    }
                }
                let attn_stage = g.concat_rows(&parts)?;
                let y = g.add(x, attn_stage)?;
                x = ffn_residual(g, &lids, y)?;
            }
        }
    }
    Ok(x)
}

/// Trainable slice of the final stream: latent rows for perceiver-style
/// variants, everything for full/llp.
fn trainable_slice(g: &mut Graph, cfg: &ModelConfig, stream: NodeId) -> Result<NodeId> {
    match cfg.variant {
        Variant::Full | Variant::Llp | Variant::Baseline => Ok(stream),
        Variant::V1 | Variant::V2 => g.slice_rows(stream, cfg.history_len(), cfg.latent_len),
        Variant::V3 => g.slice_rows(stream, cfg.projection_len, cfg.latent_len),
    }
}

fn logits_from_embedding_with(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    x_emb: NodeId,
) -> Result<NodeId> {
    let stream = build_stream(g, cfg, store, x_emb)?;
    let trainable = trainable_slice(g, cfg, stream)?;
    let gain = g.param(store, "final_norm.gain")?;
    let bias = g.param(store, "final_norm.bias")?;
    let normed = g.layer_norm(trainable, gain, bias)?;
    let cls = g.param(store, "classifier.weight")?;
    g.matmul(normed, cls)
}

/// Logits over the trainable region from an already-embedded stream.
pub fn build_logits_from_embedding(
    g: &mut Graph,
    model: &Model,
    x_emb: NodeId,
) -> Result<NodeId> {
    logits_from_embedding_with(g, &model.cfg, &model.params, x_emb)
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<usize>> {
    if tokens.len() != cfg.seq_len {
        return Err(Error::Input(format!(
            "expected {} tokens, got {}",
            cfg.seq_len,
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) >= cfg.vocab_size {
                Err(Error::Input(format!(
                    "token id {t} out of range for vocab {}",
                    cfg.vocab_size
                )))
            } else {
                Ok(t as usize)
            }
        })
        .collect()
}

fn embedding_with(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    tokens: &[u32],
) -> Result<NodeId> {
    let ids = Arc::new(check_tokens(cfg, tokens)?);
    let table = g.param(store, "embed.weight")?;
    let gathered = g.gather_rows(table, ids)?;
    if cfg.pe_kind == PeKind::LearnedAbsolute {
        let pos = g.param(store, "pos_embed.weight")?;
        g.add(gathered, pos)
    } else {
        Ok(gathered)
    }
}

/// Embedding plus positional table node for a token window.
pub fn build_embedding(g: &mut Graph, model: &Model, tokens: &[u32]) -> Result<NodeId> {
    embedding_with(g, &model.cfg, &model.params, tokens)
}

/// Logits over the trainable region for one token window.
pub fn build_logits(g: &mut Graph, model: &Model, tokens: &[u32]) -> Result<NodeId> {
    let emb = build_embedding(g, model, tokens)?;
    build_logits_from_embedding(g, model, emb)
}

/// Scalar next-token cross-entropy over the trainable region for arbitrary
/// (config, parameters) pairs; the form gradient checks probe.
pub fn loss_graph_with(
    cfg: &ModelConfig,
    store: &ParamStore,
    tokens: &[u32],
    targets: &[u32],
) -> Result<(Graph, NodeId)> {
    if targets.len() != cfg.target_len() {
        return Err(Error::Input(format!(
            "expected {} targets, got {}",
            cfg.target_len(),
            targets.len()
        )));
    }
    let mut g = Graph::new();
    let emb = embedding_with(&mut g, cfg, store, tokens)?;
    let logits = logits_from_embedding_with(&mut g, cfg, store, emb)?;
    // for full/llp the final position has no target inside the window
    let scored = match cfg.variant {
        Variant::Full | Variant::Llp => g.slice_rows(logits, 0, cfg.seq_len - 1)?,
        _ => logits,
    };
    let target_ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = g.cross_entropy_mean(scored, Arc::new(target_ids))?;
    Ok((g, loss))
}

/// Scalar next-token cross-entropy over the trainable region.
pub fn loss_graph(model: &Model, tokens: &[u32], targets: &[u32]) -> Result<(Graph, NodeId)> {
    loss_graph_with(&model.cfg, &model.params, tokens, targets)
}

// ── value-level entry points ─────────────────────────────────────────

/// Embedding + positional encoding as a plain tensor (no graph).
pub fn embed_tokens(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    let ids = check_tokens(&model.cfg, tokens)?;
    let table = model.params.value("embed.weight")?;
    let d = model.cfg.d_model;
    let mut out = Tensor::zeros(vec![ids.len(), d]);
    for (r, &id) in ids.iter().enumerate() {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(table.row(id));
    }
    if model.cfg.pe_kind == PeKind::LearnedAbsolute {
        let pos = model.params.value("pos_embed.weight")?;
        for (o, p) in out.data_mut().iter_mut().zip(pos.data()) {
            *o += p;
        }
    }
    Ok(out)
}

fn require_variant(model: &Model, v: Variant, op: &'static str) -> Result<()> {
    if model.cfg.variant != v {
        return Err(Error::config(
            "variant",
            format!("{op} requires the {v} variant, model is {}", model.cfg.variant),
        ));
    }
    Ok(())
}

fn run_stream(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_emb.clone());
    let out = build_stream(&mut g, &model.cfg, &model.params, x)?;
    Ok(g.value(out).clone())
}

/// Baseline forward from embeddings: `[latent×d]` output.
pub fn forward_baseline(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    require_variant(model, Variant::Baseline, "forward_baseline")?;
    run_stream(model, x_emb)
}

/// V1 forward from embeddings: `[n×d]` output every layer.
pub fn forward_v1(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    require_variant(model, Variant::V1, "forward_v1")?;
    run_stream(model, x_emb)
}

/// V2 forward from embeddings: `[n×d]` output, segmented history attention.
pub fn forward_v2(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    require_variant(model, Variant::V2, "forward_v2")?;
    run_stream(model, x_emb)
}

/// V3 forward from embeddings: `[(p+latent)×d]` output.
pub fn forward_v3(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    require_variant(model, Variant::V3, "forward_v3")?;
    run_stream(model, x_emb)
}

/// LLP forward from embeddings: `[n×d]` output.
pub fn forward_llp(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    require_variant(model, Variant::Llp, "forward_llp")?;
    run_stream(model, x_emb)
}

/// Full forward pass: tokens to logits over the trainable region.
pub fn forward(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    let mut g = Graph::new();
    let logits = build_logits(&mut g, model, tokens)?;
    Ok(g.value(logits).clone())
}

/// Logits from a raw embedded stream; the entry point for sensitivity
/// probes that perturb the embedding directly.
pub fn forward_from_embedding(model: &Model, x_emb: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_emb.clone());
    let logits = build_logits_from_embedding(&mut g, model, x)?;
    Ok(g.value(logits).clone())
}
