//! Shared attention primitives: masked row softmax, scaled dot-product
//! attention, multi-head split/concat with output projection, rotary
//! rotation, layer norm, GELU and the pre-norm sublayer wiring.
//!
//! Everything here is a pure function over tensors; the differentiable
//! versions of the same kernels live in [`crate::graph`].

use crate::error::{Error, Result};
use crate::fastmath::{fast_exp, fast_tanh};
use crate::mask::MaskSpec;
use crate::tensor::{matmul, matmul_nt, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROTARY_BASE: f64 = 10_000.0;

/// Positional encoding kind. Learned-absolute is applied once at the
/// embedding; rotary is applied to Q and K inside each attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    LearnedAbsolute,
    Rotary,
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeKind::LearnedAbsolute => write!(f, "learned-absolute"),
            PeKind::Rotary => write!(f, "rotary"),
        }
    }
}

impl std::str::FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned-absolute" | "learned" => Ok(PeKind::LearnedAbsolute),
            "rotary" => Ok(PeKind::Rotary),
            other => Err(Error::config(
                "pe_kind",
                format!("unknown positional encoding `{other}`"),
            )),
        }
    }
}

/// Projection weights for one multi-head attention unit.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn head_dim(&self) -> Result<usize> {
        let (d, d2) = self.w_q.dims2()?;
        if d != d2 {
            return Err(Error::InvalidShape {
                op: "AttentionParams",
                msg: format!("w_q must be square, got {:?}", self.w_q.shape()),
            });
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("d_model {d} not divisible by num_heads {}", self.num_heads),
            ));
        }
        Ok(d / self.num_heads)
    }
}

// ── kernels shared with the graph ops ────────────────────────────────

/// Row softmax over the allowed entries only; disallowed entries get exact
/// zero weight. Errors on a fully masked row rather than going uniform.
pub fn masked_softmax_rows(logits: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let (m, k) = logits.dims2()?;
    if mask.rows() != m || mask.cols() != k {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax_rows",
            left: logits.shape().to_vec(),
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let mut out = logits.clone();
    softmax_rows_inplace(out.data_mut(), m, k, mask)?;
    Ok(out)
}

/// In-place masked row softmax over a [rows×cols] buffer.
pub(crate) fn softmax_rows_inplace(
    data: &mut [f64],
    rows: usize,
    cols: usize,
    mask: &MaskSpec,
) -> Result<()> {
    debug_assert_eq!(data.len(), rows * cols);
    if let Some(prefix) = mask.prefix_lens() {
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let len = prefix[i];
            let (head, tail) = row.split_at_mut(len);
            let mut mx = f64::NEG_INFINITY;
            for &v in head.iter() {
                mx = mx.max(v);
            }
            crate::fastmath::exp_shift_inplace(head, mx);
            let sum: f64 = head.iter().sum();
            let inv = 1.0 / sum;
            for v in head.iter_mut() {
                *v *= inv;
            }
            tail.fill(0.0);
        }
        return Ok(());
    }
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let allow = mask.row(i);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            if allow[j] && row[j] > mx {
                mx = row[j];
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::Mask(format!("fully masked row {i} in softmax")));
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if allow[j] {
                let e = fast_exp(row[j] - mx);
                row[j] = e;
                sum += e;
            } else {
                row[j] = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// In-place gradient of the masked softmax: given probabilities `p` and
/// upstream `dp`, the logit gradient per row is `p ∘ (dp − Σ dp∘p)`.
/// Masked entries carry p = 0 and therefore zero gradient.
pub(crate) fn softmax_rows_backward(probs: &Tensor, dprobs: &[f64], dlogits: &mut [f64]) {
    let (m, k) = probs.dims2().expect("probs is 2-D");
    for i in 0..m {
        let p = probs.row(i);
        let dp = &dprobs[i * k..(i + 1) * k];
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let dl = &mut dlogits[i * k..(i + 1) * k];
        for j in 0..k {
            dl[j] += p[j] * (dp[j] - dot);
        }
    }
}

/// Softmax gradient written over the upstream buffer: dp ← p ∘ (dp − Σ dp∘p).
pub(crate) fn softmax_rows_backward_inplace(probs: &Tensor, dprobs: &mut [f64]) {
    let (m, k) = probs.dims2().expect("probs is 2-D");
    for i in 0..m {
        let p = probs.row(i);
        let dp = &mut dprobs[i * k..(i + 1) * k];
        let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for j in 0..k {
            dp[j] = p[j] * (dp[j] - dot);
        }
    }
}

/// Per-row layer norm with learned gain/bias over the feature dimension.
pub fn layer_norm_rows(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::InvalidShape {
            op: "layer_norm_rows",
            msg: format!("gain/bias length must be {d}"),
        });
    }
    let mut out = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// GELU, tanh form.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

/// Rotate feature pairs (2u, 2u+1) of each row by its position angle.
/// `forward = false` applies the inverse rotation (the backward pass).
pub(crate) fn rotary_rotate(data: &mut [f64], cols: usize, positions: &[usize], forward: bool) {
    debug_assert_eq!(cols % 2, 0, "rotary needs an even feature count");
    let half_pairs = cols / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * cols..(r + 1) * cols];
        for u in 0..half_pairs {
            let theta = (pos as f64) * ROTARY_BASE.powf(-(2.0 * u as f64) / cols as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[2 * u], row[2 * u + 1]);
            if forward {
                row[2 * u] = a * cos - b * sin;
                row[2 * u + 1] = a * sin + b * cos;
            } else {
                row[2 * u] = a * cos + b * sin;
                row[2 * u + 1] = -a * sin + b * cos;
            }
        }
    }
}

// ── value-level attention ops ────────────────────────────────────────

/// softmax(q·kᵀ/√d_k, mask) · v
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &MaskSpec,
) -> Result<Tensor> {
    let (m, dk) = q.dims2()?;
    let (t, dk2) = k.dims2()?;
    let (t2, dv) = v.dims2()?;
    if dk != dk2 || t != t2 || dk != dv {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if mask.rows() != m || mask.cols() != t {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention(mask)",
            left: vec![m, t],
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let mut scores = matmul_nt(q, k)?;
    let scale = 1.0 / (dk as f64).sqrt();
    for s in scores.data_mut() {
        *s *= scale;
    }
    let probs = masked_softmax_rows(&scores, mask)?;
    matmul(&probs, v)
}

/// Multi-head attention: project, split features into heads, rotate Q/K when
/// the encoding is rotary, attend per head under the shared mask, concatenate
/// and apply the output projection.
///
/// `q_positions`/`kv_positions` are the absolute positions of the query and
/// key/value rows; they only matter for `PeKind::Rotary`.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    mask: &MaskSpec,
    pe: PeKind,
    q_positions: &[usize],
    kv_positions: &[usize],
) -> Result<Tensor> {
    let (m, d) = x_q.dims2()?;
    let (t, d2) = x_kv.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: x_q.shape().to_vec(),
            right: x_kv.shape().to_vec(),
        });
    }
    if q_positions.len() != m || kv_positions.len() != t {
        return Err(Error::Input(format!(
            "position lists must match row counts ({m} queries, {t} keys)"
        )));
    }
    let hd = params.head_dim()?;
    if pe == PeKind::Rotary && hd % 2 != 0 {
        return Err(Error::config("num_heads", "rotary needs an even head_dim"));
    }
    let q = matmul(x_q, &params.w_q)?;
    let k = matmul(x_kv, &params.w_k)?;
    let v = matmul(x_kv, &params.w_v)?;

    let slice_head = |src: &Tensor, rows: usize, h: usize| -> Tensor {
        let mut out = Tensor::zeros(vec![rows, hd]);
        for r in 0..rows {
            out.data_mut()[r * hd..(r + 1) * hd]
                .copy_from_slice(&src.row(r)[h * hd..(h + 1) * hd]);
        }
        out
    };

    let mut cat = Tensor::zeros(vec![m, d]);
    for h in 0..params.num_heads {
        let mut qh = slice_head(&q, m, h);
        let mut kh = slice_head(&k, t, h);
        let vh = slice_head(&v, t, h);
        if pe == PeKind::Rotary {
            rotary_rotate(qh.data_mut(), hd, q_positions, true);
            rotary_rotate(kh.data_mut(), hd, kv_positions, true);
        }
        let head_out = scaled_dot_attention(&qh, &kh, &vh, mask)?;
        for r in 0..m {
            cat.data_mut()[r * d + h * hd..r * d + (h + 1) * hd]
                .copy_from_slice(head_out.row(r));
        }
    }
    matmul(&cat, &params.w_o)
}

// ── pre-norm sublayer wiring ─────────────────────────────────────────

/// Feed-forward weights plus the norm applied before them.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

/// Residual wiring around an already-computed attention output:
/// `y = x + attn_out; out = y + ffn(norm(y))` where the caller computed
/// `attn_out` on its own pre-normed input.
pub fn transformer_sublayers(x: &Tensor, attn_out: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if x.shape() != attn_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "transformer_sublayers",
            left: x.shape().to_vec(),
            right: attn_out.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(vec![m, d]);
    for (o, (a, b)) in y
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(attn_out.data()))
    {
        *o = a + b;
    }
    let normed = layer_norm_rows(&y, &ffn.norm_gain, &ffn.norm_bias)?;
    let mut hidden = matmul(&normed, &ffn.w1)?;
    let hcols = hidden.dims2()?.1;
    if ffn.b1.len() != hcols || ffn.w2.dims2()?.1 != d || ffn.b2.len() != d {
        return Err(Error::InvalidShape {
            op: "transformer_sublayers",
            msg: "ffn weight shapes do not match d_model".into(),
        });
    }
    for r in 0..m {
        let row = &mut hidden.data_mut()[r * hcols..(r + 1) * hcols];
        for j in 0..hcols {
            row[j] = gelu(row[j] + ffn.b1[j]);
        }
    }
    let mut out = matmul(&hidden, &ffn.w2)?;
    for r in 0..m {
        for j in 0..d {
            let idx = r * d + j;
            out.data_mut()[idx] += ffn.b2[j] + y.data()[idx];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::causal_mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_uniform_when_equal() {
        let logits = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let out = masked_softmax_rows(&logits, &MaskSpec::full(1, 3)).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_allowed_column() {
        let logits = Tensor::new(vec![1, 3], vec![5.0, 9.0, 2.0]).unwrap();
        let mask = MaskSpec::new(1, 3, vec![true, false, false]).unwrap();
        let out = masked_softmax_rows(&logits, &mask).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_arithmetic() {
        // 4x4 with two masked entries per the middle rows
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rnd(&mut rng, 4, 4);
        let mut allowed = vec![true; 16];
        allowed[1 * 4 + 2] = false;
        allowed[1 * 4 + 3] = false;
        let mask = MaskSpec::new(4, 4, allowed).unwrap();
        let out = masked_softmax_rows(&logits, &mask).unwrap();
        // oracle: explicit exp/sum over allowed entries, no max shift
        for i in 0..4 {
            let row = logits.row(i);
            let sum: f64 = (0..4)
                .filter(|&j| mask.allowed(i, j))
                .map(|j| row[j].exp())
                .sum();
            for j in 0..4 {
                let expect = if mask.allowed(i, j) {
                    row[j].exp() / sum
                } else {
                    0.0
                };
                assert!((out.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_mean_over_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rnd(&mut rng, 3, 4);
        let key_row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = Tensor::new(vec![5, 4], key_row.repeat(5)).unwrap();
        let v = rnd(&mut rng, 5, 4);
        let out = scaled_dot_attention(&q, &k, &v, &MaskSpec::full(3, 5)).unwrap();
        let mean: Vec<f64> = (0..4)
            .map(|j| (0..5).map(|i| v.at2(i, j)).sum::<f64>() / 5.0)
            .collect();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at2(i, j) - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_column_mask_returns_first_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rnd(&mut rng, 3, 4);
        let k = rnd(&mut rng, 5, 4);
        let v = rnd(&mut rng, 5, 4);
        let allowed: Vec<bool> = (0..15).map(|idx| idx % 5 == 0).collect();
        let mask = MaskSpec::new(3, 5, allowed).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at2(i, j) - v.at2(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, t, dk) = (4, 4, 8);
        let q = rnd(&mut rng, m, dk);
        let k = rnd(&mut rng, t, dk);
        let v = rnd(&mut rng, t, dk);
        let mask = causal_mask(m, t, 0).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        // naive per-element oracle
        let scale = 1.0 / (dk as f64).sqrt();
        for i in 0..m {
            let mut weights = vec![0.0; t];
            let mut sum = 0.0;
            for j in 0..t {
                if mask.allowed(i, j) {
                    let mut dot = 0.0;
                    for p in 0..dk {
                        dot += q.at2(i, p) * k.at2(j, p);
                    }
                    weights[j] = (dot * scale).exp();
                    sum += weights[j];
                }
            }
            for j in 0..t {
                weights[j] /= sum;
            }
            for c in 0..dk {
                let mut expect = 0.0;
                for j in 0..t {
                    expect += weights[j] * v.at2(j, c);
                }
                assert!((out.at2(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_reduces_to_scaled_dot_plus_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 6;
        let x = rnd(&mut rng, 4, d);
        let params = AttentionParams {
            w_q: rnd(&mut rng, d, d),
            w_k: rnd(&mut rng, d, d),
            w_v: rnd(&mut rng, d, d),
            w_o: rnd(&mut rng, d, d),
            num_heads: 1,
        };
        let mask = causal_mask(4, 4, 0).unwrap();
        let pos: Vec<usize> = (0..4).collect();
        let got = multi_head_attention(
            &x,
            &x,
            &params,
            &mask,
            PeKind::LearnedAbsolute,
            &pos,
            &pos,
        )
        .unwrap();
        let q = matmul(&x, &params.w_q).unwrap();
        let k = matmul(&x, &params.w_k).unwrap();
        let v = matmul(&x, &params.w_v).unwrap();
        let expect = matmul(&scaled_dot_attention(&q, &k, &v, &mask).unwrap(), &params.w_o)
            .unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identity_output_projection_concatenates_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 8;
        let x = rnd(&mut rng, 5, d);
        let params = AttentionParams {
            w_q: rnd(&mut rng, d, d),
            w_k: rnd(&mut rng, d, d),
            w_v: rnd(&mut rng, d, d),
            w_o: Tensor::eye(d),
            num_heads: 2,
        };
        let mask = MaskSpec::full(5, 5);
        let pos: Vec<usize> = (0..5).collect();
        let got = multi_head_attention(
            &x,
            &x,
            &params,
            &mask,
            PeKind::LearnedAbsolute,
            &pos,
            &pos,
        )
        .unwrap();

        // each head independently: slice the projections by feature range
        let q = matmul(&x, &params.w_q).unwrap();
        let k = matmul(&x, &params.w_k).unwrap();
        let v = matmul(&x, &params.w_v).unwrap();
        let hd = d / 2;
        for h in 0..2 {
            let slice = |t: &Tensor| -> Tensor {
                let rows = t.dims2().unwrap().0;
                let mut out = Tensor::zeros(vec![rows, hd]);
                for r in 0..rows {
                    out.data_mut()[r * hd..(r + 1) * hd]
                        .copy_from_slice(&t.row(r)[h * hd..(h + 1) * hd]);
                }
                out
            };
            let head = scaled_dot_attention(&slice(&q), &slice(&k), &slice(&v), &mask).unwrap();
            for r in 0..5 {
                for c in 0..hd {
                    assert!((got.at2(r, h * hd + c) - head.at2(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotary_logits_depend_on_relative_offsets_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let m = 5;
        let x = rnd(&mut rng, m, d);
        let params = AttentionParams {
            w_q: rnd(&mut rng, d, d),
            w_k: rnd(&mut rng, d, d),
            w_v: rnd(&mut rng, d, d),
            w_o: rnd(&mut rng, d, d),
            num_heads: 2,
        };
        let mask = causal_mask(m, m, 0).unwrap();
        let base: Vec<usize> = (0..m).collect();
        let shifted: Vec<usize> = (0..m).map(|p| p + 37).collect();
        let a =
            multi_head_attention(&x, &x, &params, &mask, PeKind::Rotary, &base, &base).unwrap();
        let b = multi_head_attention(&x, &x, &params, &mask, PeKind::Rotary, &shifted, &shifted)
            .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn rotary_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cols = 8;
        let t = rnd(&mut rng, 3, cols);
        let mut rotated = t.clone();
        rotary_rotate(rotated.data_mut(), cols, &[3, 17, 100], true);
        for r in 0..3 {
            for u in 0..cols / 2 {
                let n0 = t.at2(r, 2 * u).hypot(t.at2(r, 2 * u + 1));
                let n1 = rotated.at2(r, 2 * u).hypot(rotated.at2(r, 2 * u + 1));
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_weights_are_exactly_zero_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rnd(&mut rng, 6, 9);
        let mask = causal_mask(6, 9, 3).unwrap();
        let probs = masked_softmax_rows(&logits, &mask).unwrap();
        for i in 0..6 {
            let mut sum = 0.0;
            for j in 0..9 {
                if !mask.allowed(i, j) {
                    assert_eq!(probs.at2(i, j), 0.0);
                }
                sum += probs.at2(i, j);
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kv_perturbation_respects_mask() {
        // Causality at token level: perturbing key j moves output row i only
        // where allowed[i][j].
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 8;
        let m = 6;
        let x = rnd(&mut rng, m, d);
        let params = AttentionParams {
            w_q: rnd(&mut rng, d, d),
            w_k: rnd(&mut rng, d, d),
            w_v: rnd(&mut rng, d, d),
            w_o: rnd(&mut rng, d, d),
            num_heads: 2,
        };
        let mask = causal_mask(m, m, 0).unwrap();
        let pos: Vec<usize> = (0..m).collect();
        let base = multi_head_attention(
            &x,
            &x,
            &params,
            &mask,
            PeKind::LearnedAbsolute,
            &pos,
            &pos,
        )
        .unwrap();
        for j in 0..m {
            let mut xp = x.clone();
            xp.data_mut()[j * d] += 1.0;
            // query side fixed at x so only the K/V path is probed
            let got = multi_head_attention(
                &x,
                &xp,
                &params,
                &mask,
                PeKind::LearnedAbsolute,
                &pos,
                &pos,
            )
            .unwrap();
            for i in 0..m {
                let delta: f64 = (0..d)
                    .map(|c| (got.at2(i, c) - base.at2(i, c)).abs())
                    .fold(0.0, f64::max);
                if mask.allowed(i, j) {
                    assert!(delta > 1e-12, "row {i} should see key {j}");
                } else {
                    assert!(delta <= 1e-12, "row {i} must not see key {j}");
                }
            }
        }
    }

    #[test]
    fn sublayer_identity_when_attention_and_ffn_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 6;
        let x = rnd(&mut rng, 4, d);
        let ffn = FfnParams {
            norm_gain: vec![1.0; d],
            norm_bias: vec![0.0; d],
            w1: Tensor::zeros(vec![d, 4 * d]),
            b1: vec![0.0; 4 * d],
            w2: Tensor::zeros(vec![4 * d, d]),
            b2: vec![0.0; d],
        };
        let out = transformer_sublayers(&x, &Tensor::zeros(vec![4, d]), &ffn).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_row_is_finite() {
        let x = Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap();
        let out = layer_norm_rows(&x, &[1.0; 4], &[0.5; 4]).unwrap();
        assert!(out.all_finite());
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-12); // x̂ = 0, so output = bias
        }
    }

    #[test]
    fn head_count_invariance_of_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = 12;
        let x = rnd(&mut rng, 5, d);
        let pos: Vec<usize> = (0..5).collect();
        for heads in [1, 2, 3, 4, 6] {
            let params = AttentionParams {
                w_q: rnd(&mut rng, d, d),
                w_k: rnd(&mut rng, d, d),
                w_v: rnd(&mut rng, d, d),
                w_o: rnd(&mut rng, d, d),
                num_heads: heads,
            };
            let out = multi_head_attention(
                &x,
                &x,
                &params,
                &MaskSpec::full(5, 5),
                PeKind::LearnedAbsolute,
                &pos,
                &pos,
            )
            .unwrap();
            assert_eq!(out.shape(), &[5, d]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn softmax_shift_invariance(seed in 0u64..500, shift in -5.0f64..5.0) {
            // adding a constant to all allowed logits of a row leaves the
            // weights unchanged
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = rnd(&mut rng, 3, 5);
            let mask = causal_mask(3, 5, 2).unwrap();
            let base = masked_softmax_rows(&logits, &mask).unwrap();
            let mut shifted = logits.clone();
            for i in 0..3 {
                for j in 0..5 {
                    if mask.allowed(i, j) {
                        shifted.data_mut()[i * 5 + j] += shift;
                    }
                }
            }
            let moved = masked_softmax_rows(&shifted, &mask).unwrap();
            prop_assert!(base.max_abs_diff(&moved) < 1e-12);
        }
    }
}
