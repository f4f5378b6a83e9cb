//! Receptive-field analysis: a symbolic recurrence for how information
//! propagates across llp half-segment blocks layer by layer, an empirical
//! sensitivity probe that perturbs one embedding row and watches the logits,
//! and a verifier that checks the two against each other.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{build_model, embed_tokens, forward_from_embedding, Model, ModelConfig, Variant};
use crate::tensor::Tensor;

/// Probe threshold: any logit moving by more than this counts as sensitive.
/// Forward passes are exact recomputations, so the unperturbed positions are
/// bit-identical and false positives cannot occur.
pub const SENSITIVITY_THRESHOLD: f64 = 1e-12;

/// Probe-harness weight scale. Matrices are redrawn at N(0, 1/√d) so a unit
/// perturbation survives `num_blocks` attention hops above the threshold.
pub fn probe_weight_std(d_model: usize) -> f64 {
    1.0 / (d_model as f64).sqrt()
}

/// Per-(layer, block) set of input half-segments whose information is
/// reachable. Layers are 1-based: layer 1 is the pattern after one
/// attention layer.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ReachabilityMap {
    pub layers: usize,
    pub num_blocks: usize,
    /// reach[layer-1][block]
    pub reach: Vec<Vec<BTreeSet<usize>>>,
}

impl ReachabilityMap {
    pub fn reach(&self, layer: usize, block: usize) -> &BTreeSet<usize> {
        &self.reach[layer - 1][block]
    }
}

/// Recurrence: after one layer a block sees itself and its predecessor;
/// each further layer unions in what the predecessor saw one layer earlier.
/// Closed form: `reach(j, i) = {max(0, i−j) .. i}`.
pub fn symbolic_reach(num_blocks: usize, layers: usize) -> ReachabilityMap {
    assert!(num_blocks >= 1 && layers >= 1);
    let mut reach: Vec<Vec<BTreeSet<usize>>> = Vec::with_capacity(layers);
    let first: Vec<BTreeSet<usize>> = (0..num_blocks)
        .map(|i| [i.saturating_sub(1), i].into_iter().collect())
        .collect();
    reach.push(first);
    for j in 1..layers {
        let prev = &reach[j - 1];
        let next: Vec<BTreeSet<usize>> = (0..num_blocks)
            .map(|i| {
                let mut set = prev[i].clone();
                set.extend(prev[i.saturating_sub(1)].iter().copied());
                set
            })
            .collect();
        reach.push(next);
    }
    ReachabilityMap {
        layers,
        num_blocks,
        reach,
    }
}

/// The closed form `{max(0, i−j) .. i}` for cross-checking the recurrence.
pub fn closed_form_reach(layer: usize, block: usize) -> BTreeSet<usize> {
    (block.saturating_sub(layer)..=block).collect()
}

/// Sensitivity of every trainable logit row to a unit perturbation of the
/// embedding at `probe_position` (added to feature 0 of that row; a
/// constant-vector probe would be cancelled by the first layer norm).
/// Returns one boolean per logit row.
pub fn empirical_sensitivity(
    model: &Model,
    tokens: &[u32],
    probe_position: usize,
) -> Result<Vec<bool>> {
    if probe_position >= model.cfg.seq_len {
        return Err(Error::Input(format!(
            "probe position {probe_position} out of range for seq_len {}",
            model.cfg.seq_len
        )));
    }
    let base_emb = embed_tokens(model, tokens)?;
    let base = forward_from_embedding(model, &base_emb)?;
    let mut perturbed = base_emb.clone();
    perturbed.data_mut()[probe_position * model.cfg.d_model] += 1.0;
    let probe = forward_from_embedding(model, &perturbed)?;
    Ok(row_changes(&base, &probe))
}

fn row_changes(base: &Tensor, probe: &Tensor) -> Vec<bool> {
    let (rows, cols) = base.dims2().expect("logits are 2-D");
    (0..rows)
        .map(|r| {
            (0..cols).any(|c| (base.at2(r, c) - probe.at2(r, c)).abs() > SENSITIVITY_THRESHOLD)
        })
        .collect()
}

/// Full boolean sensitivity matrix `[logit_rows × n]`: one probe per input
/// position. The base forward is computed once.
pub fn sensitivity_matrix(model: &Model, tokens: &[u32]) -> Result<Vec<Vec<bool>>> {
    let n = model.cfg.seq_len;
    let base_emb = embed_tokens(model, tokens)?;
    let base = forward_from_embedding(model, &base_emb)?;
    let rows = base.dims2()?.0;
    let mut matrix = vec![vec![false; n]; rows];
    for pos in 0..n {
        let mut perturbed = base_emb.clone();
        perturbed.data_mut()[pos * model.cfg.d_model] += 1.0;
        let probe = forward_from_embedding(model, &perturbed)?;
        for (r, changed) in row_changes(&base, &probe).into_iter().enumerate() {
            matrix[r][pos] = changed;
        }
    }
    Ok(matrix)
}

/// One layer's verification outcome inside a propagation report.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerCoverage {
    pub layers: usize,
    /// Observed reachable input blocks per output block.
    pub observed: Vec<BTreeSet<usize>>,
    /// Closed-form prediction per output block.
    pub expected: Vec<BTreeSet<usize>>,
    pub matches: bool,
    /// Whether the last block reaches every input block at this depth.
    pub full_coverage: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct PropagationReport {
    pub num_blocks: usize,
    pub half_segment: usize,
    pub per_layer: Vec<LayerCoverage>,
    /// Smallest layer count at which the last block covers all inputs, if
    /// reached within the configured depth.
    pub first_full_coverage: Option<usize>,
    pub pass: bool,
}

impl PropagationReport {
    /// Figs-style text grid: one block-level visibility grid per layer
    /// count, `#` where information is reachable.
    pub fn text_grid(&self) -> String {
        let mut out = String::new();
        for layer in &self.per_layer {
            out.push_str(&format!("after {} layer(s):\n", layer.layers));
            for (i, set) in layer.observed.iter().enumerate() {
                let row: String = (0..self.num_blocks)
                    .map(|b| if set.contains(&b) { '#' } else { '.' })
                    .collect();
                out.push_str(&format!("  block {i:>2} {row}\n"));
            }
        }
        out
    }
}

/// Verify the propagation claim empirically for an llp configuration: build
/// a model per layer count 1..=num_layers (probe-scaled weights), probe the
/// first token of every block, reduce the sensitivity to block granularity
/// and compare against the closed form.
pub fn verify_propagation(cfg: &ModelConfig, seed: u64) -> Result<PropagationReport> {
    if cfg.variant != Variant::Llp {
        return Err(Error::config(
            "variant",
            format!("verify_propagation supports llp only, got {}", cfg.variant),
        ));
    }
    cfg.validate()?;
    let half = cfg.half_segment();
    let blocks = cfg.num_blocks();
    let tokens: Vec<u32> = deterministic_tokens(cfg, seed);

    let mut per_layer = Vec::with_capacity(cfg.num_layers);
    let mut first_full = None;
    for layers in 1..=cfg.num_layers {
        let mut sub_cfg = cfg.clone();
        sub_cfg.num_layers = layers;
        let mut model = build_model(&sub_cfg, seed)?;
        model
            .params
            .randomize_matrices(seed ^ 0x9e37_79b9, probe_weight_std(cfg.d_model));

        let mut observed: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); blocks];
        for b in 0..blocks {
            let col = empirical_sensitivity(&model, &tokens, b * half)?;
            for i in 0..blocks {
                if col[i * half..(i + 1) * half].iter().any(|&c| c) {
                    observed[i].insert(b);
                }
            }
        }
        let expected: Vec<BTreeSet<usize>> =
            (0..blocks).map(|i| closed_form_reach(layers, i)).collect();
        let matches = observed == expected;
        let full_coverage = observed[blocks - 1].len() == blocks;
        if full_coverage && first_full.is_none() {
            first_full = Some(layers);
        }
        per_layer.push(LayerCoverage {
            layers,
            observed,
            expected,
            matches,
            full_coverage,
        });
    }
    let pass = per_layer.iter().all(|l| l.matches);
    Ok(PropagationReport {
        num_blocks: blocks,
        half_segment: half,
        per_layer,
        first_full_coverage: first_full,
        pass,
    })
}

fn deterministic_tokens(cfg: &ModelConfig, seed: u64) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    (0..cfg.seq_len)
        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PeKind;
    use proptest::prelude::*;

    #[test]
    fn chain_example_block_four_after_three_layers() {
        let map = symbolic_reach(8, 3);
        let expect: BTreeSet<usize> = [1, 2, 3, 4].into_iter().collect();
        assert_eq!(map.reach(3, 4), &expect);
    }

    #[test]
    fn deep_enough_layers_reach_everything() {
        let map = symbolic_reach(6, 6);
        for i in 0..6 {
            let expect: BTreeSet<usize> = (0..=i).collect();
            assert_eq!(map.reach(i.max(1), i), &expect, "block {i} at layer {i}");
        }
    }

    #[test]
    fn block_zero_only_ever_sees_itself() {
        let map = symbolic_reach(5, 7);
        for j in 1..=7 {
            assert_eq!(map.reach(j, 0), &BTreeSet::from([0]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recurrence_matches_closed_form_and_is_monotone(blocks in 1usize..10, layers in 1usize..10) {
            let map = symbolic_reach(blocks, layers);
            for j in 1..=layers {
                for i in 0..blocks {
                    prop_assert_eq!(map.reach(j, i), &closed_form_reach(j, i));
                    prop_assert!(map.reach(j, i).iter().all(|&b| b <= i));
                    if j > 1 {
                        prop_assert!(map.reach(j - 1, i).is_subset(map.reach(j, i)));
                    }
                }
            }
        }
    }

    fn probe_model(variant: Variant, layers: usize) -> (Model, Vec<u32>) {
        let cfg = ModelConfig {
            variant,
            seq_len: 32,
            latent_len: 16,
            segment_size: if variant == Variant::Llp { 16 } else { 8 },
            projection_len: 8,
            d_model: 16,
            num_heads: 2,
            num_layers: layers,
            vocab_size: 31,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        };
        let mut model = build_model(&cfg, 3).unwrap();
        model
            .params
            .randomize_matrices(4, probe_weight_std(cfg.d_model));
        let tokens = deterministic_tokens(&cfg, 5);
        (model, tokens)
    }

    #[test]
    fn full_attention_sensitivity_is_lower_triangular() {
        let (model, tokens) = probe_model(Variant::Full, 2);
        let matrix = sensitivity_matrix(&model, &tokens).unwrap();
        for (t, row) in matrix.iter().enumerate() {
            for (tp, &sensitive) in row.iter().enumerate() {
                assert_eq!(sensitive, tp <= t, "output {t} vs probe {tp}");
            }
        }
    }

    #[test]
    fn llp_one_layer_matches_symbolic_reach_with_causality() {
        let (model, tokens) = probe_model(Variant::Llp, 1);
        let half = model.cfg.half_segment();
        let blocks = model.cfg.num_blocks();
        let matrix = sensitivity_matrix(&model, &tokens).unwrap();
        let reach = symbolic_reach(blocks, 1);
        for t in 0..model.cfg.seq_len {
            for tp in 0..model.cfg.seq_len {
                let expected = reach.reach(1, t / half).contains(&(tp / half)) && tp <= t;
                assert_eq!(matrix[t][tp], expected, "output {t} vs probe {tp}");
            }
        }
    }

    #[test]
    fn llp_with_enough_layers_covers_full_lower_triangle() {
        // mirrors the no-information-loss claim: depth ≥ blocks−1 makes the
        // token-level sensitivity exactly causal
        let (model, tokens) = probe_model(Variant::Llp, 4);
        assert!(model.cfg.num_layers >= model.cfg.num_blocks() - 1);
        let matrix = sensitivity_matrix(&model, &tokens).unwrap();
        for (t, row) in matrix.iter().enumerate() {
            for (tp, &sensitive) in row.iter().enumerate() {
                assert_eq!(sensitive, tp <= t, "output {t} vs probe {tp}");
            }
        }
    }

    #[test]
    fn verify_propagation_tiny_full_coverage() {
        let cfg = ModelConfig {
            variant: Variant::Llp,
            seq_len: 64,
            latent_len: 32,
            segment_size: 32,
            projection_len: 8,
            d_model: 16,
            num_heads: 2,
            num_layers: 4,
            vocab_size: 31,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        };
        // 4 blocks; full coverage of the last block needs 3 layers
        let report = verify_propagation(&cfg, 0).unwrap();
        assert!(report.pass);
        assert_eq!(report.first_full_coverage, Some(3));
        assert!(report.text_grid().contains("after 1 layer"));
    }

    #[test]
    fn verify_propagation_partial_when_shallow() {
        let cfg = ModelConfig {
            variant: Variant::Llp,
            seq_len: 64,
            latent_len: 32,
            segment_size: 16,
            projection_len: 8,
            d_model: 16,
            num_heads: 2,
            num_layers: 2,
            vocab_size: 31,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        };
        // 8 blocks, only 2 layers: block 7 sees {5,6,7}; expected-partial
        let report = verify_propagation(&cfg, 0).unwrap();
        assert!(report.pass, "shallow coverage still matches the closed form");
        assert_eq!(report.first_full_coverage, None);
        let last = &report.per_layer[1].observed[7];
        assert_eq!(last, &BTreeSet::from([5, 6, 7]));
    }

    #[test]
    fn single_block_is_trivially_covered_at_layer_one() {
        let cfg = ModelConfig {
            variant: Variant::Llp,
            seq_len: 16,
            latent_len: 8,
            segment_size: 32, // half = 16 = n → one block
            projection_len: 4,
            d_model: 16,
            num_heads: 2,
            num_layers: 1,
            vocab_size: 31,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        };
        let report = verify_propagation(&cfg, 0).unwrap();
        assert!(report.pass);
        assert_eq!(report.first_full_coverage, Some(1));
    }

    #[test]
    fn probe_rejects_non_llp_and_bad_position() {
        let cfg = ModelConfig {
            variant: Variant::Full,
            seq_len: 8,
            latent_len: 4,
            segment_size: 4,
            projection_len: 2,
            d_model: 8,
            num_heads: 2,
            num_layers: 1,
            vocab_size: 11,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        };
        assert!(verify_propagation(&cfg, 0).is_err());
        let model = build_model(&cfg, 0).unwrap();
        let tokens = deterministic_tokens(&cfg, 0);
        assert!(empirical_sensitivity(&model, &tokens, 8).is_err());
    }
}
