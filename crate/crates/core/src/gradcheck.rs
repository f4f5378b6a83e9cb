//! Finite-difference verification of reverse-mode gradients.
//!
//! For each probed parameter entry the central difference
//! `(f(θ+eps) − f(θ−eps)) / (2·eps)` is compared against the analytic
//! gradient, with relative error `|a−f| / max(1, |a|, |f|)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} worst=`{}` entries={} eps={:.1e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_param,
            self.entries_checked,
            self.eps,
            self.tol
        )
    }
}

/// Check the analytic gradients of `build_loss` against central differences.
///
/// `build_loss` runs the forward pass over the current store contents and
/// returns the graph plus its scalar loss node. Up to `max_entries` parameter
/// entries are probed, chosen round-robin across parameters with a seeded
/// generator so every tensor gets coverage; pass `usize::MAX` to probe
/// everything.
pub fn grad_check<F>(
    store: &mut ParamStore,
    build_loss: F,
    eps: f64,
    tol: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    assert!(eps > 0.0, "grad_check eps must be positive");
    let (mut graph, loss) = build_loss(store)?;
    graph.backward(loss)?;
    let analytic: BTreeMap<String, Vec<f64>> = graph.param_grads().into_iter().collect();
    drop(graph);

    let entries = select_entries(store, &analytic, max_entries, seed);

    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    for (name, idx) in &entries {
        let original = store.get(name)?.value.data()[*idx];

        let mut probe = |v: f64| -> Result<f64> {
            let mut t = store.get(name)?.value.clone();
            t.data_mut()[*idx] = v;
            store.set_value(name, t)?;
            let (g, l) = build_loss(store)?;
            Ok(g.value(l).data()[0])
        };
        let plus = probe(original + eps)?;
        let minus = probe(original - eps)?;
        // restore
        let mut t = store.get(name)?.value.clone();
        t.data_mut()[*idx] = original;
        store.set_value(name, t)?;

        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[name][*idx];
        let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_param = format!("{name}[{idx}]");
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        entries_checked: entries.len(),
        eps,
        tol,
        pass: max_rel_err < tol,
    })
}

/// Round-robin across parameters, drawing unprobed entry indices with a
/// seeded generator until the budget is spent or everything is covered.
fn select_entries(
    store: &ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    max_entries: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = store
        .iter()
        .filter(|(n, _)| analytic.contains_key(*n))
        .map(|(_, p)| p.value.numel())
        .sum();
    let budget = max_entries.min(total);

    // remaining candidate indices per parameter
    let mut pools: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(n, _)| analytic.contains_key(*n))
        .map(|(n, p)| (n.to_string(), (0..p.value.numel()).collect()))
        .collect();

    let mut picked = Vec::with_capacity(budget);
    while picked.len() < budget {
        for (name, pool) in pools.iter_mut() {
            if picked.len() >= budget {
                break;
            }
            if pool.is_empty() {
                continue;
            }
            let at = rng.gen_range(0..pool.len());
            picked.push((name.clone(), pool.swap_remove(at)));
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::causal_mask;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rnd(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_loss_matches_to_1e9() {
        // loss = ½‖W‖²  ⇒ grad = W
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("w", rnd(&mut rng, vec![3, 4])).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let w = g.param(s, "w")?;
                let sq = g.mul(w, w)?;
                let sum = g.sum_all(sq);
                let loss = g.scale(sum, 0.5);
                Ok((g, loss))
            },
            1e-5,
            1e-9,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
        assert!(report.max_rel_err < 1e-9, "{report}");
    }

    #[test]
    fn masked_attention_layer_passes_at_1e4() {
        // single masked-softmax attention head over parameters q,k,v
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let (m, t, dk) = (4, 6, 4);
        store.insert("x", rnd(&mut rng, vec![m, dk])).unwrap();
        store.insert("wq", rnd(&mut rng, vec![dk, dk])).unwrap();
        store.insert("wk", rnd(&mut rng, vec![dk, dk])).unwrap();
        store.insert("wv", rnd(&mut rng, vec![dk, dk])).unwrap();
        store.insert("kv", rnd(&mut rng, vec![t, dk])).unwrap();
        let mask = causal_mask(m, t, 2).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, "x")?;
                let kv = g.param(s, "kv")?;
                let wq = g.param(s, "wq")?;
                let wk = g.param(s, "wk")?;
                let wv = g.param(s, "wv")?;
                let q = g.matmul(x, wq)?;
                let k = g.matmul(kv, wk)?;
                let v = g.matmul(kv, wv)?;
                let scores = g.matmul_nt(q, k)?;
                let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
                let probs = g.masked_softmax(scaled, &mask)?;
                let out = g.matmul(probs, v)?;
                let loss = g.sum_all(out);
                Ok((g, loss))
            },
            1e-5,
            1e-4,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn every_graph_op_passes_fd() {
        // One graph that touches every differentiable op: gather, rotary,
        // slices/concats, layer norm, gelu+bias, cross entropy.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = 6;
        store.insert("table", rnd(&mut rng, vec![5, d])).unwrap();
        store.insert("w", rnd(&mut rng, vec![d, d])).unwrap();
        store.insert("b", rnd(&mut rng, vec![d])).unwrap();
        store.insert("gain", rnd(&mut rng, vec![d])).unwrap();
        store.insert("shift", rnd(&mut rng, vec![d])).unwrap();
        let ids = Arc::new(vec![0usize, 3, 1, 4]);
        let positions = Arc::new(vec![0usize, 1, 2, 3]);
        let targets = Arc::new(vec![2usize, 0, 5, 1]);
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let table = g.param(s, "table")?;
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let gain = g.param(s, "gain")?;
                let shift = g.param(s, "shift")?;
                let x = g.gather_rows(table, ids.clone())?; // [4×6]
                let normed = g.layer_norm(x, gain, shift)?;
                let rot = g.rotary(normed, positions.clone())?;
                let left = g.slice_cols(rot, 0, 3)?;
                let right = g.slice_cols(rot, 3, 3)?;
                let swapped = g.concat_cols(&[right, left])?;
                let top = g.slice_rows(swapped, 0, 2)?;
                let bottom = g.slice_rows(swapped, 2, 2)?;
                let joined = g.concat_rows(&[bottom, top])?;
                let h = g.matmul(joined, w)?;
                let hb = g.add_bias(h, b)?;
                let act = g.gelu(hb);
                let logits = g.add(act, joined)?;
                let loss = g.cross_entropy_mean(logits, targets.clone())?;
                Ok((g, loss))
            },
            1e-5,
            1e-4,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn entry_budget_is_respected_with_per_param_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.insert("a", rnd(&mut rng, vec![4, 4])).unwrap();
        store.insert("b", rnd(&mut rng, vec![4, 4])).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let m = g.matmul(a, b)?;
                let loss = g.sum_all(m);
                Ok((g, loss))
            },
            1e-5,
            1e-4,
            6,
            0,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 6);
        assert!(report.pass, "{report}");
    }
}
