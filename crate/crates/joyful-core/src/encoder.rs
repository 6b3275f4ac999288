//! Relation-aware graph encoder and the contrastive objective.
//!
//! Each layer aggregates in-neighbor means separately per relation (intra vs
//! inter speaker), applies a relation-specific transform, concatenates the
//! aggregate with the node's previous state, and reduces back to the node
//! width through a combine transform with ReLU.
//!
//! The contrastive objective compares two encoded views with cosine
//! similarity: the inter-view term pulls node i's two encodings together
//! against all cross-view pairs, the intra-view term contrasts the same
//! positive pair against all view-1 pairs, and the total averages the two.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::xavier_init;
use crate::graph::{DialogueGraph, Relation};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GcnLayerIds {
    pub w_intra: ParamId,
    pub w_inter: ParamId,
    pub w_com: ParamId,
}

pub fn register_gcn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d_node: usize,
    layers: usize,
) -> Result<Vec<GcnLayerIds>> {
    (0..layers)
        .map(|layer| {
            let p = format!("encoder.layer{layer}");
            Ok(GcnLayerIds {
                w_intra: store.register(format!("{p}.w_intra"), xavier_init(rng, d_node, d_node))?,
                w_inter: store.register(format!("{p}.w_inter"), xavier_init(rng, d_node, d_node))?,
                w_com: store.register(format!("{p}.w_com"), xavier_init(rng, 2 * d_node, d_node))?,
            })
        })
        .collect()
}

/// Row-normalized in-neighbor matrix for one relation: entry (i, j) is
/// 1/|N_r(i)| when j -> i carries relation r. Nodes without in-neighbors of
/// that relation keep a zero row, contributing a zero aggregate.
pub fn mean_in_adjacency(graph: &DialogueGraph, relation: Relation) -> Tensor {
    let m = graph.node_count();
    let mut counts = vec![0usize; m];
    for e in graph.edges() {
        if e.relation == relation {
            counts[e.dst] += 1;
        }
    }
    let mut matrix = Tensor::zeros(m, m);
    for e in graph.edges() {
        if e.relation == relation {
            matrix.set(e.dst, e.src, 1.0 / counts[e.dst] as f64);
        }
    }
    matrix
}

/// Message-passing encoder over one (possibly augmented) view.
pub fn gcn_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    layers: &[GcnLayerIds],
    graph: &DialogueGraph,
    features: Var,
) -> Result<Var> {
    let intra = tape.leaf(mean_in_adjacency(graph, Relation::Intra));
    let inter = tape.leaf(mean_in_adjacency(graph, Relation::Inter));
    let mut h = features;
    for layer in layers {
        let intra_mean = tape.matmul(intra, h)?;
        let intra_msg = tape.matmul(intra_mean, bound.var(layer.w_intra))?;
        let inter_mean = tape.matmul(inter, h)?;
        let inter_msg = tape.matmul(inter_mean, bound.var(layer.w_inter))?;
        let aggregate = tape.add(intra_msg, inter_msg)?;
        let combined = tape.concat_cols(&[h, aggregate])?;
        let reduced = tape.matmul(combined, bound.var(layer.w_com))?;
        h = tape.relu(reduced);
    }
    Ok(h)
}

/// Pairwise cosine similarities between the rows of `a` and of `b`.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.row_normalize(a);
    let bn = tape.row_normalize(b);
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// Mean over anchors of -log( exp(sim(h1_i, h2_i)/tau) /
/// sum_j exp(sim(h1_i, h2_j)/tau) ).
pub fn inter_view_loss(tape: &mut Tape, h1: Var, h2: Var, tau: f64) -> Result<Var> {
    let cross = cosine_matrix(tape, h1, h2)?;
    let scaled = tape.scale(cross, 1.0 / tau);
    let lse = tape.row_lse(scaled);
    let positives = tape.diag(scaled)?;
    let per_node = tape.sub(lse, positives)?;
    Ok(tape.mean_all(per_node))
}

/// Same positive pair, but the denominator runs over view-1 similarities
/// (anchor included).
pub fn intra_view_loss(tape: &mut Tape, h1: Var, h2: Var, tau: f64) -> Result<Var> {
    let within = cosine_matrix(tape, h1, h1)?;
    let within_scaled = tape.scale(within, 1.0 / tau);
    let lse = tape.row_lse(within_scaled);
    let cross = cosine_matrix(tape, h1, h2)?;
    let cross_scaled = tape.scale(cross, 1.0 / tau);
    let positives = tape.diag(cross_scaled)?;
    let per_node = tape.sub(lse, positives)?;
    Ok(tape.mean_all(per_node))
}

/// L_ct: the average of the inter- and intra-view terms. With `symmetrize`
/// the same quantity anchored in view 2 is averaged in as well.
pub fn contrastive_loss(
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    tau: f64,
    symmetrize: bool,
) -> Result<Var> {
    let inter = inter_view_loss(tape, h1, h2, tau)?;
    let intra = intra_view_loss(tape, h1, h2, tau)?;
    let sum = tape.add(inter, intra)?;
    let anchored1 = tape.scale(sum, 0.5);
    if !symmetrize {
        return Ok(anchored1);
    }
    let inter2 = inter_view_loss(tape, h2, h1, tau)?;
    let intra2 = intra_view_loss(tape, h2, h1, tau)?;
    let sum2 = tape.add(inter2, intra2)?;
    let anchored2 = tape.scale(sum2, 0.5);
    let both = tape.add(anchored1, anchored2)?;
    Ok(tape.scale(both, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphEdge;
    use rand::{Rng, SeedableRng};

    fn orthonormal_rows(m: usize, d: usize) -> Tensor {
        assert!(d >= m);
        let mut t = Tensor::zeros(m, d);
        for i in 0..m {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn closed_form_identical_orthonormal_views() {
        for m in [2usize, 3, 4] {
            let h = orthonormal_rows(m, 4);
            let mut tape = Tape::new();
            let h1 = tape.leaf(h.clone());
            let h2 = tape.leaf(h);
            let inter = inter_view_loss(&mut tape, h1, h2, 1.0).unwrap();
            let intra = intra_view_loss(&mut tape, h1, h2, 1.0).unwrap();
            let total = contrastive_loss(&mut tape, h1, h2, 1.0, false).unwrap();
            let expected = -(1f64.exp() / (1f64.exp() + (m - 1) as f64)).ln();
            assert!((tape.value(inter).item() - expected).abs() < 1e-10, "m={m}");
            assert!((tape.value(intra).item() - expected).abs() < 1e-10, "m={m}");
            assert!((tape.value(total).item() - expected).abs() < 1e-10, "m={m}");
        }
        // Spot value: m = 2 gives -log(e / (e + 1)) ~ 0.31326.
        let h = orthonormal_rows(2, 4);
        let mut tape = Tape::new();
        let h1 = tape.leaf(h.clone());
        let h2 = tape.leaf(h);
        let total = contrastive_loss(&mut tape, h1, h2, 1.0, false).unwrap();
        assert!((tape.value(total).item() - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn single_node_losses_vanish() {
        let h = Tensor::row(&[0.3, -0.7, 1.1]);
        let mut tape = Tape::new();
        let h1 = tape.leaf(h.clone());
        let h2 = tape.leaf(h);
        let inter = inter_view_loss(&mut tape, h1, h2, 1.0).unwrap();
        let intra = intra_view_loss(&mut tape, h1, h2, 1.0).unwrap();
        assert!(tape.value(inter).item().abs() < 1e-12);
        assert!(tape.value(intra).item().abs() < 1e-12);
    }

    #[test]
    fn losses_invariant_to_positive_row_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut random = |m: usize, d: usize| {
            Tensor::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let h1 = random(4, 5);
        let h2 = random(4, 5);

        let eval = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let v1 = tape.leaf(a.clone());
            let v2 = tape.leaf(b.clone());
            let loss = contrastive_loss(&mut tape, v1, v2, 1.0, false).unwrap();
            tape.value(loss).item()
        };

        let base = eval(&h1, &h2);
        let mut scaled = h1.clone();
        for j in 0..scaled.cols() {
            let x = scaled.get(2, j) * 37.5;
            scaled.set(2, j, x);
        }
        assert!((eval(&scaled, &h2) - base).abs() <= 1e-10);
    }

    #[test]
    fn contrastive_equals_mean_of_parts_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = |m: usize, d: usize, rng: &mut ChaCha8Rng| {
            Tensor::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.2..1.2)).collect())
                .unwrap()
        };
        let h1 = data(3, 4, &mut rng);
        let h2 = data(3, 4, &mut rng);
        {
            let mut tape = Tape::new();
            let v1 = tape.leaf(h1.clone());
            let v2 = tape.leaf(h2.clone());
            let inter = inter_view_loss(&mut tape, v1, v2, 1.0).unwrap();
            let intra = intra_view_loss(&mut tape, v1, v2, 1.0).unwrap();
            let total = contrastive_loss(&mut tape, v1, v2, 1.0, false).unwrap();
            let want = 0.5 * (tape.value(inter).item() + tape.value(intra).item());
            assert!((tape.value(total).item() - want).abs() < 1e-14);
        }

        // Finite differences through the full contrastive objective.
        let eval = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let v1 = tape.param(a.clone());
            let v2 = tape.param(b.clone());
            let loss = contrastive_loss(&mut tape, v1, v2, 0.7, false).unwrap();
            (tape, v1, v2, loss)
        };
        let (mut tape, v1, v2, loss) = eval(&h1, &h2);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(v1).unwrap().clone();
        let g2 = tape.grad(v2).unwrap().clone();

        let h = 1e-5;
        for (which, grad) in [(0, &g1), (1, &g2)] {
            for k in 0..h1.len() {
                let perturb = |delta: f64| {
                    let mut a = h1.clone();
                    let mut b = h2.clone();
                    if which == 0 {
                        a.data_mut()[k] += delta;
                    } else {
                        b.data_mut()[k] += delta;
                    }
                    let (tape, _, _, loss) = eval(&a, &b);
                    tape.value(loss).item()
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let analytic = grad.data()[k];
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "view {which} coord {k}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn isolated_node_aggregates_zero() {
        // Node 2 has no in-edges at all.
        let graph = DialogueGraph::from_edges(
            &[0, 1, 0],
            vec![
                GraphEdge { src: 0, dst: 1, relation: Relation::Inter },
                GraphEdge { src: 1, dst: 0, relation: Relation::Inter },
            ],
        )
        .unwrap();
        let intra = mean_in_adjacency(&graph, Relation::Intra);
        let inter = mean_in_adjacency(&graph, Relation::Inter);
        assert_eq!(intra.sum(), 0.0);
        assert_eq!(inter.row_slice(2), &[0.0, 0.0, 0.0]);
        assert_eq!(inter.get(1, 0), 1.0);

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layers = register_gcn(&mut store, &mut rng, 3, 1).unwrap();
        let features = Tensor::from_vec(3, 3, (0..9).map(|i| i as f64 / 4.0).collect()).unwrap();

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let x = tape.leaf(features.clone());
        let out = gcn_forward(&mut tape, &bound, &layers, &graph, x).unwrap();

        // By hand for the isolated node: relu(w_com^T (h (+) 0)).
        let w_com = store.get(layers[0].w_com);
        let mut expected = vec![0.0; 3];
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += features.get(2, k) * w_com.get(k, j);
            }
            expected[j] = acc.max(0.0);
        }
        for j in 0..3 {
            assert!((tape.value(out).get(2, j) - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let speakers = [0usize, 1, 0, 1, 0];
        let graph = DialogueGraph::build(&speakers, 2, 2);
        let d = 4;
        let features = Tensor::from_vec(
            5,
            d,
            (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let mut store = ParamStore::new();
        let layers = register_gcn(&mut store, &mut rng, d, 2).unwrap();

        let encode = |g: &DialogueGraph, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store);
            let v = tape.leaf(x.clone());
            let out = gcn_forward(&mut tape, &bound, &layers, g, v).unwrap();
            tape.value(out).clone()
        };
        let base = encode(&graph, &features);

        // All 120 permutations of the 5 nodes.
        let mut perms = Vec::new();
        let mut items: Vec<usize> = (0..5).collect();
        permutations(&mut items, 0, &mut perms);
        assert_eq!(perms.len(), 120);

        for perm in perms {
            // perm[i] = new index of old node i.
            let mut perm_speakers = vec![0usize; 5];
            let mut perm_features = Tensor::zeros(5, d);
            for old in 0..5 {
                perm_speakers[perm[old]] = speakers[old];
                for j in 0..d {
                    perm_features.set(perm[old], j, features.get(old, j));
                }
            }
            let perm_edges = graph
                .edges()
                .iter()
                .map(|e| GraphEdge {
                    src: perm[e.src],
                    dst: perm[e.dst],
                    relation: e.relation,
                })
                .collect();
            let perm_graph = DialogueGraph::from_edges(&perm_speakers, perm_edges).unwrap();
            let out = encode(&perm_graph, &perm_features);
            for old in 0..5 {
                for j in 0..d {
                    assert!(
                        (out.get(perm[old], j) - base.get(old, j)).abs() < 1e-12,
                        "permutation broke equivariance"
                    );
                }
            }
        }
    }

    fn permutations(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
        if start == items.len() {
            out.push(items.clone());
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            permutations(items, start + 1, out);
            items.swap(start, i);
        }
    }
}
