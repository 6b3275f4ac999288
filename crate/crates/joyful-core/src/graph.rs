//! Dialogue graphs and augmentation operators.
//!
//! Utterances are nodes in speaking order; directed edges connect every
//! ordered pair inside the context window and carry an intra-/inter-speaker
//! relation tag. Three operators corrupt a graph into contrastive views:
//! feature masking (FM), edge perturbation (EP), and Katz-index global
//! proximity (GP). Every operator is a deterministic function of its inputs
//! and a seed.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Intra,
    Inter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueGraph {
    speakers: Vec<usize>,
    edges: Vec<GraphEdge>,
}

impl DialogueGraph {
    /// Window-based construction: a directed edge j -> i for every ordered
    /// pair with i - wp <= j <= i + wf, j != i.
    pub fn build(speakers: &[usize], window_past: usize, window_future: usize) -> DialogueGraph {
        let m = speakers.len();
        let mut edges = Vec::new();
        for i in 0..m {
            let lo = i.saturating_sub(window_past);
            let hi = (i + window_future).min(m.saturating_sub(1));
            for j in lo..=hi {
                if j == i {
                    continue;
                }
                edges.push(GraphEdge {
                    src: j,
                    dst: i,
                    relation: relation_of(speakers, j, i),
                });
            }
        }
        DialogueGraph {
            speakers: speakers.to_vec(),
            edges,
        }
    }

    pub fn from_edges(speakers: &[usize], edges: Vec<GraphEdge>) -> Result<DialogueGraph> {
        let m = speakers.len();
        let mut seen = HashSet::new();
        for e in &edges {
            if e.src >= m || e.dst >= m {
                return Err(Error::contract(format!(
                    "edge ({}, {}) out of range for {m} nodes",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::contract(format!("self-loop at node {}", e.src)));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::contract(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
            if e.relation != relation_of(speakers, e.src, e.dst) {
                return Err(Error::contract(format!(
                    "edge ({}, {}) relation tag contradicts speakers",
                    e.src, e.dst
                )));
            }
        }
        Ok(DialogueGraph {
            speakers: speakers.to_vec(),
            edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.speakers.len()
    }

    pub fn speakers(&self) -> &[usize] {
        &self.speakers
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }

    /// In-neighbors of `node` restricted to one relation.
    pub fn in_neighbors(&self, node: usize, relation: Relation) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.dst == node && e.relation == relation)
            .map(|e| e.src)
            .collect()
    }
}

fn relation_of(speakers: &[usize], src: usize, dst: usize) -> Relation {
    if speakers[src] == speakers[dst] {
        Relation::Intra
    } else {
        Relation::Inter
    }
}

// ---------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Shared ratio for masking, perturbation, and proximity counts.
    pub p: f64,
    pub katz_beta: f64,
    pub katz_max_order: usize,
    pub katz_threshold: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::contract("augmentation ratio p must lie in [0, 1]"));
        }
        if !(self.katz_beta > 0.0 && self.katz_beta < 1.0) {
            return Err(Error::contract("katz_beta must lie in (0, 1)"));
        }
        if self.katz_max_order < 2 {
            return Err(Error::contract("katz_max_order must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FeatureMask,
    EdgePerturb,
    GlobalProximity,
}

/// Which operators produced a view and under which sub-seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
    /// Set when edge perturbation could not find enough absent pairs to add.
    pub shortfall: bool,
}

/// A corrupted copy of a dialogue graph. Node count and order always match
/// the source; feature corruption is carried as the list of masked columns so
/// callers can apply it inside the autodiff graph.
#[derive(Clone, Debug)]
pub struct AugmentedView {
    pub graph: DialogueGraph,
    pub masked_columns: Vec<usize>,
    pub provenance: Provenance,
}

/// Pick floor(p * d) distinct feature columns to zero; one mask shared by
/// every node.
pub fn feature_mask_columns(feature_dim: usize, p: f64, seed: u64) -> Vec<usize> {
    let count = (p * feature_dim as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = sample(&mut rng, feature_dim, count.min(feature_dim)).into_vec();
    columns.sort_unstable();
    columns
}

/// Zero the given columns of a feature matrix.
pub fn apply_column_mask(features: &Tensor, columns: &[usize]) -> Tensor {
    let mut out = features.clone();
    for i in 0..out.rows() {
        for &j in columns {
            out.set(i, j, 0.0);
        }
    }
    out
}

/// A 0/1 matrix that zeroes the masked columns when multiplied elementwise.
pub fn column_mask_tensor(rows: usize, cols: usize, masked: &[usize]) -> Tensor {
    let mut mask = Tensor::from_vec(rows, cols, vec![1.0; rows * cols]).expect("shape");
    for i in 0..rows {
        for &j in masked {
            mask.set(i, j, 0.0);
        }
    }
    mask
}

/// Drop floor(p * |E|) edges uniformly, then add the same count of directed
/// edges drawn uniformly from the absent pairs. Returns the new graph and a
/// shortfall flag when fewer absent pairs existed than drops.
pub fn edge_perturb(graph: &DialogueGraph, p: f64, seed: u64) -> (DialogueGraph, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (p * graph.edge_count() as f64).floor() as usize;

    let mut edges = graph.edges.clone();
    if count > 0 && !edges.is_empty() {
        let mut drop = sample(&mut rng, edges.len(), count.min(edges.len())).into_vec();
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for idx in drop {
            edges.swap_remove(idx);
        }
    }

    let present: HashSet<(usize, usize)> = edges.iter().map(|e| (e.src, e.dst)).collect();
    let m = graph.node_count();
    let mut absent = Vec::new();
    for src in 0..m {
        for dst in 0..m {
            if src != dst && !present.contains(&(src, dst)) {
                absent.push((src, dst));
            }
        }
    }
    let add = count.min(absent.len());
    let shortfall = add < count;
    if add > 0 {
        let mut chosen = sample(&mut rng, absent.len(), add).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let (src, dst) = absent[idx];
            edges.push(GraphEdge {
                src,
                dst,
                relation: relation_of(&graph.speakers, src, dst),
            });
        }
    }

    (
        DialogueGraph {
            speakers: graph.speakers.clone(),
            edges,
        },
        shortfall,
    )
}

/// Truncated Katz index on the symmetrized unweighted adjacency:
/// sum_{k=1..K} beta^k A^k with a zeroed diagonal.
pub fn katz_scores(graph: &DialogueGraph, beta: f64, max_order: usize) -> Tensor {
    let m = graph.node_count();
    let mut adjacency = Tensor::zeros(m, m);
    for e in &graph.edges {
        adjacency.set(e.src, e.dst, 1.0);
        adjacency.set(e.dst, e.src, 1.0);
    }
    let mut power = adjacency.clone();
    let mut scores = power.scale(beta);
    let mut weight = beta;
    for _ in 2..=max_order {
        power = power.matmul(&adjacency).expect("square matrices");
        weight *= beta;
        scores = scores.add(&power.scale(weight)).expect("same shape");
    }
    for i in 0..m {
        scores.set(i, i, 0.0);
    }
    scores
}

/// Add floor(p * |E|) high-order edge pairs: unordered pairs with no existing
/// edge in either direction whose Katz score exceeds the threshold. Both
/// directions are added, tagged by speaker equality.
pub fn global_proximity(graph: &DialogueGraph, config: &AugmentConfig, seed: u64) -> DialogueGraph {
    let scores = katz_scores(graph, config.katz_beta, config.katz_max_order);
    let m = graph.node_count();
    let present: HashSet<(usize, usize)> = graph.edges.iter().map(|e| (e.src, e.dst)).collect();

    let mut candidates = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if present.contains(&(i, j)) || present.contains(&(j, i)) {
                continue;
            }
            if scores.get(i, j) > config.katz_threshold {
                candidates.push((i, j));
            }
        }
    }

    let want = (config.p * graph.edge_count() as f64).floor() as usize;
    let take = want.min(candidates.len());
    let mut edges = graph.edges.clone();
    if take > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = sample(&mut rng, candidates.len(), take).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let (i, j) = candidates[idx];
            let relation = relation_of(&graph.speakers, i, j);
            edges.push(GraphEdge {
                src: i,
                dst: j,
                relation,
            });
            edges.push(GraphEdge {
                src: j,
                dst: i,
                relation,
            });
        }
    }

    DialogueGraph {
        speakers: graph.speakers.clone(),
        edges,
    }
}

/// The two contrastive views: (FM then EP) and (FM then GP), each drawing its
/// own sub-seed from `config.seed`.
pub fn make_views(
    graph: &DialogueGraph,
    feature_dim: usize,
    config: &AugmentConfig,
) -> Result<(AugmentedView, AugmentedView)> {
    config.validate()?;
    let fm1 = derive_seed(config.seed, &[1]);
    let ep = derive_seed(config.seed, &[2]);
    let fm2 = derive_seed(config.seed, &[3]);
    let gp = derive_seed(config.seed, &[4]);

    let (perturbed, shortfall) = edge_perturb(graph, config.p, ep);
    let view1 = AugmentedView {
        graph: perturbed,
        masked_columns: feature_mask_columns(feature_dim, config.p, fm1),
        provenance: Provenance {
            ops: vec![AugmentOp::FeatureMask, AugmentOp::EdgePerturb],
            seed: config.seed,
            shortfall,
        },
    };
    let view2 = AugmentedView {
        graph: global_proximity(graph, config, gp),
        masked_columns: feature_mask_columns(feature_dim, config.p, fm2),
        provenance: Provenance {
            ops: vec![AugmentOp::FeatureMask, AugmentOp::GlobalProximity],
            seed: config.seed,
            shortfall: false,
        },
    };
    Ok((view1, view2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: f64, seed: u64) -> AugmentConfig {
        AugmentConfig {
            p,
            katz_beta: 0.9,
            katz_max_order: 4,
            katz_threshold: 0.5,
            seed,
        }
    }

    fn edge_set(g: &DialogueGraph) -> HashSet<(usize, usize, Relation)> {
        g.edges().iter().map(|e| (e.src, e.dst, e.relation)).collect()
    }

    #[test]
    fn window_one_alternating_speakers() {
        let g = DialogueGraph::build(&[0, 1, 0, 1], 1, 1);
        let expected: HashSet<_> = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]
            .into_iter()
            .map(|(s, d)| (s, d, Relation::Inter))
            .collect();
        assert_eq!(edge_set(&g), expected);
    }

    #[test]
    fn window_zero_is_edgeless() {
        let g = DialogueGraph::build(&[0, 1, 0], 0, 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn window_three_adds_intra_and_far_inter_edges() {
        let g = DialogueGraph::build(&[0, 1, 0, 1], 3, 3);
        let set = edge_set(&g);
        for (s, d) in [(0, 2), (2, 0), (1, 3), (3, 1)] {
            assert!(set.contains(&(s, d, Relation::Intra)), "missing intra ({s},{d})");
        }
        for (s, d) in [(0, 3), (3, 0)] {
            assert!(set.contains(&(s, d, Relation::Inter)), "missing inter ({s},{d})");
        }
        assert_eq!(g.edge_count(), 12);
    }

    #[test]
    fn relation_tags_always_match_speakers() {
        let speakers = [0, 1, 2, 0, 1, 0];
        let g = DialogueGraph::build(&speakers, 4, 2);
        for e in g.edges() {
            let expected = if speakers[e.src] == speakers[e.dst] {
                Relation::Intra
            } else {
                Relation::Inter
            };
            assert_eq!(e.relation, expected);
        }
    }

    #[test]
    fn feature_mask_counts_and_extremes() {
        assert!(feature_mask_columns(10, 0.0, 1).is_empty());
        assert_eq!(feature_mask_columns(10, 1.0, 1).len(), 10);
        let cols = feature_mask_columns(10, 0.2, 7);
        assert_eq!(cols.len(), 2);

        let x = Tensor::from_vec(3, 10, (0..30).map(|i| i as f64 + 1.0).collect()).unwrap();
        let masked = apply_column_mask(&x, &cols);
        for i in 0..3 {
            for j in 0..10 {
                if cols.contains(&j) {
                    assert_eq!(masked.get(i, j), 0.0);
                } else {
                    assert_eq!(masked.get(i, j), x.get(i, j));
                }
            }
        }
    }

    #[test]
    fn edge_perturb_preserves_count_and_determinism() {
        let g = DialogueGraph::build(&[0, 1, 0, 1, 0], 2, 2);
        let before = g.edge_count();
        let (one, shortfall) = edge_perturb(&g, 0.2, 99);
        assert!(!shortfall);
        assert_eq!(one.edge_count(), before);
        let (two, _) = edge_perturb(&g, 0.2, 99);
        assert_eq!(one, two);
        let (zero, _) = edge_perturb(&g, 0.0, 99);
        assert_eq!(edge_set(&zero), edge_set(&g));
    }

    #[test]
    fn katz_on_path_graph_matches_hand_computation() {
        // Path 0 - 1 - 2 as directed edges both ways.
        let g = DialogueGraph::from_edges(
            &[0, 1, 0],
            vec![
                GraphEdge { src: 0, dst: 1, relation: Relation::Inter },
                GraphEdge { src: 1, dst: 0, relation: Relation::Inter },
                GraphEdge { src: 1, dst: 2, relation: Relation::Inter },
                GraphEdge { src: 2, dst: 1, relation: Relation::Inter },
            ],
        )
        .unwrap();
        let s = katz_scores(&g, 0.5, 3);
        assert!((s.get(0, 2) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
        assert_eq!(s.get(0, 0), 0.0);

        let edgeless = DialogueGraph::build(&[0, 1, 0], 0, 0);
        assert_eq!(katz_scores(&edgeless, 0.5, 3).sum(), 0.0);
    }

    #[test]
    fn global_proximity_adds_high_order_pair_on_path() {
        let g = DialogueGraph::build(&[0, 1, 0], 1, 1);
        // Score(0,2) = 0.81 + 0.9^4 * 2 = 2.1222 > 0.5.
        let s = katz_scores(&g, 0.9, 4);
        assert!((s.get(0, 2) - 2.1222).abs() < 1e-12);

        let augmented = global_proximity(&g, &cfg(1.0, 5), 5);
        assert!(augmented.has_edge(0, 2));
        assert!(augmented.has_edge(2, 0));
        // 0 and 2 share a speaker.
        assert!(augmented
            .edges()
            .iter()
            .any(|e| e.src == 0 && e.dst == 2 && e.relation == Relation::Intra));

        let mut high = cfg(1.0, 5);
        high.katz_threshold = 100.0;
        let unchanged = global_proximity(&g, &high, 5);
        assert_eq!(edge_set(&unchanged), edge_set(&g));
    }

    #[test]
    fn global_proximity_never_duplicates_existing_pairs() {
        let g = DialogueGraph::build(&[0, 1, 0, 1, 1], 2, 2);
        let augmented = global_proximity(&g, &cfg(1.0, 3), 3);
        let mut seen = HashSet::new();
        for e in augmented.edges() {
            assert!(seen.insert((e.src, e.dst)), "duplicate edge ({}, {})", e.src, e.dst);
        }
    }

    #[test]
    fn make_views_is_deterministic_and_noop_at_p_zero() {
        let g = DialogueGraph::build(&[0, 1, 0, 1], 2, 2);
        let (a1, a2) = make_views(&g, 10, &cfg(0.0, 11)).unwrap();
        assert_eq!(edge_set(&a1.graph), edge_set(&g));
        assert_eq!(edge_set(&a2.graph), edge_set(&g));
        assert!(a1.masked_columns.is_empty());
        assert!(a2.masked_columns.is_empty());

        let (b1, b2) = make_views(&g, 10, &cfg(0.2, 11)).unwrap();
        let (c1, c2) = make_views(&g, 10, &cfg(0.2, 11)).unwrap();
        assert_eq!(b1.graph, c1.graph);
        assert_eq!(b2.graph, c2.graph);
        assert_eq!(b1.masked_columns, c1.masked_columns);
        assert_eq!(b2.masked_columns, c2.masked_columns);
    }

    #[test]
    fn view_masks_eventually_differ_across_seeds() {
        let g = DialogueGraph::build(&[0, 1], 1, 1);
        let mut any_differ = false;
        for seed in 0..100 {
            let (v1, v2) = make_views(&g, 10, &cfg(0.2, seed)).unwrap();
            if v1.masked_columns != v2.masked_columns {
                any_differ = true;
                break;
            }
        }
        assert!(any_differ, "the two FM draws should not always coincide");
    }
}
