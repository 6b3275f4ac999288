//! Multimodal fusion.
//!
//! Two disjoint representations are learned per utterance and concatenated
//! into the graph node features:
//!
//! * contextual: each modality is projected by a small network, the three
//!   projections are concatenated, and a self-attention encoder mixes them
//!   across the utterances of the dialogue; a topic accumulator regularizes
//!   the result toward the running dialogue context.
//! * specific: each modality is projected into a shared subspace and
//!   re-expressed as a softmax-weighted combination of a trainable basis.
//!
//! The fusion loss is the sum of the topic smoothing term and the two
//! reconstruction terms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BasisSimilarity, FusionConfig, TopicMode};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Position-wise feedforward width multiplier in the context encoder.
const FF_MULT: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_a: usize,
    pub d_t: usize,
    pub d_specific: usize,
    pub q: usize,
}

impl ModelDims {
    /// Width of the concatenated contextual representation.
    pub fn d_context(&self) -> usize {
        self.d_v + self.d_a + self.d_t
    }

    /// Width of a graph node feature: contextual plus three specific parts.
    pub fn d_node(&self) -> usize {
        self.d_context() + 3 * self.d_specific
    }
}

pub fn xavier_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn register_mlp(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) -> Result<MlpIds> {
    Ok(MlpIds {
        w1: store.register(format!("{prefix}.w1"), xavier_init(rng, d_in, d_hidden))?,
        b1: store.register(format!("{prefix}.b1"), Tensor::zeros(1, d_hidden))?,
        w2: store.register(format!("{prefix}.w2"), xavier_init(rng, d_hidden, d_out))?,
        b2: store.register(format!("{prefix}.b2"), Tensor::zeros(1, d_out))?,
    })
}

fn mlp_forward(tape: &mut Tape, bound: &BoundParams, ids: &MlpIds, x: Var) -> Result<Var> {
    let hidden = tape.linear(x, bound.var(ids.w1), bound.var(ids.b1))?;
    let act = tape.tanh(hidden);
    tape.linear(act, bound.var(ids.w2), bound.var(ids.b2))
}

#[derive(Clone, Debug)]
pub struct AttentionLayerIds {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionIds {
    pub context_nets: [MlpIds; 3],
    pub encoder_layers: Vec<AttentionLayerIds>,
    pub n_heads: usize,
    pub specific_nets: [MlpIds; 3],
    pub basis: ParamId,
    pub proj_v: ParamId,
    pub proj_a: ParamId,
    pub proj_t: ParamId,
    pub proj_basis: ParamId,
}

pub fn register_fusion(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    dims: &ModelDims,
    config: &FusionConfig,
) -> Result<FusionIds> {
    let d_g = dims.d_context();
    if d_g % config.n_heads != 0 {
        return Err(Error::Config(format!(
            "context width {d_g} is not divisible by fusion.n_heads = {}",
            config.n_heads
        )));
    }
    let d_head = d_g / config.n_heads;
    let d_s = dims.d_specific;

    let context_nets = [
        register_mlp(store, rng, "fusion.context.v", dims.d_v, dims.d_v, dims.d_v)?,
        register_mlp(store, rng, "fusion.context.a", dims.d_a, dims.d_a, dims.d_a)?,
        register_mlp(store, rng, "fusion.context.t", dims.d_t, dims.d_t, dims.d_t)?,
    ];

    let mut encoder_layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let p = format!("fusion.encoder.layer{layer}");
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for head in 0..config.n_heads {
            wq.push(store.register(format!("{p}.head{head}.wq"), xavier_init(rng, d_g, d_head))?);
            wk.push(store.register(format!("{p}.head{head}.wk"), xavier_init(rng, d_g, d_head))?);
            wv.push(store.register(format!("{p}.head{head}.wv"), xavier_init(rng, d_g, d_head))?);
        }
        encoder_layers.push(AttentionLayerIds {
            wq,
            wk,
            wv,
            wo: store.register(format!("{p}.wo"), xavier_init(rng, d_g, d_g))?,
            ln1_gamma: store.register(
                format!("{p}.ln1.gamma"),
                Tensor::from_vec(1, d_g, vec![1.0; d_g])?,
            )?,
            ln1_beta: store.register(format!("{p}.ln1.beta"), Tensor::zeros(1, d_g))?,
            ff_w1: store.register(format!("{p}.ff.w1"), xavier_init(rng, d_g, FF_MULT * d_g))?,
            ff_b1: store.register(format!("{p}.ff.b1"), Tensor::zeros(1, FF_MULT * d_g))?,
            ff_w2: store.register(format!("{p}.ff.w2"), xavier_init(rng, FF_MULT * d_g, d_g))?,
            ff_b2: store.register(format!("{p}.ff.b2"), Tensor::zeros(1, d_g))?,
            ln2_gamma: store.register(
                format!("{p}.ln2.gamma"),
                Tensor::from_vec(1, d_g, vec![1.0; d_g])?,
            )?,
            ln2_beta: store.register(format!("{p}.ln2.beta"), Tensor::zeros(1, d_g))?,
        });
    }

    let specific_nets = [
        register_mlp(store, rng, "fusion.specific.v", dims.d_v, d_s, d_s)?,
        register_mlp(store, rng, "fusion.specific.a", dims.d_a, d_s, d_s)?,
        register_mlp(store, rng, "fusion.specific.t", dims.d_t, d_s, d_s)?,
    ];

    Ok(FusionIds {
        context_nets,
        encoder_layers,
        n_heads: config.n_heads,
        specific_nets,
        basis: store.register("fusion.basis", xavier_init(rng, dims.q, d_s))?,
        proj_v: store.register("fusion.proj.v", xavier_init(rng, d_s, d_s))?,
        proj_a: store.register("fusion.proj.a", xavier_init(rng, d_s, d_s))?,
        proj_t: store.register("fusion.proj.t", xavier_init(rng, d_s, d_s))?,
        proj_basis: store.register("fusion.proj.basis", xavier_init(rng, d_s, d_s))?,
    })
}

fn attention_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: &AttentionLayerIds,
    x: Var,
    n_heads: usize,
) -> Result<Var> {
    let d_head = tape.value(x).cols() / n_heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = tape.matmul(x, bound.var(layer.wq[h]))?;
        let k = tape.matmul(x, bound.var(layer.wk[h]))?;
        let v = tape.matmul(x, bound.var(layer.wv[h]))?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, inv_sqrt);
        let weights = tape.row_softmax(scaled);
        heads.push(tape.matmul(weights, v)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn = tape.matmul(merged, bound.var(layer.wo))?;
    let res1 = tape.add(x, attn)?;
    let norm1 = tape.layer_norm(
        res1,
        bound.var(layer.ln1_gamma),
        bound.var(layer.ln1_beta),
        LAYER_NORM_EPS,
    )?;

    let ff_hidden = tape.linear(norm1, bound.var(layer.ff_w1), bound.var(layer.ff_b1))?;
    let ff_act = tape.relu(ff_hidden);
    let ff_out = tape.linear(ff_act, bound.var(layer.ff_w2), bound.var(layer.ff_b2))?;
    let res2 = tape.add(norm1, ff_out)?;
    tape.layer_norm(
        res2,
        bound.var(layer.ln2_gamma),
        bound.var(layer.ln2_beta),
        LAYER_NORM_EPS,
    )
}

/// Running topic vector. The accumulator is a forward-only statistic: it is
/// built from detached values and receives no gradient.
#[derive(Clone, Debug)]
pub struct TopicState {
    accumulator: Vec<f64>,
    cumulative_weight: f64,
    eta: f64,
    counter: usize,
    mode: TopicMode,
}

impl TopicState {
    pub fn new(dim: usize, eta: f64, mode: TopicMode) -> Self {
        TopicState {
            accumulator: vec![0.0; dim],
            cumulative_weight: 0.0,
            eta,
            counter: 0,
            mode,
        }
    }

    pub fn cumulative_weight(&self) -> f64 {
        self.cumulative_weight
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    /// Topic vector before observing the current utterance.
    pub fn current(&self) -> Vec<f64> {
        match self.mode {
            TopicMode::Raw => self.accumulator.clone(),
            TopicMode::Normalized => {
                if self.cumulative_weight == 0.0 {
                    vec![0.0; self.accumulator.len()]
                } else {
                    self.accumulator
                        .iter()
                        .map(|x| x / self.cumulative_weight)
                        .collect()
                }
            }
        }
    }

    /// Fold in the contextual vector of utterance `counter`; returns the
    /// weight e^(eta * i) applied to it.
    pub fn observe(&mut self, z: &[f64]) -> f64 {
        let weight = (self.eta * self.counter as f64).exp();
        for (acc, &zi) in self.accumulator.iter_mut().zip(z) {
            *acc += weight * zi;
        }
        self.cumulative_weight += weight;
        self.counter += 1;
        weight
    }
}

/// Squared Euclidean distance between two equal-shape tensors.
pub fn recon_loss(reconstructed: &Tensor, original: &Tensor) -> Result<f64> {
    let diff = reconstructed.sub(original)?;
    Ok(diff.sq_norm())
}

pub struct FusionForward {
    /// Contextual representations, m x d_context.
    pub contextual: Var,
    /// Specific representations, m x 3 d_specific.
    pub specific: Var,
    /// Node features h = contextual (+) specific, m x d_node.
    pub node_features: Var,
    pub j_smooth: Var,
    pub j_rec_g: Var,
    pub j_rec_l: Var,
    /// L_mf = J_smooth + J_rec_g + J_rec_l.
    pub fusion_loss: Var,
    /// The (detached) topic vectors J_smooth was computed against.
    pub topic_targets: Tensor,
}

/// Feature matrices of one dialogue in utterance order.
pub fn dialogue_features(dialogue: &Dialogue) -> Result<[Tensor; 3]> {
    let v: Vec<Vec<f64>> = dialogue.utterances.iter().map(|u| u.feat_v.clone()).collect();
    let a: Vec<Vec<f64>> = dialogue.utterances.iter().map(|u| u.feat_a.clone()).collect();
    let t: Vec<Vec<f64>> = dialogue.utterances.iter().map(|u| u.feat_t.clone()).collect();
    Ok([
        Tensor::from_rows(&v)?,
        Tensor::from_rows(&a)?,
        Tensor::from_rows(&t)?,
    ])
}

/// Contextual branch only: project each modality, concatenate, and run the
/// attention encoder over the dialogue.
pub fn contextual_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &FusionIds,
    inputs: [Var; 3],
) -> Result<(Var, Var)> {
    let z_v = mlp_forward(tape, bound, &ids.context_nets[0], inputs[0])?;
    let z_a = mlp_forward(tape, bound, &ids.context_nets[1], inputs[1])?;
    let z_t = mlp_forward(tape, bound, &ids.context_nets[2], inputs[2])?;
    let z_m_g = tape.concat_cols(&[z_v, z_a, z_t])?;
    let mut encoded = z_m_g;
    for layer in &ids.encoder_layers {
        encoded = attention_layer(tape, bound, layer, encoded, ids.n_heads)?;
    }
    Ok((encoded, z_m_g))
}

/// Pre-update topic vectors for every utterance of a dialogue, row i holding
/// the accumulator state before observing utterance i.
pub fn topic_targets(contextual: &Tensor, eta: f64, mode: TopicMode) -> (Tensor, TopicState) {
    let mut state = TopicState::new(contextual.cols(), eta, mode);
    let mut targets = Tensor::zeros(contextual.rows(), contextual.cols());
    for i in 0..contextual.rows() {
        let pre = state.current();
        for (j, &t) in pre.iter().enumerate() {
            targets.set(i, j, t);
        }
        state.observe(contextual.row_slice(i));
    }
    (targets, state)
}

/// Topic smoothing over a dialogue: each utterance contributes its squared
/// distance to the pre-update topic vector, then updates the accumulator.
/// The accumulator is a constant during backward; `frozen_targets` lets a
/// finite-difference probe hold it at base-point values so the probe sees the
/// same stop-gradient function the tape differentiates.
pub fn topic_smooth_loss(
    tape: &mut Tape,
    contextual: Var,
    eta: f64,
    mode: TopicMode,
    frozen_targets: Option<&Tensor>,
) -> Result<(Var, Tensor)> {
    let targets = match frozen_targets {
        Some(t) => t.clone(),
        None => topic_targets(tape.value(contextual), eta, mode).0,
    };
    let target_var = tape.leaf(targets.clone());
    let loss = tape.mean_row_sq_dist(contextual, target_var)?;
    Ok((loss, targets))
}

/// Specific branch: project into the shared subspace, score against the
/// projected basis, normalize, and recombine. Returns (specific, raw
/// projections) both m x 3 d_specific.
pub fn specific_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &FusionIds,
    inputs: [Var; 3],
    similarity: BasisSimilarity,
) -> Result<(Var, Var)> {
    let basis_proj = tape.matmul(bound.var(ids.basis), bound.var(ids.proj_basis))?;
    let projections = [ids.proj_v, ids.proj_a, ids.proj_t];
    let mut raw = Vec::with_capacity(3);
    let mut rebuilt = Vec::with_capacity(3);
    for (i, net) in ids.specific_nets.iter().enumerate() {
        let z = mlp_forward(tape, bound, net, inputs[i])?;
        raw.push(z);
        let z_shared = tape.matmul(z, bound.var(projections[i]))?;
        let scores = match similarity {
            BasisSimilarity::Dot => {
                let bt = tape.transpose(basis_proj);
                tape.matmul(z_shared, bt)?
            }
            BasisSimilarity::Cosine => {
                let zn = tape.row_normalize(z_shared);
                let bn = tape.row_normalize(basis_proj);
                let bt = tape.transpose(bn);
                tape.matmul(zn, bt)?
            }
        };
        let weights = tape.row_softmax(scores);
        rebuilt.push(tape.matmul(weights, basis_proj)?);
    }
    let specific = tape.concat_cols(&rebuilt)?;
    let raw_concat = tape.concat_cols(&raw)?;
    Ok((specific, raw_concat))
}

/// Full fusion pass over one dialogue. `frozen_topic` is only used by
/// finite-difference probes; training passes `None`.
pub fn fusion_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &FusionIds,
    config: &FusionConfig,
    features: &[Tensor; 3],
    frozen_topic: Option<&Tensor>,
) -> Result<FusionForward> {
    let inputs = [
        tape.leaf(features[0].clone()),
        tape.leaf(features[1].clone()),
        tape.leaf(features[2].clone()),
    ];
    let (contextual, z_m_g) = contextual_forward(tape, bound, ids, inputs)?;
    let (j_smooth, topic_targets) = topic_smooth_loss(
        tape,
        contextual,
        config.eta,
        config.topic_mode,
        frozen_topic,
    )?;
    let j_rec_g = tape.mean_row_sq_dist(contextual, z_m_g)?;

    let (specific, raw_specific) =
        specific_forward(tape, bound, ids, inputs, config.basis_similarity)?;
    let j_rec_l = tape.mean_row_sq_dist(specific, raw_specific)?;

    let partial = tape.add(j_smooth, j_rec_g)?;
    let fusion_loss = tape.add(partial, j_rec_l)?;
    let node_features = tape.concat_cols(&[contextual, specific])?;

    Ok(FusionForward {
        contextual,
        specific,
        node_features,
        j_smooth,
        j_rec_g,
        j_rec_l,
        fusion_loss,
        topic_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(dims: ModelDims, config: &FusionConfig) -> (ParamStore, FusionIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = register_fusion(&mut store, &mut rng, &dims, config).unwrap();
        (store, ids)
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            d_v: 4,
            d_a: 4,
            d_t: 4,
            d_specific: 3,
            q: 2,
        }
    }

    fn small_config() -> FusionConfig {
        FusionConfig {
            n_layers: 1,
            n_heads: 2,
            d_specific: 3,
            q: 2,
            ..FusionConfig::default()
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, m: usize, dims: &ModelDims) -> [Tensor; 3] {
        let mut make = |d: usize| {
            Tensor::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        [make(dims.d_v), make(dims.d_a), make(dims.d_t)]
    }

    #[test]
    fn output_dims_follow_the_dimension_table() {
        // Corpus preset 512/100/768 with 460-wide specific nets.
        let dims = ModelDims {
            d_v: 512,
            d_a: 100,
            d_t: 768,
            d_specific: 460,
            q: 8,
        };
        assert_eq!(dims.d_context(), 1380);
        assert_eq!(dims.d_node(), 2760);

        let config = FusionConfig {
            n_layers: 1,
            n_heads: 4,
            d_specific: 460,
            q: 8,
            ..FusionConfig::default()
        };
        let (store, ids) = setup(dims, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = random_features(&mut rng, 2, &dims);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let out = fusion_forward(&mut tape, &bound, &ids, &config, &features, None).unwrap();
        assert_eq!(tape.value(out.contextual).shape(), [2, 1380]);
        assert_eq!(tape.value(out.specific).shape(), [2, 1380]);
        assert_eq!(tape.value(out.node_features).shape(), [2, 2760]);
    }

    #[test]
    fn zero_inputs_and_zero_parameters_give_zero_context() {
        let dims = small_dims();
        let config = small_config();
        let (mut store, ids) = setup(dims, &config);
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let features = [
            Tensor::zeros(3, dims.d_v),
            Tensor::zeros(3, dims.d_a),
            Tensor::zeros(3, dims.d_t),
        ];
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let inputs = [
            tape.leaf(features[0].clone()),
            tape.leaf(features[1].clone()),
            tape.leaf(features[2].clone()),
        ];
        let (contextual, _) = contextual_forward(&mut tape, &bound, &ids, inputs).unwrap();
        assert!(tape.value(contextual).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn topic_state_matches_closed_forms() {
        // First utterance against a zero topic vector.
        let mut state = TopicState::new(2, 0.2, TopicMode::Normalized);
        assert_eq!(state.current(), vec![0.0, 0.0]);
        state.observe(&[3.0, 4.0]);
        assert_eq!(state.current(), vec![3.0, 4.0]);

        // A constant sequence is a fixed point after the first update.
        state.observe(&[3.0, 4.0]);
        state.observe(&[3.0, 4.0]);
        for (x, want) in state.current().iter().zip([3.0, 4.0]) {
            assert!((x - want).abs() < 1e-12);
        }
        let expected_weight: f64 = (0..3).map(|k| (0.2 * k as f64).exp()).sum();
        assert!((state.cumulative_weight() - expected_weight).abs() < 1e-12);

        // Raw mode at i = 5 applies weight e^(0.2 * 5) = e.
        let mut raw = TopicState::new(1, 0.2, TopicMode::Raw);
        for _ in 0..5 {
            raw.observe(&[0.0]);
        }
        let w = raw.observe(&[1.0]);
        assert!((w - 1.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn topic_loss_zero_init_and_constant_fixed_point() {
        let dims = small_dims();
        let config = small_config();
        let (store, ids) = setup(dims, &config);
        let _ = (store, ids);

        // Constant rows: only the first utterance contributes.
        let mut tape = Tape::new();
        let row = vec![1.0, -2.0, 0.5];
        let constant = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let v = tape.leaf(constant);
        let (loss, _) = topic_smooth_loss(&mut tape, v, 0.2, TopicMode::Normalized, None).unwrap();
        let first_norm_sq = 1.0 + 4.0 + 0.25;
        assert!((tape.value(loss).item() - first_norm_sq / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_examples() {
        let x = Tensor::row(&[1.0, 2.0]);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let y = Tensor::row(&[2.0, 3.0]);
        assert_eq!(recon_loss(&y, &x).unwrap(), 2.0);
        assert_eq!(
            recon_loss(&x, &y).unwrap(),
            recon_loss(&y, &x).unwrap()
        );
        assert!(recon_loss(&x, &Tensor::row(&[1.0])).is_err());
    }

    #[test]
    fn single_basis_vector_collapses_specific_outputs() {
        let dims = ModelDims {
            d_v: 4,
            d_a: 4,
            d_t: 4,
            d_specific: 3,
            q: 1,
        };
        let config = FusionConfig {
            n_layers: 1,
            n_heads: 2,
            d_specific: 3,
            q: 1,
            ..FusionConfig::default()
        };
        let (store, ids) = setup(dims, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = random_features(&mut rng, 3, &dims);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let inputs = [
            tape.leaf(features[0].clone()),
            tape.leaf(features[1].clone()),
            tape.leaf(features[2].clone()),
        ];
        let (specific, _) =
            specific_forward(&mut tape, &bound, &ids, inputs, BasisSimilarity::Dot).unwrap();

        // With q = 1, every modality output equals the single projected basis
        // vector, tiled three times.
        let basis_proj = store
            .get(ids.basis)
            .matmul(store.get(ids.proj_basis))
            .unwrap();
        let out = tape.value(specific);
        for i in 0..3 {
            for rep in 0..3 {
                for j in 0..3 {
                    assert!(
                        (out.get(i, rep * 3 + j) - basis_proj.get(0, j)).abs() < 1e-12,
                        "row {i} block {rep} col {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn fusion_loss_gradient_matches_finite_differences() {
        let dims = small_dims();
        let config = small_config();
        let (store, ids) = setup(dims, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = random_features(&mut rng, 3, &dims);

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let out = fusion_forward(&mut tape, &bound, &ids, &config, &features, None).unwrap();
        tape.backward(out.fusion_loss).unwrap();
        let grads = bound.gradients(&tape, &store);

        // The topic accumulator is a stop-gradient target, so the probe must
        // evaluate the same frozen-target function the tape differentiates.
        let frozen = out.topic_targets.clone();
        let loss_for = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, store);
            let out =
                fusion_forward(&mut tape, &bound, &ids, &config, &features, Some(&frozen)).unwrap();
            tape.value(out.fusion_loss).item()
        };

        // Probe a spread of parameters across all groups.
        let mut probe = store.clone();
        let h = 1e-5;
        let mut checked = 0;
        for pid in 0..store.len() {
            let len = store.tensors()[pid].len();
            for k in [0, len / 2, len - 1] {
                let original = probe.tensors()[pid].data()[k];
                probe.tensors_mut()[pid].data_mut()[k] = original + h;
                let up = loss_for(&probe);
                probe.tensors_mut()[pid].data_mut()[k] = original - h;
                let down = loss_for(&probe);
                probe.tensors_mut()[pid].data_mut()[k] = original;
                let fd = (up - down) / (2.0 * h);
                let analytic = grads[pid].data()[k];
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "param {} coord {k}: analytic {analytic} vs fd {fd}",
                    store.name(crate::params::ParamId(pid))
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
