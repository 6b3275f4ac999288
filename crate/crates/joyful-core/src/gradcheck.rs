//! Full-pipeline gradient verification.
//!
//! Builds a micro model (4-wide features, 3 utterances, one GCN layer), runs
//! the joint objective once to collect analytic gradients, then probes
//! randomly sampled parameter coordinates with central finite differences.
//! The topic accumulator and the augmentation draws are frozen across probe
//! evaluations, so the probed function is exactly the one the tape
//! differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::corpus::{generate_synthetic, Corpus, FeatureDims, SyntheticSpec};
use crate::error::Result;
use crate::params::BoundParams;
use crate::seeding::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{forward_dialogue, Model};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckFailure {
    pub parameter: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub sampled: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub failures: Vec<GradcheckFailure>,
}

/// Micro configuration: every module active at the smallest useful width.
pub fn micro_config(seed: u64) -> Config {
    let mut config = Config::default();
    config.seed = seed;
    config.fusion.n_layers = 1;
    config.fusion.n_heads = 2;
    config.fusion.d_specific = 3;
    config.fusion.q = 2;
    config.encoder.layers = 1;
    config.graph.window_past = 8;
    config.graph.window_future = 8;
    config.augment.p = 0.2;
    config
}

fn micro_corpus(seed: u64) -> Result<Corpus> {
    let spec = SyntheticSpec::separated(
        2,
        1,
        3,
        2,
        FeatureDims::uniform(4),
        1.0,
        4.0,
        derive_seed(seed, &[0x10]),
    )?;
    generate_synthetic(&spec)
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Check `samples` randomly chosen parameter coordinates of the joint loss
/// against central finite differences.
pub fn full_pipeline_gradcheck(seed: u64, samples: usize) -> Result<GradcheckReport> {
    let config = micro_config(seed);
    let corpus = micro_corpus(seed)?;
    let dialogue = &corpus.dialogues[0];
    let model = Model::init(&config, corpus.dims, corpus.label_space.clone())?;
    let augment_seed = derive_seed(seed, &[0x11]);

    // Analytic pass; capture the frozen topic targets for the probes.
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.store);
    let forward = forward_dialogue(&mut tape, &bound, &model, dialogue, Some(augment_seed), None)?;
    tape.backward(forward.total_loss)?;
    let grads = bound.gradients(&tape, &model.store);
    let frozen_topic: Tensor = forward.topic_targets.clone();

    let mut probe_model = Model::init(&config, corpus.dims, corpus.label_space.clone())?;
    let loss_at = |model: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.store);
        let forward = forward_dialogue(
            &mut tape,
            &bound,
            model,
            dialogue,
            Some(augment_seed),
            Some(&frozen_topic),
        )?;
        Ok(tape.value(forward.total_loss).item())
    };

    // Sample coordinates without replacement across the flattened store.
    let total: usize = model.store.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x12]));
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < samples.min(total) {
        chosen.insert(rng.random_range(0..total));
    }

    let mut offsets = Vec::with_capacity(model.store.len());
    let mut acc = 0usize;
    for t in model.store.tensors() {
        offsets.push(acc);
        acc += t.len();
    }

    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for flat in chosen {
        let pid = match offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let k = flat - offsets[pid];
        let base = model.store.tensors()[pid].data()[k];

        probe_model.store.tensors_mut()[pid].data_mut()[k] = base + FD_STEP;
        let up = loss_at(&probe_model)?;
        probe_model.store.tensors_mut()[pid].data_mut()[k] = base - FD_STEP;
        let down = loss_at(&probe_model)?;
        probe_model.store.tensors_mut()[pid].data_mut()[k] = base;

        let fd = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[pid].data()[k];
        let err = rel_err(analytic, fd);
        max_rel = max_rel.max(err);
        if err > DEFAULT_TOLERANCE {
            failures.push(GradcheckFailure {
                parameter: model.store.name(crate::params::ParamId(pid)).to_string(),
                coordinate: k,
                analytic,
                finite_difference: fd,
                rel_err: err,
            });
        }
    }

    Ok(GradcheckReport {
        sampled: samples.min(total),
        tolerance: DEFAULT_TOLERANCE,
        max_rel_err: max_rel,
        passed: failures.is_empty(),
        failures,
    })
}
