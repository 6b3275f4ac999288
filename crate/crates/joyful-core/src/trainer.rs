//! Joint training loop, inference, and model (de)serialization.
//!
//! Per dialogue per epoch: fusion forward, node features, graph
//! construction, two augmented views under fresh derived seeds, encoding of
//! both views, contrastive loss, summed representations into the classifier,
//! task loss, joint objective, backward, Adam step. Everything is a
//! deterministic function of the config seed.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Config, Task};
use crate::corpus::{Corpus, Dialogue, FeatureDims, Label, LabelSpace};
use crate::encoder::{contrastive_loss, gcn_forward, register_gcn, GcnLayerIds};
use crate::error::{Error, Result};
use crate::fusion::{
    dialogue_features, fusion_forward, register_fusion, xavier_init, FusionIds, ModelDims,
};
use crate::graph::{column_mask_tensor, make_views, AugmentConfig, DialogueGraph};
use crate::metrics::{accuracy, mean_absolute_error, weighted_f1};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::seeding::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const SEED_STREAM_INIT: u64 = 0x01;
const SEED_STREAM_AUGMENT: u64 = 0x02;

/// All trainable parameter groups plus everything needed to rebuild them.
pub struct Model {
    pub store: ParamStore,
    pub fusion_ids: FusionIds,
    pub gcn_ids: Vec<GcnLayerIds>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    pub dims: ModelDims,
    pub feature_dims: FeatureDims,
    pub label_space: LabelSpace,
    pub config: Config,
}

impl Model {
    pub fn init(config: &Config, feature_dims: FeatureDims, label_space: LabelSpace) -> Result<Model> {
        config.validate()?;
        if let (Task::Classification, LabelSpace::Regression) =
            (config.train.task, &label_space)
        {
            return Err(Error::Config(
                "classification task on a regression corpus".into(),
            ));
        }
        if let (Task::Regression, LabelSpace::Classes(_)) = (config.train.task, &label_space) {
            return Err(Error::Config(
                "regression task on a classification corpus".into(),
            ));
        }
        let dims = ModelDims {
            d_v: feature_dims.v,
            d_a: feature_dims.a,
            d_t: feature_dims.t,
            d_specific: config.fusion.d_specific,
            q: config.fusion.q,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SEED_STREAM_INIT]));
        let mut store = ParamStore::new();
        let fusion_ids = register_fusion(&mut store, &mut rng, &dims, &config.fusion)?;
        let gcn_ids = register_gcn(&mut store, &mut rng, dims.d_node(), config.encoder.layers)?;
        let out_width = match &label_space {
            LabelSpace::Classes(names) => names.len(),
            LabelSpace::Regression => 1,
        };
        let classifier_w =
            store.register("classifier.w", xavier_init(&mut rng, dims.d_node(), out_width))?;
        let classifier_b = store.register("classifier.b", Tensor::zeros(1, out_width))?;
        Ok(Model {
            store,
            fusion_ids,
            gcn_ids,
            classifier_w,
            classifier_b,
            dims,
            feature_dims,
            label_space,
            config: config.clone(),
        })
    }
}

/// Affine classification head; softmax lives in the loss.
pub fn classify(tape: &mut Tape, bound: &BoundParams, model: &Model, h: Var) -> Result<Var> {
    tape.linear(h, bound.var(model.classifier_w), bound.var(model.classifier_b))
}

pub struct DialogueForward {
    pub fusion_loss: Var,
    pub contrastive: Var,
    pub task_loss: Var,
    pub total_loss: Var,
    /// Logits (classification) or the prediction column (regression).
    pub outputs: Var,
    pub topic_targets: Tensor,
}

fn dialogue_labels(dialogue: &Dialogue) -> (Vec<usize>, Vec<f64>) {
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for u in &dialogue.utterances {
        match u.label {
            Label::Class(c) => classes.push(c),
            Label::Score(s) => scores.push(s),
        }
    }
    (classes, scores)
}

/// One dialogue through the full pipeline. `augment_seed` enables the two
/// contrastive views; `None` encodes the bare graph once and doubles it,
/// matching the training-time H1 + H2 scale. `frozen_topic` serves
/// finite-difference probes only.
pub fn forward_dialogue(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    dialogue: &Dialogue,
    augment_seed: Option<u64>,
    frozen_topic: Option<&Tensor>,
) -> Result<DialogueForward> {
    let config = &model.config;
    let features = dialogue_features(dialogue)?;
    if features[0].cols() != model.dims.d_v
        || features[1].cols() != model.dims.d_a
        || features[2].cols() != model.dims.d_t
    {
        return Err(Error::dims(
            format!("dialogue {} features vs model", dialogue.dialogue_id),
            &[features[0].cols(), features[1].cols(), features[2].cols()],
            &[model.dims.d_v, model.dims.d_a, model.dims.d_t],
        ));
    }

    let fusion = fusion_forward(
        tape,
        bound,
        &model.fusion_ids,
        &config.fusion,
        &features,
        frozen_topic,
    )?;
    let h = fusion.node_features;
    let m = dialogue.len();
    let d_node = model.dims.d_node();

    let graph = DialogueGraph::build(
        &dialogue.speaker_indices(),
        config.graph.window_past,
        config.graph.window_future,
    );

    let (encoded_sum, contrastive) = match augment_seed {
        Some(seed) => {
            let aug = AugmentConfig {
                p: config.augment.p,
                katz_beta: config.augment.katz_beta,
                katz_max_order: config.augment.katz_max_order,
                katz_threshold: config.augment.katz_threshold,
                seed,
            };
            let (view1, view2) = make_views(&graph, d_node, &aug)?;
            let mask1 = column_mask_tensor(m, d_node, &view1.masked_columns);
            let mask2 = column_mask_tensor(m, d_node, &view2.masked_columns);
            let x1 = tape.mul_mask(h, mask1)?;
            let x2 = tape.mul_mask(h, mask2)?;
            let h1 = gcn_forward(tape, bound, &model.gcn_ids, &view1.graph, x1)?;
            let h2 = gcn_forward(tape, bound, &model.gcn_ids, &view2.graph, x2)?;
            let l_ct = contrastive_loss(
                tape,
                h1,
                h2,
                config.encoder.temperature,
                config.encoder.symmetrize_views,
            )?;
            (tape.add(h1, h2)?, l_ct)
        }
        None => {
            let encoded = gcn_forward(tape, bound, &model.gcn_ids, &graph, h)?;
            let l_ct = contrastive_loss(
                tape,
                encoded,
                encoded,
                config.encoder.temperature,
                config.encoder.symmetrize_views,
            )?;
            (tape.scale(encoded, 2.0), l_ct)
        }
    };

    let outputs = classify(tape, bound, model, encoded_sum)?;
    let (classes, scores) = dialogue_labels(dialogue);
    let task_loss = match config.train.task {
        Task::Classification => tape.cross_entropy(outputs, &classes)?,
        Task::Regression => tape.mean_abs_error(outputs, &scores)?,
    };

    let weighted_fusion = tape.scale(fusion.fusion_loss, config.train.alpha);
    let weighted_ct = tape.scale(contrastive, config.train.beta);
    let partial = tape.add(weighted_fusion, weighted_ct)?;
    let total_loss = tape.add(partial, task_loss)?;

    Ok(DialogueForward {
        fusion_loss: fusion.fusion_loss,
        contrastive,
        task_loss,
        total_loss,
        outputs,
        topic_targets: fusion.topic_targets,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_fusion_loss: f64,
    pub mean_contrastive_loss: f64,
    pub mean_task_loss: f64,
    pub mean_total_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_weighted_f1: Option<f64>,
    pub val_mae: Option<f64>,
    /// Informational only; excluded from serialized reports so identical
    /// runs produce identical bytes.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub fn train(
    corpus: &Corpus,
    config: &Config,
    validation: Option<&Corpus>,
) -> Result<(Model, Vec<EpochReport>)> {
    if corpus.dialogues.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    let mut model = Model::init(config, corpus.dims, corpus.label_space.clone())?;
    let adam_config = AdamConfig {
        lr: config.train.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &model.store.shapes());

    let mut reports = Vec::with_capacity(config.train.epochs);
    let mut best_val_f1 = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.train.epochs {
        let started = Instant::now();
        let mut sums = [0.0f64; 4];
        let mut grad_group: Option<Vec<Tensor>> = None;
        let mut group_size = 0usize;

        for (dialogue_index, dialogue) in corpus.dialogues.iter().enumerate() {
            let augment_seed = derive_seed(
                config.seed,
                &[SEED_STREAM_AUGMENT, epoch as u64, dialogue_index as u64],
            );
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &model.store);
            let forward = forward_dialogue(
                &mut tape,
                &bound,
                &model,
                dialogue,
                Some(augment_seed),
                None,
            )?;
            let total = tape.value(forward.total_loss).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    epoch,
                });
            }
            sums[0] += tape.value(forward.fusion_loss).item();
            sums[1] += tape.value(forward.contrastive).item();
            sums[2] += tape.value(forward.task_loss).item();
            sums[3] += total;

            tape.backward(forward.total_loss)?;
            let grads = bound.gradients(&tape, &model.store);
            match &mut grad_group {
                None => grad_group = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (ai, gi) in a.data_mut().iter_mut().zip(g.data()) {
                            *ai += gi;
                        }
                    }
                }
            }
            group_size += 1;

            if group_size == config.train.batch_dialogues {
                apply_group(&mut adam, &mut model.store, grad_group.take().unwrap(), group_size)?;
                group_size = 0;
            }
        }
        if let Some(grads) = grad_group.take() {
            apply_group(&mut adam, &mut model.store, grads, group_size)?;
        }

        let n = corpus.dialogues.len() as f64;
        let mut report = EpochReport {
            epoch,
            mean_fusion_loss: sums[0] / n,
            mean_contrastive_loss: sums[1] / n,
            mean_task_loss: sums[2] / n,
            mean_total_loss: sums[3] / n,
            val_accuracy: None,
            val_weighted_f1: None,
            val_mae: None,
            wall_clock_secs: 0.0,
        };

        if let Some(val) = validation {
            match config.train.task {
                Task::Classification => {
                    let (preds, labels) = predict_classes(&model, val)?;
                    let k = val.label_space.num_classes().unwrap_or(0);
                    report.val_accuracy = Some(accuracy(&preds, &labels)?);
                    report.val_weighted_f1 = Some(weighted_f1(&preds, &labels, k)?.weighted_f1);
                }
                Task::Regression => {
                    let (preds, targets) = predict_scores(&model, val)?;
                    report.val_mae = Some(mean_absolute_error(&preds, &targets)?);
                }
            }
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        let val_f1 = report.val_weighted_f1;
        reports.push(report);

        if let (Some(patience), Some(f1)) = (config.train.early_stop_patience, val_f1) {
            if f1 > best_val_f1 {
                best_val_f1 = f1;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best > patience {
                    break;
                }
            }
        }
    }

    Ok((model, reports))
}

fn apply_group(
    adam: &mut AdamState,
    store: &mut ParamStore,
    mut grads: Vec<Tensor>,
    group_size: usize,
) -> Result<()> {
    if group_size > 1 {
        let inv = 1.0 / group_size as f64;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
    }
    adam.step(store.tensors_mut(), &grads)
}

/// Per-utterance labels for one dialogue, deterministic argmax (first index
/// wins ties) for classification.
pub fn predict_dialogue(model: &Model, dialogue: &Dialogue) -> Result<Vec<Label>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.store);
    let forward = forward_dialogue(&mut tape, &bound, model, dialogue, None, None)?;
    let outputs = tape.value(forward.outputs);
    let labels = match model.config.train.task {
        Task::Classification => (0..outputs.rows())
            .map(|i| {
                let row = outputs.row_slice(i);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                Label::Class(best)
            })
            .collect(),
        Task::Regression => (0..outputs.rows())
            .map(|i| Label::Score(outputs.get(i, 0)))
            .collect(),
    };
    Ok(labels)
}

/// Flat (prediction, truth) class vectors over a whole corpus, in dialogue
/// and utterance order.
pub fn predict_classes(model: &Model, corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for dialogue in &corpus.dialogues {
        for (label, u) in predict_dialogue(model, dialogue)?.iter().zip(&dialogue.utterances) {
            match (label, u.label) {
                (Label::Class(p), Label::Class(y)) => {
                    preds.push(*p);
                    truth.push(y);
                }
                _ => return Err(Error::contract("class prediction on regression corpus")),
            }
        }
    }
    Ok((preds, truth))
}

pub fn predict_scores(model: &Model, corpus: &Corpus) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for dialogue in &corpus.dialogues {
        for (label, u) in predict_dialogue(model, dialogue)?.iter().zip(&dialogue.utterances) {
            match (label, u.label) {
                (Label::Score(p), Label::Score(y)) => {
                    preds.push(*p);
                    truth.push(y);
                }
                _ => return Err(Error::contract("score prediction on classification corpus")),
            }
        }
    }
    Ok((preds, truth))
}

// ---------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------

fn schema_value(model: &Model) -> Value {
    match &model.label_space {
        LabelSpace::Classes(names) => json!({
            "dims": {"v": model.feature_dims.v, "a": model.feature_dims.a, "t": model.feature_dims.t},
            "labels": names,
        }),
        LabelSpace::Regression => json!({
            "dims": {"v": model.feature_dims.v, "a": model.feature_dims.a, "t": model.feature_dims.t},
            "regression": true,
        }),
    }
}

pub fn save_model(model: &Model) -> Result<String> {
    checkpoint::write_checkpoint(
        &model.store,
        &model.config.to_value(),
        &schema_value(model),
        model.config.seed,
    )
}

pub fn load_model(text: &str) -> Result<Model> {
    let Checkpoint {
        config,
        schema,
        params,
        ..
    } = checkpoint::read_checkpoint(text)?;
    let config = Config::from_value(&config)?;
    let dims_obj = schema
        .get("dims")
        .ok_or_else(|| Error::Checkpoint("schema missing dims".into()))?;
    let dim = |key: &str| -> Result<usize> {
        dims_obj
            .get(key)
            .and_then(Value::as_u64)
            .map(|d| d as usize)
            .ok_or_else(|| Error::Checkpoint(format!("schema dims missing {key:?}")))
    };
    let feature_dims = FeatureDims {
        v: dim("v")?,
        a: dim("a")?,
        t: dim("t")?,
    };
    let label_space = if schema.get("regression").and_then(Value::as_bool) == Some(true) {
        LabelSpace::Regression
    } else {
        let names = schema
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Checkpoint("schema missing labels".into()))?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Checkpoint("schema labels must be strings".into()))?;
        LabelSpace::Classes(names)
    };

    let mut model = Model::init(&config, feature_dims, label_space)?;
    let checkpoint = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        config_hash: String::new(),
        rng_seed: config.seed,
        config: config.to_value(),
        schema: schema_value(&model),
        params,
    };
    checkpoint::load_into_store(&checkpoint, &mut model.store)?;
    Ok(model)
}
