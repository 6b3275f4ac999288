//! Corpus ingestion, synthetic generation, and splitting.
//!
//! The on-disk format is JSONL: a header line declaring feature dimensions
//! and the label vocabulary (or a regression flag), then one object per
//! utterance with keys `dialogue_id`, `index`, `speaker`, `label`, `v`, `a`,
//! `t`. Labels are stored as strings and mapped to dense indices in header
//! order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureDims {
    pub v: usize,
    pub a: usize,
    pub t: usize,
}

impl FeatureDims {
    pub fn uniform(d: usize) -> Self {
        FeatureDims { v: d, a: d, t: d }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSpace {
    /// Class names; index order is the dense label encoding.
    Classes(Vec<String>),
    Regression,
}

impl LabelSpace {
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            LabelSpace::Classes(names) => Some(names.len()),
            LabelSpace::Regression => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub dialogue_id: String,
    pub index: usize,
    pub speaker_id: String,
    pub label: Label,
    pub feat_v: Vec<f64>,
    pub feat_a: Vec<f64>,
    pub feat_t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<UtteranceRecord>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker_id.as_str()) {
                seen.push(u.speaker_id.as_str());
            }
        }
        seen
    }

    /// Speaker of each utterance as a dense index into `speakers()`.
    pub fn speaker_indices(&self) -> Vec<usize> {
        let speakers = self.speakers();
        self.utterances
            .iter()
            .map(|u| speakers.iter().position(|s| *s == u.speaker_id).unwrap())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub label_space: LabelSpace,
    pub dims: FeatureDims,
}

impl Corpus {
    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.dialogue_id == id)
    }
}

// ---------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------

pub fn parse_corpus_file(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::CorpusFormat("empty corpus".into()))?;
    let header: Value = serde_json::from_str(header_line)
        .map_err(|e| Error::CorpusFormat(format!("invalid header line: {e}")))?;
    if header.get("header").and_then(Value::as_bool) != Some(true) {
        return Err(Error::CorpusFormat(
            "first line must be a header object with \"header\": true".into(),
        ));
    }
    let dims = parse_dims(&header)?;
    let label_space = parse_label_space(&header)?;

    let mut order: Vec<String> = Vec::new();
    let mut by_dialogue: HashMap<String, Vec<UtteranceRecord>> = HashMap::new();

    for (line_no, line) in lines {
        let row: Value = serde_json::from_str(line)
            .map_err(|e| Error::CorpusFormat(format!("line {}: invalid JSON: {e}", line_no + 1)))?;
        let record = parse_record(&row, &dims, &label_space, line_no + 1)?;
        if !by_dialogue.contains_key(&record.dialogue_id) {
            order.push(record.dialogue_id.clone());
        }
        by_dialogue
            .entry(record.dialogue_id.clone())
            .or_default()
            .push(record);
    }

    let mut dialogues = Vec::with_capacity(order.len());
    for id in order {
        let mut utterances = by_dialogue.remove(&id).unwrap();
        utterances.sort_by_key(|u| u.index);
        for (expected, u) in utterances.iter().enumerate() {
            if u.index != expected {
                let message = if utterances.iter().filter(|o| o.index == u.index).count() > 1 {
                    format!("duplicate utterance index {}", u.index)
                } else {
                    format!("utterance indices not contiguous: expected {expected}, found {}", u.index)
                };
                return Err(Error::Corpus {
                    dialogue_id: id,
                    index: u.index,
                    message,
                });
            }
        }
        dialogues.push(Dialogue {
            dialogue_id: id,
            utterances,
        });
    }
    if dialogues.is_empty() {
        return Err(Error::CorpusFormat("corpus has no utterances".into()));
    }

    Ok(Corpus {
        dialogues,
        label_space,
        dims,
    })
}

fn parse_dims(header: &Value) -> Result<FeatureDims> {
    let dims = header
        .get("dims")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::CorpusFormat("header missing dims object".into()))?;
    let get = |key: &str| -> Result<usize> {
        dims.get(key)
            .and_then(Value::as_u64)
            .map(|d| d as usize)
            .ok_or_else(|| Error::CorpusFormat(format!("header dims missing {key:?}")))
    };
    Ok(FeatureDims {
        v: get("v")?,
        a: get("a")?,
        t: get("t")?,
    })
}

fn parse_label_space(header: &Value) -> Result<LabelSpace> {
    if header.get("regression").and_then(Value::as_bool) == Some(true) {
        return Ok(LabelSpace::Regression);
    }
    let labels = header
        .get("labels")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::CorpusFormat("header needs labels array or regression flag".into()))?;
    let names: Option<Vec<String>> = labels
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect();
    let names = names.ok_or_else(|| Error::CorpusFormat("labels must be strings".into()))?;
    if names.is_empty() {
        return Err(Error::CorpusFormat("label vocabulary is empty".into()));
    }
    let mut seen = HashSet::new();
    for name in &names {
        if !seen.insert(name) {
            return Err(Error::CorpusFormat(format!("duplicate label {name:?}")));
        }
    }
    Ok(LabelSpace::Classes(names))
}

fn parse_record(
    row: &Value,
    dims: &FeatureDims,
    label_space: &LabelSpace,
    line_no: usize,
) -> Result<UtteranceRecord> {
    let fail = |msg: String| Error::CorpusFormat(format!("line {line_no}: {msg}"));

    let dialogue_id = row
        .get("dialogue_id")
        .and_then(Value::as_str)
        .ok_or_else(|| fail("missing dialogue_id".into()))?
        .to_string();
    let index = row
        .get("index")
        .and_then(Value::as_u64)
        .ok_or_else(|| fail("missing index".into()))? as usize;
    let speaker_id = row
        .get("speaker")
        .and_then(Value::as_str)
        .ok_or_else(|| fail("missing speaker".into()))?
        .to_string();

    let label_value = row.get("label").ok_or_else(|| fail("missing label".into()))?;
    let label = match label_space {
        LabelSpace::Classes(names) => {
            let name = label_value
                .as_str()
                .ok_or_else(|| fail("classification label must be a string".into()))?;
            let class = names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Corpus {
                    dialogue_id: dialogue_id.clone(),
                    index,
                    message: format!("unknown label {name:?}; vocabulary is {names:?}"),
                }
            })?;
            Label::Class(class)
        }
        LabelSpace::Regression => {
            let score = label_value
                .as_f64()
                .ok_or_else(|| fail("regression label must be a number".into()))?;
            Label::Score(score)
        }
    };

    let feat = |key: &str, want: usize| -> Result<Vec<f64>> {
        let arr = row
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| fail(format!("missing feature array {key:?}")))?;
        let vals: Option<Vec<f64>> = arr.iter().map(Value::as_f64).collect();
        let vals = vals.ok_or_else(|| fail(format!("non-numeric entry in {key:?}")))?;
        if vals.len() != want {
            return Err(Error::Corpus {
                dialogue_id: dialogue_id.clone(),
                index,
                message: format!("feature {key:?} has length {}, corpus declares {want}", vals.len()),
            });
        }
        Ok(vals)
    };

    Ok(UtteranceRecord {
        feat_v: feat("v", dims.v)?,
        feat_a: feat("a", dims.a)?,
        feat_t: feat("t", dims.t)?,
        dialogue_id,
        index,
        speaker_id,
        label,
    })
}

// ---------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------

pub fn serialize_corpus(corpus: &Corpus) -> String {
    let header = match &corpus.label_space {
        LabelSpace::Classes(names) => json!({
            "header": true,
            "format_version": CORPUS_FORMAT_VERSION,
            "dims": {"v": corpus.dims.v, "a": corpus.dims.a, "t": corpus.dims.t},
            "labels": names,
        }),
        LabelSpace::Regression => json!({
            "header": true,
            "format_version": CORPUS_FORMAT_VERSION,
            "dims": {"v": corpus.dims.v, "a": corpus.dims.a, "t": corpus.dims.t},
            "regression": true,
        }),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", serde_json::to_string(&header).unwrap());
    for dialogue in &corpus.dialogues {
        for u in &dialogue.utterances {
            let label = match u.label {
                Label::Class(c) => match &corpus.label_space {
                    LabelSpace::Classes(names) => json!(names[c]),
                    LabelSpace::Regression => unreachable!("class label in regression corpus"),
                },
                Label::Score(s) => json!(s),
            };
            let row = json!({
                "dialogue_id": u.dialogue_id,
                "index": u.index,
                "speaker": u.speaker_id,
                "label": label,
                "v": u.feat_v,
                "a": u.feat_a,
                "t": u.feat_t,
            });
            let _ = writeln!(out, "{}", serde_json::to_string(&row).unwrap());
        }
    }
    out
}

pub fn write_corpus_file(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serialize_corpus(corpus))?;
    Ok(())
}

// ---------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ModalityMeans {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub t: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub class_labels: Vec<String>,
    pub proportions: Vec<f64>,
    pub dialogues: usize,
    pub utterances_per_dialogue: usize,
    pub speakers: usize,
    pub dims: FeatureDims,
    /// Per-class feature means, one entry per class.
    pub means: Vec<ModalityMeans>,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Axis-aligned class means with pairwise distance `separation * sigma`
    /// in every modality. Requires each feature dim >= the class count.
    pub fn separated(
        classes: usize,
        dialogues: usize,
        utterances_per_dialogue: usize,
        speakers: usize,
        dims: FeatureDims,
        sigma: f64,
        separation: f64,
        seed: u64,
    ) -> Result<SyntheticSpec> {
        let min_dim = dims.v.min(dims.a).min(dims.t);
        if min_dim < classes {
            return Err(Error::contract(format!(
                "separated spec needs feature dims >= {classes} classes, smallest is {min_dim}"
            )));
        }
        let scale = separation * sigma / std::f64::consts::SQRT_2;
        let axis = |d: usize, c: usize| {
            let mut m = vec![0.0; d];
            m[c] = scale;
            m
        };
        let means = (0..classes)
            .map(|c| ModalityMeans {
                v: axis(dims.v, c),
                a: axis(dims.a, c),
                t: axis(dims.t, c),
            })
            .collect();
        Ok(SyntheticSpec {
            class_labels: (0..classes).map(|c| format!("class{c}")).collect(),
            proportions: vec![1.0 / classes as f64; classes],
            dialogues,
            utterances_per_dialogue,
            speakers,
            dims,
            means,
            sigma,
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        let k = self.class_labels.len();
        if k == 0 || self.proportions.len() != k || self.means.len() != k {
            return Err(Error::contract(
                "synthetic spec: labels, proportions, and means must align",
            ));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "synthetic spec: proportions sum to {total}, expected 1"
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::contract("synthetic spec: sigma must be positive"));
        }
        if self.dialogues == 0 || self.utterances_per_dialogue == 0 || self.speakers == 0 {
            return Err(Error::contract("synthetic spec: zero-sized corpus"));
        }
        Ok(())
    }
}

/// Counts proportional to `weights` that sum exactly to `total`
/// (floor + largest remainder, ties to the earlier entry).
pub fn largest_remainder_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let weight_sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| w / weight_sum * total as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let total = spec.dialogues * spec.utterances_per_dialogue;
    let counts = largest_remainder_counts(&spec.proportions, total);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(class, &n)| std::iter::repeat_n(class, n))
        .collect();
    labels.shuffle(&mut rng);

    let mut sample = |mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + spec.sigma * z
            })
            .collect()
    };

    let mut dialogues = Vec::with_capacity(spec.dialogues);
    let mut cursor = labels.into_iter();
    for d in 0..spec.dialogues {
        let dialogue_id = format!("d{d}");
        let utterances = (0..spec.utterances_per_dialogue)
            .map(|i| {
                let class = cursor.next().expect("label pool sized to corpus");
                let means = &spec.means[class];
                UtteranceRecord {
                    dialogue_id: dialogue_id.clone(),
                    index: i,
                    speaker_id: format!("s{}", i % spec.speakers),
                    label: Label::Class(class),
                    feat_v: sample(&means.v),
                    feat_a: sample(&means.a),
                    feat_t: sample(&means.t),
                }
            })
            .collect();
        dialogues.push(Dialogue {
            dialogue_id,
            utterances,
        });
    }

    Ok(Corpus {
        dialogues,
        label_space: LabelSpace::Classes(spec.class_labels.clone()),
        dims: spec.dims,
    })
}

// ---------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------

/// Partition at dialogue granularity into (train, val, test).
pub fn split(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<[Corpus; 3]> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&r| r < 0.0) {
        return Err(Error::contract("split ratios must be nonnegative"));
    }
    let total: f64 = parts.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios sum to {total}, expected 1"
        )));
    }
    let n = corpus.dialogues.len();
    let nonzero = parts.iter().filter(|&&r| r > 0.0).count();
    if n < nonzero {
        return Err(Error::contract(format!(
            "cannot split {n} dialogues into {nonzero} nonempty parts"
        )));
    }

    let mut sizes = largest_remainder_counts(&parts, n);
    // A part with positive ratio must not come out empty; rebalance from the
    // largest part.
    for i in 0..3 {
        while parts[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut assignment = vec![0usize; n];
    let mut offset = 0;
    for (part, &size) in sizes.iter().enumerate() {
        for &dialogue in &order[offset..offset + size] {
            assignment[dialogue] = part;
        }
        offset += size;
    }

    let make = |part: usize| Corpus {
        dialogues: corpus
            .dialogues
            .iter()
            .enumerate()
            .filter(|(i, _)| assignment[*i] == part)
            .map(|(_, d)| d.clone())
            .collect(),
        label_space: corpus.label_space.clone(),
        dims: corpus.dims,
    };
    Ok([make(0), make(1), make(2)])
}
