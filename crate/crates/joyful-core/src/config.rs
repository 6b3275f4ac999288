//! Runtime configuration.
//!
//! One JSON document configures every module. Unknown keys are rejected with
//! the full offending key path; the allowed key set is derived from the
//! default config itself, so the validator never drifts from the types.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicMode {
    /// Exponentially weighted mean of past contextual vectors (default; the
    /// additive rule grows without bound over long dialogues).
    Normalized,
    /// The literal additive accumulator update.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSimilarity {
    /// Plain dot product between projected features and basis vectors.
    Dot,
    /// True cosine similarity (both sides L2-normalized).
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Self-attention layers in the context encoder.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Output width of each specific projection network.
    pub d_specific: usize,
    /// Number of basis vectors in the shared basis matrix.
    pub q: usize,
    /// Topic smoothing parameter.
    pub eta: f64,
    pub topic_mode: TopicMode,
    pub basis_similarity: BasisSimilarity,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            n_layers: 2,
            n_heads: 4,
            d_specific: 16,
            q: 32,
            eta: 0.2,
            topic_mode: TopicMode::Normalized,
            basis_similarity: BasisSimilarity::Dot,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub window_past: usize,
    pub window_future: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            window_past: 8,
            window_future: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    /// Augmentation ratio for all three operators.
    pub p: f64,
    pub katz_beta: f64,
    pub katz_max_order: usize,
    pub katz_threshold: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            p: 0.2,
            katz_beta: 0.9,
            katz_max_order: 4,
            katz_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub temperature: f64,
    /// Anchor the contrastive losses in both views instead of only view 1.
    pub symmetrize_views: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 1,
            temperature: 1.0,
            symmetrize_views: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Weight of the fusion loss in the joint objective.
    pub alpha: f64,
    /// Weight of the contrastive loss in the joint objective.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Dialogues per optimizer step; gradients are averaged over the group.
    pub batch_dialogues: usize,
    pub task: Task,
    /// Early stopping patience on validation WF1; disabled when absent.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.06,
            beta: 0.3,
            epochs: 100,
            lr: 3e-5,
            batch_dialogues: 1,
            task: Task::Classification,
            early_stop_patience: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub fusion: FusionConfig,
    pub graph: GraphConfig,
    pub augment: AugmentSection,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        Config::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Config> {
        let schema = serde_json::to_value(Config::default())?;
        validate_keys(value, &schema, "")?;
        let config: Config = serde_json::from_value(value.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.fusion.n_layers >= 1, "fusion.n_layers must be >= 1")?;
        check(self.fusion.n_heads >= 1, "fusion.n_heads must be >= 1")?;
        check(self.fusion.d_specific >= 1, "fusion.d_specific must be >= 1")?;
        check(self.fusion.q >= 1, "fusion.q must be >= 1")?;
        check(
            (0.0..=1.0).contains(&self.augment.p),
            "augment.p must lie in [0, 1]",
        )?;
        check(
            self.augment.katz_beta > 0.0 && self.augment.katz_beta < 1.0,
            "augment.katz_beta must lie in (0, 1)",
        )?;
        check(
            self.augment.katz_max_order >= 2,
            "augment.katz_max_order must be >= 2",
        )?;
        check(self.encoder.layers >= 1, "encoder.layers must be >= 1")?;
        check(
            self.encoder.temperature > 0.0,
            "encoder.temperature must be positive",
        )?;
        check(self.train.alpha >= 0.0, "train.alpha must be >= 0")?;
        check(self.train.beta >= 0.0, "train.beta must be >= 0")?;
        check(self.train.epochs >= 1, "train.epochs must be >= 1")?;
        check(self.train.lr >= 0.0, "train.lr must be >= 0")?;
        check(
            self.train.batch_dialogues >= 1,
            "train.batch_dialogues must be >= 1",
        )?;
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Reject any key not present in the schema document, reporting its path.
fn validate_keys(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let (Some(given), Some(allowed)) = (value.as_object(), schema.as_object()) else {
        return Ok(());
    };
    for (key, sub) in given {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match allowed.get(key) {
            None => {
                return Err(Error::Config(format!("unknown config key: {full}")));
            }
            Some(allowed_sub) => validate_keys(sub, allowed_sub, &full)?,
        }
    }
    Ok(())
}
