//! Checkpoint serialization.
//!
//! A checkpoint is a single JSON document: a metadata header
//! (`format_version`, `config_hash`, `rng_seed`, plus the resolved config and
//! the corpus schema needed to rebuild the model) and a `params` map from
//! parameter name to `{shape, values}`. Keys are emitted sorted and values
//! with 17 significant digits, so writing is byte-stable and doubles
//! round-trip exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

pub struct Checkpoint {
    pub format_version: u64,
    pub config_hash: String,
    pub rng_seed: u64,
    pub config: Value,
    pub schema: Value,
    pub params: BTreeMap<String, Tensor>,
}

/// FNV-1a over the canonical (sorted-key) JSON encoding of a config.
pub fn config_hash(config: &Value) -> String {
    let canon = serde_json::to_string(config).unwrap_or_default();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canon.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("fnv1a64:{hash:016x}")
}

/// 17 significant digits: enough to reconstruct any f64 exactly.
fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_checkpoint(
    store: &ParamStore,
    config: &Value,
    schema: &Value,
    rng_seed: u64,
) -> Result<String> {
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, tensor) in store.iter() {
        if !tensor.all_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} holds non-finite values"
            )));
        }
        sorted.insert(name, tensor);
    }

    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"config\": {},", serde_json::to_string(config)?);
    let _ = writeln!(out, "  \"config_hash\": \"{}\",", config_hash(config));
    let _ = writeln!(out, "  \"format_version\": {FORMAT_VERSION},");
    out.push_str("  \"params\": {\n");
    let count = sorted.len();
    for (i, (name, tensor)) in sorted.into_iter().enumerate() {
        let _ = write!(
            out,
            "    {}: {{\"shape\": [{}, {}], \"values\": [",
            serde_json::to_string(name)?,
            tensor.rows(),
            tensor.cols()
        );
        for (j, &v) in tensor.data().iter().enumerate() {
            if j > 0 {
                out.push_str(", ");
            }
            out.push_str(&format_value(v));
        }
        out.push_str("]}");
        out.push_str(if i + 1 < count { ",\n" } else { "\n" });
    }
    out.push_str("  },\n");
    let _ = writeln!(out, "  \"rng_seed\": {rng_seed},");
    let _ = writeln!(out, "  \"schema\": {}", serde_json::to_string(schema)?);
    out.push_str("}\n");
    Ok(out)
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let doc: Value = serde_json::from_str(text)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Checkpoint("checkpoint is not a JSON object".into()))?;

    let format_version = obj
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {format_version} (expected {FORMAT_VERSION})"
        )));
    }
    let config_hash = obj
        .get("config_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Checkpoint("missing config_hash".into()))?
        .to_string();
    let rng_seed = obj
        .get("rng_seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("missing rng_seed".into()))?;
    let config = obj
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("missing config".into()))?;
    let schema = obj
        .get("schema")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("missing schema".into()))?;

    let params_obj = obj
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Checkpoint("missing params map".into()))?;
    let mut params = BTreeMap::new();
    for (name, entry) in params_obj {
        let shape = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} missing shape")))?;
        if shape.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has non rank-2 shape"
            )));
        }
        let rows = shape[0].as_u64().unwrap_or(0) as usize;
        let cols = shape[1].as_u64().unwrap_or(0) as usize;
        let values = entry
            .get("values")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} missing values")))?;
        let data: Option<Vec<f64>> = values.iter().map(Value::as_f64).collect();
        let data =
            data.ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} has non-numeric values")))?;
        let tensor = Tensor::from_vec(rows, cols, data).map_err(|_| {
            Error::Checkpoint(format!(
                "parameter {name:?}: values do not match shape [{rows}, {cols}]"
            ))
        })?;
        params.insert(name.clone(), tensor);
    }

    Ok(Checkpoint {
        format_version,
        config_hash,
        rng_seed,
        config,
        schema,
        params,
    })
}

/// Copy checkpoint tensors into a freshly initialized store, insisting on an
/// exact name and shape match.
pub fn load_into_store(checkpoint: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    let expected: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &expected {
        let tensor = checkpoint
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing parameter {name:?}")))?;
        let id = store.id_of(name).expect("name listed by the store");
        store.set(id, tensor.clone())?;
    }
    if checkpoint.params.len() != expected.len() {
        let extra: Vec<&String> = checkpoint
            .params
            .keys()
            .filter(|k| !expected.iter().any(|e| e == *k))
            .collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint has unknown parameters: {extra:?}"
        )));
    }
    Ok(())
}
