use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

use super::{HeadConfig, HeadParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    head_config: HeadConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_fingerprint: Option<String>,
    params: Vec<NamedTensor>,
}

/// A loaded checkpoint: parameters plus the fingerprint of the model they
/// were trained against, if recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub model_fingerprint: Option<String>,
}

pub fn save_checkpoint(params: &HeadParams, model_fingerprint: Option<&str>, path: &Path) -> Result<()> {
    let doc = Document {
        format_version: CHECKPOINT_VERSION,
        head_config: *params.config(),
        model_fingerprint: model_fingerprint.map(str::to_owned),
        params: params
            .named()
            .map(|(name, shape, data)| NamedTensor {
                name: name.to_owned(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&doc)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read_to_string(path)?;
    let malformed = |reason: String| Error::Malformed {
        path: path.to_owned(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    doc.head_config
        .validate()
        .map_err(|e| malformed(format!("head_config: {e}")))?;
    let layout = doc.head_config.layout();
    if doc.params.len() != layout.entries.len() {
        return Err(Error::ShapeMismatch {
            name: "tensor count".into(),
            expected: layout.entries.len(),
            found: doc.params.len(),
        });
    }
    let mut values = Vec::with_capacity(layout.total);
    for (t, (name, shape, _)) in doc.params.iter().zip(&layout.entries) {
        if &t.name != name {
            return Err(malformed(format!("expected tensor `{name}`, found `{}`", t.name)));
        }
        let expected: usize = shape.iter().product();
        if &t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected,
                found: t.shape.iter().product(),
            });
        }
        if t.data.len() != expected {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected,
                found: t.data.len(),
            });
        }
        values.extend_from_slice(&t.data);
    }
    let params = HeadParams::from_values(doc.head_config, values).map_err(|e| malformed(e.to_string()))?;
    Ok(Checkpoint {
        params,
        model_fingerprint: doc.model_fingerprint,
    })
}
