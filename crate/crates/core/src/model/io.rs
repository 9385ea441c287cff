//! Model file format: a JSON document {schema_version, spec, role, entries}
//! with matrices as row-major nested decimal arrays.
//!
//! Floats are printed as the shortest decimal that parses back to the same
//! bits, so a save/load round-trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::params::{ModuleParams, ParameterSet, Role};
use super::spec::ModelSpec;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EntryJson {
    Linear {
        weight: Vec<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    LayerNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    spec: ModelSpec,
    role: Role,
    entries: BTreeMap<String, EntryJson>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(CoreError::BadEntry {
            path: path.into(),
            reason: "empty weight matrix".into(),
        });
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CoreError::BadEntry {
            path: path.into(),
            reason: "ragged weight matrix".into(),
        });
    }
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

fn to_json_entries(params: &ParameterSet) -> BTreeMap<String, EntryJson> {
    params
        .entries
        .iter()
        .map(|(path, entry)| {
            let json = match entry {
                ModuleParams::Linear { weight, bias } => EntryJson::Linear {
                    weight: matrix_to_rows(weight),
                    bias: bias.as_ref().map(|b| b.iter().copied().collect()),
                },
                ModuleParams::LayerNorm { gamma, beta } => EntryJson::LayerNorm {
                    gamma: gamma.iter().copied().collect(),
                    beta: beta.iter().copied().collect(),
                },
            };
            (path.clone(), json)
        })
        .collect()
}

fn from_json_entries(entries: BTreeMap<String, EntryJson>) -> Result<BTreeMap<String, ModuleParams>> {
    entries
        .into_iter()
        .map(|(path, entry)| {
            let params = match entry {
                EntryJson::Linear { weight, bias } => ModuleParams::Linear {
                    weight: rows_to_matrix(&weight, &path)?,
                    bias: bias.map(DVector::from_vec),
                },
                EntryJson::LayerNorm { gamma, beta } => ModuleParams::LayerNorm {
                    gamma: DVector::from_vec(gamma),
                    beta: DVector::from_vec(beta),
                },
            };
            Ok((path, params))
        })
        .collect()
}

/// Serializes a model to the JSON document format.
pub fn model_to_json(spec: &ModelSpec, params: &ParameterSet) -> Result<String> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        spec: spec.clone(),
        role: params.role,
        entries: to_json_entries(params),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses a model document and validates parameters against its spec.
pub fn model_from_json(text: &str) -> Result<(ModelSpec, ParameterSet)> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(CoreError::InvalidConfig(format!(
            "unsupported model schema_version {}",
            file.schema_version
        )));
    }
    let params = ParameterSet {
        role: file.role,
        entries: from_json_entries(file.entries)?,
    };
    file.spec.validate()?;
    params.validate_against(&file.spec)?;
    Ok((file.spec, params))
}

pub fn save_model(path: &Path, spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    std::fs::write(path, model_to_json(spec, params)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ParameterSet)> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}
