//! Dataset file format: JSON {task_index, split, features, labels} with
//! features as a row-major nested array of the d0 × M matrix.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::data::{Split, TaskDataset};

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    task_index: usize,
    split: Split,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

pub fn dataset_to_json(data: &TaskDataset) -> Result<String> {
    let rows: Vec<Vec<f64>> = (0..data.features.nrows())
        .map(|r| (0..data.features.ncols()).map(|c| data.features[(r, c)]).collect())
        .collect();
    Ok(serde_json::to_string(&DatasetFile {
        task_index: data.task_index,
        split: data.split,
        features: rows,
        labels: data.labels.clone(),
    })?)
}

pub fn dataset_from_json(text: &str) -> Result<TaskDataset> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let nrows = file.features.len();
    if nrows == 0 {
        return Err(CoreError::InvalidConfig("dataset has no feature rows".into()));
    }
    let ncols = file.features[0].len();
    if file.features.iter().any(|r| r.len() != ncols) {
        return Err(CoreError::InvalidConfig("ragged feature matrix".into()));
    }
    if file.labels.len() != ncols {
        return Err(CoreError::ShapeMismatch {
            context: "dataset file".into(),
            expected: format!("{ncols} labels"),
            actual: format!("{}", file.labels.len()),
        });
    }
    Ok(TaskDataset {
        task_index: file.task_index,
        split: file.split,
        features: DMatrix::from_row_iterator(
            nrows,
            ncols,
            file.features.iter().flat_map(|r| r.iter().copied()),
        ),
        labels: file.labels,
    })
}

pub fn save_dataset(path: &Path, data: &TaskDataset) -> Result<()> {
    std::fs::write(path, dataset_to_json(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset> {
    dataset_from_json(&std::fs::read_to_string(path)?)
}
