//! Deterministic forward passes, single-layer application and feature traces.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::linalg::all_finite;

use super::params::{ModuleParams, ParameterSet};
use super::spec::{Activation, LayerSpec, ModelSpec};

/// Per-layer feature matrices for one batch: `per_layer[0]` is the input,
/// `per_layer[l]` the output of layer l, each d_l × M.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrace {
    pub per_layer: Vec<DMatrix<f64>>,
    pub head_scores: Option<DMatrix<f64>>,
}

impl FeatureTrace {
    /// Final feature matrix h_L.
    pub fn last(&self) -> &DMatrix<f64> {
        self.per_layer.last().expect("trace has at least the input")
    }

    pub fn num_samples(&self) -> usize {
        self.per_layer[0].ncols()
    }
}

/// Applies one layer map; the observer sees each parameterized module's
/// input just before that module runs.
fn apply_one(
    entries: &BTreeMap<String, ModuleParams>,
    layer: &LayerSpec,
    path: &str,
    input: &DMatrix<f64>,
    observe: &mut dyn FnMut(&str, &DMatrix<f64>),
) -> Result<DMatrix<f64>> {
    match layer {
        LayerSpec::Linear { .. } => {
            let module_path = format!("{path}.linear");
            observe(&module_path, input);
            let params = entries
                .get(&module_path)
                .ok_or_else(|| CoreError::MissingEntry {
                    path: module_path.clone(),
                })?;
            let (weight, bias) = params.as_linear(&module_path)?;
            if weight.ncols() != input.nrows() {
                return Err(CoreError::ShapeMismatch {
                    context: module_path,
                    expected: format!("{} input rows", weight.ncols()),
                    actual: format!("{}", input.nrows()),
                });
            }
            let mut out = weight * input;
            if let Some(b) = bias {
                for mut col in out.column_iter_mut() {
                    col += b;
                }
            }
            Ok(out)
        }
        LayerSpec::LayerNorm { dim, eps } => {
            let module_path = format!("{path}.norm");
            observe(&module_path, input);
            let params = entries
                .get(&module_path)
                .ok_or_else(|| CoreError::MissingEntry {
                    path: module_path.clone(),
                })?;
            let (gamma, beta) = params.as_layer_norm(&module_path)?;
            if input.nrows() != *dim {
                return Err(CoreError::ShapeMismatch {
                    context: module_path,
                    expected: format!("{dim} input rows"),
                    actual: format!("{}", input.nrows()),
                });
            }
            Ok(layer_norm_forward(input, gamma, beta, *eps))
        }
        LayerSpec::Activation { function } => Ok(match function {
            Activation::Tanh => input.map(f64::tanh),
            Activation::Relu => input.map(|v| v.max(0.0)),
            Activation::Identity => input.clone(),
        }),
        LayerSpec::ResidualBlock { inner } => {
            let mut h = input.clone();
            for (k, sub) in inner.iter().enumerate() {
                h = apply_one(entries, sub, &format!("{path}.inner.{k}"), &h, observe)?;
            }
            Ok(input + h)
        }
    }
}

/// LayerNorm without its affine part: per column, (x−μ)/√(var+eps).
pub fn layer_norm_normalize(input: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let ones = nalgebra::DVector::from_element(input.nrows(), 1.0);
    let zeros = nalgebra::DVector::zeros(input.nrows());
    layer_norm_forward(input, &ones, &zeros, eps)
}

/// LayerNorm over the feature dimension, per column: γ⊙(x−μ)/√(var+eps)+β.
pub(crate) fn layer_norm_forward(
    input: &DMatrix<f64>,
    gamma: &nalgebra::DVector<f64>,
    beta: &nalgebra::DVector<f64>,
    eps: f64,
) -> DMatrix<f64> {
    let d = input.nrows();
    let mut out = DMatrix::zeros(d, input.ncols());
    for j in 0..input.ncols() {
        let col = input.column(j);
        let mean = col.sum() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[(i, j)] = gamma[i] * (col[i] - mean) * inv_std + beta[i];
        }
    }
    out
}

fn check_batch(spec: &ModelSpec, batch: &DMatrix<f64>) -> Result<()> {
    if batch.nrows() != spec.input_dim {
        return Err(CoreError::ShapeMismatch {
            context: "forward input".into(),
            expected: format!("{} rows", spec.input_dim),
            actual: format!("{} rows", batch.nrows()),
        });
    }
    if !all_finite(batch) {
        return Err(CoreError::NonFinite {
            location: "forward input".into(),
        });
    }
    Ok(())
}

/// Runs the full stack on a batch, recording features after every layer.
pub fn forward_trace(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &DMatrix<f64>,
) -> Result<FeatureTrace> {
    check_batch(spec, batch)?;
    let mut per_layer = Vec::with_capacity(spec.layers.len() + 1);
    per_layer.push(batch.clone());
    let mut observe = |_: &str, _: &DMatrix<f64>| {};
    for (i, layer) in spec.layers.iter().enumerate() {
        let next = apply_one(
            &params.entries,
            layer,
            &format!("layers.{i}"),
            per_layer.last().unwrap(),
            &mut observe,
        )?;
        if !all_finite(&next) {
            return Err(CoreError::NonFinite {
                location: format!("layer {i}"),
            });
        }
        per_layer.push(next);
    }
    let head_scores = match &spec.head {
        Some(_) => {
            let entry = params.entry("head")?;
            let (weight, bias) = entry.as_linear("head")?;
            let mut scores = weight * per_layer.last().unwrap();
            if let Some(b) = bias {
                for mut col in scores.column_iter_mut() {
                    col += b;
                }
            }
            if !all_finite(&scores) {
                return Err(CoreError::NonFinite {
                    location: "head".into(),
                });
            }
            Some(scores)
        }
        None => None,
    };
    Ok(FeatureTrace {
        per_layer,
        head_scores,
    })
}

/// Applies exactly one layer (0-based index) to an input with that layer's
/// in-dimension. Pure function of (params, input).
pub fn apply_layer(
    params: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    input: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let layer = spec
        .layers
        .get(layer_index)
        .ok_or_else(|| CoreError::InvalidConfig(format!("layer index {layer_index} out of range")))?;
    let dims = spec.feature_dims()?;
    if input.nrows() != dims[layer_index] {
        return Err(CoreError::ShapeMismatch {
            context: format!("apply_layer({layer_index})"),
            expected: format!("{} rows", dims[layer_index]),
            actual: format!("{} rows", input.nrows()),
        });
    }
    let mut observe = |_: &str, _: &DMatrix<f64>| {};
    let out = apply_one(
        &params.entries,
        layer,
        &format!("layers.{layer_index}"),
        input,
        &mut observe,
    )?;
    if !all_finite(&out) {
        return Err(CoreError::NonFinite {
            location: format!("layer {layer_index}"),
        });
    }
    Ok(out)
}

/// Applies only the residual branch g (the inner chain, without the skip)
/// of a residual-block layer. Errors when the layer is not a residual block.
pub fn apply_residual_branch(
    params: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    input: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let layer = spec
        .layers
        .get(layer_index)
        .ok_or_else(|| CoreError::InvalidConfig(format!("layer index {layer_index} out of range")))?;
    let LayerSpec::ResidualBlock { inner } = layer else {
        return Err(CoreError::InvalidConfig(format!(
            "layer {layer_index} is not a residual block"
        )));
    };
    let mut observe = |_: &str, _: &DMatrix<f64>| {};
    let mut h = input.clone();
    for (k, sub) in inner.iter().enumerate() {
        h = apply_one(
            &params.entries,
            sub,
            &format!("layers.{layer_index}.inner.{k}"),
            &h,
            &mut observe,
        )?;
    }
    if !all_finite(&h) {
        return Err(CoreError::NonFinite {
            location: format!("layer {layer_index} residual branch"),
        });
    }
    Ok(h)
}

/// Features entering layer `layer_index` (h_{ℓ-1}); the raw batch when
/// `layer_index` is 0.
pub fn features_at_layer_input(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &DMatrix<f64>,
    layer_index: usize,
) -> Result<DMatrix<f64>> {
    check_batch(spec, batch)?;
    if layer_index > spec.layers.len() {
        return Ok(forward_trace(params, spec, batch)?.last().clone());
    }
    let mut h = batch.clone();
    let mut observe = |_: &str, _: &DMatrix<f64>| {};
    for (i, layer) in spec.layers.iter().take(layer_index).enumerate() {
        h = apply_one(&params.entries, layer, &format!("layers.{i}"), &h, &mut observe)?;
        if !all_finite(&h) {
            return Err(CoreError::NonFinite {
                location: format!("layer {i}"),
            });
        }
    }
    Ok(h)
}

/// Runs layer `layer_index` from the given layer input, returning the input
/// feature matrix seen by every parameterized module inside that layer.
pub fn capture_module_inputs(
    params: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    layer_input: &DMatrix<f64>,
) -> Result<BTreeMap<String, DMatrix<f64>>> {
    let layer = spec
        .layers
        .get(layer_index)
        .ok_or_else(|| CoreError::InvalidConfig(format!("layer index {layer_index} out of range")))?;
    let mut captured = BTreeMap::new();
    let mut observe = |path: &str, input: &DMatrix<f64>| {
        captured.insert(path.to_string(), input.clone());
    };
    apply_one(
        &params.entries,
        layer,
        &format!("layers.{layer_index}"),
        layer_input,
        &mut observe,
    )?;
    Ok(captured)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::model::params::build_model;
    use crate::model::spec::{Activation, HeadSpec, LayerSpec};
    use nalgebra::{DMatrix, DVector};

    fn tanh_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::Linear {
                    in_dim: 3,
                    out_dim: 4,
                    has_bias: true,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Linear {
                    in_dim: 4,
                    out_dim: 2,
                    has_bias: false,
                },
            ],
            head: None,
            schema_version: 1,
        }
    }

    #[test]
    fn trace_matches_manual_layer_composition() {
        let spec = tanh_spec();
        let params = build_model(&spec, 42).unwrap();
        let batch = DMatrix::from_fn(3, 5, |i, j| (i as f64 - 1.3) * (j as f64 + 0.7));
        let trace = forward_trace(&params, &spec, &batch).unwrap();
        assert_eq!(trace.per_layer.len(), 4);
        assert_eq!(trace.per_layer[0], batch);
        let mut h = batch;
        for l in 0..3 {
            h = apply_layer(&params, &spec, l, &h).unwrap();
            assert_eq!(trace.per_layer[l + 1], h, "composition differs at layer {l}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = tanh_spec();
        let params = build_model(&spec, 3).unwrap();
        let batch = DMatrix::from_fn(3, 4, |i, j| (i * 7 + j) as f64 * 0.1 - 1.0);
        let a = forward_trace(&params, &spec, &batch).unwrap();
        let b = forward_trace(&params, &spec, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weight_linear_outputs_zero() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::Linear {
                in_dim: 3,
                out_dim: 2,
                has_bias: false,
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 0).unwrap().map(|_| 0.0);
        let batch = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let trace = forward_trace(&params, &spec, &batch).unwrap();
        assert!(max_abs(&trace.per_layer[1]) == 0.0);
    }

    #[test]
    fn residual_block_with_zero_inner_is_identity() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::ResidualBlock {
                inner: vec![LayerSpec::Linear {
                    in_dim: 3,
                    out_dim: 3,
                    has_bias: true,
                }],
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 11).unwrap().map(|_| 0.0);
        let batch = DMatrix::from_fn(3, 2, |i, j| i as f64 + 10.0 * j as f64);
        let trace = forward_trace(&params, &spec, &batch).unwrap();
        assert_eq!(trace.per_layer[1], batch);
    }

    #[test]
    fn identity_linear_passes_through() {
        let spec = ModelSpec {
            input_dim: 2,
            layers: vec![LayerSpec::Linear {
                in_dim: 2,
                out_dim: 2,
                has_bias: true,
            }],
            head: None,
            schema_version: 1,
        };
        let mut params = build_model(&spec, 0).unwrap();
        params.entries.insert(
            "layers.0.linear".into(),
            ModuleParams::Linear {
                weight: DMatrix::identity(2, 2),
                bias: Some(DVector::zeros(2)),
            },
        );
        let batch = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.5, 0.0]);
        let out = apply_layer(&params, &spec, 0, &batch).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn layer_norm_constant_column_maps_to_beta() {
        // A constant column has zero variance; eps keeps the division finite
        // and the normalized value is exactly 0, so the output is β.
        let gamma = DVector::from_element(3, 1.0);
        let beta = DVector::zeros(3);
        let input = DMatrix::from_element(3, 1, 5.0);
        let out = layer_norm_forward(&input, &gamma, &beta, 1e-5);
        assert!(max_abs(&out) == 0.0);
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let spec = ModelSpec {
            input_dim: 1,
            layers: vec![LayerSpec::Activation {
                function: Activation::Tanh,
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 0).unwrap();
        let out = apply_layer(&params, &spec, 0, &DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = tanh_spec();
        let params = build_model(&spec, 1).unwrap();
        let bad = DMatrix::from_element(2, 3, 1.0);
        assert!(forward_trace(&params, &spec, &bad).is_err());
        assert!(apply_layer(&params, &spec, 9, &bad).is_err());
    }

    #[test]
    fn head_scores_present_iff_head() {
        let mut spec = tanh_spec();
        let batch = DMatrix::from_element(3, 2, 0.5);
        let params = build_model(&spec, 5).unwrap();
        assert!(forward_trace(&params, &spec, &batch).unwrap().head_scores.is_none());

        spec.head = Some(HeadSpec {
            in_dim: 2,
            classes: 3,
            has_bias: true,
        });
        let params = build_model(&spec, 5).unwrap();
        let trace = forward_trace(&params, &spec, &batch).unwrap();
        let scores = trace.head_scores.unwrap();
        assert_eq!(scores.nrows(), 3);
        assert_eq!(scores.ncols(), 2);
    }

    #[test]
    fn captured_module_inputs_cover_nested_blocks() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::ResidualBlock {
                inner: vec![
                    LayerSpec::Linear {
                        in_dim: 3,
                        out_dim: 3,
                        has_bias: false,
                    },
                    LayerSpec::Activation {
                        function: Activation::Tanh,
                    },
                    LayerSpec::Linear {
                        in_dim: 3,
                        out_dim: 3,
                        has_bias: false,
                    },
                ],
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 9).unwrap();
        let batch = DMatrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.3);
        let captured = capture_module_inputs(&params, &spec, 0, &batch).unwrap();
        assert_eq!(captured.len(), 2);
        assert_eq!(captured["layers.0.inner.0.linear"], batch);
        // The second linear sees tanh(W₀·x).
        let w0 = params
            .entry("layers.0.inner.0.linear")
            .unwrap()
            .as_linear("layers.0.inner.0.linear")
            .unwrap()
            .0;
        let expected = (w0 * &batch).map(f64::tanh);
        assert_eq!(captured["layers.0.inner.2.linear"], expected);
    }
}
