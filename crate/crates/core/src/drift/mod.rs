//! Layer-wise feature-drift diagnostics.
//!
//! Drift is the difference between merged-model and expert features on the
//! same input. Per layer it splits exactly into a local mismatch (different
//! layer maps, same expert input) plus a propagated term (same merged map,
//! drifted input); on residual blocks the propagated term further splits
//! into the skip-carried drift and a residual-branch term. The propagation
//! submodule reconstructs final drift from local mismatches through
//! path-averaged Jacobians, and the output submodule bridges final feature
//! drift to score, margin and loss changes.

mod growth;
mod output;
mod propagation;

pub use growth::{growth_check, GrowthSample};
pub use output::{output_drift_report, LinearHead, OutputDriftReport};
pub use propagation::{
    averaged_jacobian, final_drift_expansion, AveragedJacobian, PropagationReport,
};

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::linalg::{column_cosines, column_norms, max_abs};
use crate::model::{apply_layer, apply_residual_branch, FeatureTrace, LayerSpec, ModelSpec, ParameterSet};

/// Drift decomposition of one layer on one batch.
///
/// All matrices are d_ℓ × M except `e_prev` (d_{ℓ-1} × M). `r` is present
/// only on residual-block layers. The two residual fields record how tightly
/// the algebraic identities e = m + p and e = e_prev + r + m hold on this
/// batch; both are identities, so anything above ~1e-12 indicates a bug.
#[derive(Clone, Debug)]
pub struct DriftRecord {
    pub layer: usize,
    pub e_prev: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub r: Option<DMatrix<f64>>,
    pub decomposition_residual: f64,
    pub residual_identity_residual: Option<f64>,
    pub e_norm: Vec<f64>,
    pub m_norm: Vec<f64>,
    pub p_norm: Vec<f64>,
    /// Per-sample cosine between merged and expert features at this layer.
    pub cosine_to_expert: Vec<f64>,
}

fn check_traces(trace_exp: &FeatureTrace, trace_mer: &FeatureTrace) -> Result<()> {
    if trace_exp.per_layer.len() != trace_mer.per_layer.len() {
        return Err(CoreError::ShapeMismatch {
            context: "drift traces".into(),
            expected: format!("{} layers", trace_exp.per_layer.len()),
            actual: format!("{} layers", trace_mer.per_layer.len()),
        });
    }
    for (l, (a, b)) in trace_exp
        .per_layer
        .iter()
        .zip(trace_mer.per_layer.iter())
        .enumerate()
    {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch {
                context: format!("drift traces at layer {l}"),
                expected: format!("{:?}", a.shape()),
                actual: format!("{:?}", b.shape()),
            });
        }
    }
    if trace_exp.per_layer[0] != trace_mer.per_layer[0] {
        return Err(CoreError::InvalidConfig(
            "drift traces must come from the same input batch".into(),
        ));
    }
    Ok(())
}

/// Per-layer drift matrices e_ℓ = h_ℓ^mer − h_ℓ^exp for ℓ = 0..=L.
/// e_0 is identically zero because both traces share the input.
pub fn layer_drift(
    trace_exp: &FeatureTrace,
    trace_mer: &FeatureTrace,
) -> Result<Vec<DMatrix<f64>>> {
    check_traces(trace_exp, trace_mer)?;
    Ok(trace_exp
        .per_layer
        .iter()
        .zip(trace_mer.per_layer.iter())
        .map(|(he, hm)| hm - he)
        .collect())
}

/// Splits layer `layer_index`'s drift into local mismatch and propagation,
/// evaluating each term in definition order:
///
/// m = f_ℓ^mer(h_{ℓ-1}^exp) − f_ℓ^exp(h_{ℓ-1}^exp)
/// p = f_ℓ^mer(h_{ℓ-1}^mer) − f_ℓ^mer(h_{ℓ-1}^exp)
///
/// On residual blocks the branch term r = g^mer(h^mer) − g^mer(h^exp) is
/// also computed from the inner chain.
pub fn decompose_layer(
    params_mer: &ParameterSet,
    params_exp: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    trace_exp: &FeatureTrace,
    trace_mer: &FeatureTrace,
) -> Result<DriftRecord> {
    check_traces(trace_exp, trace_mer)?;
    if layer_index >= spec.layers.len() {
        return Err(CoreError::InvalidConfig(format!(
            "layer index {layer_index} out of range"
        )));
    }
    let h_exp_prev = &trace_exp.per_layer[layer_index];
    let h_mer_prev = &trace_mer.per_layer[layer_index];
    let h_exp = &trace_exp.per_layer[layer_index + 1];
    let h_mer = &trace_mer.per_layer[layer_index + 1];

    let f_mer_at_exp = apply_layer(params_mer, spec, layer_index, h_exp_prev)?;
    let f_exp_at_exp = apply_layer(params_exp, spec, layer_index, h_exp_prev)?;
    let f_mer_at_mer = apply_layer(params_mer, spec, layer_index, h_mer_prev)?;

    let e_prev = h_mer_prev - h_exp_prev;
    let e = h_mer - h_exp;
    let m = &f_mer_at_exp - &f_exp_at_exp;
    let p = &f_mer_at_mer - &f_mer_at_exp;
    let decomposition_residual = max_abs(&(&e - (&m + &p)));

    let (r, residual_identity_residual) = match &spec.layers[layer_index] {
        LayerSpec::ResidualBlock { .. } => {
            let g_at_mer = apply_residual_branch(params_mer, spec, layer_index, h_mer_prev)?;
            let g_at_exp = apply_residual_branch(params_mer, spec, layer_index, h_exp_prev)?;
            let r = &g_at_mer - &g_at_exp;
            let identity = max_abs(&(&e - (&e_prev + &r + &m)));
            (Some(r), Some(identity))
        }
        _ => (None, None),
    };

    Ok(DriftRecord {
        layer: layer_index,
        e_norm: column_norms(&e),
        m_norm: column_norms(&m),
        p_norm: column_norms(&p),
        cosine_to_expert: column_cosines(h_mer, h_exp),
        e_prev,
        e,
        m,
        p,
        r,
        decomposition_residual,
        residual_identity_residual,
    })
}

/// Decomposes every layer of the pair of traces.
pub fn decompose_all(
    params_mer: &ParameterSet,
    params_exp: &ParameterSet,
    spec: &ModelSpec,
    trace_exp: &FeatureTrace,
    trace_mer: &FeatureTrace,
) -> Result<Vec<DriftRecord>> {
    (0..spec.layers.len())
        .map(|l| decompose_layer(params_mer, params_exp, spec, l, trace_exp, trace_mer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, forward_trace, Activation, HeadSpec, LayerSpec, ModelSpec};
    use nalgebra::DMatrix;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            layers: vec![
                LayerSpec::Linear {
                    in_dim: 4,
                    out_dim: 5,
                    has_bias: true,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::ResidualBlock {
                    inner: vec![
                        LayerSpec::Linear {
                            in_dim: 5,
                            out_dim: 5,
                            has_bias: true,
                        },
                        LayerSpec::Activation {
                            function: Activation::Tanh,
                        },
                    ],
                },
                LayerSpec::LayerNorm { dim: 5, eps: 1e-5 },
            ],
            head: Some(HeadSpec {
                in_dim: 5,
                classes: 3,
                has_bias: true,
            }),
            schema_version: 1,
        }
    }

    fn batch() -> DMatrix<f64> {
        DMatrix::from_fn(4, 6, |i, j| ((i * 3 + j) as f64 * 0.41).sin())
    }

    #[test]
    fn identical_models_have_zero_drift() {
        let s = spec();
        let params = build_model(&s, 4).unwrap();
        let t1 = forward_trace(&params, &s, &batch()).unwrap();
        let t2 = forward_trace(&params, &s, &batch()).unwrap();
        let drift = layer_drift(&t1, &t2).unwrap();
        assert!(drift.iter().all(|e| max_abs(e) == 0.0));
        for l in 0..s.layers.len() {
            let rec = decompose_layer(&params, &params, &s, l, &t1, &t2).unwrap();
            assert_eq!(max_abs(&rec.e), 0.0);
            assert_eq!(max_abs(&rec.m), 0.0);
            assert_eq!(max_abs(&rec.p), 0.0);
            assert!(rec.cosine_to_expert.iter().all(|c| *c == 1.0));
        }
    }

    #[test]
    fn input_drift_is_always_zero() {
        let s = spec();
        let a = build_model(&s, 4).unwrap();
        let b = a.map(|v| v + 0.05);
        let ta = forward_trace(&a, &s, &batch()).unwrap();
        let tb = forward_trace(&b, &s, &batch()).unwrap();
        let drift = layer_drift(&ta, &tb).unwrap();
        assert_eq!(max_abs(&drift[0]), 0.0);
        assert!(max_abs(drift.last().unwrap()) > 0.0);
    }

    #[test]
    fn final_drift_matches_recomputed_traces() {
        let s = spec();
        let exp = build_model(&s, 4).unwrap();
        let mer = exp.map(|v| v * 0.9 + 0.01);
        let te = forward_trace(&exp, &s, &batch()).unwrap();
        let tm = forward_trace(&mer, &s, &batch()).unwrap();
        let drift = layer_drift(&te, &tm).unwrap();
        // Independent recomputation.
        let te2 = forward_trace(&exp, &s, &batch()).unwrap();
        let tm2 = forward_trace(&mer, &s, &batch()).unwrap();
        let direct = tm2.last() - te2.last();
        assert_eq!(drift.last().unwrap(), &direct);
    }

    #[test]
    fn decomposition_identity_holds_on_random_pairs() {
        let s = spec();
        let exp = build_model(&s, 10).unwrap();
        let mer = exp.map(|v| v + 0.07 * (v * 13.0).sin());
        let te = forward_trace(&exp, &s, &batch()).unwrap();
        let tm = forward_trace(&mer, &s, &batch()).unwrap();
        for l in 0..s.layers.len() {
            let rec = decompose_layer(&mer, &exp, &s, l, &te, &tm).unwrap();
            assert!(
                rec.decomposition_residual <= 1e-12,
                "layer {l}: residual {}",
                rec.decomposition_residual
            );
            if let Some(rr) = rec.residual_identity_residual {
                assert!(rr <= 1e-12, "layer {l}: residual-block identity {rr}");
            }
        }
    }

    #[test]
    fn linear_layer_propagation_is_exactly_linear() {
        // On a pure linear layer p = W_mer · e_prev.
        let s = ModelSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::Linear {
                    in_dim: 3,
                    out_dim: 3,
                    has_bias: true,
                },
                LayerSpec::Linear {
                    in_dim: 3,
                    out_dim: 2,
                    has_bias: false,
                },
            ],
            head: None,
            schema_version: 1,
        };
        let exp = build_model(&s, 6).unwrap();
        let mer = exp.map(|v| v * 1.1 - 0.02);
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64) - 0.5 * (j as f64));
        let te = forward_trace(&exp, &s, &x).unwrap();
        let tm = forward_trace(&mer, &s, &x).unwrap();
        let rec = decompose_layer(&mer, &exp, &s, 1, &te, &tm).unwrap();
        let (w_mer, _) = mer.entry("layers.1.linear").unwrap().as_linear("x").unwrap();
        let expect = w_mer * &rec.e_prev;
        assert!(max_abs(&(&rec.p - &expect)) < 1e-13);
    }

    #[test]
    fn mismatched_traces_are_rejected() {
        let s = spec();
        let params = build_model(&s, 4).unwrap();
        let t1 = forward_trace(&params, &s, &batch()).unwrap();
        let other_batch = DMatrix::from_fn(4, 6, |i, j| (i + j) as f64);
        let t2 = forward_trace(&params, &s, &other_batch).unwrap();
        assert!(layer_drift(&t1, &t2).is_err());
    }
}
