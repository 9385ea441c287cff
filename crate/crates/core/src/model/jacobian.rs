//! Analytic per-layer Jacobians at a point.
//!
//! These feed the path-averaged sensitivity quadrature. Every supported
//! layer kind has a closed-form Jacobian; relu layers additionally report
//! their activation pattern so callers can detect kink crossings along a
//! segment.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

use super::params::ParameterSet;
use super::spec::{Activation, LayerSpec, ModelSpec};

/// Jacobian of one layer map at a point, plus the relu activation pattern
/// encountered while evaluating it (empty when the layer has no relu).
#[derive(Clone, Debug)]
pub struct PointJacobian {
    pub matrix: DMatrix<f64>,
    pub relu_pattern: Vec<bool>,
}

fn linear_entry<'a>(
    params: &'a ParameterSet,
    path: &str,
) -> Result<&'a DMatrix<f64>> {
    Ok(params.entry(path)?.as_linear(path)?.0)
}

/// Jacobian of the LayerNorm map y = γ⊙(x−μ)/s + β at x, where s = √(var+eps):
/// J_ab = γ_a [ (δ_ab − 1/d)/s − x̂_a x̂_b / (d·s) ].
fn layer_norm_jacobian(x: &DVector<f64>, gamma: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let d = x.len();
    let dinv = 1.0 / d as f64;
    let mean = x.sum() * dinv;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * dinv;
    let s = (var + eps).sqrt();
    let xhat: DVector<f64> = x.map(|v| (v - mean) / s);
    DMatrix::from_fn(d, d, |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        gamma[a] * ((delta - dinv) / s - xhat[a] * xhat[b] * dinv / s)
    })
}

/// Jacobian of a single layer map (possibly a residual block) at `x`, with
/// forward evaluation threaded through so nested blocks are handled.
fn jacobian_rec(
    params: &ParameterSet,
    layer: &LayerSpec,
    path: &str,
    x: &DVector<f64>,
    pattern: &mut Vec<bool>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    match layer {
        LayerSpec::Linear { .. } => {
            let module_path = format!("{path}.linear");
            let weight = linear_entry(params, &module_path)?;
            let bias = params.entry(&module_path)?.as_linear(&module_path)?.1;
            let mut y = weight * x;
            if let Some(b) = bias {
                y += b;
            }
            Ok((weight.clone(), y))
        }
        LayerSpec::LayerNorm { eps, .. } => {
            let module_path = format!("{path}.norm");
            let (gamma, beta) = params.entry(&module_path)?.as_layer_norm(&module_path)?;
            let j = layer_norm_jacobian(x, gamma, *eps);
            let y = super::forward::layer_norm_forward(
                &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
                gamma,
                beta,
                *eps,
            )
            .column(0)
            .into_owned();
            Ok((j, y))
        }
        LayerSpec::Activation { function } => match function {
            Activation::Tanh => {
                let y = x.map(f64::tanh);
                let j = DMatrix::from_diagonal(&y.map(|v| 1.0 - v * v));
                Ok((j, y))
            }
            Activation::Relu => {
                let active: Vec<bool> = x.iter().map(|v| *v > 0.0).collect();
                pattern.extend(active.iter().copied());
                let j = DMatrix::from_diagonal(&DVector::from_iterator(
                    x.len(),
                    active.iter().map(|a| if *a { 1.0 } else { 0.0 }),
                ));
                Ok((j, x.map(|v| v.max(0.0))))
            }
            Activation::Identity => Ok((DMatrix::identity(x.len(), x.len()), x.clone())),
        },
        LayerSpec::ResidualBlock { inner } => {
            let (j_branch, y_branch) = chain_jacobian(params, inner, &format!("{path}.inner"), x, pattern)?;
            let mut j = j_branch;
            for i in 0..x.len() {
                j[(i, i)] += 1.0;
            }
            Ok((j, x + y_branch))
        }
    }
}

/// Jacobian of a composed chain at `x` (product of per-layer Jacobians along
/// the forward pass), returning the chain output as well.
fn chain_jacobian(
    params: &ParameterSet,
    layers: &[LayerSpec],
    base_path: &str,
    x: &DVector<f64>,
    pattern: &mut Vec<bool>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut j = DMatrix::identity(x.len(), x.len());
    let mut h = x.clone();
    for (k, layer) in layers.iter().enumerate() {
        let (jk, next) = jacobian_rec(params, layer, &format!("{base_path}.{k}"), &h, pattern)?;
        j = jk * j;
        h = next;
    }
    Ok((j, h))
}

/// Jacobian of layer `layer_index` at the column `x`.
pub fn layer_jacobian(
    params: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    x: &DVector<f64>,
) -> Result<PointJacobian> {
    let layer = spec
        .layers
        .get(layer_index)
        .ok_or_else(|| CoreError::InvalidConfig(format!("layer index {layer_index} out of range")))?;
    let mut pattern = Vec::new();
    let (matrix, _) = jacobian_rec(params, layer, &format!("layers.{layer_index}"), x, &mut pattern)?;
    Ok(PointJacobian {
        matrix,
        relu_pattern: pattern,
    })
}

/// Jacobian of the residual branch g (the non-skip part) of a residual
/// block layer at `x`. Errors when the layer is not a residual block.
pub fn residual_branch_jacobian(
    params: &ParameterSet,
    spec: &ModelSpec,
    layer_index: usize,
    x: &DVector<f64>,
) -> Result<PointJacobian> {
    let layer = spec
        .layers
        .get(layer_index)
        .ok_or_else(|| CoreError::InvalidConfig(format!("layer index {layer_index} out of range")))?;
    let LayerSpec::ResidualBlock { inner } = layer else {
        return Err(CoreError::InvalidConfig(format!(
            "layer {layer_index} is not a residual block"
        )));
    };
    let mut pattern = Vec::new();
    let (matrix, _) = chain_jacobian(
        params,
        inner,
        &format!("layers.{layer_index}.inner"),
        x,
        &mut pattern,
    )?;
    Ok(PointJacobian {
        matrix,
        relu_pattern: pattern,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::build_model;
    use crate::model::spec::{Activation, LayerSpec, ModelSpec};
    use crate::model::forward::apply_layer;
    use nalgebra::{DMatrix, DVector};

    /// Central finite-difference Jacobian of one layer.
    fn fd_jacobian(
        params: &ParameterSet,
        spec: &ModelSpec,
        layer_index: usize,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let d_in = x.len();
        let probe = |v: &DVector<f64>| -> DVector<f64> {
            let m = DMatrix::from_column_slice(d_in, 1, v.as_slice());
            apply_layer(params, spec, layer_index, &m)
                .unwrap()
                .column(0)
                .into_owned()
        };
        let d_out = probe(x).len();
        let mut j = DMatrix::zeros(d_out, d_in);
        for b in 0..d_in {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[b] += h;
            xm[b] -= h;
            let diff = (probe(&xp) - probe(&xm)) / (2.0 * h);
            j.set_column(b, &diff);
        }
        j
    }

    fn check_against_fd(spec: &ModelSpec, seed: u64, x: DVector<f64>, tol: f64) {
        let params = build_model(spec, seed).unwrap();
        // Randomized parameters: reuse the init but scale up for variety.
        let params = params.map(|v| v * 1.7 + 0.01);
        let analytic = layer_jacobian(&params, spec, 0, &x).unwrap().matrix;
        let fd = fd_jacobian(&params, spec, 0, &x, 1e-6);
        let err = crate::linalg::max_abs(&(&analytic - &fd));
        assert!(err < tol, "jacobian mismatch {err}");
    }

    #[test]
    fn tanh_jacobian_matches_finite_differences() {
        let spec = ModelSpec {
            input_dim: 4,
            layers: vec![LayerSpec::Activation {
                function: Activation::Tanh,
            }],
            head: None,
            schema_version: 1,
        };
        check_against_fd(&spec, 3, DVector::from_row_slice(&[0.3, -1.2, 0.0, 2.1]), 1e-8);
    }

    #[test]
    fn layer_norm_jacobian_matches_finite_differences() {
        let spec = ModelSpec {
            input_dim: 4,
            layers: vec![LayerSpec::LayerNorm { dim: 4, eps: 1e-5 }],
            head: None,
            schema_version: 1,
        };
        check_against_fd(&spec, 5, DVector::from_row_slice(&[0.9, -0.4, 0.1, 1.4]), 1e-7);
    }

    #[test]
    fn residual_block_jacobian_matches_finite_differences() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::ResidualBlock {
                inner: vec![
                    LayerSpec::Linear {
                        in_dim: 3,
                        out_dim: 3,
                        has_bias: true,
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
        check_against_fd(&spec, 8, DVector::from_row_slice(&[0.2, -0.6, 1.1]), 1e-7);
    }

    #[test]
    fn linear_jacobian_is_the_weight() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::Linear {
                in_dim: 3,
                out_dim: 2,
                has_bias: true,
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 1).unwrap();
        let w = params
            .entry("layers.0.linear")
            .unwrap()
            .as_linear("layers.0.linear")
            .unwrap()
            .0
            .clone();
        let j = layer_jacobian(&params, &spec, 0, &DVector::from_row_slice(&[1.0, 2.0, 3.0]))
            .unwrap();
        assert_eq!(j.matrix, w);
        assert!(j.relu_pattern.is_empty());
    }

    #[test]
    fn relu_pattern_is_recorded() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::Activation {
                function: Activation::Relu,
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 0).unwrap();
        let j = layer_jacobian(&params, &spec, 0, &DVector::from_row_slice(&[1.0, -2.0, 0.5]))
            .unwrap();
        assert_eq!(j.relu_pattern, vec![true, false, true]);
        assert_eq!(j.matrix.diagonal(), DVector::from_row_slice(&[1.0, 0.0, 1.0]));
    }

    #[test]
    fn residual_branch_jacobian_is_full_minus_identity() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::ResidualBlock {
                inner: vec![LayerSpec::Linear {
                    in_dim: 3,
                    out_dim: 3,
                    has_bias: false,
                }],
            }],
            head: None,
            schema_version: 1,
        };
        let params = build_model(&spec, 2).unwrap();
        let x = DVector::from_row_slice(&[0.4, -0.1, 0.9]);
        let full = layer_jacobian(&params, &spec, 0, &x).unwrap().matrix;
        let branch = residual_branch_jacobian(&params, &spec, 0, &x).unwrap().matrix;
        let diff = &full - &branch - DMatrix::identity(3, 3);
        assert!(crate::linalg::max_abs(&diff) < 1e-15);
    }
}
