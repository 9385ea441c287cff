//! Architecture description: layer kinds, dimension checking, module paths.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Pointwise nonlinearity of an activation layer.
///
/// `Tanh` keeps layer maps continuously differentiable (needed by the
/// path-averaged propagation diagnostics), `Relu` is the piecewise-linear
/// case those diagnostics must flag, and `Identity` makes layers exactly
/// linear for closed-form checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

/// One layer of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_dim: usize,
        out_dim: usize,
        has_bias: bool,
    },
    LayerNorm {
        dim: usize,
        eps: f64,
    },
    Activation {
        function: Activation,
    },
    /// y = x + g(x) where g is the composition of `inner`. The inner chain
    /// must preserve dimension so the skip connection is well formed.
    ResidualBlock {
        inner: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    /// Output dimension given the incoming dimension, or a reason string
    /// when the layer cannot accept that input.
    fn output_dim(&self, input: usize) -> std::result::Result<usize, String> {
        match self {
            LayerSpec::Linear {
                in_dim, out_dim, ..
            } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(format!("linear dims must be positive, got {in_dim}→{out_dim}"));
                }
                if input != *in_dim {
                    return Err(format!(
                        "linear expects input dim {in_dim}, previous layer produces {input}"
                    ));
                }
                Ok(*out_dim)
            }
            LayerSpec::LayerNorm { dim, eps } => {
                if *dim == 0 {
                    return Err("layer_norm dim must be positive".into());
                }
                if !(*eps > 0.0) {
                    return Err(format!("layer_norm eps must be positive, got {eps}"));
                }
                if input != *dim {
                    return Err(format!(
                        "layer_norm expects dim {dim}, previous layer produces {input}"
                    ));
                }
                Ok(*dim)
            }
            LayerSpec::Activation { .. } => Ok(input),
            LayerSpec::ResidualBlock { inner } => {
                if inner.is_empty() {
                    return Err("residual_block must have a non-empty inner chain".into());
                }
                let mut dim = input;
                for (k, layer) in inner.iter().enumerate() {
                    dim = layer
                        .output_dim(dim)
                        .map_err(|reason| format!("inner layer {k}: {reason}"))?;
                }
                if dim != input {
                    return Err(format!(
                        "residual_block inner chain maps {input}→{dim}, must preserve dimension"
                    ));
                }
                Ok(input)
            }
        }
    }
}

/// Linear head mapping the final feature to per-class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_dim: usize,
    pub classes: usize,
    pub has_bias: bool,
}

/// Full architecture: an ordered layer stack plus an optional score head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub head: Option<HeadSpec>,
    pub schema_version: u32,
}

/// Kind and shape of a parameterized module, as named by a module path.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleKind {
    Linear {
        in_dim: usize,
        out_dim: usize,
        has_bias: bool,
    },
    LayerNorm {
        dim: usize,
        eps: f64,
    },
}

/// A parameterized module located inside the network.
///
/// `layer_index` is the top-level layer the module lives in; the head is
/// listed with `layer_index == num_layers()` since it sits after the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRef {
    pub path: String,
    pub layer_index: usize,
    pub kind: ModuleKind,
}

impl ModelSpec {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Validates dimensions along the whole stack.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CoreError::InvalidSpec {
                layer: 0,
                reason: "input_dim must be positive".into(),
            });
        }
        if self.layers.is_empty() {
            return Err(CoreError::InvalidSpec {
                layer: 0,
                reason: "a model needs at least one layer".into(),
            });
        }
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            dim = layer
                .output_dim(dim)
                .map_err(|reason| CoreError::InvalidSpec { layer: i, reason })?;
        }
        if let Some(head) = &self.head {
            if head.classes == 0 {
                return Err(CoreError::InvalidSpec {
                    layer: self.layers.len(),
                    reason: "head must have at least one class".into(),
                });
            }
            if head.in_dim != dim {
                return Err(CoreError::InvalidSpec {
                    layer: self.layers.len(),
                    reason: format!(
                        "head expects in_dim {}, final layer produces {dim}",
                        head.in_dim
                    ),
                });
            }
        }
        Ok(())
    }

    /// Feature dimensions d_0..=d_L along the stack (d_0 = input_dim).
    pub fn feature_dims(&self) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        dims.push(self.input_dim);
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            dim = layer
                .output_dim(dim)
                .map_err(|reason| CoreError::InvalidSpec { layer: i, reason })?;
            dims.push(dim);
        }
        Ok(dims)
    }

    /// Final feature dimension d_L.
    pub fn output_dim(&self) -> Result<usize> {
        Ok(*self.feature_dims()?.last().unwrap())
    }

    /// All parameterized modules in deterministic path order, including the
    /// head (when present) under the path `"head"`.
    pub fn modules(&self) -> Result<Vec<ModuleRef>> {
        let dims = self.feature_dims()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            collect_modules(layer, &format!("layers.{i}"), i, dims[i], &mut out);
        }
        if let Some(head) = &self.head {
            out.push(ModuleRef {
                path: "head".into(),
                layer_index: self.layers.len(),
                kind: ModuleKind::Linear {
                    in_dim: head.in_dim,
                    out_dim: head.classes,
                    has_bias: head.has_bias,
                },
            });
        }
        Ok(out)
    }
}

fn collect_modules(
    layer: &LayerSpec,
    path: &str,
    layer_index: usize,
    input_dim: usize,
    out: &mut Vec<ModuleRef>,
) {
    match layer {
        LayerSpec::Linear {
            in_dim,
            out_dim,
            has_bias,
        } => out.push(ModuleRef {
            path: format!("{path}.linear"),
            layer_index,
            kind: ModuleKind::Linear {
                in_dim: *in_dim,
                out_dim: *out_dim,
                has_bias: *has_bias,
            },
        }),
        LayerSpec::LayerNorm { dim, eps } => out.push(ModuleRef {
            path: format!("{path}.norm"),
            layer_index,
            kind: ModuleKind::LayerNorm {
                dim: *dim,
                eps: *eps,
            },
        }),
        LayerSpec::Activation { .. } => {}
        LayerSpec::ResidualBlock { inner } => {
            let mut dim = input_dim;
            for (k, sub) in inner.iter().enumerate() {
                collect_modules(sub, &format!("{path}.inner.{k}"), layer_index, dim, out);
                dim = sub.output_dim(dim).expect("validated spec");
            }
        }
    }
}
