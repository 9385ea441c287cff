//! Parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::spec::{ModelSpec, ModuleKind};

/// Which model a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Role {
    Base,
    Expert { task: usize },
    Merged,
    Calibrated,
}

/// Parameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleParams {
    Linear {
        /// out_dim × in_dim.
        weight: DMatrix<f64>,
        bias: Option<DVector<f64>>,
    },
    LayerNorm {
        gamma: DVector<f64>,
        beta: DVector<f64>,
    },
}

impl ModuleParams {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModuleParams::Linear { .. } => "linear",
            ModuleParams::LayerNorm { .. } => "layer_norm",
        }
    }

    /// Applies `f` to every scalar parameter, preserving structure.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ModuleParams {
        match self {
            ModuleParams::Linear { weight, bias } => ModuleParams::Linear {
                weight: weight.map(&mut f),
                bias: bias.as_ref().map(|b| b.map(&mut f)),
            },
            ModuleParams::LayerNorm { gamma, beta } => ModuleParams::LayerNorm {
                gamma: gamma.map(&mut f),
                beta: beta.map(&mut f),
            },
        }
    }

    /// Combines two structurally identical modules entry-wise.
    pub fn zip(&self, other: &ModuleParams, mut f: impl FnMut(f64, f64) -> f64) -> Result<ModuleParams> {
        match (self, other) {
            (
                ModuleParams::Linear { weight: wa, bias: ba },
                ModuleParams::Linear { weight: wb, bias: bb },
            ) => {
                if wa.shape() != wb.shape() || ba.is_some() != bb.is_some() {
                    return Err(shape_err(self, other));
                }
                let bias = match (ba, bb) {
                    (Some(x), Some(y)) => {
                        if x.len() != y.len() {
                            return Err(shape_err(self, other));
                        }
                        Some(x.zip_map(y, &mut f))
                    }
                    _ => None,
                };
                Ok(ModuleParams::Linear {
                    weight: wa.zip_map(wb, &mut f),
                    bias,
                })
            }
            (
                ModuleParams::LayerNorm { gamma: ga, beta: ba },
                ModuleParams::LayerNorm { gamma: gb, beta: bb },
            ) => {
                if ga.len() != gb.len() || ba.len() != bb.len() {
                    return Err(shape_err(self, other));
                }
                Ok(ModuleParams::LayerNorm {
                    gamma: ga.zip_map(gb, &mut f),
                    beta: ba.zip_map(bb, &mut f),
                })
            }
            _ => Err(shape_err(self, other)),
        }
    }

    /// Visits every scalar parameter.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        match self {
            ModuleParams::Linear { weight, bias } => {
                weight.iter().for_each(|v| f(*v));
                if let Some(b) = bias {
                    b.iter().for_each(|v| f(*v));
                }
            }
            ModuleParams::LayerNorm { gamma, beta } => {
                gamma.iter().for_each(|v| f(*v));
                beta.iter().for_each(|v| f(*v));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.is_finite());
        ok
    }

    /// Borrow as a linear module, or error with the given path.
    pub fn as_linear(&self, path: &str) -> Result<(&DMatrix<f64>, Option<&DVector<f64>>)> {
        match self {
            ModuleParams::Linear { weight, bias } => Ok((weight, bias.as_ref())),
            _ => Err(CoreError::BadEntry {
                path: path.into(),
                reason: "expected a linear module".into(),
            }),
        }
    }

    /// Borrow as a LayerNorm module, or error with the given path.
    pub fn as_layer_norm(&self, path: &str) -> Result<(&DVector<f64>, &DVector<f64>)> {
        match self {
            ModuleParams::LayerNorm { gamma, beta } => Ok((gamma, beta)),
            _ => Err(CoreError::BadEntry {
                path: path.into(),
                reason: "expected a layer_norm module".into(),
            }),
        }
    }
}

fn shape_err(a: &ModuleParams, b: &ModuleParams) -> CoreError {
    CoreError::ShapeMismatch {
        context: "module combine".into(),
        expected: format!("{} with matching shapes", a.kind_name()),
        actual: b.kind_name().to_string(),
    }
}

/// All named parameters of one model role, keyed by module path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub role: Role,
    pub entries: BTreeMap<String, ModuleParams>,
}

impl ParameterSet {
    pub fn entry(&self, path: &str) -> Result<&ModuleParams> {
        self.entries
            .get(path)
            .ok_or_else(|| CoreError::MissingEntry { path: path.into() })
    }

    /// Checks that entries match the spec's modules exactly (kind and shape)
    /// and that every value is finite.
    pub fn validate_against(&self, spec: &ModelSpec) -> Result<()> {
        let modules = spec.modules()?;
        for module in &modules {
            let entry = self.entry(&module.path)?;
            match (&module.kind, entry) {
                (
                    ModuleKind::Linear {
                        in_dim,
                        out_dim,
                        has_bias,
                    },
                    ModuleParams::Linear { weight, bias },
                ) => {
                    if weight.nrows() != *out_dim || weight.ncols() != *in_dim {
                        return Err(CoreError::BadEntry {
                            path: module.path.clone(),
                            reason: format!(
                                "weight is {}×{}, spec wants {out_dim}×{in_dim}",
                                weight.nrows(),
                                weight.ncols()
                            ),
                        });
                    }
                    if *has_bias != bias.is_some() {
                        return Err(CoreError::BadEntry {
                            path: module.path.clone(),
                            reason: format!("has_bias={has_bias} but bias present={}", bias.is_some()),
                        });
                    }
                    if let Some(b) = bias {
                        if b.len() != *out_dim {
                            return Err(CoreError::BadEntry {
                                path: module.path.clone(),
                                reason: format!("bias length {} != out_dim {out_dim}", b.len()),
                            });
                        }
                    }
                }
                (ModuleKind::LayerNorm { dim, .. }, ModuleParams::LayerNorm { gamma, beta }) => {
                    if gamma.len() != *dim || beta.len() != *dim {
                        return Err(CoreError::BadEntry {
                            path: module.path.clone(),
                            reason: format!(
                                "gamma/beta lengths {}/{} != dim {dim}",
                                gamma.len(),
                                beta.len()
                            ),
                        });
                    }
                }
                (_, entry) => {
                    return Err(CoreError::BadEntry {
                        path: module.path.clone(),
                        reason: format!("kind mismatch: entry is {}", entry.kind_name()),
                    });
                }
            }
            if !entry.all_finite() {
                return Err(CoreError::NonFinite {
                    location: format!("entry `{}`", module.path),
                });
            }
        }
        if self.entries.len() != modules.len() {
            let known: std::collections::BTreeSet<&str> =
                modules.iter().map(|m| m.path.as_str()).collect();
            let extra: Vec<&String> = self
                .entries
                .keys()
                .filter(|k| !known.contains(k.as_str()))
                .collect();
            return Err(CoreError::InvalidConfig(format!(
                "parameter set has entries not in the spec: {extra:?}"
            )));
        }
        Ok(())
    }

    /// Same structure with a different role tag.
    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Entry-wise combine of two structurally identical sets.
    pub fn zip(&self, other: &ParameterSet, mut f: impl FnMut(f64, f64) -> f64) -> Result<ParameterSet> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::ShapeMismatch {
                context: "parameter set combine".into(),
                expected: format!("{} entries", self.entries.len()),
                actual: format!("{} entries", other.entries.len()),
            });
        }
        let mut entries = BTreeMap::new();
        for (path, a) in &self.entries {
            let b = other.entry(path)?;
            entries.insert(
                path.clone(),
                a.zip(b, &mut f).map_err(|e| e.in_module(path))?,
            );
        }
        Ok(ParameterSet {
            role: self.role,
            entries,
        })
    }

    /// Applies `f` to every scalar parameter.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ParameterSet {
        ParameterSet {
            role: self.role,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(&mut f)))
                .collect(),
        }
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for entry in self.entries.values() {
            entry.for_each(|v| m = m.max(v.abs()));
        }
        m
    }
}

/// Builds a Base-role parameter set with seeded initialization: uniform
/// weights scaled by √(6/(fan_in+fan_out)), zero biases, identity-affine
/// LayerNorm (γ=1, β=0). The same seed yields bit-identical parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for module in spec.modules()? {
        let params = match module.kind {
            ModuleKind::Linear {
                in_dim,
                out_dim,
                has_bias,
            } => {
                let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                // Row-major fill so the draw order is part of the format.
                let mut weight = DMatrix::zeros(out_dim, in_dim);
                for r in 0..out_dim {
                    for c in 0..in_dim {
                        weight[(r, c)] = rng.gen_range(-limit..limit);
                    }
                }
                ModuleParams::Linear {
                    weight,
                    bias: has_bias.then(|| DVector::zeros(out_dim)),
                }
            }
            ModuleKind::LayerNorm { dim, .. } => ModuleParams::LayerNorm {
                gamma: DVector::from_element(dim, 1.0),
                beta: DVector::zeros(dim),
            },
        };
        entries.insert(module.path, params);
    }
    Ok(ParameterSet {
        role: Role::Base,
        entries,
    })
}
