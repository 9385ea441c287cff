//! Layered-network engine: architecture specs, parameter storage,
//! deterministic forward passes and per-layer feature tracing.
//!
//! Feature matrices are column-per-sample (d × M) so second moments read
//! directly as X·Xᵀ/n. Parameter sets and traces are immutable once built;
//! forward passes never mutate shared state.

mod forward;
mod io;
mod jacobian;
mod params;
mod spec;

pub use forward::{
    apply_layer, apply_residual_branch, capture_module_inputs, features_at_layer_input,
    forward_trace, layer_norm_normalize, FeatureTrace,
};
pub use io::{load_model, model_to_json, model_from_json, save_model};
pub use jacobian::{layer_jacobian, residual_branch_jacobian, PointJacobian};
pub use params::{build_model, ModuleParams, ParameterSet, Role};
pub use spec::{Activation, HeadSpec, LayerSpec, ModelSpec, ModuleKind, ModuleRef};
