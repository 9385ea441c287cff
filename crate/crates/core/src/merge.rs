//! Weight-space mergers: simple averaging and task arithmetic.
//!
//! Both mergers treat biases and LayerNorm affine parameters exactly like
//! weights, so the merged model always carries a full parameter set for the
//! calibration stage to anchor against.

use crate::error::{CoreError, Result};
use crate::model::{ParameterSet, Role};

/// Entry-wise arithmetic mean of the expert parameters.
pub fn simple_average(experts: &[&ParameterSet]) -> Result<ParameterSet> {
    if experts.is_empty() {
        return Err(CoreError::InvalidConfig(
            "simple_average needs at least one expert".into(),
        ));
    }
    let mut acc = experts[0].clone();
    for other in &experts[1..] {
        acc = acc.zip(other, |a, b| a + b)?;
    }
    let scale = 1.0 / experts.len() as f64;
    Ok(acc.map(|v| v * scale).with_role(Role::Merged))
}

/// Task arithmetic: base + scale · Σ_i (expert_i − base).
pub fn task_arithmetic(
    base: &ParameterSet,
    experts: &[&ParameterSet],
    scale: f64,
) -> Result<ParameterSet> {
    if experts.is_empty() {
        return Err(CoreError::InvalidConfig(
            "task_arithmetic needs at least one expert".into(),
        ));
    }
    let mut delta_sum: Option<ParameterSet> = None;
    for expert in experts {
        let delta = expert.zip(base, |e, b| e - b)?;
        delta_sum = Some(match delta_sum {
            None => delta,
            Some(acc) => acc.zip(&delta, |a, d| a + d)?,
        });
    }
    base.zip(&delta_sum.unwrap(), |b, d| b + scale * d)
        .map(|p| p.with_role(Role::Merged))
}
