//! Forward-order, closed-form calibration of merged models against expert
//! feature targets.
//!
//! Layers are visited input→output. At each layer the current calibrated
//! model's features and the expert features are cached once (the snapshot),
//! then every selected module in the layer is solved independently from
//! that shared snapshot and the layer's updates are loaded atomically:
//!
//! - linear weights minimize Σ_i (ω_i/n)‖W·X_i^cal − W_i·X_i^tgt‖² +
//!   λ‖W − W_anc‖², solved through the normal equations with an SPD
//!   factorization (an ε·I stabilizer keeps the solve matrix definite);
//! - biases get a second-stage scalar-denominator update with the solved
//!   weight held fixed;
//! - LayerNorm affine pairs solve coordinate-wise 2×2 normal equations on
//!   the normalized current features, with equal task weights.
//!
//! Targets interpolate between current and expert features (α), and the
//! ridge anchor blends merged and base weights (ρ, unrestricted). Because
//! later layers never affect earlier features, the snapshot a layer was
//! calibrated on is exactly the layer input the deployed model reproduces.

pub mod oracle;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{frobenius, solve_spd_right, symmetrize};
use crate::model::{
    capture_module_inputs, features_at_layer_input, layer_norm_normalize, ModelSpec, ModuleKind,
    ModuleParams, ParameterSet, Role,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Module-path filter: `*` matches any run of characters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleFilter {
    pub pattern: String,
}

impl Default for ModuleFilter {
    fn default() -> Self {
        ModuleFilter {
            pattern: "*".into(),
        }
    }
}

impl ModuleFilter {
    pub fn new(pattern: impl Into<String>) -> Self {
        ModuleFilter {
            pattern: pattern.into(),
        }
    }

    /// Comma separates alternatives: `layers.0.*,layers.3.*`.
    pub fn matches(&self, path: &str) -> bool {
        self.pattern
            .split(',')
            .any(|p| glob_match(p.trim().as_bytes(), path.as_bytes()))
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    match pattern.split_first() {
        None => text.is_empty(),
        Some((b'*', rest)) => {
            (0..=text.len()).any(|skip| glob_match(rest, &text[skip..]))
        }
        Some((ch, rest)) => text.first() == Some(ch) && glob_match(rest, &text[1..]),
    }
}

/// Calibration hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Ridge strength toward the anchor.
    pub lambda: f64,
    /// Anchor blend ρ·merged + (1−ρ)·base; any real, ρ>1 extrapolates.
    pub rho: f64,
    /// Target interpolation α·expert + (1−α)·current, clamped to [0,1] at
    /// validation (violations are errors, not silent clamps).
    pub alpha: f64,
    /// Numerical stabilizer: added to the solve matrix and used as the
    /// floor for task-weight and determinant denominators.
    pub epsilon: f64,
    /// Per-task calibration sample budget.
    pub samples_per_task: usize,
    pub calibrate_bias: bool,
    pub calibrate_layernorm: bool,
    pub module_filter: ModuleFilter,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            lambda: 0.05,
            rho: 2.0,
            alpha: 0.3,
            epsilon: 1e-8,
            samples_per_task: 256,
            calibrate_bias: true,
            calibrate_layernorm: true,
            module_filter: ModuleFilter::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::InvalidConfig(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "lambda must be a finite non-negative real, got {}",
                self.lambda
            )));
        }
        if !self.rho.is_finite() {
            return Err(CoreError::InvalidConfig("rho must be finite".into()));
        }
        if self.samples_per_task == 0 {
            return Err(CoreError::InvalidConfig(
                "samples_per_task must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

/// Cached input features for one module and one task, on identical samples
/// in identical order.
#[derive(Clone, Debug)]
pub struct TaskSnapshot {
    /// From the prefix-calibrated model (the deployed input source).
    pub x_cal: DMatrix<f64>,
    /// From the task expert.
    pub x_exp: DMatrix<f64>,
}

/// Cached calibration inputs for one module across tasks; `None` marks a
/// task whose calibration set was empty.
#[derive(Clone, Debug)]
pub struct ModuleSnapshot {
    pub module_path: String,
    pub layer_index: usize,
    pub per_task: Vec<Option<TaskSnapshot>>,
}

impl ModuleSnapshot {
    pub fn n_effective(&self, task: usize) -> usize {
        self.per_task[task]
            .as_ref()
            .map_or(0, |s| s.x_cal.ncols())
    }
}

/// One layer's cached features: the layer inputs plus every contained
/// module's inputs, collected once before any module in the layer updates.
#[derive(Clone, Debug)]
pub struct LayerSnapshot {
    pub layer_index: usize,
    pub layer_input_cal: Vec<Option<DMatrix<f64>>>,
    pub layer_input_exp: Vec<Option<DMatrix<f64>>>,
    pub modules: Vec<ModuleSnapshot>,
}

/// Caches current-model and expert input features for every parameterized
/// module in layer `layer_index`.
///
/// `current` must already hold calibrated parameters for all earlier
/// layers; `calib_batches[i]` is task i's raw input batch (zero columns
/// mark a task to skip).
pub fn collect_layer_snapshot(
    current: &ParameterSet,
    experts: &[ParameterSet],
    spec: &ModelSpec,
    calib_batches: &[DMatrix<f64>],
    layer_index: usize,
) -> Result<LayerSnapshot> {
    if experts.len() != calib_batches.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} experts but {} calibration batches",
            experts.len(),
            calib_batches.len()
        )));
    }
    if layer_index >= spec.layers.len() {
        return Err(CoreError::InvalidConfig(format!(
            "layer index {layer_index} out of range"
        )));
    }
    let num_tasks = experts.len();
    let mut layer_input_cal = Vec::with_capacity(num_tasks);
    let mut layer_input_exp = Vec::with_capacity(num_tasks);
    let mut per_module_cal: Vec<Option<BTreeMap<String, DMatrix<f64>>>> = Vec::new();
    let mut per_module_exp: Vec<Option<BTreeMap<String, DMatrix<f64>>>> = Vec::new();

    for (task, batch) in calib_batches.iter().enumerate() {
        if batch.ncols() == 0 {
            layer_input_cal.push(None);
            layer_input_exp.push(None);
            per_module_cal.push(None);
            per_module_exp.push(None);
            continue;
        }
        let in_cal = features_at_layer_input(current, spec, batch, layer_index)?;
        let in_exp = features_at_layer_input(&experts[task], spec, batch, layer_index)?;
        per_module_cal.push(Some(capture_module_inputs(
            current, spec, layer_index, &in_cal,
        )?));
        per_module_exp.push(Some(capture_module_inputs(
            &experts[task],
            spec,
            layer_index,
            &in_exp,
        )?));
        layer_input_cal.push(Some(in_cal));
        layer_input_exp.push(Some(in_exp));
    }

    let mut modules = Vec::new();
    for module in spec.modules()? {
        if module.layer_index != layer_index {
            continue;
        }
        let mut per_task = Vec::with_capacity(num_tasks);
        for task in 0..num_tasks {
            match (&per_module_cal[task], &per_module_exp[task]) {
                (Some(cal), Some(exp)) => per_task.push(Some(TaskSnapshot {
                    x_cal: cal[&module.path].clone(),
                    x_exp: exp[&module.path].clone(),
                })),
                _ => per_task.push(None),
            }
        }
        modules.push(ModuleSnapshot {
            module_path: module.path,
            layer_index,
            per_task,
        });
    }

    Ok(LayerSnapshot {
        layer_index,
        layer_input_cal,
        layer_input_exp,
        modules,
    })
}

// ---------------------------------------------------------------------------
// Per-module math
// ---------------------------------------------------------------------------

/// X_tgt = α·X_exp + (1−α)·X_cal, entry-wise.
pub fn interpolate_target(
    x_exp: &DMatrix<f64>,
    x_cal: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    if x_exp.shape() != x_cal.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "interpolate_target".into(),
            expected: format!("{:?}", x_exp.shape()),
            actual: format!("{:?}", x_cal.shape()),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidConfig(format!(
            "alpha must lie in [0,1], got {alpha}"
        )));
    }
    Ok(x_exp.zip_map(x_cal, |e, c| alpha * e + (1.0 - alpha) * c))
}

/// Empirical feature statistics G = X_cal·X_calᵀ/n (symmetrized) and
/// C = X_tgt·X_calᵀ/n. `n` is the column count actually used.
pub fn module_stats(
    x_cal: &DMatrix<f64>,
    x_tgt: &DMatrix<f64>,
    n: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if x_cal.shape() != x_tgt.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "module_stats".into(),
            expected: format!("{:?}", x_cal.shape()),
            actual: format!("{:?}", x_tgt.shape()),
        });
    }
    let d = x_cal.nrows();
    if n == 0 || x_cal.ncols() == 0 {
        return Ok((DMatrix::zeros(d, d), DMatrix::zeros(d, d)));
    }
    let inv_n = 1.0 / n as f64;
    let g = symmetrize(&((x_cal * x_cal.transpose()) * inv_n));
    let c = (x_tgt * x_cal.transpose()) * inv_n;
    Ok((g, c))
}

/// Stabilized inverse task weight ω = 1/max(‖G‖_F, ε).
pub fn task_weight(g: &DMatrix<f64>, epsilon: f64) -> f64 {
    1.0 / frobenius(g).max(epsilon)
}

/// Anchor parameters ρ·merged + (1−ρ)·base, for weights, biases and
/// LayerNorm affine parameters alike.
pub fn anchor(merged: &ModuleParams, base: &ModuleParams, rho: f64) -> Result<ModuleParams> {
    merged.zip(base, |m, b| rho * m + (1.0 - rho) * b)
}

/// One task's contribution to a weight solve.
#[derive(Clone, Debug)]
pub struct WeightTask<'a> {
    pub omega: f64,
    pub n: usize,
    pub x_cal: &'a DMatrix<f64>,
    pub x_tgt: &'a DMatrix<f64>,
    pub w_expert: &'a DMatrix<f64>,
}

/// The module-wise objective Σ_i (ω_i/n_i)‖W·X_cal − W_i·X_tgt‖_F² +
/// λ‖W − W_anc‖_F², evaluated from the raw feature matrices.
pub fn weight_objective(
    w: &DMatrix<f64>,
    tasks: &[WeightTask<'_>],
    lambda: f64,
    w_anc: &DMatrix<f64>,
) -> f64 {
    let mut total = 0.0;
    for t in tasks {
        if t.n == 0 {
            continue;
        }
        let resid = w * t.x_cal - t.w_expert * t.x_tgt;
        total += t.omega / t.n as f64 * resid.norm_squared();
    }
    total + lambda * (w - w_anc).norm_squared()
}

/// Gradient of [`weight_objective`] in W.
pub fn weight_gradient(
    w: &DMatrix<f64>,
    tasks: &[WeightTask<'_>],
    lambda: f64,
    w_anc: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut grad = (w - w_anc) * (2.0 * lambda);
    for t in tasks {
        if t.n == 0 {
            continue;
        }
        let resid = w * t.x_cal - t.w_expert * t.x_tgt;
        grad += (resid * t.x_cal.transpose()) * (2.0 * t.omega / t.n as f64);
    }
    grad
}

/// Per-task second-moment statistics feeding a weight solve.
#[derive(Clone, Debug)]
pub struct ModuleTaskStats {
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub omega: f64,
    pub n_effective: usize,
}

/// Residuals of the linear-system solve behind a weight update.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WeightSolveInfo {
    /// ‖W·(ΣωG + (λ+ε)I) − rhs‖_F of the system actually factorized.
    pub solve_residual: f64,
    /// ‖W·(ΣωG + λI) − rhs‖_F: stationarity of the unstabilized objective;
    /// differs from `solve_residual` by exactly ε·‖W‖-order terms.
    pub stationary_residual: f64,
    pub rhs_norm: f64,
}

/// Closed-form weight update: solves
/// W·(Σ_i ω_i G_i + (λ+ε)I) = Σ_i ω_i W_i C_i + λ·W_anc
/// by Cholesky factorization. Tasks with no data contribute nothing.
pub fn solve_weight(
    stats: &[ModuleTaskStats],
    experts_w: &[&DMatrix<f64>],
    w_anc: &DMatrix<f64>,
    lambda: f64,
    epsilon: f64,
) -> Result<(DMatrix<f64>, WeightSolveInfo)> {
    if stats.len() != experts_w.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} stat blocks but {} expert weights",
            stats.len(),
            experts_w.len()
        )));
    }
    if !(epsilon > 0.0) || lambda < 0.0 {
        return Err(CoreError::InvalidConfig(
            "solve_weight needs epsilon > 0 and lambda >= 0".into(),
        ));
    }
    let d = w_anc.ncols();
    let mut lhs = DMatrix::zeros(d, d);
    let mut rhs = w_anc * lambda;
    for (s, w_i) in stats.iter().zip(experts_w) {
        if s.n_effective == 0 {
            continue;
        }
        if !(s.omega > 0.0 && s.omega.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "task weight must be positive and finite, got {}",
                s.omega
            )));
        }
        lhs += &s.g * s.omega;
        rhs += (*w_i * &s.c) * s.omega;
    }
    if !crate::linalg::all_finite(&lhs) || !crate::linalg::all_finite(&rhs) {
        return Err(CoreError::NonFinite {
            location: "solve_weight inputs".into(),
        });
    }
    let mut lhs_stab = lhs.clone();
    for i in 0..d {
        lhs_stab[(i, i)] += lambda + epsilon;
    }
    let w_star = solve_spd_right(&lhs_stab, &rhs)?;

    let solve_residual = frobenius(&(&w_star * &lhs_stab - &rhs));
    let mut lhs_plain = lhs;
    for i in 0..d {
        lhs_plain[(i, i)] += lambda;
    }
    let stationary_residual = frobenius(&(&w_star * &lhs_plain - &rhs));
    Ok((
        w_star,
        WeightSolveInfo {
            solve_residual,
            stationary_residual,
            rhs_norm: frobenius(&rhs),
        },
    ))
}

/// One task's contribution to a bias solve.
#[derive(Clone, Debug)]
pub struct BiasTask<'a> {
    pub omega: f64,
    pub mu_cal: DVector<f64>,
    pub mu_tgt: DVector<f64>,
    pub w_expert: &'a DMatrix<f64>,
    pub b_expert: &'a DVector<f64>,
}

/// Second-stage bias update with the solved weight fixed:
/// b = (Σ_i ω_i(b_i + W_i·μ_i^tgt − W*·μ_i^cal) + λ·b_anc)/(Σ_i ω_i + λ).
pub fn solve_bias(
    w_star: &DMatrix<f64>,
    tasks: &[BiasTask<'_>],
    b_anc: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let mut numer = b_anc * lambda;
    let mut denom = lambda;
    for t in tasks {
        numer += (t.b_expert + t.w_expert * &t.mu_tgt - w_star * &t.mu_cal) * t.omega;
        denom += t.omega;
    }
    if denom <= 0.0 {
        return Err(CoreError::Numerical(
            "bias solve denominator must be positive".into(),
        ));
    }
    let b = numer / denom;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite {
            location: "solve_bias".into(),
        });
    }
    Ok(b)
}

/// LayerNorm affine update on normalized current features, with equal task
/// weights: coordinate-wise 2×2 normal equations
///
/// [Σq+λ   Σz̄ ] [γ]   [Σ(q⊙γ_i + z̄⊙β_i) + λγ_anc]
/// [Σz̄    N+λ ] [β] = [Σ(z̄⊙γ_i + β_i)  + λβ_anc]
///
/// whose determinant is clamped from below by ε.
pub fn solve_layernorm(
    z_cal: &[&DMatrix<f64>],
    experts_affine: &[(&DVector<f64>, &DVector<f64>)],
    gamma_anc: &DVector<f64>,
    beta_anc: &DVector<f64>,
    lambda: f64,
    epsilon: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if z_cal.len() != experts_affine.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} feature blocks but {} expert affine pairs",
            z_cal.len(),
            experts_affine.len()
        )));
    }
    let d = gamma_anc.len();
    let n_tasks = z_cal.len();

    let mut a11: DVector<f64> = DVector::from_element(d, lambda);
    let a22: f64 = n_tasks as f64 + lambda;
    let mut a12: DVector<f64> = DVector::zeros(d);
    let mut r_gamma: DVector<f64> = gamma_anc * lambda;
    let mut r_beta: DVector<f64> = beta_anc * lambda;

    for (z, (gamma_i, beta_i)) in z_cal.iter().zip(experts_affine) {
        let n = z.ncols();
        if n == 0 {
            return Err(CoreError::InvalidConfig(
                "solve_layernorm received an empty feature block".into(),
            ));
        }
        let inv_n = 1.0 / n as f64;
        for i in 0..d {
            let mut zbar = 0.0;
            let mut q = 0.0;
            for j in 0..n {
                let v = z[(i, j)];
                zbar += v;
                q += v * v;
            }
            zbar *= inv_n;
            q *= inv_n;
            a11[i] += q;
            a12[i] += zbar;
            r_gamma[i] += q * gamma_i[i] + zbar * beta_i[i];
            r_beta[i] += zbar * gamma_i[i] + beta_i[i];
        }
    }

    let mut gamma = DVector::zeros(d);
    let mut beta = DVector::zeros(d);
    for i in 0..d {
        let det = (a22 * a11[i] - a12[i] * a12[i]).max(epsilon);
        gamma[i] = (a22 * r_gamma[i] - a12[i] * r_beta[i]) / det;
        beta[i] = (a11[i] * r_beta[i] - a12[i] * r_gamma[i]) / det;
    }
    if !(gamma.iter().all(|v| v.is_finite()) && beta.iter().all(|v| v.is_finite())) {
        return Err(CoreError::NonFinite {
            location: "solve_layernorm".into(),
        });
    }
    Ok((gamma, beta))
}

/// The LayerNorm objective Σ_i (1/n)‖γ⊙Z + β1ᵀ − (γ_i⊙Z + β_i1ᵀ)‖_F² +
/// λ‖γ−γ_anc‖² + λ‖β−β_anc‖², evaluated directly from the feature blocks.
pub fn layernorm_objective(
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    z_cal: &[&DMatrix<f64>],
    experts_affine: &[(&DVector<f64>, &DVector<f64>)],
    lambda: f64,
    gamma_anc: &DVector<f64>,
    beta_anc: &DVector<f64>,
) -> f64 {
    let mut total = 0.0;
    for (z, (gamma_i, beta_i)) in z_cal.iter().zip(experts_affine) {
        let n = z.ncols().max(1);
        let mut acc = 0.0;
        for j in 0..z.ncols() {
            for i in 0..z.nrows() {
                let diff = (gamma[i] - gamma_i[i]) * z[(i, j)] + (beta[i] - beta_i[i]);
                acc += diff * diff;
            }
        }
        total += acc / n as f64;
    }
    total
        + lambda * (gamma - gamma_anc).norm_squared()
        + lambda * (beta - beta_anc).norm_squared()
}

/// The bias objective Σ_i ω_i‖W*·μ_cal + b − (W_i·μ_tgt + b_i)‖² +
/// λ‖b − b_anc‖².
pub fn bias_objective(
    b: &DVector<f64>,
    w_star: &DMatrix<f64>,
    tasks: &[BiasTask<'_>],
    lambda: f64,
    b_anc: &DVector<f64>,
) -> f64 {
    let mut total = 0.0;
    for t in tasks {
        let resid = w_star * &t.mu_cal + b - (t.w_expert * &t.mu_tgt + t.b_expert);
        total += t.omega * resid.norm_squared();
    }
    total + lambda * (b - b_anc).norm_squared()
}

// ---------------------------------------------------------------------------
// Full calibration pass
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ModuleLogEntry {
    pub module_path: String,
    pub layer_index: usize,
    /// "weight", "bias" or "layernorm".
    pub update_kind: String,
    pub anchor_norm: f64,
    /// Residual of the solved linear system, relative to the rhs norm.
    pub solve_residual_rel: f64,
    /// Residual of the unstabilized stationary condition, relative.
    pub stationary_residual_rel: f64,
    pub data_term_before: f64,
    pub data_term_after: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub distance_from_merged: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerLogEntry {
    pub layer_index: usize,
    pub wall_time_s: f64,
}

/// Diagnostics from one calibration run. Everything except `wall_time_s`
/// is a deterministic function of the inputs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CalibrationLog {
    pub modules: Vec<ModuleLogEntry>,
    pub layers: Vec<LayerLogEntry>,
    pub warnings: Vec<String>,
}

/// Staged updates for one layer, computed from the shared snapshot and the
/// original merged/base/expert parameters only — module solves inside a
/// layer are independent, so processing order cannot affect the result.
pub fn stage_layer_updates(
    snapshot: &LayerSnapshot,
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    spec: &ModelSpec,
    config: &CalibConfig,
    log: &mut CalibrationLog,
) -> Result<Vec<(String, ModuleParams)>> {
    let module_kinds: BTreeMap<String, ModuleKind> = spec
        .modules()?
        .into_iter()
        .map(|m| (m.path, m.kind))
        .collect();
    layer_updates(snapshot, merged, base, experts, config, &module_kinds, log)
}

fn layer_updates(
    snapshot: &LayerSnapshot,
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    config: &CalibConfig,
    module_kinds: &BTreeMap<String, ModuleKind>,
    log: &mut CalibrationLog,
) -> Result<Vec<(String, ModuleParams)>> {
    let mut staged = Vec::new();
    for module in &snapshot.modules {
        let path = &module.module_path;
        if !config.module_filter.matches(path) {
            continue;
        }
        let kind = module_kinds
            .get(path)
            .ok_or_else(|| CoreError::MissingEntry { path: path.clone() })?;
        match kind {
            ModuleKind::Linear { .. } => {
                let update = solve_linear_module(module, merged, base, experts, config, log)
                    .map_err(|e| e.in_module(path))?;
                staged.push((path.clone(), update));
            }
            ModuleKind::LayerNorm { eps, .. } => {
                if !config.calibrate_layernorm {
                    continue;
                }
                let update =
                    solve_layernorm_module(module, *eps, merged, base, experts, config, log)
                        .map_err(|e| e.in_module(path))?;
                staged.push((path.clone(), update));
            }
        }
    }
    Ok(staged)
}

fn solve_linear_module(
    module: &ModuleSnapshot,
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    config: &CalibConfig,
    log: &mut CalibrationLog,
) -> Result<ModuleParams> {
    let path = &module.module_path;
    let merged_entry = merged.entry(path)?;
    let base_entry = base.entry(path)?;
    let (w_mer, b_mer) = merged_entry.as_linear(path)?;
    let anchor_entry = anchor(merged_entry, base_entry, config.rho)?;
    let (w_anc, b_anc) = anchor_entry.as_linear(path)?;

    // Per-task targets and stats; empty tasks drop out of every sum.
    let mut targets: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(experts.len());
    let mut stats: Vec<ModuleTaskStats> = Vec::with_capacity(experts.len());
    let mut expert_weights: Vec<&DMatrix<f64>> = Vec::with_capacity(experts.len());
    for (task, expert) in experts.iter().enumerate() {
        let (w_exp, _) = expert.entry(path)?.as_linear(path)?;
        expert_weights.push(w_exp);
        match &module.per_task[task] {
            Some(snap) => {
                let n = snap.x_cal.ncols();
                let x_tgt = interpolate_target(&snap.x_exp, &snap.x_cal, config.alpha)?;
                let (g, c) = module_stats(&snap.x_cal, &x_tgt, n)?;
                let omega = task_weight(&g, config.epsilon);
                stats.push(ModuleTaskStats {
                    g,
                    c,
                    omega,
                    n_effective: n,
                });
                targets.push(Some(x_tgt));
            }
            None => {
                log.warnings.push(format!(
                    "module {path}: task {task} has no calibration samples, dropped from sums"
                ));
                stats.push(ModuleTaskStats {
                    g: DMatrix::zeros(w_anc.ncols(), w_anc.ncols()),
                    c: DMatrix::zeros(w_anc.ncols(), w_anc.ncols()),
                    omega: 1.0 / config.epsilon,
                    n_effective: 0,
                });
                targets.push(None);
            }
        }
    }

    let (w_star, info) = solve_weight(&stats, &expert_weights, w_anc, config.lambda, config.epsilon)?;

    // Objective bookkeeping on the raw feature matrices.
    let tasks: Vec<WeightTask<'_>> = (0..experts.len())
        .filter_map(|task| {
            let snap = module.per_task[task].as_ref()?;
            let x_tgt = targets[task].as_ref()?;
            Some(WeightTask {
                omega: stats[task].omega,
                n: stats[task].n_effective,
                x_cal: &snap.x_cal,
                x_tgt,
                w_expert: expert_weights[task],
            })
        })
        .collect();
    let data_term = |w: &DMatrix<f64>| weight_objective(w, &tasks, 0.0, w_anc);
    let rhs_scale = info.rhs_norm.max(1e-300);
    log.modules.push(ModuleLogEntry {
        module_path: path.clone(),
        layer_index: module.layer_index,
        update_kind: "weight".into(),
        anchor_norm: frobenius(w_anc),
        solve_residual_rel: info.solve_residual / rhs_scale,
        stationary_residual_rel: info.stationary_residual / rhs_scale,
        data_term_before: data_term(w_mer),
        data_term_after: data_term(&w_star),
        objective_before: weight_objective(w_mer, &tasks, config.lambda, w_anc),
        objective_after: weight_objective(&w_star, &tasks, config.lambda, w_anc),
        distance_from_merged: frobenius(&(&w_star - w_mer)),
    });

    // Second-stage bias update with W* fixed.
    let b_star = match (b_mer, b_anc, config.calibrate_bias) {
        (Some(b_mer), Some(b_anc), true) => {
            let mut bias_tasks = Vec::new();
            for (task, expert) in experts.iter().enumerate() {
                let Some(snap) = module.per_task[task].as_ref() else {
                    continue;
                };
                let Some(x_tgt) = targets[task].as_ref() else {
                    continue;
                };
                let (w_exp, b_exp) = expert.entry(path)?.as_linear(path)?;
                let b_exp = b_exp.ok_or_else(|| CoreError::BadEntry {
                    path: path.clone(),
                    reason: "expert is missing a bias the merged model has".into(),
                })?;
                let n = snap.x_cal.ncols() as f64;
                bias_tasks.push(BiasTask {
                    omega: stats[task].omega,
                    mu_cal: snap.x_cal.column_sum() / n,
                    mu_tgt: x_tgt.column_sum() / n,
                    w_expert: w_exp,
                    b_expert: b_exp,
                });
            }
            let b_star = solve_bias(&w_star, &bias_tasks, b_anc, config.lambda)?;
            log.modules.push(ModuleLogEntry {
                module_path: path.clone(),
                layer_index: module.layer_index,
                update_kind: "bias".into(),
                anchor_norm: b_anc.norm(),
                solve_residual_rel: 0.0,
                stationary_residual_rel: 0.0,
                data_term_before: bias_objective(b_mer, &w_star, &bias_tasks, 0.0, b_anc),
                data_term_after: bias_objective(&b_star, &w_star, &bias_tasks, 0.0, b_anc),
                objective_before: bias_objective(b_mer, &w_star, &bias_tasks, config.lambda, b_anc),
                objective_after: bias_objective(&b_star, &w_star, &bias_tasks, config.lambda, b_anc),
                distance_from_merged: (&b_star - b_mer).norm(),
            });
            Some(b_star)
        }
        (Some(b_mer), _, false) => Some(b_mer.clone()),
        _ => None,
    };

    Ok(ModuleParams::Linear {
        weight: w_star,
        bias: b_star,
    })
}

fn solve_layernorm_module(
    module: &ModuleSnapshot,
    eps: f64,
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    config: &CalibConfig,
    log: &mut CalibrationLog,
) -> Result<ModuleParams> {
    let path = &module.module_path;
    let merged_entry = merged.entry(path)?;
    let (gamma_mer, beta_mer) = merged_entry.as_layer_norm(path)?;
    let anchor_entry = anchor(merged_entry, base.entry(path)?, config.rho)?;
    let (gamma_anc, beta_anc) = anchor_entry.as_layer_norm(path)?;

    let mut normalized: Vec<DMatrix<f64>> = Vec::new();
    let mut affine: Vec<(&DVector<f64>, &DVector<f64>)> = Vec::new();
    for (task, expert) in experts.iter().enumerate() {
        match &module.per_task[task] {
            Some(snap) => {
                normalized.push(layer_norm_normalize(&snap.x_cal, eps));
                affine.push(expert.entry(path)?.as_layer_norm(path)?);
            }
            None => log.warnings.push(format!(
                "module {path}: task {task} has no calibration samples, dropped from sums"
            )),
        }
    }
    let z_refs: Vec<&DMatrix<f64>> = normalized.iter().collect();
    let (gamma_star, beta_star) = solve_layernorm(
        &z_refs,
        &affine,
        gamma_anc,
        beta_anc,
        config.lambda,
        config.epsilon,
    )?;

    let objective = |g: &DVector<f64>, b: &DVector<f64>, lam: f64| {
        layernorm_objective(g, b, &z_refs, &affine, lam, gamma_anc, beta_anc)
    };
    log.modules.push(ModuleLogEntry {
        module_path: path.clone(),
        layer_index: module.layer_index,
        update_kind: "layernorm".into(),
        anchor_norm: (gamma_anc.norm_squared() + beta_anc.norm_squared()).sqrt(),
        solve_residual_rel: 0.0,
        stationary_residual_rel: 0.0,
        data_term_before: objective(gamma_mer, beta_mer, 0.0),
        data_term_after: objective(&gamma_star, &beta_star, 0.0),
        objective_before: objective(gamma_mer, beta_mer, config.lambda),
        objective_after: objective(&gamma_star, &beta_star, config.lambda),
        distance_from_merged: ((&gamma_star - gamma_mer).norm_squared()
            + (&beta_star - beta_mer).norm_squared())
        .sqrt(),
    });
    Ok(ModuleParams::LayerNorm {
        gamma: gamma_star,
        beta: beta_star,
    })
}

/// Forward-order calibration. Returns the calibrated parameters and the
/// run log; see [`calibrate_with_snapshots`] to also keep the per-layer
/// feature snapshots.
pub fn calibrate(
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    spec: &ModelSpec,
    calib_batches: &[DMatrix<f64>],
    config: &CalibConfig,
) -> Result<(ParameterSet, CalibrationLog)> {
    let (params, log, _) = calibrate_with_snapshots(merged, base, experts, spec, calib_batches, config)?;
    Ok((params, log))
}

/// Like [`calibrate`] but also returns the layer snapshots that each layer
/// was solved against, so callers can verify the deployed-prefix identity.
pub fn calibrate_with_snapshots(
    merged: &ParameterSet,
    base: &ParameterSet,
    experts: &[ParameterSet],
    spec: &ModelSpec,
    calib_batches: &[DMatrix<f64>],
    config: &CalibConfig,
) -> Result<(ParameterSet, CalibrationLog, Vec<LayerSnapshot>)> {
    config.validate()?;
    spec.validate()?;
    if experts.is_empty() {
        return Err(CoreError::InvalidConfig(
            "calibration needs at least one expert".into(),
        ));
    }
    if experts.len() != calib_batches.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} experts but {} calibration batches",
            experts.len(),
            calib_batches.len()
        )));
    }
    merged.validate_against(spec)?;
    base.validate_against(spec)?;
    for expert in experts {
        expert.validate_against(spec)?;
    }

    let module_kinds: BTreeMap<String, ModuleKind> = spec
        .modules()?
        .into_iter()
        .map(|m| (m.path, m.kind))
        .collect();

    let mut work = merged.clone();
    let mut log = CalibrationLog::default();
    let mut snapshots = Vec::with_capacity(spec.layers.len());

    for layer_index in 0..spec.layers.len() {
        let started = Instant::now();
        let snapshot = collect_layer_snapshot(&work, experts, spec, calib_batches, layer_index)?;
        let staged = layer_updates(
            &snapshot,
            merged,
            base,
            experts,
            config,
            &module_kinds,
            &mut log,
        )?;
        // Load the whole layer at once; modules in this layer were all
        // solved against the same snapshot.
        for (path, update) in staged {
            work.entries.insert(path, update);
        }
        log.layers.push(LayerLogEntry {
            layer_index,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        snapshots.push(snapshot);
    }

    Ok((work.with_role(Role::Calibrated), log, snapshots))
}
