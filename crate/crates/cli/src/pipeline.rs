//! Stage implementations: gen-tasks, train, merge, calibrate, drift-report,
//! eval, and the full pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;

use mergecal_core::calib::calibrate;
use mergecal_core::drift::{decompose_all, final_drift_expansion, output_drift_report, LinearHead};
use mergecal_core::merge::{simple_average, task_arithmetic};
use mergecal_core::model::{
    build_model, forward_trace, load_model, save_model, ModelSpec, ParameterSet, Role,
};
use mergecal_core::suite::{
    evaluate, load_dataset, make_task_suite, save_dataset, train_model, Split, TaskDataset,
    TrainConfig,
};
use mergecal_core::{CoreError, Result};

use crate::config::{MergeMethod, PipelineConfig};
use crate::manifest::PipelineManifest;
use crate::report::{
    drift_csv, layer_means, metrics_csv, write_text, DriftSummary, MetricsRow, ModelDriftSummary,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenTasks,
    Train,
    Merge,
    Calibrate,
    DriftReport,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::GenTasks => "gen-tasks",
            Stage::Train => "train",
            Stage::Merge => "merge",
            Stage::Calibrate => "calibrate",
            Stage::DriftReport => "drift-report",
            Stage::Eval => "eval",
        };
        f.write_str(name)
    }
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_module(&format!("stage {stage}")))
}

/// File layout inside one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run_config.json")
    }
    pub fn dataset_rel(task: usize, split: Split) -> String {
        format!("datasets/task{task}_{}.json", split.name())
    }
    pub fn dataset(&self, task: usize, split: Split) -> PathBuf {
        self.root.join(Self::dataset_rel(task, split))
    }
    pub fn model_rel(name: &str) -> String {
        format!("models/{name}.json")
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join(Self::model_rel(name))
    }
    pub fn calibration_log(&self) -> PathBuf {
        self.root.join("calibration_log.json")
    }
    pub fn drift_csv(&self, model: &str) -> PathBuf {
        self.root.join(format!("drift_{model}.csv"))
    }
    pub fn drift_summary(&self) -> PathBuf {
        self.root.join("drift_summary.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// Loads the persisted run config, or seeds a fresh one from `fallback`.
pub fn resolve_config(paths: &RunPaths, fallback: Option<PipelineConfig>) -> Result<PipelineConfig> {
    if paths.config().exists() {
        PipelineConfig::load(&paths.config())
    } else if let Some(cfg) = fallback {
        cfg.validate()?;
        Ok(cfg)
    } else {
        Err(CoreError::InvalidConfig(format!(
            "no run config at {:?}; run gen-tasks (or pipeline) first",
            paths.config()
        )))
    }
}

fn load_split(paths: &RunPaths, config: &PipelineConfig, split: Split) -> Result<Vec<TaskDataset>> {
    (0..config.suite.num_tasks)
        .map(|t| load_dataset(&paths.dataset(t, split)))
        .collect()
}

fn load_model_checked(paths: &RunPaths, name: &str, spec: &ModelSpec) -> Result<ParameterSet> {
    let (file_spec, params) = load_model(&paths.model(name))?;
    if &file_spec != spec {
        return Err(CoreError::InvalidConfig(format!(
            "model `{name}` was built for a different spec than the run config"
        )));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Generates every task's train/calibration/test datasets and persists the
/// resolved config.
pub fn gen_tasks(paths: &RunPaths, config: &PipelineConfig) -> Result<()> {
    in_stage(Stage::GenTasks, (|| {
        std::fs::create_dir_all(paths.root.join("datasets"))?;
        config.save(&paths.config())?;
        let suite = make_task_suite(&config.suite)?;
        for ds in &suite {
            save_dataset(&paths.dataset(ds.task_index, ds.split), ds)?;
        }
        Ok(())
    })())
}

/// Pretrains the shared base on the pooled train splits, then fine-tunes
/// one expert per task from the base checkpoint.
pub fn train(paths: &RunPaths, config: &PipelineConfig) -> Result<()> {
    in_stage(Stage::Train, (|| {
        std::fs::create_dir_all(paths.root.join("models"))?;
        let spec = config.model_spec();
        let train_sets = load_split(paths, config, Split::Train)?;
        let seed = config.suite.seed;

        let init = build_model(&spec, seed)?;
        let pooled: Vec<&TaskDataset> = train_sets.iter().collect();
        let base = train_model(
            &init,
            &spec,
            &pooled,
            &TrainConfig {
                epochs: config.train.pretrain_epochs,
                learning_rate: config.train.pretrain_lr,
                momentum: config.train.momentum,
                batch_size: config.train.batch_size,
                seed,
            },
        )?;
        save_model(&paths.model("base"), &spec, &base)?;

        for (t, ds) in train_sets.iter().enumerate() {
            let expert = train_model(
                &base,
                &spec,
                &[ds],
                &TrainConfig {
                    epochs: config.train.finetune_epochs,
                    learning_rate: config.train.finetune_lr,
                    momentum: config.train.momentum,
                    batch_size: config.train.batch_size,
                    seed: seed.wrapping_add(1 + t as u64),
                },
            )?
            .with_role(Role::Expert { task: t });
            save_model(&paths.model(&format!("expert_{t}")), &spec, &expert)?;
        }
        Ok(())
    })())
}

fn load_experts(paths: &RunPaths, config: &PipelineConfig, spec: &ModelSpec) -> Result<Vec<ParameterSet>> {
    (0..config.suite.num_tasks)
        .map(|t| load_model_checked(paths, &format!("expert_{t}"), spec))
        .collect()
}

/// Merges the experts in weight space.
pub fn merge(paths: &RunPaths, config: &PipelineConfig) -> Result<()> {
    in_stage(Stage::Merge, (|| {
        let spec = config.model_spec();
        let base = load_model_checked(paths, "base", &spec)?;
        let experts = load_experts(paths, config, &spec)?;
        let refs: Vec<&ParameterSet> = experts.iter().collect();
        let merged = match config.merge.method {
            MergeMethod::Average => simple_average(&refs)?,
            MergeMethod::TaskArithmetic => task_arithmetic(&base, &refs, config.merge.scale)?,
        };
        save_model(&paths.model("merged"), &spec, &merged)?;
        Ok(())
    })())
}

/// Calibrates the merged model on the calibration splits (truncated to the
/// configured per-task budget) and writes the calibrated model plus log.
pub fn calibrate_stage(paths: &RunPaths, config: &PipelineConfig) -> Result<()> {
    in_stage(Stage::Calibrate, (|| {
        let spec = config.model_spec();
        let base = load_model_checked(paths, "base", &spec)?;
        let merged = load_model_checked(paths, "merged", &spec)?;
        let experts = load_experts(paths, config, &spec)?;
        let calib_sets = load_split(paths, config, Split::Calibration)?;
        let budget = config.calib.samples_per_task;
        let batches: Vec<DMatrix<f64>> = calib_sets
            .iter()
            .map(|ds| {
                let n = ds.features.ncols().min(budget);
                ds.features.columns(0, n).into_owned()
            })
            .collect();
        let (calibrated, log) = calibrate(&merged, &base, &experts, &spec, &batches, &config.calib)?;
        save_model(&paths.model("calibrated"), &spec, &calibrated)?;
        std::fs::write(paths.calibration_log(), serde_json::to_string_pretty(&log)?)?;
        Ok(())
    })())
}

/// How many tasks and samples feed the (expensive) final-drift
/// reconstruction diagnostic in the report stage.
const RECON_TASKS: usize = 2;
const RECON_SAMPLES: usize = 4;

/// Computes drift diagnostics of the merged (and, when present, calibrated)
/// model against each task expert on the test split. Returns metric rows
/// and writes per-sample CSVs plus the JSON summary.
pub fn drift_report(paths: &RunPaths, config: &PipelineConfig) -> Result<Vec<MetricsRow>> {
    in_stage(Stage::DriftReport, (|| {
        let spec = config.model_spec();
        let run_id = config.run_id();
        let experts = load_experts(paths, config, &spec)?;
        let test_sets = load_split(paths, config, Split::Test)?;

        let mut model_names = vec!["merged"];
        if paths.model("calibrated").exists() {
            model_names.push("calibrated");
        }

        let mut rows = Vec::new();
        let mut summaries = BTreeMap::new();
        for name in model_names {
            let params = load_model_checked(paths, name, &spec)?;
            let mut per_task_records = Vec::new();
            let mut final_drifts = Vec::new();
            let mut final_cosines = Vec::new();
            let mut recon_errors = BTreeMap::new();
            let mut margin_rates = BTreeMap::new();

            for (t, expert) in experts.iter().enumerate() {
                let data = &test_sets[t];
                let trace_exp = forward_trace(expert, &spec, &data.features)?;
                let trace_mod = forward_trace(&params, &spec, &data.features)?;
                let records = decompose_all(&params, expert, &spec, &trace_exp, &trace_mod)?;

                let last = records.last().expect("at least one layer");
                final_drifts.push(mean(&last.e_norm));
                final_cosines.push(mean(&last.cosine_to_expert));
                for rec in &records {
                    rows.push(MetricsRow::new(
                        &run_id,
                        "drift",
                        Some(t),
                        Some(rec.layer),
                        format!("mean_e_norm:{name}"),
                        mean(&rec.e_norm),
                    ));
                    rows.push(MetricsRow::new(
                        &run_id,
                        "drift",
                        Some(t),
                        Some(rec.layer),
                        format!("mean_cosine:{name}"),
                        mean(&rec.cosine_to_expert),
                    ));
                }

                // Margin preservation against this task's expert head.
                let head_model = LinearHead::from_params(params.entry("head")?, "head")?;
                let head_expert = LinearHead::from_params(expert.entry("head")?, "head")?;
                let out = output_drift_report(
                    head_model,
                    head_expert,
                    trace_exp.last(),
                    trace_mod.last(),
                    &data.labels,
                )?;
                let preserved = out.margin_preserved.iter().filter(|p| **p).count() as f64
                    / out.margin_preserved.len().max(1) as f64;
                margin_rates.insert(format!("task{t}"), preserved);
                rows.push(MetricsRow::new(
                    &run_id,
                    "drift",
                    Some(t),
                    None,
                    format!("margin_preservation:{name}"),
                    preserved,
                ));

                // Reconstruction diagnostic on a small subsample.
                if t < RECON_TASKS {
                    let n = data.features.ncols().min(RECON_SAMPLES);
                    let sub = data.features.columns(0, n).into_owned();
                    let sub_exp = forward_trace(expert, &spec, &sub)?;
                    let sub_mod = forward_trace(&params, &spec, &sub)?;
                    let report =
                        final_drift_expansion(&params, expert, &spec, &sub_exp, &sub_mod, 33)?;
                    recon_errors.insert(format!("task{t}"), report.relative_error);
                    rows.push(MetricsRow::new(
                        &run_id,
                        "drift",
                        Some(t),
                        None,
                        format!("reconstruction_error:{name}"),
                        report.relative_error,
                    ));
                }

                per_task_records.push((t, records));
            }

            write_text(&paths.drift_csv(name), &drift_csv(&per_task_records))?;

            let mean_preservation = mean(&margin_rates.values().copied().collect::<Vec<_>>());
            summaries.insert(
                name.to_string(),
                ModelDriftSummary {
                    per_layer: layer_means(&per_task_records),
                    mean_final_drift: mean(&final_drifts),
                    mean_final_cosine: mean(&final_cosines),
                    reconstruction_relative_error: recon_errors,
                    margin_preservation_rate: margin_rates,
                    mean_margin_preservation: mean_preservation,
                },
            );
            rows.push(MetricsRow::new(
                &run_id,
                "summary",
                None,
                None,
                format!("mean_final_drift:{name}"),
                mean(&final_drifts),
            ));
            rows.push(MetricsRow::new(
                &run_id,
                "summary",
                None,
                None,
                format!("mean_final_cosine:{name}"),
                mean(&final_cosines),
            ));
            rows.push(MetricsRow::new(
                &run_id,
                "summary",
                None,
                None,
                format!("mean_margin_preservation:{name}"),
                mean_preservation,
            ));
        }

        let summary = DriftSummary { models: summaries };
        write_text(
            &paths.drift_summary(),
            &serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(rows)
    })())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates base, experts, merged and (when present) calibrated models on
/// the test splits.
pub fn eval_stage(paths: &RunPaths, config: &PipelineConfig) -> Result<Vec<MetricsRow>> {
    in_stage(Stage::Eval, (|| {
        let spec = config.model_spec();
        let run_id = config.run_id();
        let test_sets = load_split(paths, config, Split::Test)?;
        let mut rows = Vec::new();

        let mut models: Vec<(String, ParameterSet)> = Vec::new();
        models.push(("base".into(), load_model_checked(paths, "base", &spec)?));
        if paths.model("merged").exists() {
            models.push(("merged".into(), load_model_checked(paths, "merged", &spec)?));
        }
        if paths.model("calibrated").exists() {
            models.push((
                "calibrated".into(),
                load_model_checked(paths, "calibrated", &spec)?,
            ));
        }

        for (name, params) in &models {
            let mut accs = Vec::new();
            let mut losses = Vec::new();
            for (t, data) in test_sets.iter().enumerate() {
                let m = evaluate(params, &spec, data)?;
                accs.push(m.accuracy);
                losses.push(m.mean_loss);
                rows.push(MetricsRow::new(
                    &run_id,
                    "eval",
                    Some(t),
                    None,
                    format!("accuracy:{name}"),
                    m.accuracy,
                ));
                rows.push(MetricsRow::new(
                    &run_id,
                    "eval",
                    Some(t),
                    None,
                    format!("mean_loss:{name}"),
                    m.mean_loss,
                ));
            }
            rows.push(MetricsRow::new(
                &run_id,
                "summary",
                None,
                None,
                format!("mean_accuracy:{name}"),
                mean(&accs),
            ));
            rows.push(MetricsRow::new(
                &run_id,
                "summary",
                None,
                None,
                format!("mean_loss:{name}"),
                mean(&losses),
            ));
        }

        // Each expert on its own task only.
        for t in 0..config.suite.num_tasks {
            let expert = load_model_checked(paths, &format!("expert_{t}"), &spec)?;
            let m = evaluate(&expert, &spec, &test_sets[t])?;
            rows.push(MetricsRow::new(
                &run_id,
                "eval",
                Some(t),
                None,
                "accuracy:expert",
                m.accuracy,
            ));
            rows.push(MetricsRow::new(
                &run_id,
                "eval",
                Some(t),
                None,
                "mean_loss:expert",
                m.mean_loss,
            ));
        }
        Ok(rows)
    })())
}

/// Runs every stage in order and writes metrics.csv plus the manifest.
pub fn run_pipeline(paths: &RunPaths, config: &PipelineConfig) -> Result<()> {
    gen_tasks(paths, config)?;
    train(paths, config)?;
    merge(paths, config)?;
    calibrate_stage(paths, config)?;
    let mut rows = drift_report(paths, config)?;
    rows.extend(eval_stage(paths, config)?);
    write_text(&paths.metrics(), &metrics_csv(&rows))?;

    let mut manifest = PipelineManifest::new(config);
    let root = &paths.root;
    for t in 0..config.suite.num_tasks {
        for split in [Split::Train, Split::Calibration, Split::Test] {
            let rel = RunPaths::dataset_rel(t, split);
            manifest.record(root, &format!("dataset:task{t}:{}", split.name()), &rel)?;
        }
        manifest.record(root, &format!("model:expert_{t}"), &RunPaths::model_rel(&format!("expert_{t}")))?;
    }
    for name in ["base", "merged", "calibrated"] {
        manifest.record(root, &format!("model:{name}"), &RunPaths::model_rel(name))?;
    }
    manifest.record(root, "metrics", "metrics.csv")?;
    manifest.record(root, "drift_summary", "drift_summary.json")?;
    manifest.save(&paths.manifest())?;
    manifest.verify(root)?;
    Ok(())
}
