//! Gradient-descent training with hand-written backprop, and evaluation.
//!
//! Backprop covers exactly the four layer kinds plus the linear head with
//! softmax cross-entropy; there is no general autodiff. Gradients are
//! certified against central finite differences in the tests.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::model::{ModelSpec, ModuleParams, ParameterSet};
use crate::model::{Activation, LayerSpec};
use crate::softmax::{argmax_lowest, cross_entropy, softmax};

use super::data::TaskDataset;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Classic momentum coefficient; 0 disables the velocity buffer.
    pub momentum: f64,
    /// Full-batch when `None`.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
}

// ---------------------------------------------------------------------------
// Forward with caches + backward
// ---------------------------------------------------------------------------

enum LayerCache {
    Linear {
        path: String,
        input: DMatrix<f64>,
    },
    LayerNorm {
        path: String,
        xhat: DMatrix<f64>,
        inv_std: Vec<f64>,
    },
    Tanh {
        output: DMatrix<f64>,
    },
    Relu {
        input: DMatrix<f64>,
    },
    Identity,
    Residual {
        inner: Vec<LayerCache>,
    },
}

fn forward_cached(
    params: &ParameterSet,
    layer: &LayerSpec,
    path: &str,
    input: &DMatrix<f64>,
    caches: &mut Vec<LayerCache>,
) -> Result<DMatrix<f64>> {
    match layer {
        LayerSpec::Linear { .. } => {
            let module_path = format!("{path}.linear");
            let (weight, bias) = params.entry(&module_path)?.as_linear(&module_path)?;
            let mut out = weight * input;
            if let Some(b) = bias {
                for mut col in out.column_iter_mut() {
                    col += b;
                }
            }
            caches.push(LayerCache::Linear {
                path: module_path,
                input: input.clone(),
            });
            Ok(out)
        }
        LayerSpec::LayerNorm { dim, eps } => {
            let module_path = format!("{path}.norm");
            let (gamma, beta) = params.entry(&module_path)?.as_layer_norm(&module_path)?;
            let d = *dim;
            let m = input.ncols();
            let mut xhat = DMatrix::zeros(d, m);
            let mut inv_std = Vec::with_capacity(m);
            let mut out = DMatrix::zeros(d, m);
            for j in 0..m {
                let col = input.column(j);
                let mean = col.sum() / d as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s_inv = 1.0 / (var + eps).sqrt();
                inv_std.push(s_inv);
                for i in 0..d {
                    let xh = (col[i] - mean) * s_inv;
                    xhat[(i, j)] = xh;
                    out[(i, j)] = gamma[i] * xh + beta[i];
                }
            }
            caches.push(LayerCache::LayerNorm {
                path: module_path,
                xhat,
                inv_std,
            });
            Ok(out)
        }
        LayerSpec::Activation { function } => match function {
            Activation::Tanh => {
                let out = input.map(f64::tanh);
                caches.push(LayerCache::Tanh { output: out.clone() });
                Ok(out)
            }
            Activation::Relu => {
                caches.push(LayerCache::Relu {
                    input: input.clone(),
                });
                Ok(input.map(|v| v.max(0.0)))
            }
            Activation::Identity => {
                caches.push(LayerCache::Identity);
                Ok(input.clone())
            }
        },
        LayerSpec::ResidualBlock { inner } => {
            let mut inner_caches = Vec::with_capacity(inner.len());
            let mut h = input.clone();
            for (k, sub) in inner.iter().enumerate() {
                h = forward_cached(params, sub, &format!("{path}.inner.{k}"), &h, &mut inner_caches)?;
            }
            caches.push(LayerCache::Residual {
                inner: inner_caches,
            });
            Ok(input + h)
        }
    }
}

fn backward_layer(
    params: &ParameterSet,
    cache: &LayerCache,
    grad_out: &DMatrix<f64>,
    grads: &mut BTreeMap<String, ModuleParams>,
) -> Result<DMatrix<f64>> {
    match cache {
        LayerCache::Linear { path, input } => {
            let (weight, bias) = params.entry(path)?.as_linear(path)?;
            let d_weight = grad_out * input.transpose();
            let d_bias = bias.map(|_| {
                DVector::from_fn(grad_out.nrows(), |i, _| grad_out.row(i).sum())
            });
            grads.insert(
                path.clone(),
                ModuleParams::Linear {
                    weight: d_weight,
                    bias: d_bias,
                },
            );
            Ok(weight.transpose() * grad_out)
        }
        LayerCache::LayerNorm {
            path,
            xhat,
            inv_std,
        } => {
            let (gamma, _) = params.entry(path)?.as_layer_norm(path)?;
            let d = xhat.nrows();
            let m = xhat.ncols();
            let mut d_gamma = DVector::zeros(d);
            let mut d_beta = DVector::zeros(d);
            let mut grad_in = DMatrix::zeros(d, m);
            for j in 0..m {
                let g = grad_out.column(j);
                let xh = xhat.column(j);
                let mut mean_gh = 0.0; // mean of γ⊙g
                let mut mean_gh_xh = 0.0; // mean of (γ⊙g)⊙x̂
                for i in 0..d {
                    let gh = gamma[i] * g[i];
                    mean_gh += gh;
                    mean_gh_xh += gh * xh[i];
                    d_gamma[i] += g[i] * xh[i];
                    d_beta[i] += g[i];
                }
                mean_gh /= d as f64;
                mean_gh_xh /= d as f64;
                for i in 0..d {
                    let gh = gamma[i] * g[i];
                    grad_in[(i, j)] = inv_std[j] * (gh - mean_gh - xh[i] * mean_gh_xh);
                }
            }
            grads.insert(
                path.clone(),
                ModuleParams::LayerNorm {
                    gamma: d_gamma,
                    beta: d_beta,
                },
            );
            Ok(grad_in)
        }
        LayerCache::Tanh { output } => Ok(grad_out.zip_map(output, |g, y| g * (1.0 - y * y))),
        LayerCache::Relu { input } => {
            Ok(grad_out.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        LayerCache::Identity => Ok(grad_out.clone()),
        LayerCache::Residual { inner } => {
            let mut g = grad_out.clone();
            for cache in inner.iter().rev() {
                g = backward_layer(params, cache, &g, grads)?;
            }
            Ok(grad_out + g)
        }
    }
}

/// Mean cross-entropy loss and its gradients in every parameter, for one
/// labelled batch. Exposed so tests can cross-check against finite
/// differences.
pub fn loss_and_grads(
    params: &ParameterSet,
    spec: &ModelSpec,
    features: &DMatrix<f64>,
    labels: &[usize],
) -> Result<(f64, BTreeMap<String, ModuleParams>)> {
    let head_spec = spec.head.as_ref().ok_or_else(|| {
        CoreError::InvalidConfig("training requires a model with a head".into())
    })?;
    if features.ncols() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            context: "training batch".into(),
            expected: format!("{} labels", features.ncols()),
            actual: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head_spec.classes) {
        return Err(CoreError::InvalidConfig(format!(
            "label {bad} out of range for {} classes",
            head_spec.classes
        )));
    }

    let m = labels.len();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut h = features.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        h = forward_cached(params, layer, &format!("layers.{i}"), &h, &mut caches)?;
    }
    let (w_head, b_head) = params.entry("head")?.as_linear("head")?;
    let mut scores = w_head * &h;
    if let Some(b) = b_head {
        for mut col in scores.column_iter_mut() {
            col += b;
        }
    }

    // Loss and score gradient dZ = (softmax − onehot)/M per column.
    let mut loss = 0.0;
    let mut d_scores = DMatrix::zeros(scores.nrows(), m);
    for (j, &y) in labels.iter().enumerate() {
        let z = scores.column(j).into_owned();
        loss += cross_entropy(&z, y);
        let mut p = softmax(&z);
        p[y] -= 1.0;
        d_scores.set_column(j, &(p / m as f64));
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(CoreError::Diverged(format!("loss became {loss}")));
    }

    let mut grads: BTreeMap<String, ModuleParams> = BTreeMap::new();
    grads.insert(
        "head".into(),
        ModuleParams::Linear {
            weight: &d_scores * h.transpose(),
            bias: b_head.map(|_| DVector::from_fn(d_scores.nrows(), |i, _| d_scores.row(i).sum())),
        },
    );
    let mut g = w_head.transpose() * &d_scores;
    for cache in caches.iter().rev() {
        g = backward_layer(params, cache, &g, &mut grads)?;
    }
    Ok((loss, grads))
}

fn sgd_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, ModuleParams>,
    velocity: &mut BTreeMap<String, ModuleParams>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (path, grad) in grads {
        let step = if momentum > 0.0 {
            let v = velocity
                .get(path)
                .map(|v| v.zip(grad, |vel, g| momentum * vel + g))
                .transpose()?
                .unwrap_or_else(|| grad.clone());
            velocity.insert(path.clone(), v.clone());
            v
        } else {
            grad.clone()
        };
        let current = params.entry(path)?.clone();
        params
            .entries
            .insert(path.clone(), current.zip(&step, |p, s| p - lr * s)?);
    }
    Ok(())
}

/// Trains from `start`, returning a new parameter set. Deterministic in the
/// config seed (used only for mini-batch shuffling).
pub fn train_model(
    start: &ParameterSet,
    spec: &ModelSpec,
    data: &[&TaskDataset],
    config: &TrainConfig,
) -> Result<ParameterSet> {
    if data.is_empty() || data.iter().all(|d| d.num_samples() == 0) {
        return Err(CoreError::InvalidConfig("training data is empty".into()));
    }
    spec.validate()?;
    start.validate_against(spec)?;

    // Pool the datasets into one column-per-sample matrix.
    let d0 = spec.input_dim;
    let total: usize = data.iter().map(|d| d.num_samples()).sum();
    let mut features = DMatrix::zeros(d0, total);
    let mut labels = Vec::with_capacity(total);
    let mut at = 0;
    for ds in data {
        if ds.features.nrows() != d0 {
            return Err(CoreError::ShapeMismatch {
                context: format!("task {} features", ds.task_index),
                expected: format!("{d0} rows"),
                actual: format!("{}", ds.features.nrows()),
            });
        }
        features
            .view_mut((0, at), (d0, ds.num_samples()))
            .copy_from(&ds.features);
        labels.extend_from_slice(&ds.labels);
        at += ds.num_samples();
    }

    let mut params = start.clone();
    let mut velocity: BTreeMap<String, ModuleParams> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.unwrap_or(total).max(1);

    for _epoch in 0..config.epochs {
        if batch >= total {
            let (_, grads) = loss_and_grads(&params, spec, &features, &labels)?;
            sgd_step(&mut params, &grads, &mut velocity, config.learning_rate, config.momentum)?;
        } else {
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut xb = DMatrix::zeros(d0, chunk.len());
                let mut yb = Vec::with_capacity(chunk.len());
                for (c, &idx) in chunk.iter().enumerate() {
                    xb.set_column(c, &features.column(idx));
                    yb.push(labels[idx]);
                }
                let (_, grads) = loss_and_grads(&params, spec, &xb, &yb)?;
                sgd_step(&mut params, &grads, &mut velocity, config.learning_rate, config.momentum)?;
            }
        }
    }
    Ok(params)
}

/// Top-1 accuracy (ties to the lowest index) and mean cross-entropy.
pub fn evaluate(params: &ParameterSet, spec: &ModelSpec, data: &TaskDataset) -> Result<EvalMetrics> {
    let trace = crate::model::forward_trace(params, spec, &data.features)?;
    let scores = trace
        .head_scores
        .as_ref()
        .ok_or_else(|| CoreError::InvalidConfig("evaluation requires a model with a head".into()))?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (j, &y) in data.labels.iter().enumerate() {
        let z = scores.column(j).into_owned();
        if argmax_lowest(&z) == y {
            correct += 1;
        }
        loss += cross_entropy(&z, y);
    }
    let m = data.labels.len().max(1);
    Ok(EvalMetrics {
        accuracy: correct as f64 / m as f64,
        mean_loss: loss / m as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, HeadSpec};
    use crate::suite::data::{make_task_suite, Split, SuiteConfig};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            layers: vec![
                LayerSpec::Linear {
                    in_dim: 4,
                    out_dim: 6,
                    has_bias: true,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::LayerNorm { dim: 6, eps: 1e-5 },
                LayerSpec::ResidualBlock {
                    inner: vec![
                        LayerSpec::Linear {
                            in_dim: 6,
                            out_dim: 6,
                            has_bias: true,
                        },
                        LayerSpec::Activation {
                            function: Activation::Tanh,
                        },
                    ],
                },
            ],
            head: Some(HeadSpec {
                in_dim: 6,
                classes: 3,
                has_bias: true,
            }),
            schema_version: 1,
        }
    }

    fn toy_batch() -> (DMatrix<f64>, Vec<usize>) {
        let x = DMatrix::from_fn(4, 6, |i, j| ((i * 5 + j * 3) as f64 * 0.37).sin());
        let y = vec![0, 1, 2, 0, 1, 2];
        (x, y)
    }

    /// Central finite differences on every parameter.
    #[test]
    fn gradients_match_finite_differences() {
        let spec = spec();
        let params = build_model(&spec, 12).unwrap().map(|v| v * 1.5 + 0.02);
        let (x, y) = toy_batch();
        let (_, grads) = loss_and_grads(&params, &spec, &x, &y).unwrap();

        let h = 1e-6;
        let mut checked = 0usize;
        for (path, entry) in params.entries.clone() {
            let probe = |replacement: ModuleParams| -> f64 {
                let mut p2 = params.clone();
                p2.entries.insert(path.clone(), replacement);
                loss_and_grads(&p2, &spec, &x, &y).unwrap().0
            };
            match (&entry, grads.get(&path).unwrap()) {
                (
                    ModuleParams::Linear { weight, bias },
                    ModuleParams::Linear { weight: gw, bias: gb },
                ) => {
                    for r in 0..weight.nrows() {
                        for c in 0..weight.ncols() {
                            let mut wp = weight.clone();
                            let mut wm = weight.clone();
                            wp[(r, c)] += h;
                            wm[(r, c)] -= h;
                            let lp = probe(ModuleParams::Linear {
                                weight: wp,
                                bias: bias.clone(),
                            });
                            let lm = probe(ModuleParams::Linear {
                                weight: wm,
                                bias: bias.clone(),
                            });
                            let fd = (lp - lm) / (2.0 * h);
                            let an = gw[(r, c)];
                            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                            assert!(rel < 1e-5, "{path}[{r},{c}]: fd={fd} analytic={an}");
                            checked += 1;
                        }
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        for i in 0..b.len() {
                            let mut bp = b.clone();
                            let mut bm = b.clone();
                            bp[i] += h;
                            bm[i] -= h;
                            let lp = probe(ModuleParams::Linear {
                                weight: weight.clone(),
                                bias: Some(bp),
                            });
                            let lm = probe(ModuleParams::Linear {
                                weight: weight.clone(),
                                bias: Some(bm),
                            });
                            let fd = (lp - lm) / (2.0 * h);
                            let rel = (fd - gb[i]).abs() / fd.abs().max(gb[i].abs()).max(1e-4);
                            assert!(rel < 1e-5, "{path} bias[{i}]");
                            checked += 1;
                        }
                    }
                }
                (
                    ModuleParams::LayerNorm { gamma, beta },
                    ModuleParams::LayerNorm { gamma: gg, beta: gb },
                ) => {
                    for i in 0..gamma.len() {
                        let mut gp = gamma.clone();
                        let mut gm = gamma.clone();
                        gp[i] += h;
                        gm[i] -= h;
                        let lp = probe(ModuleParams::LayerNorm {
                            gamma: gp,
                            beta: beta.clone(),
                        });
                        let lm = probe(ModuleParams::LayerNorm {
                            gamma: gm,
                            beta: beta.clone(),
                        });
                        let fd = (lp - lm) / (2.0 * h);
                        let rel = (fd - gg[i]).abs() / fd.abs().max(gg[i].abs()).max(1e-4);
                        assert!(rel < 1e-5, "{path} gamma[{i}]");

                        let mut bp = beta.clone();
                        let mut bm = beta.clone();
                        bp[i] += h;
                        bm[i] -= h;
                        let lp = probe(ModuleParams::LayerNorm {
                            gamma: gamma.clone(),
                            beta: bp,
                        });
                        let lm = probe(ModuleParams::LayerNorm {
                            gamma: gamma.clone(),
                            beta: bm,
                        });
                        let fd = (lp - lm) / (2.0 * h);
                        let rel = (fd - gb[i]).abs() / fd.abs().max(gb[i].abs()).max(1e-4);
                        assert!(rel < 1e-5, "{path} beta[{i}]");
                        checked += 2;
                    }
                }
                _ => panic!("gradient kind mismatch at {path}"),
            }
        }
        assert!(checked > 50, "finite-difference sweep too small: {checked}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let spec = spec();
        let params = build_model(&spec, 3).unwrap();
        let suite = make_task_suite(&SuiteConfig {
            num_tasks: 1,
            input_dim: 4,
            classes_per_task: 3,
            train_samples: 12,
            calib_samples: 4,
            test_samples: 4,
            seed: 5,
            task_shift: 0.2,
        })
        .unwrap();
        let trained = train_model(
            &params,
            &spec,
            &[&suite[0]],
            &TrainConfig {
                epochs: 5,
                learning_rate: 0.0,
                momentum: 0.0,
                batch_size: None,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(trained.entries, params.entries);
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let spec = spec();
        let params = build_model(&spec, 3).unwrap();
        let cfg = SuiteConfig {
            num_tasks: 1,
            input_dim: 4,
            classes_per_task: 3,
            train_samples: 48,
            calib_samples: 8,
            test_samples: 48,
            seed: 5,
            task_shift: 0.2,
        };
        let suite = make_task_suite(&cfg).unwrap();
        let train_cfg = TrainConfig {
            epochs: 120,
            learning_rate: 0.4,
            momentum: 0.8,
            batch_size: None,
            seed: 1,
        };
        let trained = train_model(&params, &spec, &[&suite[0]], &train_cfg).unwrap();
        let trained2 = train_model(&params, &spec, &[&suite[0]], &train_cfg).unwrap();
        assert_eq!(trained.entries, trained2.entries, "training must be seed-deterministic");

        let before = evaluate(&params, &spec, &suite[2]).unwrap();
        let after = evaluate(&trained, &spec, &suite[2]).unwrap();
        assert!(
            after.mean_loss < before.mean_loss,
            "loss did not improve: {} -> {}",
            before.mean_loss,
            after.mean_loss
        );
        assert!(after.accuracy > before.accuracy.max(0.5));
    }

    #[test]
    fn minibatch_training_is_seed_deterministic() {
        let spec = spec();
        let params = build_model(&spec, 3).unwrap();
        let cfg = SuiteConfig {
            num_tasks: 1,
            input_dim: 4,
            classes_per_task: 3,
            train_samples: 30,
            calib_samples: 4,
            test_samples: 4,
            seed: 6,
            task_shift: 0.2,
        };
        let suite = make_task_suite(&cfg).unwrap();
        let mk = |seed| TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: Some(8),
            seed,
        };
        let a = train_model(&params, &spec, &[&suite[0]], &mk(4)).unwrap();
        let b = train_model(&params, &spec, &[&suite[0]], &mk(4)).unwrap();
        let c = train_model(&params, &spec, &[&suite[0]], &mk(9)).unwrap();
        assert_eq!(a.entries, b.entries);
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn evaluate_constant_winner_and_uniform_loss() {
        // Head with zero weight and a bias favouring class 1: accuracy is 1.0
        // exactly when all labels are 1.
        let spec = ModelSpec {
            input_dim: 2,
            layers: vec![LayerSpec::Activation {
                function: Activation::Identity,
            }],
            head: Some(HeadSpec {
                in_dim: 2,
                classes: 4,
                has_bias: true,
            }),
            schema_version: 1,
        };
        let mut params = build_model(&spec, 0).unwrap().map(|_| 0.0);
        if let Some(ModuleParams::Linear { bias: Some(b), .. }) = params.entries.get_mut("head") {
            b[1] = 3.0;
        }
        let data = TaskDataset {
            task_index: 0,
            split: Split::Test,
            features: DMatrix::from_element(2, 5, 0.3),
            labels: vec![1; 5],
        };
        let m = evaluate(&params, &spec, &data).unwrap();
        assert_eq!(m.accuracy, 1.0);

        // Uniform scores on K=4: loss = ln 4.
        let uniform = params.map(|_| 0.0);
        let m = evaluate(&uniform, &spec, &data).unwrap();
        assert!((m.mean_loss - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.0); // argmax ties to index 0, labels are 1
    }

    #[test]
    fn random_model_near_chance_accuracy() {
        let spec = spec();
        let params = build_model(&spec, 77).unwrap();
        let cfg = SuiteConfig {
            num_tasks: 1,
            input_dim: 4,
            classes_per_task: 3,
            train_samples: 4,
            calib_samples: 4,
            test_samples: 900,
            seed: 13,
            task_shift: 0.3,
        };
        let suite = make_task_suite(&cfg).unwrap();
        let m = evaluate(&params, &spec, &suite[2]).unwrap();
        // Binomial noise around 1/3 with n=900: 5 sigma ≈ 0.08.
        assert!(
            (m.accuracy - 1.0 / 3.0).abs() < 0.15,
            "untrained accuracy {} too far from chance",
            m.accuracy
        );
    }

    #[test]
    fn divergence_reports_error() {
        let spec = spec();
        let params = build_model(&spec, 3).unwrap();
        let cfg = SuiteConfig {
            num_tasks: 1,
            input_dim: 4,
            classes_per_task: 3,
            train_samples: 16,
            calib_samples: 4,
            test_samples: 4,
            seed: 5,
            task_shift: 0.2,
        };
        let suite = make_task_suite(&cfg).unwrap();
        let result = train_model(
            &params,
            &spec,
            &[&suite[0]],
            &TrainConfig {
                epochs: 300,
                learning_rate: 1e6,
                momentum: 0.0,
                batch_size: None,
                seed: 0,
            },
        );
        assert!(result.is_err());
    }
}
