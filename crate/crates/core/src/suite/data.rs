//! Dataset generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which slice of a task's data a dataset holds. Splits use disjoint
/// deterministic substreams, so calibration and test never share samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calibration => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

/// Features (d0 × M, column per sample) with integer labels in [0, K).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_index: usize,
    pub split: Split,
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl TaskDataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    /// Strength of the per-task rotation and translation; 0 makes every
    /// task an identical distribution.
    pub task_shift: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            num_tasks: 8,
            input_dim: 12,
            classes_per_task: 4,
            train_samples: 512,
            calib_samples: 256,
            test_samples: 512,
            seed: 0,
            task_shift: 0.9,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("input_dim", self.input_dim),
            ("classes_per_task", self.classes_per_task),
            ("train_samples", self.train_samples),
            ("calib_samples", self.calib_samples),
            ("test_samples", self.test_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.task_shift >= 0.0 && self.task_shift.is_finite()) {
            return Err(CoreError::InvalidConfig(
                "task_shift must be a finite non-negative real".into(),
            ));
        }
        Ok(())
    }
}

/// SplitMix64 scramble used to derive independent substreams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(a) ^ mix(b.wrapping_mul(0xD6E8_FEB8_6659_FD93))))
}

/// Standard normal via Box-Muller on the ChaCha stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| gaussian(rng))
}

/// Orthogonal matrix from the Cayley transform of a skew-symmetric matrix:
/// Q = (I + A)⁻¹(I − A). Q → I as the skew scale goes to 0.
fn cayley_rotation(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    let skew = (&raw - raw.transpose()) * (0.5 * scale / (d as f64).sqrt());
    let eye = DMatrix::identity(d, d);
    let lhs = &eye + &skew;
    let rhs = &eye - &skew;
    // I + A is always invertible for skew-symmetric A.
    lhs.lu().solve(&rhs).expect("Cayley solve cannot fail")
}

const PROTOTYPE_SCALE: f64 = 2.0;
const SAMPLE_NOISE: f64 = 1.3;

/// Builds every task's train/calibration/test datasets.
///
/// Returned in task-major order: task 0 train, task 0 calibration,
/// task 0 test, task 1 train, ...
pub fn make_task_suite(config: &SuiteConfig) -> Result<Vec<TaskDataset>> {
    config.validate()?;
    let d = config.input_dim;
    let k = config.classes_per_task;

    let mut proto_rng = substream(config.seed, 0x9070, 0);
    let prototypes: Vec<DVector<f64>> = (0..k)
        .map(|_| gaussian_vector(&mut proto_rng, d) * PROTOTYPE_SCALE)
        .collect();

    let mut out = Vec::with_capacity(config.num_tasks * 3);
    for task in 0..config.num_tasks {
        let mut task_rng = substream(config.seed, 0x7A5C, task as u64 + 1);
        let rotation = cayley_rotation(&mut task_rng, d, config.task_shift);
        let translation = gaussian_vector(&mut task_rng, d) * config.task_shift;
        let means: Vec<DVector<f64>> = prototypes
            .iter()
            .map(|p| &rotation * p + &translation)
            .collect();

        for (split, count) in [
            (Split::Train, config.train_samples),
            (Split::Calibration, config.calib_samples),
            (Split::Test, config.test_samples),
        ] {
            let mut rng = substream(config.seed, split.stream_id(), task as u64 + 1);
            let mut features = DMatrix::zeros(d, count);
            let mut labels = Vec::with_capacity(count);
            for m in 0..count {
                let label = m % k;
                let x = &means[label] + gaussian_vector(&mut rng, d) * SAMPLE_NOISE;
                features.set_column(m, &x);
                labels.push(label);
            }
            out.push(TaskDataset {
                task_index: task,
                split,
                features,
                labels,
            });
        }
    }
    Ok(out)
}

/// Convenience lookup into the flat suite list.
pub fn find_dataset<'a>(
    suite: &'a [TaskDataset],
    task: usize,
    split: Split,
) -> Option<&'a TaskDataset> {
    suite
        .iter()
        .find(|d| d.task_index == task && d.split == split)
}
