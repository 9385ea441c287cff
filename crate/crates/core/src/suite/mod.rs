//! Synthetic multi-task classification suite.
//!
//! Each task draws Gaussian clusters around shared prototypes that get a
//! task-specific orthogonal rotation and mean shift, so tasks agree on the
//! label structure but disagree on geometry. Everything is a pure function
//! of the seed.

mod data;
mod io;
mod train;

pub use data::{find_dataset, make_task_suite, Split, SuiteConfig, TaskDataset};
pub use io::{dataset_to_json, dataset_from_json, load_dataset, save_dataset};
pub use train::{evaluate, loss_and_grads, train_model, EvalMetrics, TrainConfig};
