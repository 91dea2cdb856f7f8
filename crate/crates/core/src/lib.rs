//! A desk-scale laboratory for adversarial mixture-of-LoRA-experts continual
//! learning: a toy transformer classifier with shared and task-specific LoRA
//! experts, per-task gates, a gradient-reversed task discriminator, and the
//! sequential training and evaluation harness around them.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod probe;
pub mod report;
pub mod rng;
pub mod rundir;
pub mod tensor;
pub mod trainer;

pub use adapters::{discriminate, gan_loss, total_loss, AdapterStack, Architecture, LoraExpert};
pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, Method, ModelConfig, OptimizerKind, RunConfig, TrainConfig};
pub use data::{Example, TaskSpec};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use metrics::{avg_accuracy, backward_transfer, forward_transfer, AccuracyMatrix};
pub use model::{Mode, Model};
pub use par::Execution;
pub use probe::probe_discriminator;
pub use report::{render_report, MetricReport, RunSummary};
pub use rng::Rng;
pub use tensor::Tensor;
pub use trainer::{evaluate, run_baseline, train_sequence, train_task, TrainState};
