//! Synthetic video task, optimiser and training loop.

mod checkpoint;
pub mod data;
mod harness;
mod optim;

pub use checkpoint::Checkpoint;
pub use data::{generate_dataset, generate_split, render_background, render_clip, Augment, DataConfig, Dataset, Split, SyntheticClip};
pub use harness::{
    attention_mass, attention_mass_per_sample, evaluate, read_metrics, train, EpochRecord, Evaluation, TrainOutputs,
    TrainReport, METRICS_HEADER,
};
pub use optim::{Sgd, TrainConfig};
