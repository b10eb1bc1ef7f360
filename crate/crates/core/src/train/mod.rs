pub mod ablation;
pub mod checkpoint;
pub mod optim;
pub mod runner;
pub mod stage;

pub use checkpoint::{transfer, Checkpoint};
pub use optim::{AdamW, AdamWConfig};
pub use runner::{run_stage, Control, EvalEvent, ImageCache, LogRow, Prepared, StageOutcome};
pub use stage::{Preset, StageConfig};
