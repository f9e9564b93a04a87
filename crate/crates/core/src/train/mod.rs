pub mod checkpoint;
pub mod engine;
pub mod metrics;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use engine::{compute_losses, prior_matching_loss, LossReport, StepLosses, Trainer};
pub use metrics::{read_metrics, MetricsLog};
pub use optim::{AdamW, AdamWConfig};
