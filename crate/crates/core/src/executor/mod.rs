//! Runs an HSViT model as `K` cooperating workers that exchange nothing
//! but CLS tokens and their gradients.

mod cluster;
mod message;
mod plan;
mod worker;

pub use cluster::{Cluster, Fault, StepMetrics, TrafficStats};
pub use message::{MessageKind, WorkerMessage, ENTRY_HEADER_BYTES, HEADER_BYTES};
pub use plan::{plan_partition, ExecutionMode, WorkerSpec};
