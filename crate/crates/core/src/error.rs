use std::io;

use thiserror::Error;

/// Errors raised while building, running or driving a skeleton.
#[derive(Debug, Error)]
pub enum Error {
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("farm has no workers")]
    NoWorkers,
    #[error("farm without an emitter has no input stream; add an emitter or use it as a stage")]
    UnfedFarm,
    #[error("skeletons using wrap_around cannot be nested in other skeletons")]
    NestedFeedback,
    #[error("skeleton was already started")]
    AlreadyStarted,
    #[error("skeleton run has not completed")]
    NotCompleted,
    #[error("worker index {index} out of range for {workers} workers")]
    InvalidWorker { index: usize, workers: usize },
    #[error("node {node} failed to initialize: {reason}")]
    InitFailed { node: usize, reason: String },
    #[error("node {node} panicked: {message}")]
    NodePanicked { node: usize, message: String },
    #[error("failed to spawn node thread: {0}")]
    Spawn(#[source] io::Error),
    #[error("accelerator cannot {op} while {state:?}")]
    InvalidState {
        op: &'static str,
        state: crate::accelerator::State,
    },
    #[error("accelerator has no output stream")]
    NoOutputStream,
    #[error("duplicate map task tag {0}")]
    DuplicateTag(u64),
    #[error("cpu {cpu} out of range (core count {cores})")]
    CpuOutOfRange { cpu: usize, cores: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("thread affinity call failed: {0}")]
    Affinity(#[source] io::Error),
}
