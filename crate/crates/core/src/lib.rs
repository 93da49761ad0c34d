//! Stream-parallel skeletons (pipeline, farm, map) over lock-free bounded
//! single-producer/single-consumer queues, with one thread per node.
//!
//! Business logic goes in [`Node`] implementations; skeletons compose nodes
//! and other skeletons and run them to completion or, through
//! [`Accelerator`], beside the calling thread.

pub mod accelerator;
pub mod bench;
pub mod channel;
pub mod error;
mod exec;
pub mod farm;
pub mod map;
pub mod node;
pub mod pipeline;
pub mod runtime;
pub mod stage;

pub use accelerator::{Accelerator, ResultStream, State, TryLoad};
pub use error::Error;
pub use farm::{Farm, LoadBalancer, OnDemand, RoundRobin, Scheduling, WorkerLoad};
pub use map::{map_run, Granularity, Map, MapTask, Matrix};
pub use node::{map_fn, node_fn, Context, InitError, Item, Node, Retry, SendError, SendErrorKind, ServiceResult};
pub use pipeline::Pipeline;
pub use runtime::{core_count, pin_thread, NodeStats, Pinning, RunSummary, Skeleton, Stopwatch};
pub use stage::Stage;
