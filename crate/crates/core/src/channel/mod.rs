//! Communication layers: bounded SPSC queues and the composite channels built
//! on top of them.

pub mod idle;
pub mod multi;
pub mod spsc;

pub use multi::{Collect, DispatchError, Mpmc, Mpsc, Msg, Pump, Spmc};
pub use spsc::{bounded, Consumer, Full, Producer, SpscQueue, DEFAULT_CAPACITY};
