//! Accelerator mode: a skeleton runs "frozen" beside the host thread, which
//! offloads tasks into its input stream and optionally reads results from its
//! output stream.
//!
//! The lifecycle is single-cycle: `Idle → Running → Draining → Stopped`. To
//! run again, build a new accelerator.
//!
//! With bounded queues the host must keep reading results while it offloads
//! if the skeleton produces more results than the result queue holds;
//! otherwise the collector blocks, the workers back up and `offload` waits
//! forever. [`Accelerator::take_results`] lets another thread do the reading.

use std::time::Duration;

use crate::channel::idle::Idle;
use crate::channel::{bounded, Full, Msg, Producer, DEFAULT_CAPACITY};
use crate::error::Error;
use crate::exec::{self, Inlet, Input, Poll, RunConfig, Running};
use crate::node::Item;
use crate::runtime::{core_count, RunSummary, Skeleton};
use crate::stage::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum State {
    Idle,
    Running,
    Draining,
    Stopped,
}

/// Non-blocking result poll outcome.
#[derive(Debug)]
pub enum TryLoad {
    Item(Item),
    NotReady,
    Closed,
}

/// Reading end of an accelerator's output stream.
pub struct ResultStream {
    input: Input,
    closed: bool,
}

impl ResultStream {
    fn new(inlet: Inlet) -> Self {
        Self {
            input: Input::new(inlet),
            closed: false,
        }
    }

    /// Waits for the next result; `None` once end-of-stream has flushed
    /// through, and on every call after that.
    pub fn load_result(&mut self) -> Option<Item> {
        let mut idle = Idle::new();
        loop {
            match self.load_result_nb() {
                TryLoad::Item(x) => return Some(x),
                TryLoad::Closed => return None,
                TryLoad::NotReady => idle.wait(),
            }
        }
    }

    pub fn load_result_nb(&mut self) -> TryLoad {
        if self.closed {
            return TryLoad::Closed;
        }
        match self.input.poll() {
            Poll::Data(x) => TryLoad::Item(x),
            Poll::Eos => {
                self.closed = true;
                TryLoad::Closed
            }
            Poll::Empty => TryLoad::NotReady,
        }
    }
}

/// Worker count for accelerator farms: all cores but the host's, at least 1.
pub fn default_workers() -> usize {
    core_count().saturating_sub(1).max(1)
}

/// A skeleton driven by offloads from the host thread.
///
/// `offload` blocks while the input queue is full. If the skeleton has an
/// output and nobody reads it, the output queues fill, workers stall and
/// a host that keeps offloading waits forever. Either interleave
/// `load_result` calls with offloads, size the queues for the whole
/// stream, or drain from another thread via [`Accelerator::take_results`].
pub struct Accelerator {
    stage: Option<Stage>,
    capacity: usize,
    trace: bool,
    state: State,
    input: Option<Producer<Msg<Item>>>,
    results: Option<ResultStream>,
    has_output: bool,
    running: Option<Running>,
    threads: usize,
    summary: Option<RunSummary>,
}

impl Accelerator {
    /// Wraps a farm or pipeline. The result stream exists iff the skeleton
    /// has a terminal output (a farm collector, or a pipeline whose last
    /// stage has one).
    pub fn new(stage: impl Into<Stage>) -> Self {
        let stage = stage.into();
        let has_output = stage.has_output();
        let threads = stage.thread_count();
        Self {
            stage: Some(stage),
            capacity: DEFAULT_CAPACITY,
            trace: false,
            state: State::Idle,
            input: None,
            results: None,
            has_output,
            running: None,
            threads,
            summary: None,
        }
    }

    /// Capacity of the host-facing queues and default for inner edges.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<&mut Self, Error> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        self.capacity = capacity;
        Ok(self)
    }

    pub fn set_trace(&mut self, on: bool) -> &mut Self {
        self.trace = on;
        self
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn has_output(&self) -> bool {
        self.has_output
    }

    /// Threads the skeleton runs on.
    pub fn thread_count(&self) -> usize {
        self.threads
    }

    fn expect(&self, op: &'static str, wanted: State) -> Result<(), Error> {
        if self.state == wanted {
            Ok(())
        } else {
            Err(Error::InvalidState {
                op,
                state: self.state,
            })
        }
    }

    /// Starts the skeleton and returns once every node has initialized.
    pub fn run_then_freeze(&mut self) -> Result<(), Error> {
        self.expect("start", State::Idle)?;
        let stage = self.stage.take().expect("idle accelerator holds its skeleton");
        let (tx, rx) = bounded(self.capacity)?;
        let cfg = RunConfig {
            capacity: self.capacity,
            trace: self.trace,
        };
        match exec::start(stage, Some(Inlet::Spsc(rx)), false, self.has_output, cfg) {
            Ok(mut running) => {
                self.threads = running.thread_count();
                self.results = running.output.take().map(ResultStream::new);
                self.running = Some(running);
                self.input = Some(tx);
                self.state = State::Running;
                Ok(())
            }
            Err(e) => {
                self.state = State::Stopped;
                Err(e)
            }
        }
    }

    /// Enqueues a task, waiting while the input queue is full.
    pub fn offload(&mut self, task: Item) -> Result<(), Error> {
        self.expect("offload", State::Running)?;
        let tx = self.input.as_mut().unwrap();
        let mut msg = Msg::Data(task);
        let mut idle = Idle::new();
        while let Err(Full(back)) = tx.try_push(msg) {
            msg = back;
            idle.wait();
        }
        Ok(())
    }

    /// Closes the input stream. No further offloads are accepted.
    pub fn offload_eos(&mut self) -> Result<(), Error> {
        self.expect("send end-of-stream", State::Running)?;
        let tx = self.input.as_mut().unwrap();
        let mut idle = Idle::new();
        while tx.try_push(Msg::Eos).is_err() {
            idle.wait();
        }
        self.state = State::Draining;
        Ok(())
    }

    fn results_mut(&mut self) -> Result<&mut ResultStream, Error> {
        if self.state == State::Idle {
            return Err(Error::InvalidState {
                op: "load results",
                state: self.state,
            });
        }
        self.results.as_mut().ok_or(Error::NoOutputStream)
    }

    /// Waits for one result; `Ok(None)` once the output stream has closed.
    pub fn load_result(&mut self) -> Result<Option<Item>, Error> {
        Ok(self.results_mut()?.load_result())
    }

    pub fn load_result_nb(&mut self) -> Result<TryLoad, Error> {
        Ok(self.results_mut()?.load_result_nb())
    }

    /// Moves the output stream out so another thread can read it.
    pub fn take_results(&mut self) -> Result<ResultStream, Error> {
        self.results_mut()?;
        Ok(self.results.take().unwrap())
    }

    /// Joins the skeleton after [`Accelerator::offload_eos`]. Returns the
    /// total run time.
    pub fn wait(&mut self) -> Result<Duration, Error> {
        self.expect("wait", State::Draining)?;
        let running = self.running.take().unwrap();
        let (summary, failure) = exec::finish(running);
        let total = summary.total;
        self.summary = Some(summary);
        self.state = State::Stopped;
        failure.map_or(Ok(total), Err)
    }
}

impl Drop for Accelerator {
    fn drop(&mut self) {
        // Close the input so the threads can wind down; they are detached
        // rather than joined because unread results could keep them blocked.
        if self.state == State::Running {
            if let Some(tx) = self.input.as_mut() {
                let _ = tx.try_push(Msg::Eos);
            }
        }
    }
}

impl Skeleton for Accelerator {
    fn summary(&self) -> Option<&RunSummary> {
        self.summary.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::farm::Farm;
    use crate::node::map_fn;

    fn increment_farm(workers: usize, collector: bool) -> Farm {
        let mut f = Farm::new();
        f.add_workers((0..workers).map(|_| map_fn(|x: i64| x + 1)))
            .unwrap();
        if collector {
            f.add_collector(map_fn(|x: i64| x)).unwrap();
        }
        f
    }

    #[test]
    fn state_machine_guards() {
        let mut acc = Accelerator::new(increment_farm(2, true));
        assert!(matches!(acc.offload(Item::new(1i64)), Err(Error::InvalidState { .. })));
        assert!(matches!(acc.wait(), Err(Error::InvalidState { .. })));
        acc.run_then_freeze().unwrap();
        assert!(matches!(acc.run_then_freeze(), Err(Error::InvalidState { .. })));
        assert!(matches!(
            acc.wait(),
            Err(Error::InvalidState {
                state: State::Running,
                ..
            })
        ));
        assert_eq!(acc.state(), State::Running);
        acc.offload_eos().unwrap();
        assert!(matches!(acc.offload_eos(), Err(Error::InvalidState { .. })));
        assert!(matches!(acc.offload(Item::new(1i64)), Err(Error::InvalidState { .. })));
        assert!(matches!(acc.load_result(), Ok(None)));
        acc.wait().unwrap();
        assert_eq!(acc.state(), State::Stopped);
    }

    #[test]
    fn single_round_trip() {
        let mut acc = Accelerator::new(increment_farm(2, true));
        acc.run_then_freeze().unwrap();
        acc.offload(Item::new(5i64)).unwrap();
        acc.offload_eos().unwrap();
        let r = acc.load_result().unwrap().unwrap();
        assert_eq!(r.downcast::<i64>().unwrap(), 6);
        assert!(acc.load_result().unwrap().is_none());
        assert!(matches!(acc.load_result_nb().unwrap(), TryLoad::Closed));
        acc.wait().unwrap();
    }

    #[test]
    fn no_collector_means_no_output() {
        let mut acc = Accelerator::new(increment_farm(2, false));
        assert!(!acc.has_output());
        acc.run_then_freeze().unwrap();
        assert!(matches!(acc.load_result(), Err(Error::NoOutputStream)));
        acc.offload_eos().unwrap();
        acc.wait().unwrap();
    }

    #[test]
    fn nonblocking_poll() {
        let mut acc = Accelerator::new(increment_farm(1, true));
        acc.run_then_freeze().unwrap();
        assert!(matches!(acc.load_result_nb().unwrap(), TryLoad::NotReady));
        acc.offload(Item::new(1i64)).unwrap();
        let got = loop {
            match acc.load_result_nb().unwrap() {
                TryLoad::Item(x) => break x,
                TryLoad::NotReady => std::thread::yield_now(),
                TryLoad::Closed => panic!("closed early"),
            }
        };
        assert_eq!(got.downcast::<i64>().unwrap(), 2);
        assert!(matches!(acc.load_result_nb().unwrap(), TryLoad::NotReady));
        acc.offload_eos().unwrap();
        acc.wait().unwrap();
        for _ in 0..3 {
            assert!(matches!(acc.load_result_nb().unwrap(), TryLoad::Closed));
        }
    }

    #[test]
    fn default_workers_leave_one_core() {
        assert_eq!(default_workers(), core_count().saturating_sub(1).max(1));
    }
}
