//! Farm skeleton: an emitter scheduling tasks onto a set of workers, and an
//! optional collector gathering their results.

use std::mem;
use std::time::Duration;

use crate::channel::{Spmc, DEFAULT_CAPACITY};
use crate::error::Error;
use crate::exec::{self, Inlet, Launcher, Leg, Outlet, RunConfig};
use crate::node::{Context, Item, Node, ServiceResult};
use crate::runtime::{RunSummary, Skeleton};
use crate::stage::{spawn_node, Stage};

/// Read-only view of the emitter→worker queues handed to a [`Scheduling`]
/// policy.
pub struct WorkerLoad<'a> {
    spmc: &'a Spmc<Item>,
}

impl<'a> WorkerLoad<'a> {
    pub(crate) fn new(spmc: &'a Spmc<Item>) -> Self {
        Self { spmc }
    }

    pub fn workers(&self) -> usize {
        self.spmc.consumers()
    }

    /// Approximate number of tasks waiting for worker `i`. The read races with
    /// the worker and is only a hint.
    pub fn queue_len(&self, i: usize) -> usize {
        self.spmc.queue_len(i)
    }
}

/// Worker selection policy, consulted by the emitter for every task.
pub trait Scheduling: Send {
    /// Index of the worker for the next task, or `None` if no worker should
    /// take it yet (the emitter waits and asks again).
    fn select_worker(&mut self, load: &WorkerLoad<'_>) -> Option<usize>;

    /// Told after a task was enqueued on `worker`.
    fn dispatched(&mut self, _worker: usize) {}
}

/// Cycles 0, 1, …, n-1, 0, … and advances only after a successful enqueue.
#[derive(Debug, Default, Clone)]
pub struct RoundRobin {
    next: usize,
}

impl Scheduling for RoundRobin {
    fn select_worker(&mut self, load: &WorkerLoad<'_>) -> Option<usize> {
        (load.workers() > 0).then_some(self.next % load.workers().max(1))
    }

    fn dispatched(&mut self, worker: usize) {
        self.next = worker + 1;
    }
}

/// Picks the lowest-indexed worker whose queue holds at most `threshold`
/// tasks (1 by default).
#[derive(Debug, Clone)]
pub struct OnDemand {
    pub threshold: usize,
}

impl Default for OnDemand {
    fn default() -> Self {
        Self { threshold: 1 }
    }
}

impl Scheduling for OnDemand {
    fn select_worker(&mut self, load: &WorkerLoad<'_>) -> Option<usize> {
        (0..load.workers()).find(|&i| load.queue_len(i) <= self.threshold)
    }
}

/// Emitter-side load balancer: a scheduling policy plus an optional sticky
/// victim that overrides it.
pub struct LoadBalancer {
    policy: Box<dyn Scheduling>,
    victim: Option<usize>,
    workers: usize,
}

impl LoadBalancer {
    pub fn new(policy: Box<dyn Scheduling>, workers: usize) -> Self {
        Self {
            policy,
            victim: None,
            workers,
        }
    }

    pub fn worker_count(&self) -> usize {
        self.workers
    }

    /// Sends every following task to `worker` until changed or cleared.
    pub fn set_victim(&mut self, worker: usize) -> Result<(), Error> {
        if worker >= self.workers {
            return Err(Error::InvalidWorker {
                index: worker,
                workers: self.workers,
            });
        }
        self.victim = Some(worker);
        Ok(())
    }

    pub fn clear_victim(&mut self) {
        self.victim = None;
    }

    pub fn victim(&self) -> Option<usize> {
        self.victim
    }

    pub fn select(&mut self, load: &WorkerLoad<'_>) -> Option<usize> {
        match self.victim {
            Some(v) => Some(v),
            None => self
                .policy
                .select_worker(load)
                .filter(|&w| w < self.workers),
        }
    }

    pub(crate) fn dispatched(&mut self, worker: usize) {
        if self.victim.is_none() {
            self.policy.dispatched(worker);
        }
    }
}

pub(crate) struct Dispatcher {
    pub(crate) spmc: Spmc<Item>,
    pub(crate) lb: LoadBalancer,
}

/// Emitter used when none is given: forwards every input item.
struct Forward;

impl Node for Forward {
    fn service(&mut self, input: Option<Item>, _ctx: &mut Context<'_>) -> ServiceResult {
        match input {
            Some(x) => ServiceResult::Emit(x),
            None => ServiceResult::Continue,
        }
    }
}

/// A farm: emitter → {workers} → collector.
///
/// * Without an emitter, input items are forwarded to workers as they
///   arrive; such a farm needs an input stream (an upstream stage or an
///   accelerator).
/// * Without a collector, worker results are dropped unless the farm feeds a
///   following stage or a feedback edge, in which case the worker outputs are
///   merged directly.
/// * End-of-stream from the emitter reaches every worker; the collector stops
///   after end-of-stream from all of them.
pub struct Farm {
    emitter: Option<Box<dyn Node>>,
    workers: Vec<Stage>,
    collector: Option<Box<dyn Node>>,
    policy: Option<Box<dyn Scheduling>>,
    feedback: bool,
    capacity: Option<usize>,
    trace: bool,
    started: bool,
    summary: Option<RunSummary>,
}

impl Farm {
    pub fn new() -> Self {
        Self {
            emitter: None,
            workers: Vec::new(),
            collector: None,
            policy: None,
            feedback: false,
            capacity: None,
            trace: false,
            started: false,
            summary: None,
        }
    }

    fn check_open(&self) -> Result<(), Error> {
        if self.started {
            Err(Error::AlreadyStarted)
        } else {
            Ok(())
        }
    }

    pub fn add_emitter(&mut self, emitter: impl Node + 'static) -> Result<&mut Self, Error> {
        self.check_open()?;
        self.emitter = Some(Box::new(emitter));
        Ok(self)
    }

    pub fn add_collector(&mut self, collector: impl Node + 'static) -> Result<&mut Self, Error> {
        self.check_open()?;
        self.collector = Some(Box::new(collector));
        Ok(self)
    }

    pub fn add_worker(&mut self, worker: impl Into<Stage>) -> Result<&mut Self, Error> {
        self.check_open()?;
        let worker = worker.into();
        if worker.is_wrapped() {
            return Err(Error::NestedFeedback);
        }
        self.workers.push(worker);
        Ok(self)
    }

    pub fn add_workers<S, I>(&mut self, workers: I) -> Result<&mut Self, Error>
    where
        S: Into<Stage>,
        I: IntoIterator<Item = S>,
    {
        for w in workers {
            self.add_worker(w)?;
        }
        Ok(self)
    }

    /// Replaces the default round-robin policy.
    pub fn set_scheduling(&mut self, policy: impl Scheduling + 'static) -> Result<&mut Self, Error> {
        self.check_open()?;
        self.policy = Some(Box::new(policy));
        Ok(self)
    }

    /// Sends each task to the first worker with at most one queued task.
    pub fn set_scheduling_ondemand(&mut self) -> Result<&mut Self, Error> {
        self.set_scheduling(OnDemand::default())
    }

    /// Routes the collector output (or the merged worker outputs when there
    /// is no collector) back to the emitter. Only valid on the outermost
    /// skeleton.
    pub fn wrap_around(&mut self) -> Result<&mut Self, Error> {
        self.check_open()?;
        self.feedback = true;
        Ok(self)
    }

    pub fn set_capacity(&mut self, capacity: usize) -> Result<&mut Self, Error> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        self.capacity = Some(capacity);
        Ok(self)
    }

    pub fn set_trace(&mut self, on: bool) -> &mut Self {
        self.trace = on;
        self
    }

    pub fn is_wrapped(&self) -> bool {
        self.feedback
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn has_emitter(&self) -> bool {
        self.emitter.is_some()
    }

    pub(crate) fn has_output(&self) -> bool {
        self.collector.is_some()
    }

    /// Threads this farm runs on: one emitter (given or default), the
    /// workers' threads and the collector if present.
    pub fn thread_count(&self) -> usize {
        1 + self.workers.iter().map(Stage::thread_count).sum::<usize>()
            + usize::from(self.collector.is_some())
    }

    pub(crate) fn run_config(&self) -> RunConfig {
        RunConfig {
            capacity: self.capacity.unwrap_or(DEFAULT_CAPACITY),
            trace: self.trace,
        }
    }

    /// Runs the farm standalone and blocks until it terminates.
    pub fn run_and_wait_end(&mut self) -> Result<Duration, Error> {
        self.check_open()?;
        self.validate(self.feedback)?;
        self.started = true;
        let cfg = self.run_config();
        let (summary, result) = exec::run_to_end(Stage::Farm(self.detach()), self.feedback, cfg);
        self.summary = summary;
        result
    }

    pub(crate) fn detach(&mut self) -> Farm {
        self.started = true;
        Farm {
            emitter: self.emitter.take(),
            workers: mem::take(&mut self.workers),
            collector: self.collector.take(),
            policy: self.policy.take(),
            feedback: self.feedback,
            capacity: self.capacity,
            trace: self.trace,
            started: false,
            summary: None,
        }
    }

    pub(crate) fn validate(&self, fed: bool) -> Result<(), Error> {
        if self.workers.is_empty() {
            return Err(Error::NoWorkers);
        }
        if self.emitter.is_none() && !fed {
            return Err(Error::UnfedFarm);
        }
        self.workers.iter().try_for_each(|w| w.validate(true))
    }

    pub(crate) fn spawn(
        self,
        inlet: Inlet,
        want_out: bool,
        capacity: usize,
        launcher: &mut Launcher,
    ) -> Result<Option<Vec<Leg>>, Error> {
        let capacity = self.capacity.unwrap_or(capacity);
        let n = self.workers.len();
        let (spmc, worker_inlets) = Spmc::new(n, capacity)?;
        let policy = self
            .policy
            .unwrap_or_else(|| Box::new(RoundRobin::default()));
        let emitter = self.emitter.unwrap_or_else(|| Box::new(Forward));
        launcher.launch(
            emitter,
            inlet,
            Outlet::Dispatch(Dispatcher {
                spmc,
                lb: LoadBalancer::new(policy, n),
            }),
        )?;

        let worker_out = self.collector.is_some() || want_out;
        let mut legs = Vec::new();
        for (worker, input) in self.workers.into_iter().zip(worker_inlets) {
            if let Some(out) = worker.spawn(Inlet::Spsc(input), worker_out, capacity, launcher)? {
                legs.extend(out);
            }
        }
        match self.collector {
            Some(collector) => spawn_node(collector, Inlet::from_legs(legs), want_out, capacity, launcher),
            None if want_out => Ok(Some(legs)),
            None => Ok(None),
        }
    }
}

impl Default for Farm {
    fn default() -> Self {
        Self::new()
    }
}

impl Skeleton for Farm {
    fn summary(&self) -> Option<&RunSummary> {
        self.summary.as_ref()
    }
}
