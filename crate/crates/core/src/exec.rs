//! Thread-per-node executor: endpoints, the start gate, the service loop and
//! end-of-stream handling.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::channel::idle::{spin_ticks, Idle};
use crate::channel::{Collect, Consumer, Full, Mpsc, Msg, Producer};
use crate::error::Error;
use crate::farm::{Dispatcher, LoadBalancer, WorkerLoad};
use crate::node::{Context, Item, Node, Retry, SendError, SendErrorKind, ServiceResult};
use crate::runtime::{NodeStats, RunSummary};
use crate::stage::Stage;

pub(crate) type Leg = Consumer<Msg<Item>>;

/// Input side of a node before its thread starts.
pub(crate) enum Inlet {
    /// No input stream: the node is a source.
    Source,
    /// Input that will never deliver anything but end-of-stream.
    Closed,
    Spsc(Leg),
    Fanin(Mpsc<Item>),
    /// Head of a feedback cycle; the real inlet arrives once the cycle is wired.
    Feedback(mpsc::Receiver<Inlet>),
}

impl Inlet {
    pub(crate) fn from_legs(mut legs: Vec<Leg>) -> Inlet {
        if legs.len() == 1 {
            Inlet::Spsc(legs.pop().unwrap())
        } else {
            Inlet::Fanin(Mpsc::from_legs(legs))
        }
    }
}

pub(crate) enum Poll {
    Data(Item),
    Eos,
    Empty,
}

pub(crate) struct Input {
    inlet: Inlet,
    /// Feedback items pulled aside while the node was blocked on a send.
    backlog: VecDeque<Item>,
    eos_pending: bool,
    eos_seen: bool,
}

impl Input {
    pub(crate) fn new(inlet: Inlet) -> Self {
        Self {
            inlet,
            backlog: VecDeque::new(),
            eos_pending: false,
            eos_seen: false,
        }
    }

    fn is_source(&self) -> bool {
        matches!(self.inlet, Inlet::Source)
    }

    fn poll_raw(&mut self) -> Poll {
        match &mut self.inlet {
            Inlet::Source | Inlet::Closed | Inlet::Feedback(_) => Poll::Eos,
            Inlet::Spsc(c) => match c.try_pop() {
                Some(Msg::Data(x)) => Poll::Data(x),
                Some(Msg::Eos) => Poll::Eos,
                None => Poll::Empty,
            },
            Inlet::Fanin(m) => match m.collect() {
                Collect::Item(x) => Poll::Data(x),
                Collect::AllClosed => Poll::Eos,
                Collect::Empty => Poll::Empty,
            },
        }
    }

    pub(crate) fn poll(&mut self) -> Poll {
        if let Some(x) = self.backlog.pop_front() {
            return Poll::Data(x);
        }
        if self.eos_pending {
            return Poll::Eos;
        }
        self.poll_raw()
    }

    pub(crate) fn recv(&mut self, stats: &mut NodeStats) -> Msg<Item> {
        let mut idle = Idle::new();
        loop {
            match self.poll() {
                Poll::Data(x) => return Msg::Data(x),
                Poll::Eos => {
                    self.eos_seen = true;
                    return Msg::Eos;
                }
                Poll::Empty => {
                    stats.pop_retries += 1;
                    idle.wait();
                }
            }
        }
    }

    /// Moves everything currently queued into the local backlog.
    fn absorb(&mut self) {
        while !self.eos_pending {
            match self.poll_raw() {
                Poll::Data(x) => self.backlog.push_back(x),
                Poll::Eos => self.eos_pending = true,
                Poll::Empty => return,
            }
        }
    }

    fn drain(&mut self, stats: &mut NodeStats) {
        if self.is_source() || self.eos_seen {
            return;
        }
        while let Msg::Data(_) = self.recv(stats) {
            stats.dropped += 1;
        }
    }
}

/// Output side of a node.
pub(crate) enum Outlet {
    Sink,
    Spsc(Producer<Msg<Item>>),
    Dispatch(Dispatcher),
}

/// Everything a node thread owns besides the node itself.
pub(crate) struct Port {
    pub(crate) id: usize,
    input: Input,
    out: Outlet,
    stats: NodeStats,
    cycle_head: bool,
    trace: bool,
}

struct Waiter {
    retry: Retry,
    attempts: u32,
    idle: Idle,
}

impl Waiter {
    fn new(retry: Retry) -> Self {
        Self {
            retry,
            attempts: 0,
            idle: Idle::new(),
        }
    }

    /// Called after a failed attempt; false once the budget is spent.
    fn again(&mut self, stats: &mut NodeStats, input: &mut Input, cycle_head: bool) -> bool {
        stats.push_retries += 1;
        if cycle_head {
            // keep the feedback edge moving so the cycle cannot wedge
            input.absorb();
        }
        match self.retry {
            Retry::Forever => {
                self.idle.wait();
                true
            }
            Retry::Limited { attempts, ticks } => {
                self.attempts += 1;
                if self.attempts >= attempts.max(1) {
                    false
                } else {
                    spin_ticks(ticks);
                    true
                }
            }
        }
    }
}

impl Port {
    pub(crate) fn new(id: usize, inlet: Inlet, out: Outlet, trace: bool) -> Self {
        Self {
            id,
            input: Input::new(inlet),
            out,
            stats: NodeStats::new(id),
            cycle_head: false,
            trace,
        }
    }

    pub(crate) fn has_output(&self) -> bool {
        !matches!(self.out, Outlet::Sink)
    }

    pub(crate) fn load_balancer(&mut self) -> Option<&mut LoadBalancer> {
        match &mut self.out {
            Outlet::Dispatch(d) => Some(&mut d.lb),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, mut item: Item, retry: Retry) -> Result<(), SendError> {
        let Port {
            input,
            out,
            stats,
            cycle_head,
            ..
        } = self;
        let mut waiter = Waiter::new(retry);
        let full = |item| SendError {
            kind: SendErrorKind::Full,
            item,
        };
        match out {
            Outlet::Sink => Err(SendError {
                kind: SendErrorKind::NoOutput,
                item,
            }),
            Outlet::Spsc(p) => loop {
                match p.try_push(Msg::Data(item)) {
                    Ok(()) => return Ok(()),
                    Err(Full(Msg::Data(back))) => {
                        item = back;
                        if !waiter.again(stats, input, *cycle_head) {
                            return Err(full(item));
                        }
                    }
                    Err(Full(Msg::Eos)) => unreachable!(),
                }
            },
            Outlet::Dispatch(d) => loop {
                let target = d.lb.select(&WorkerLoad::new(&d.spmc));
                if let Some(t) = target {
                    match d.spmc.try_push_to(t, Msg::Data(item)) {
                        Ok(()) => {
                            d.lb.dispatched(t);
                            return Ok(());
                        }
                        Err(Full(Msg::Data(back))) => item = back,
                        Err(Full(Msg::Eos)) => unreachable!(),
                    }
                }
                if !waiter.again(stats, input, *cycle_head) {
                    return Err(full(item));
                }
            },
        }
    }

    pub(crate) fn broadcast(&mut self, item: Item) -> Result<(), SendError> {
        let workers = match &self.out {
            Outlet::Dispatch(d) => d.spmc.consumers(),
            _ => {
                return Err(SendError {
                    kind: SendErrorKind::NotEmitter,
                    item,
                })
            }
        };
        if !item.is_cloneable() {
            return Err(SendError {
                kind: SendErrorKind::NotCloneable,
                item,
            });
        }
        let mut copies: Vec<Item> = (1..workers).filter_map(|_| item.try_clone()).collect();
        copies.push(item);
        for (i, copy) in copies.into_iter().enumerate() {
            self.push_leg(i, Msg::Data(copy));
        }
        Ok(())
    }

    fn push_leg(&mut self, leg: usize, mut msg: Msg<Item>) {
        let Port {
            input,
            out,
            stats,
            cycle_head,
            ..
        } = self;
        let mut waiter = Waiter::new(Retry::Forever);
        loop {
            let res = match out {
                Outlet::Sink => return,
                Outlet::Spsc(p) => p.try_push(msg),
                Outlet::Dispatch(d) => d.spmc.try_push_to(leg, msg),
            };
            match res {
                Ok(()) => return,
                Err(Full(back)) => {
                    msg = back;
                    waiter.again(stats, input, *cycle_head);
                }
            }
        }
    }

    fn send_eos(&mut self) {
        let legs = match &self.out {
            Outlet::Sink => 0,
            Outlet::Spsc(_) => 1,
            Outlet::Dispatch(d) => d.spmc.consumers(),
        };
        for leg in 0..legs {
            self.push_leg(leg, Msg::Eos);
        }
    }

    fn call(&mut self, node: &mut dyn Node, input: Option<Item>) -> ServiceResult {
        self.stats.service_calls += 1;
        if input.is_some() {
            self.stats.items_processed += 1;
        }
        if self.trace {
            let t = Instant::now();
            let r = node.service(input, &mut Context::new(self));
            self.stats.svc_time += t.elapsed();
            r
        } else {
            node.service(input, &mut Context::new(self))
        }
    }

    /// Runs one service invocation; false once the node asked to stop.
    fn step(&mut self, node: &mut dyn Node, input: Option<Item>) -> bool {
        match self.call(node, input) {
            ServiceResult::Emit(x) => {
                // a node without output discards its results
                let _ = self.push(x, Retry::Forever);
                true
            }
            ServiceResult::Continue => true,
            ServiceResult::End => false,
        }
    }

    fn service_loop(&mut self, node: &mut dyn Node, abort: &AtomicBool) {
        if self.input.is_source() {
            while !abort.load(Ordering::Relaxed) {
                if !self.step(node, None) {
                    return;
                }
            }
            return;
        }
        if self.cycle_head && !self.step(node, None) {
            return;
        }
        while let Msg::Data(x) = self.input.recv(&mut self.stats) {
            if !self.step(node, Some(x)) {
                return;
            }
        }
    }
}

#[derive(Default)]
struct GateState {
    arrived: usize,
    failure: Option<(usize, String)>,
    decision: Option<bool>,
}

/// Holds every node between `init` and its first service invocation until all
/// nodes of the run have initialized.
#[derive(Default)]
pub(crate) struct Gate {
    state: Mutex<GateState>,
    cv: Condvar,
}

impl Gate {
    /// Reports this node's init outcome and waits for the go/abort decision.
    fn arrive(&self, failure: Option<(usize, String)>) -> bool {
        let mut st = self.state.lock().unwrap();
        st.arrived += 1;
        if st.failure.is_none() {
            st.failure = failure;
        }
        self.cv.notify_all();
        loop {
            if let Some(go) = st.decision {
                return go;
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    /// Waits for `expected` arrivals, then releases everyone.
    fn open(&self, expected: usize) -> Result<Instant, (usize, String)> {
        let mut st = self.state.lock().unwrap();
        while st.arrived < expected {
            st = self.cv.wait(st).unwrap();
        }
        let go = st.failure.is_none();
        st.decision = Some(go);
        self.cv.notify_all();
        match st.failure.clone() {
            None => Ok(Instant::now()),
            Some(f) => Err(f),
        }
    }

    fn cancel(&self) {
        let mut st = self.state.lock().unwrap();
        st.decision = Some(false);
        self.cv.notify_all();
    }
}

struct Shared {
    gate: Gate,
    abort: AtomicBool,
}

pub(crate) struct NodeReport {
    stats: NodeStats,
    failure: Option<Error>,
}

/// Run-wide settings inherited by nested skeletons unless they override them.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RunConfig {
    pub(crate) capacity: usize,
    pub(crate) trace: bool,
}

/// Spawns node threads and assigns node ids in spawn order.
pub(crate) struct Launcher {
    trace: bool,
    next_id: usize,
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<NodeReport>>,
}

impl Launcher {
    fn new(trace: bool) -> Self {
        Self {
            trace,
            next_id: 0,
            shared: Arc::new(Shared {
                gate: Gate::default(),
                abort: AtomicBool::new(false),
            }),
            handles: Vec::new(),
        }
    }

    pub(crate) fn launch(&mut self, node: Box<dyn Node>, inlet: Inlet, out: Outlet) -> Result<usize, Error> {
        let id = self.next_id;
        self.next_id += 1;
        let shared = Arc::clone(&self.shared);
        let trace = self.trace;
        let handle = thread::Builder::new()
            .name(format!("flowskel-node-{id}"))
            .spawn(move || node_main(node, id, inlet, out, trace, &shared))
            .map_err(Error::Spawn)?;
        self.handles.push(handle);
        Ok(id)
    }

    fn abort(self) {
        self.shared.gate.cancel();
        for h in self.handles {
            let _ = h.join();
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic payload".to_owned()
    }
}

fn node_main(
    mut node: Box<dyn Node>,
    id: usize,
    inlet: Inlet,
    out: Outlet,
    trace: bool,
    shared: &Shared,
) -> NodeReport {
    let (inlet, cycle_head) = match inlet {
        Inlet::Feedback(rx) => (rx.recv().unwrap_or(Inlet::Closed), true),
        other => (other, false),
    };
    let mut port = Port::new(id, inlet, out, trace);
    port.cycle_head = cycle_head;

    port.stats.init_at = Some(Instant::now());
    let init = catch_unwind(AssertUnwindSafe(|| node.init(&mut Context::new(&mut port))));
    let init_failure = match init {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(p) => Some(panic_message(p)),
    };
    let go = shared
        .gate
        .arrive(init_failure.clone().map(|reason| (id, reason)));
    if !go {
        if init_failure.is_none() {
            let _ = catch_unwind(AssertUnwindSafe(|| node.end(&mut Context::new(&mut port))));
            port.stats.end_at = Some(Instant::now());
        }
        return NodeReport {
            stats: port.stats,
            failure: init_failure.map(|reason| Error::InitFailed { node: id, reason }),
        };
    }

    port.stats.svc_start = Some(Instant::now());
    let run = catch_unwind(AssertUnwindSafe(|| port.service_loop(&mut *node, &shared.abort)));
    port.stats.svc_end = Some(Instant::now());
    let mut failure = match run {
        Ok(()) => None,
        Err(p) => {
            shared.abort.store(true, Ordering::Relaxed);
            Some(Error::NodePanicked {
                node: id,
                message: panic_message(p),
            })
        }
    };
    if failure.is_none() {
        let end = catch_unwind(AssertUnwindSafe(|| node.end(&mut Context::new(&mut port))));
        if let Err(p) = end {
            shared.abort.store(true, Ordering::Relaxed);
            failure = Some(Error::NodePanicked {
                node: id,
                message: panic_message(p),
            });
        }
    }
    port.stats.end_at = Some(Instant::now());
    port.send_eos();
    port.input.drain(&mut port.stats);
    NodeReport {
        stats: port.stats,
        failure,
    }
}

/// A started topology whose threads have all passed the start gate.
pub(crate) struct Running {
    handles: Vec<JoinHandle<NodeReport>>,
    started: Instant,
    opened: Instant,
    trace: bool,
    /// Terminal output stream, when one was requested.
    pub(crate) output: Option<Inlet>,
}

impl Running {
    pub(crate) fn thread_count(&self) -> usize {
        self.handles.len()
    }
}

/// Validates and launches `stage`. `feed` is an external input stream (used by
/// accelerators); `feedback` routes the terminal output back to the first
/// node. Returns once every node has initialized.
pub(crate) fn start(
    stage: Stage,
    feed: Option<Inlet>,
    feedback: bool,
    want_out: bool,
    cfg: RunConfig,
) -> Result<Running, Error> {
    stage.validate(feed.is_some() || feedback)?;
    let started = Instant::now();
    let mut launcher = Launcher::new(cfg.trace);
    let (inlet, setup) = if feedback {
        let (tx, rx) = mpsc::channel();
        (Inlet::Feedback(rx), Some(tx))
    } else {
        (feed.unwrap_or(Inlet::Source), None)
    };
    let legs = match stage.spawn(inlet, want_out || feedback, cfg.capacity, &mut launcher) {
        Ok(legs) => legs,
        Err(e) => {
            launcher.abort();
            return Err(e);
        }
    };
    let mut output = legs.map(Inlet::from_legs);
    if let Some(tx) = setup {
        let _ = tx.send(output.take().unwrap_or(Inlet::Closed));
    }
    let expected = launcher.handles.len();
    let opened = launcher.shared.gate.open(expected);
    let running = Running {
        handles: launcher.handles,
        started,
        opened: *opened.as_ref().unwrap_or(&started),
        trace: cfg.trace,
        output,
    };
    match opened {
        Ok(_) => Ok(running),
        Err(_) => {
            let (_, err) = finish(running);
            Err(err.expect("init failure is reported by the failing node"))
        }
    }
}

/// Joins every node thread and aggregates their statistics. Returns the first
/// failure in node-id order, if any.
pub(crate) fn finish(running: Running) -> (RunSummary, Option<Error>) {
    let mut stats = Vec::with_capacity(running.handles.len());
    let mut failure = None;
    for h in running.handles {
        match h.join() {
            Ok(report) => {
                if failure.is_none() {
                    failure = report.failure;
                }
                stats.push(report.stats);
            }
            Err(p) => {
                if failure.is_none() {
                    failure = Some(Error::NodePanicked {
                        node: usize::MAX,
                        message: panic_message(p),
                    });
                }
            }
        }
    }
    let total = running.started.elapsed();
    let work = stats
        .iter()
        .filter_map(|s| s.svc_end)
        .max()
        .map(|end| end.saturating_duration_since(running.opened))
        .unwrap_or(Duration::ZERO);
    stats.sort_by_key(|s| s.node_id);
    (
        RunSummary {
            total,
            work,
            trace: running.trace,
            stats,
        },
        failure,
    )
}

/// Runs a topology to completion.
pub(crate) fn run_to_end(stage: Stage, feedback: bool, cfg: RunConfig) -> (Option<RunSummary>, Result<Duration, Error>) {
    match start(stage, None, feedback, false, cfg) {
        Ok(running) => {
            let (summary, failure) = finish(running);
            let total = summary.total;
            (Some(summary), failure.map_or(Ok(total), Err))
        }
        Err(e) => (None, Err(e)),
    }
}
