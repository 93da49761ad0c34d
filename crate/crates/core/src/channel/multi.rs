//! Composite channels built only from [`spsc`](super::spsc) legs.
//!
//! * [`Spmc`]: one dispatcher, one SPSC leg per consumer. Items go to exactly
//!   one consumer (round-robin or explicit target) or to all of them
//!   (broadcast).
//! * [`Mpsc`]: one SPSC leg per producer, drained by a single collector that
//!   polls the legs fairly. Order is kept per producer only.
//! * [`Mpmc`]: an `Mpsc` fan-in pumped into an `Spmc` fan-out.
//!
//! Every leg carries [`Msg`] so that end-of-stream can travel alongside data.
//! Each producer of an `Mpsc` closes its own leg; the collector reports
//! [`Collect::AllClosed`] once every leg is closed.

use std::fmt;

use super::idle::Idle;
use super::spsc::{bounded, Consumer, Full, Producer};
use crate::error::Error;

/// Envelope carried by every leg.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg<T> {
    Data(T),
    Eos,
}

/// Why [`Spmc::dispatch`] did not enqueue.
pub enum DispatchError<T> {
    /// The selected consumer's leg is full. The cursor did not move.
    Full(T),
    /// The explicit target is not a consumer index.
    InvalidTarget(T),
}

impl<T> DispatchError<T> {
    pub fn into_inner(self) -> T {
        match self {
            DispatchError::Full(t) | DispatchError::InvalidTarget(t) => t,
        }
    }
}

impl<T> fmt::Debug for DispatchError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DispatchError::Full(_) => f.write_str("Full(..)"),
            DispatchError::InvalidTarget(_) => f.write_str("InvalidTarget(..)"),
        }
    }
}

/// Single-producer multi-consumer fan-out.
///
/// Broadcast duplicates the payload with `Clone`. Pick the payload type at
/// construction: an `Arc<X>` shares one immutable value among consumers, a
/// plain `X: Clone` gives each consumer its own copy.
pub struct Spmc<T> {
    legs: Vec<Producer<Msg<T>>>,
    cursor: usize,
}

/// Consumer ends of an [`Spmc`], in index order.
pub type ConsumerLegs<T> = Vec<Consumer<Msg<T>>>;
/// Producer ends of an [`Mpsc`], in index order.
pub type ProducerLegs<T> = Vec<Producer<Msg<T>>>;

impl<T> Spmc<T> {
    /// Builds a fan-out with `consumers` legs of `capacity` slots each and
    /// returns the consumer ends in index order.
    pub fn new(consumers: usize, capacity: usize) -> Result<(Self, ConsumerLegs<T>), Error> {
        let mut legs = Vec::with_capacity(consumers);
        let mut outs = Vec::with_capacity(consumers);
        for _ in 0..consumers {
            let (p, c) = bounded(capacity)?;
            legs.push(p);
            outs.push(c);
        }
        Ok((Self::from_legs(legs), outs))
    }

    pub fn from_legs(legs: Vec<Producer<Msg<T>>>) -> Self {
        Self { legs, cursor: 0 }
    }

    pub fn consumers(&self) -> usize {
        self.legs.len()
    }

    /// Index the next round-robin dispatch will use.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Approximate number of items waiting on consumer `i`'s leg.
    pub fn queue_len(&self, i: usize) -> usize {
        self.legs[i].len()
    }

    /// Enqueues `item` on `target`, or on the round-robin cursor when `target`
    /// is `None`. Returns the consumer index used. The cursor advances only
    /// after a successful round-robin enqueue.
    pub fn dispatch(&mut self, item: T, target: Option<usize>) -> Result<usize, DispatchError<T>> {
        let idx = match target {
            Some(t) if t >= self.legs.len() => return Err(DispatchError::InvalidTarget(item)),
            Some(t) => t,
            None if self.legs.is_empty() => return Err(DispatchError::InvalidTarget(item)),
            None => self.cursor,
        };
        match self.legs[idx].try_push(Msg::Data(item)) {
            Ok(()) => {
                if target.is_none() {
                    self.cursor = (idx + 1) % self.legs.len();
                }
                Ok(idx)
            }
            Err(Full(Msg::Data(item))) => Err(DispatchError::Full(item)),
            Err(Full(Msg::Eos)) => unreachable!(),
        }
    }

    /// Delivers one copy of `item` to every consumer, retrying on full legs.
    pub fn broadcast(&mut self, item: T)
    where
        T: Clone,
    {
        let n = self.legs.len();
        let mut item = Some(item);
        for i in 0..n {
            let msg = if i + 1 == n {
                Msg::Data(item.take().unwrap())
            } else {
                Msg::Data(item.as_ref().unwrap().clone())
            };
            self.push_blocking(i, msg);
        }
    }

    /// Closes every leg with an end-of-stream mark.
    pub fn broadcast_eos(&mut self) {
        for i in 0..self.legs.len() {
            self.push_blocking(i, Msg::Eos);
        }
    }

    pub(crate) fn try_push_to(&mut self, i: usize, msg: Msg<T>) -> Result<(), Full<Msg<T>>> {
        self.legs[i].try_push(msg)
    }

    fn push_blocking(&mut self, i: usize, mut msg: Msg<T>) {
        let mut idle = Idle::new();
        loop {
            match self.legs[i].try_push(msg) {
                Ok(()) => return,
                Err(Full(back)) => {
                    msg = back;
                    idle.wait();
                }
            }
        }
    }
}

/// Outcome of a single [`Mpsc::collect`] poll.
#[derive(Debug, PartialEq, Eq)]
pub enum Collect<T> {
    Item(T),
    Empty,
    AllClosed,
}

/// Multi-producer single-consumer fan-in.
pub struct Mpsc<T> {
    legs: Vec<Consumer<Msg<T>>>,
    open: Vec<bool>,
    open_count: usize,
    start: usize,
}

impl<T> Mpsc<T> {
    /// Builds a fan-in with `producers` legs and returns the producer ends.
    pub fn new(producers: usize, capacity: usize) -> Result<(ProducerLegs<T>, Self), Error> {
        let mut ins = Vec::with_capacity(producers);
        let mut legs = Vec::with_capacity(producers);
        for _ in 0..producers {
            let (p, c) = bounded(capacity)?;
            ins.push(p);
            legs.push(c);
        }
        Ok((ins, Self::from_legs(legs)))
    }

    pub fn from_legs(legs: Vec<Consumer<Msg<T>>>) -> Self {
        let n = legs.len();
        Self {
            legs,
            open: vec![true; n],
            open_count: n,
            start: 0,
        }
    }

    pub fn producers(&self) -> usize {
        self.legs.len()
    }

    pub fn open_legs(&self) -> usize {
        self.open_count
    }

    /// Polls every open leg once, starting from a rotating index.
    pub fn collect(&mut self) -> Collect<T> {
        let n = self.legs.len();
        for k in 0..n {
            let i = (self.start + k) % n;
            if !self.open[i] {
                continue;
            }
            match self.legs[i].try_pop() {
                Some(Msg::Data(x)) => {
                    self.start = (i + 1) % n;
                    return Collect::Item(x);
                }
                Some(Msg::Eos) => {
                    self.open[i] = false;
                    self.open_count -= 1;
                }
                None => {}
            }
        }
        if n > 0 {
            self.start = (self.start + 1) % n;
        }
        if self.open_count == 0 {
            Collect::AllClosed
        } else {
            Collect::Empty
        }
    }

    /// Waits for the next item; `None` once every leg is closed.
    pub fn collect_blocking(&mut self) -> Option<T> {
        let mut idle = Idle::new();
        loop {
            match self.collect() {
                Collect::Item(x) => return Some(x),
                Collect::AllClosed => return None,
                Collect::Empty => idle.wait(),
            }
        }
    }
}

/// Result of one [`Mpmc::pump`] step.
#[derive(Debug, PartialEq, Eq)]
pub enum Pump {
    Moved,
    Idle,
    Closed,
}

/// Multi-producer multi-consumer channel: an [`Mpsc`] fan-in feeding an
/// [`Spmc`] fan-out (round-robin). The arbiter driving [`Mpmc::pump`] or
/// [`Mpmc::run`] is the single consumer of the fan-in and the single producer
/// of the fan-out.
pub struct Mpmc<T> {
    fanin: Mpsc<T>,
    fanout: Spmc<T>,
    pending: Option<T>,
    closed: bool,
}

/// Endpoints returned by [`Mpmc::new`].
pub type MpmcParts<T> = (Vec<Producer<Msg<T>>>, Mpmc<T>, Vec<Consumer<Msg<T>>>);

impl<T> Mpmc<T> {
    pub fn new(producers: usize, consumers: usize, capacity: usize) -> Result<MpmcParts<T>, Error> {
        let (ins, fanin) = Mpsc::new(producers, capacity)?;
        let (fanout, outs) = Spmc::new(consumers, capacity)?;
        Ok((
            ins,
            Self {
                fanin,
                fanout,
                pending: None,
                closed: false,
            },
            outs,
        ))
    }

    /// Moves at most one item from the fan-in to the fan-out. Once every
    /// producer has closed and nothing is pending, closes the consumers and
    /// reports [`Pump::Closed`].
    pub fn pump(&mut self) -> Pump {
        if self.closed {
            return Pump::Closed;
        }
        let item = match self.pending.take() {
            Some(x) => x,
            None => match self.fanin.collect() {
                Collect::Item(x) => x,
                Collect::Empty => return Pump::Idle,
                Collect::AllClosed => {
                    self.fanout.broadcast_eos();
                    self.closed = true;
                    return Pump::Closed;
                }
            },
        };
        match self.fanout.dispatch(item, None) {
            Ok(_) => Pump::Moved,
            Err(e) => {
                self.pending = Some(e.into_inner());
                Pump::Idle
            }
        }
    }

    /// Pumps until every producer has closed.
    pub fn run(mut self) {
        let mut idle = Idle::new();
        loop {
            match self.pump() {
                Pump::Moved => idle.reset(),
                Pump::Idle => idle.wait(),
                Pump::Closed => return,
            }
        }
    }
}
