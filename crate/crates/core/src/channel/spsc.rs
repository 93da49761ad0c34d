//! Bounded lock-free single-producer single-consumer queue.
//!
//! The queue is split into a [`Producer`] and a [`Consumer`] at construction.
//! Neither half is `Clone`, so the one-producer/one-consumer contract holds by
//! construction. Both halves are `Send` and may be moved to their threads at
//! setup time.
//!
//! Indices use a two-counter scheme: `tail` counts pushes, `head` counts pops,
//! and a slot is addressed by `counter % capacity`. The requested capacity is
//! honored exactly (no power-of-two rounding).

use std::cell::UnsafeCell;
use std::fmt;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use crate::error::Error;

/// Capacity used when the caller does not pick one.
pub const DEFAULT_CAPACITY: usize = 512;

struct Shared<T> {
    buf: Box<[UnsafeCell<MaybeUninit<T>>]>,
    /// Next slot to pop. Written only by the consumer.
    head: CachePadded<AtomicUsize>,
    /// Next slot to push. Written only by the producer.
    tail: CachePadded<AtomicUsize>,
}

// SAFETY: slots are handed over between exactly one producer and one consumer
// through the release/acquire pair on `tail` (push) and `head` (pop).
unsafe impl<T: Send> Send for Shared<T> {}
unsafe impl<T: Send> Sync for Shared<T> {}

impl<T> Shared<T> {
    #[inline]
    fn capacity(&self) -> usize {
        self.buf.len()
    }

    #[inline]
    fn slot(&self, counter: usize) -> *mut MaybeUninit<T> {
        self.buf[counter % self.buf.len()].get()
    }
}

impl<T> Drop for Shared<T> {
    fn drop(&mut self) {
        let head = *self.head.get_mut();
        let tail = *self.tail.get_mut();
        let mut i = head;
        while i != tail {
            // SAFETY: slots in [head, tail) hold initialized items and we have
            // exclusive access in drop.
            unsafe { (*self.slot(i)).assume_init_drop() };
            i = i.wrapping_add(1);
        }
    }
}

/// A bounded SPSC queue before it is split into its two endpoints.
pub struct SpscQueue<T> {
    shared: Arc<Shared<T>>,
}

impl<T> SpscQueue<T> {
    /// Allocates a queue holding at most `capacity` items.
    pub fn new(capacity: usize) -> Result<Self, Error> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        let buf = (0..capacity)
            .map(|_| UnsafeCell::new(MaybeUninit::uninit()))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        Ok(Self {
            shared: Arc::new(Shared {
                buf,
                head: CachePadded::new(AtomicUsize::new(0)),
                tail: CachePadded::new(AtomicUsize::new(0)),
            }),
        })
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity()
    }

    /// Splits the queue into its producer and consumer halves.
    pub fn split(self) -> (Producer<T>, Consumer<T>) {
        let producer = Producer {
            shared: Arc::clone(&self.shared),
            tail: 0,
            cached_head: 0,
        };
        let consumer = Consumer {
            shared: self.shared,
            head: 0,
            cached_tail: 0,
        };
        (producer, consumer)
    }
}

/// Shorthand for `SpscQueue::new(capacity)?.split()`.
pub fn bounded<T>(capacity: usize) -> Result<(Producer<T>, Consumer<T>), Error> {
    Ok(SpscQueue::new(capacity)?.split())
}

/// Returned by [`Producer::try_push`] when the queue is full. Carries the
/// rejected item back to the caller.
#[derive(PartialEq, Eq)]
pub struct Full<T>(pub T);

impl<T> Full<T> {
    pub fn into_inner(self) -> T {
        self.0
    }
}

impl<T> fmt::Debug for Full<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Full(..)")
    }
}

/// Producing half of an [`SpscQueue`].
pub struct Producer<T> {
    shared: Arc<Shared<T>>,
    tail: usize,
    cached_head: usize,
}

impl<T> Producer<T> {
    /// Enqueues `item`, or hands it back if the queue holds `capacity` items.
    #[inline]
    pub fn try_push(&mut self, item: T) -> Result<(), Full<T>> {
        let cap = self.shared.capacity();
        if self.tail.wrapping_sub(self.cached_head) == cap {
            self.cached_head = self.shared.head.load(Ordering::Acquire);
            if self.tail.wrapping_sub(self.cached_head) == cap {
                return Err(Full(item));
            }
        }
        // SAFETY: the slot at `tail` is free: the consumer released it (acquire
        // on head above) or it was never used.
        unsafe { (*self.shared.slot(self.tail)).write(item) };
        self.tail = self.tail.wrapping_add(1);
        self.shared.tail.store(self.tail, Ordering::Release);
        Ok(())
    }

    /// Approximate number of resident items as seen by the producer.
    pub fn len(&self) -> usize {
        self.tail
            .wrapping_sub(self.shared.head.load(Ordering::Acquire))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity()
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity()
    }
}

/// Consuming half of an [`SpscQueue`].
pub struct Consumer<T> {
    shared: Arc<Shared<T>>,
    head: usize,
    cached_tail: usize,
}

impl<T> Consumer<T> {
    /// Dequeues the oldest item, or `None` if the queue is empty.
    #[inline]
    pub fn try_pop(&mut self) -> Option<T> {
        if self.head == self.cached_tail {
            self.cached_tail = self.shared.tail.load(Ordering::Acquire);
            if self.head == self.cached_tail {
                return None;
            }
        }
        // SAFETY: head < tail, so the producer published this slot (acquire on
        // tail above) and will not touch it until head moves past it.
        let item = unsafe { (*self.shared.slot(self.head)).assume_init_read() };
        self.head = self.head.wrapping_add(1);
        self.shared.head.store(self.head, Ordering::Release);
        Some(item)
    }

    /// Approximate number of resident items as seen by the consumer.
    pub fn len(&self) -> usize {
        self.shared
            .tail
            .load(Ordering::Acquire)
            .wrapping_sub(self.head)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity()
    }
}
