//! The node contract: a sequential activity with an init/service/end
//! lifecycle, run on its own thread by the skeleton that contains it.
//!
//! A node sees one logical input stream and one logical output stream. It
//! produces output either by returning [`ServiceResult::Emit`] or by calling
//! [`Context::send_out`] any number of times during a service invocation;
//! items sent with `send_out` precede the returned item.

use std::any::Any;
use std::fmt;
use std::marker::PhantomData;

use thiserror::Error;

use crate::error::Error;
use crate::exec::Port;
use crate::farm::LoadBalancer;

trait Payload: Send {
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
    fn into_any(self: Box<Self>) -> Box<dyn Any>;
    fn try_clone(&self) -> Option<Box<dyn Payload>>;
    fn is_cloneable(&self) -> bool;
    fn type_name(&self) -> &'static str;
}

struct Slot<T> {
    value: T,
    cloner: Option<fn(&T) -> T>,
}

impl<T: Send + 'static> Payload for Slot<T> {
    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }

    fn into_any(self: Box<Self>) -> Box<dyn Any> {
        self
    }

    fn is_cloneable(&self) -> bool {
        self.cloner.is_some()
    }

    fn try_clone(&self) -> Option<Box<dyn Payload>> {
        self.cloner.map(|clone| {
            Box::new(Slot {
                value: clone(&self.value),
                cloner: self.cloner,
            }) as Box<dyn Payload>
        })
    }

    fn type_name(&self) -> &'static str {
        std::any::type_name::<T>()
    }
}

/// An owned, type-erased stream item.
///
/// Items move between nodes by handle. Consumers recover the concrete value
/// with [`Item::downcast`] or borrow it with [`Item::downcast_ref`].
pub struct Item(Box<dyn Payload>);

impl Item {
    pub fn new<T: Send + 'static>(value: T) -> Self {
        Item(Box::new(Slot {
            value,
            cloner: None,
        }))
    }

    /// Wraps a value that can be duplicated, which is what broadcasting needs.
    /// Wrap an `Arc` to share one immutable payload among all receivers.
    pub fn cloneable<T: Clone + Send + 'static>(value: T) -> Self {
        Item(Box::new(Slot {
            value,
            cloner: Some(T::clone),
        }))
    }

    pub fn is<T: 'static>(&self) -> bool {
        self.0.as_any().is::<Slot<T>>()
    }

    /// Takes the value out, or returns the item untouched on a type mismatch.
    pub fn downcast<T: 'static>(self) -> Result<T, Item> {
        if self.is::<T>() {
            let slot = self.0.into_any().downcast::<Slot<T>>().unwrap();
            Ok(slot.value)
        } else {
            Err(self)
        }
    }

    pub fn downcast_ref<T: 'static>(&self) -> Option<&T> {
        self.0.as_any().downcast_ref::<Slot<T>>().map(|s| &s.value)
    }

    pub fn downcast_mut<T: 'static>(&mut self) -> Option<&mut T> {
        self.0
            .as_any_mut()
            .downcast_mut::<Slot<T>>()
            .map(|s| &mut s.value)
    }

    /// Duplicates the item if it was built with [`Item::cloneable`].
    /// Whether the item was built with [`Item::cloneable`].
    pub fn is_cloneable(&self) -> bool {
        self.0.is_cloneable()
    }

    pub fn try_clone(&self) -> Option<Item> {
        self.0.try_clone().map(Item)
    }

    pub fn type_name(&self) -> &'static str {
        self.0.type_name()
    }
}

impl fmt::Debug for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Item<{}>", self.type_name())
    }
}

/// What a service invocation asks the runtime to do next.
#[derive(Debug)]
pub enum ServiceResult {
    /// Deliver the item downstream and keep running.
    Emit(Item),
    /// No output for this invocation; keep running.
    Continue,
    /// Stop this node and propagate end-of-stream downstream.
    End,
}

impl ServiceResult {
    pub fn emit<T: Send + 'static>(value: T) -> Self {
        ServiceResult::Emit(Item::new(value))
    }
}

/// Error type returned from [`Node::init`].
pub type InitError = Box<dyn std::error::Error + Send + Sync>;

/// User-implemented processing unit.
///
/// `init` runs once before any node of the skeleton is serviced; `end` runs
/// once after the last service invocation (or after end-of-stream arrives
/// without any input). A source node (no input stream) is serviced with
/// `None` until it returns [`ServiceResult::End`]; any other node is serviced
/// once per input item, in arrival order.
pub trait Node: Send {
    fn init(&mut self, _ctx: &mut Context<'_>) -> Result<(), InitError> {
        Ok(())
    }

    fn service(&mut self, input: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult;

    fn end(&mut self, _ctx: &mut Context<'_>) {}
}

impl<N: Node + ?Sized> Node for Box<N> {
    fn init(&mut self, ctx: &mut Context<'_>) -> Result<(), InitError> {
        (**self).init(ctx)
    }

    fn service(&mut self, input: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult {
        (**self).service(input, ctx)
    }

    fn end(&mut self, ctx: &mut Context<'_>) {
        (**self).end(ctx)
    }
}

/// Node built from a closure; see [`node_fn`].
pub struct FnNode<F>(F);

impl<F> Node for FnNode<F>
where
    F: FnMut(Option<Item>, &mut Context<'_>) -> ServiceResult + Send,
{
    fn service(&mut self, input: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult {
        (self.0)(input, ctx)
    }
}

/// Wraps a closure as a node with default init/end hooks.
pub fn node_fn<F>(f: F) -> FnNode<F>
where
    F: FnMut(Option<Item>, &mut Context<'_>) -> ServiceResult + Send,
{
    FnNode(f)
}

/// Typed one-in/one-out node; see [`map_fn`].
pub struct MapFn<T, U, F> {
    f: F,
    _types: PhantomData<fn(T) -> U>,
}

impl<T, U, F> Node for MapFn<T, U, F>
where
    T: 'static,
    U: Send + 'static,
    F: FnMut(T) -> U + Send,
{
    fn service(&mut self, input: Option<Item>, _ctx: &mut Context<'_>) -> ServiceResult {
        let Some(item) = input else {
            return ServiceResult::End;
        };
        match item.downcast::<T>() {
            Ok(x) => ServiceResult::emit((self.f)(x)),
            Err(other) => panic!(
                "map node expected {}, got {}",
                std::any::type_name::<T>(),
                other.type_name()
            ),
        }
    }
}

/// A node applying `f` to every input of type `T` and emitting the result.
pub fn map_fn<T, U, F>(f: F) -> MapFn<T, U, F>
where
    T: 'static,
    U: Send + 'static,
    F: FnMut(T) -> U + Send,
{
    MapFn {
        f,
        _types: PhantomData,
    }
}

/// Why an item could not be sent. The item is handed back.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct SendError {
    pub kind: SendErrorKind,
    pub item: Item,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SendErrorKind {
    #[error("retry budget exhausted on a full queue")]
    Full,
    #[error("node has no output stream")]
    NoOutput,
    #[error("broadcast requires an item built with Item::cloneable")]
    NotCloneable,
    #[error("broadcast is only available to farm emitters")]
    NotEmitter,
}

/// How long a send keeps retrying on a full queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retry {
    /// Retry until the item is accepted.
    Forever,
    /// Make at most `attempts` push attempts, spinning `ticks` iterations
    /// between them.
    Limited { attempts: u32, ticks: u32 },
}

/// Default wait between bounded retries, in spin iterations.
pub const DEFAULT_TICKS: u32 = 1000;

/// Handle given to every lifecycle hook.
pub struct Context<'a> {
    pub(crate) port: &'a mut Port,
}

impl<'a> Context<'a> {
    pub(crate) fn new(port: &'a mut Port) -> Self {
        Self { port }
    }

    /// Node id, assigned in depth-first order over the skeleton tree
    /// (farm emitter, then workers, then collector).
    pub fn id(&self) -> usize {
        self.port.id
    }

    pub fn has_output(&self) -> bool {
        self.port.has_output()
    }

    /// Sends `item` downstream, waiting as long as the queue stays full.
    pub fn send_out(&mut self, item: Item) -> Result<(), SendError> {
        self.port.push(item, Retry::Forever)
    }

    /// Sends `item` with a bounded retry budget.
    pub fn send_out_with(&mut self, item: Item, attempts: u32, ticks: u32) -> Result<(), SendError> {
        self.port.push(item, Retry::Limited { attempts, ticks })
    }

    /// From a farm emitter: delivers a copy of `item` to every worker.
    pub fn broadcast(&mut self, item: Item) -> Result<(), SendError> {
        self.port.broadcast(item)
    }

    /// From a farm emitter: the farm's load balancer.
    pub fn load_balancer(&mut self) -> Option<&mut LoadBalancer> {
        self.port.load_balancer()
    }

    /// From a farm emitter: routes subsequent tasks to `worker` until changed.
    pub fn set_victim(&mut self, worker: usize) -> Result<(), Error> {
        match self.port.load_balancer() {
            Some(lb) => lb.set_victim(worker),
            None => Err(Error::InvalidWorker {
                index: worker,
                workers: 0,
            }),
        }
    }

    /// Number of workers fed by this node, if it is a farm emitter.
    pub fn worker_count(&mut self) -> Option<usize> {
        self.port.load_balancer().map(|lb| lb.worker_count())
    }
}
