//! Data-parallel map built on the farm template: a split emitter partitions
//! each task, workers compute the parts, and a compose collector rebuilds the
//! task once every part has come back.
//!
//! The stock instance is square matrix multiplication, where a part is one
//! inner product `c[i][j]` (or a whole row of `c` in coarse mode).

use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::ops::{Add, Mul};
use std::sync::{Arc, Mutex};

use crate::error::Error;
use crate::farm::Farm;
use crate::node::{Context, Item, Node, ServiceResult};
use crate::pipeline::Pipeline;
use crate::stage::Stage;

/// Element type usable in [`Matrix`] products.
pub trait Scalar:
    Copy + Default + Debug + PartialEq + Send + Sync + Add<Output = Self> + Mul<Output = Self> + From<u8> + 'static
{
}

impl<T> Scalar for T where
    T: Copy + Default + Debug + PartialEq + Send + Sync + Add<Output = T> + Mul<Output = T> + From<u8> + 'static
{
}

/// Row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::default(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { T::from(1) } else { T::default() })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    /// Panics unless every row has `rows.len()` entries.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        Self {
            n,
            data: rows.concat(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.n + j] = x;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// `Σ_k a[i][k] · b[k][j]`.
pub fn compute_partial<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, i: usize, j: usize) -> T {
    (0..a.n).fold(T::default(), |acc, k| acc + a.get(i, k) * b.get(k, j))
}

/// One matrix product to compute. `c` is filled in by the map.
#[derive(Debug, Clone)]
pub struct MapTask<T> {
    pub tag: u64,
    pub a: Arc<Matrix<T>>,
    pub b: Arc<Matrix<T>>,
    pub c: Matrix<T>,
}

impl<T: Scalar> MapTask<T> {
    /// Panics if `a` and `b` differ in dimension.
    pub fn new(tag: u64, a: Matrix<T>, b: Matrix<T>) -> Self {
        assert_eq!(a.dim(), b.dim(), "operands must have equal dimension");
        let n = a.dim();
        Self {
            tag,
            a: Arc::new(a),
            b: Arc::new(b),
            c: Matrix::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }
}

/// Operands shared by all parts of one task.
#[derive(Debug)]
pub struct Operands<T> {
    pub tag: u64,
    pub a: Arc<Matrix<T>>,
    pub b: Arc<Matrix<T>>,
}

impl<T> Operands<T> {
    pub fn dim(&self) -> usize {
        self.a.n
    }
}

/// Portion of `c` a subtask covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Element { i: usize, j: usize },
    Row { i: usize },
    /// Completion notice for an `n = 0` task.
    Empty,
}

#[derive(Debug)]
pub struct SubTask<T> {
    pub part: Part,
    pub parent: Arc<Operands<T>>,
}

#[derive(Debug)]
pub enum Value<T> {
    Element(T),
    Row(Vec<T>),
    Empty,
}

#[derive(Debug)]
pub struct PartialResult<T> {
    pub part: Part,
    pub value: Value<T>,
    pub parent: Arc<Operands<T>>,
}

impl<T: Scalar> SubTask<T> {
    pub fn compute(self) -> PartialResult<T> {
        let (a, b) = (&self.parent.a, &self.parent.b);
        let value = match self.part {
            Part::Element { i, j } => Value::Element(compute_partial(a, b, i, j)),
            Part::Row { i } => Value::Row((0..a.n).map(|j| compute_partial(a, b, i, j)).collect()),
            Part::Empty => Value::Empty,
        };
        PartialResult {
            part: self.part,
            value,
            parent: self.parent,
        }
    }
}

/// Subtask size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// One inner product per subtask.
    #[default]
    Element,
    /// One row of `c` per subtask.
    Row,
}

/// Enumerates the subtasks of `task` in row-major order.
pub fn split<T: Scalar>(task: &MapTask<T>, granularity: Granularity) -> Vec<SubTask<T>> {
    let parent = Arc::new(Operands {
        tag: task.tag,
        a: Arc::clone(&task.a),
        b: Arc::clone(&task.b),
    });
    let n = task.dim();
    let parts: Vec<Part> = match (n, granularity) {
        (0, _) => vec![Part::Empty],
        (_, Granularity::Element) => (0..n)
            .flat_map(|i| (0..n).map(move |j| Part::Element { i, j }))
            .collect(),
        (_, Granularity::Row) => (0..n).map(|i| Part::Row { i }).collect(),
    };
    parts
        .into_iter()
        .map(|part| SubTask {
            part,
            parent: Arc::clone(&parent),
        })
        .collect()
}

/// A partial that would overwrite an already consolidated element.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("duplicate partial ({i}, {j}) for task {tag}")]
pub struct DuplicatePartial {
    pub tag: u64,
    pub i: usize,
    pub j: usize,
}

struct Pending<T> {
    c: Matrix<T>,
    seen: Vec<bool>,
    filled: usize,
}

/// Per-tag consolidation of partial results.
pub struct Composer<T> {
    pending: HashMap<u64, Pending<T>>,
}

impl<T: Scalar> Composer<T> {
    pub fn new() -> Self {
        Self {
            pending: HashMap::new(),
        }
    }

    /// Tasks with some but not all partials received.
    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Writes the partial into its task's result. Returns the task once all
    /// `n²` elements are in.
    pub fn accept(&mut self, pr: PartialResult<T>) -> Result<Option<MapTask<T>>, DuplicatePartial> {
        let parent = pr.parent;
        let n = parent.dim();
        let tag = parent.tag;
        let done = |c| MapTask {
            tag,
            a: Arc::clone(&parent.a),
            b: Arc::clone(&parent.b),
            c,
        };
        if n == 0 {
            return Ok(Some(done(Matrix::zeros(0))));
        }
        let st = self.pending.entry(tag).or_insert_with(|| Pending {
            c: Matrix::zeros(n),
            seen: vec![false; n * n],
            filled: 0,
        });
        let mut put = |i: usize, j: usize, x: T| {
            let k = i * n + j;
            if std::mem::replace(&mut st.seen[k], true) {
                return Err(DuplicatePartial { tag, i, j });
            }
            st.c.set(i, j, x);
            st.filled += 1;
            Ok(())
        };
        match (pr.part, pr.value) {
            (Part::Element { i, j }, Value::Element(x)) => put(i, j, x)?,
            (Part::Row { i }, Value::Row(xs)) => {
                for (j, x) in xs.into_iter().enumerate() {
                    put(i, j, x)?;
                }
            }
            (part, _) => panic!("malformed partial result {part:?} for task {tag}"),
        }
        if st.filled == n * n {
            let st = self.pending.remove(&tag).unwrap();
            Ok(Some(done(st.c)))
        } else {
            Ok(None)
        }
    }
}

impl<T: Scalar> Default for Composer<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect<T: 'static>(item: Item, role: &str) -> T {
    item.downcast::<T>().unwrap_or_else(|other| {
        panic!(
            "{role} expected {}, got {}",
            std::any::type_name::<T>(),
            other.type_name()
        )
    })
}

/// Split emitter: streams the subtasks of every incoming [`MapTask`].
pub struct Split<T> {
    granularity: Granularity,
    _scalar: std::marker::PhantomData<fn(T)>,
}

impl<T: Scalar> Split<T> {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Node for Split<T> {
    fn service(&mut self, input: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult {
        let Some(item) = input else {
            return ServiceResult::End;
        };
        let task: MapTask<T> = expect(item, "split");
        for st in split(&task, self.granularity) {
            if ctx.send_out(Item::new(st)).is_err() {
                panic!("split could not deliver a subtask");
            }
        }
        ServiceResult::Continue
    }
}

/// Worker computing one subtask per service call.
pub struct Worker<T>(std::marker::PhantomData<fn(T)>);

impl<T: Scalar> Worker<T> {
    pub fn new() -> Self {
        Self(std::marker::PhantomData)
    }
}

impl<T: Scalar> Default for Worker<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Node for Worker<T> {
    fn service(&mut self, input: Option<Item>, _ctx: &mut Context<'_>) -> ServiceResult {
        let Some(item) = input else {
            return ServiceResult::End;
        };
        ServiceResult::emit(expect::<SubTask<T>>(item, "map worker").compute())
    }
}

/// Compose collector: emits each task once all of its parts arrived.
/// A duplicate partial is an internal error and panics the node.
pub struct Compose<T>(Composer<T>);

impl<T: Scalar> Compose<T> {
    pub fn new() -> Self {
        Self(Composer::new())
    }
}

impl<T: Scalar> Default for Compose<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Node for Compose<T> {
    fn service(&mut self, input: Option<Item>, _ctx: &mut Context<'_>) -> ServiceResult {
        let Some(item) = input else {
            return ServiceResult::End;
        };
        match self.0.accept(expect(item, "compose")) {
            Ok(Some(task)) => ServiceResult::emit(task),
            Ok(None) => ServiceResult::Continue,
            Err(e) => panic!("{e}"),
        }
    }
}

/// A map skeleton: splitter, workers and composer arranged as a farm. Use it
/// as a pipeline stage (or farm worker) via `Into<Stage>`.
pub struct Map {
    farm: Farm,
}

impl Map {
    pub fn new(
        splitter: impl Node + 'static,
        workers: Vec<Box<dyn Node>>,
        composer: impl Node + 'static,
    ) -> Result<Self, Error> {
        if workers.is_empty() {
            return Err(Error::NoWorkers);
        }
        let mut farm = Farm::new();
        farm.add_emitter(splitter)?;
        farm.add_workers(workers)?;
        farm.add_collector(composer)?;
        Ok(Self { farm })
    }

    /// Matrix multiplication map with `workers` workers.
    pub fn matmul<T: Scalar>(workers: usize, granularity: Granularity) -> Result<Self, Error> {
        let ws = (0..workers)
            .map(|_| Box::new(Worker::<T>::new()) as Box<dyn Node>)
            .collect();
        Self::new(Split::<T>::new(granularity), ws, Compose::<T>::new())
    }

    pub fn into_farm(self) -> Farm {
        self.farm
    }
}

impl From<Map> for Stage {
    fn from(m: Map) -> Self {
        Stage::Farm(m.farm)
    }
}

/// Multiplies every task's operands on a matrix-multiply map and hands the
/// completed tasks back, in completion order. Tags must be unique.
pub fn map_run<T: Scalar>(
    workers: usize,
    granularity: Granularity,
    tasks: Vec<MapTask<T>>,
) -> Result<Vec<MapTask<T>>, Error> {
    let mut tags = HashSet::new();
    if let Some(t) = tasks.iter().find(|t| !tags.insert(t.tag)) {
        return Err(Error::DuplicateTag(t.tag));
    }
    let map = Map::matmul::<T>(workers, granularity)?;
    let mut queue = tasks.into_iter();
    let done = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&done);

    let mut p = Pipeline::new();
    p.add_stage(crate::node::node_fn(move |_, _| match queue.next() {
        Some(t) => ServiceResult::emit(t),
        None => ServiceResult::End,
    }))?;
    p.add_stage(map)?;
    p.add_stage(crate::node::node_fn(move |x, _| {
        if let Some(x) = x {
            sink.lock().unwrap().push(expect::<MapTask<T>>(x, "map_run sink"));
        }
        ServiceResult::Continue
    }))?;
    p.run_and_wait_end()?;
    let out = std::mem::take(&mut *done.lock().unwrap());
    Ok(out)
}
