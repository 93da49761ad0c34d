use crate::channel::bounded;
use crate::error::Error;
use crate::exec::{Inlet, Launcher, Leg, Outlet};
use crate::farm::Farm;
use crate::node::Node;
use crate::pipeline::Pipeline;

/// Anything that can sit in a pipeline stage or a farm worker slot: a plain
/// node or a nested skeleton.
pub enum Stage {
    Node(Box<dyn Node>),
    Pipeline(Pipeline),
    Farm(Farm),
}

impl<N: Node + 'static> From<N> for Stage {
    fn from(node: N) -> Self {
        Stage::Node(Box::new(node))
    }
}

impl From<Pipeline> for Stage {
    fn from(p: Pipeline) -> Self {
        Stage::Pipeline(p)
    }
}

impl From<Farm> for Stage {
    fn from(f: Farm) -> Self {
        Stage::Farm(f)
    }
}

impl Stage {
    pub fn is_wrapped(&self) -> bool {
        match self {
            Stage::Node(_) => false,
            Stage::Pipeline(p) => p.is_wrapped(),
            Stage::Farm(f) => f.is_wrapped(),
        }
    }

    /// Number of threads this stage will run on.
    pub fn thread_count(&self) -> usize {
        match self {
            Stage::Node(_) => 1,
            Stage::Pipeline(p) => p.thread_count(),
            Stage::Farm(f) => f.thread_count(),
        }
    }

    /// Whether the stage produces a terminal output stream.
    pub fn has_output(&self) -> bool {
        match self {
            Stage::Node(_) => true,
            Stage::Pipeline(p) => p.has_output(),
            Stage::Farm(f) => f.has_output(),
        }
    }

    /// `fed` tells whether the stage receives an input stream.
    pub(crate) fn validate(&self, fed: bool) -> Result<(), Error> {
        match self {
            Stage::Node(_) => Ok(()),
            Stage::Pipeline(p) => p.validate(fed),
            Stage::Farm(f) => f.validate(fed),
        }
    }

    /// Launches the stage's threads. Returns the consumer ends of its output
    /// legs when `want_out` is set.
    pub(crate) fn spawn(
        self,
        inlet: Inlet,
        want_out: bool,
        capacity: usize,
        launcher: &mut Launcher,
    ) -> Result<Option<Vec<Leg>>, Error> {
        match self {
            Stage::Node(node) => spawn_node(node, inlet, want_out, capacity, launcher),
            Stage::Pipeline(p) => p.spawn(inlet, want_out, capacity, launcher),
            Stage::Farm(f) => f.spawn(inlet, want_out, capacity, launcher),
        }
    }
}

pub(crate) fn spawn_node(
    node: Box<dyn Node>,
    inlet: Inlet,
    want_out: bool,
    capacity: usize,
    launcher: &mut Launcher,
) -> Result<Option<Vec<Leg>>, Error> {
    let (out, legs) = if want_out {
        let (p, c) = bounded(capacity)?;
        (Outlet::Spsc(p), Some(vec![c]))
    } else {
        (Outlet::Sink, None)
    };
    launcher.launch(node, inlet, out)?;
    Ok(legs)
}
