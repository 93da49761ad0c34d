//! Pipeline skeleton: stages S1 → … → Sk connected by SPSC edges.

use std::mem;
use std::time::Duration;

use crate::channel::DEFAULT_CAPACITY;
use crate::error::Error;
use crate::exec::{self, Inlet, Launcher, Leg, RunConfig};
use crate::runtime::{RunSummary, Skeleton};
use crate::stage::Stage;

/// An ordered composition of stages, each running concurrently.
///
/// The first stage is a source unless the pipeline is nested and fed by an
/// outer skeleton. With [`Pipeline::wrap_around`] the last stage's output is
/// routed back to the first stage, which is then serviced once with no input
/// and afterwards once per item coming back on the feedback edge.
///
/// On a cycle the first stage decides termination: when it returns `End`,
/// end-of-stream travels once around the loop and whatever is still in
/// flight is drained and dropped before the threads join.
pub struct Pipeline {
    stages: Vec<Stage>,
    feedback: bool,
    capacity: Option<usize>,
    trace: bool,
    started: bool,
    summary: Option<RunSummary>,
}

impl Pipeline {
    pub fn new() -> Self {
        Self {
            stages: Vec::new(),
            feedback: false,
            capacity: None,
            trace: false,
            started: false,
            summary: None,
        }
    }

    /// Appends a stage. Wrapped skeletons cannot be nested.
    pub fn add_stage(&mut self, stage: impl Into<Stage>) -> Result<&mut Self, Error> {
        if self.started {
            return Err(Error::AlreadyStarted);
        }
        let stage = stage.into();
        if stage.is_wrapped() {
            return Err(Error::NestedFeedback);
        }
        self.stages.push(stage);
        Ok(self)
    }

    /// Routes the last stage's output back to the first stage's input. Only
    /// valid on the outermost skeleton.
    pub fn wrap_around(&mut self) -> Result<&mut Self, Error> {
        if self.started {
            return Err(Error::AlreadyStarted);
        }
        self.feedback = true;
        Ok(self)
    }

    /// Slots per edge queue. Nested skeletons inherit it unless they set
    /// their own.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<&mut Self, Error> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        self.capacity = Some(capacity);
        Ok(self)
    }

    /// Enables per-node service timing for [`Skeleton::dump_stats`]. Only the
    /// outermost skeleton's setting applies.
    pub fn set_trace(&mut self, on: bool) -> &mut Self {
        self.trace = on;
        self
    }

    pub fn is_wrapped(&self) -> bool {
        self.feedback
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn thread_count(&self) -> usize {
        self.stages.iter().map(Stage::thread_count).sum()
    }

    pub(crate) fn has_output(&self) -> bool {
        self.stages.last().is_some_and(Stage::has_output)
    }

    /// Runs the pipeline and blocks until every stage has terminated.
    /// Returns the total wall time.
    pub fn run_and_wait_end(&mut self) -> Result<Duration, Error> {
        if self.started {
            return Err(Error::AlreadyStarted);
        }
        self.validate(self.feedback)?;
        self.started = true;
        let cfg = RunConfig {
            capacity: self.capacity.unwrap_or(DEFAULT_CAPACITY),
            trace: self.trace,
        };
        let (summary, result) = exec::run_to_end(Stage::Pipeline(self.detach()), self.feedback, cfg);
        self.summary = summary;
        result
    }

    pub(crate) fn detach(&mut self) -> Pipeline {
        Pipeline {
            stages: mem::take(&mut self.stages),
            feedback: self.feedback,
            capacity: self.capacity,
            trace: self.trace,
            started: false,
            summary: None,
        }
    }

    pub(crate) fn validate(&self, fed: bool) -> Result<(), Error> {
        if self.stages.is_empty() {
            return Err(Error::EmptyPipeline);
        }
        for (k, stage) in self.stages.iter().enumerate() {
            stage.validate(fed || k > 0)?;
        }
        Ok(())
    }

    pub(crate) fn spawn(
        self,
        inlet: Inlet,
        want_out: bool,
        capacity: usize,
        launcher: &mut Launcher,
    ) -> Result<Option<Vec<Leg>>, Error> {
        let capacity = self.capacity.unwrap_or(capacity);
        let last = self.stages.len() - 1;
        let mut inlet = inlet;
        for (k, stage) in self.stages.into_iter().enumerate() {
            if k == last {
                return stage.spawn(inlet, want_out, capacity, launcher);
            }
            let legs = stage
                .spawn(inlet, true, capacity, launcher)?
                .expect("inner stages always produce output");
            inlet = Inlet::from_legs(legs);
        }
        unreachable!("validated pipelines are non-empty")
    }
}

impl Default for Pipeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Skeleton for Pipeline {
    fn summary(&self) -> Option<&RunSummary> {
        self.summary.as_ref()
    }
}
