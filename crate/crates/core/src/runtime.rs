//! Runtime accessories: timing, per-node statistics, core discovery and
//! thread pinning.

use std::io;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use crate::error::Error;

/// Counters recorded by one node thread over one run.
#[derive(Debug, Clone, Default)]
pub struct NodeStats {
    pub node_id: usize,
    /// Service invocations that were given an input item.
    pub items_processed: u64,
    /// All service invocations, including source activations with no input.
    pub service_calls: u64,
    /// Time spent inside `service`. Only measured with tracing enabled.
    pub svc_time: Duration,
    /// Failed push attempts on full output queues.
    pub push_retries: u64,
    /// Polls that found the input queue empty.
    pub pop_retries: u64,
    /// Items discarded after the node stopped (drained until end-of-stream).
    pub dropped: u64,
    pub init_at: Option<Instant>,
    pub svc_start: Option<Instant>,
    pub svc_end: Option<Instant>,
    pub end_at: Option<Instant>,
}

impl NodeStats {
    pub fn new(node_id: usize) -> Self {
        Self {
            node_id,
            ..Self::default()
        }
    }

    pub fn retries(&self) -> u64 {
        self.push_retries + self.pop_retries
    }
}

/// Timing and statistics of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// From before the first thread was spawned until the last join.
    pub total: Duration,
    /// From the moment every node finished `init` until the last service loop
    /// ended. Excludes `init` and `end` hooks.
    pub work: Duration,
    pub trace: bool,
    /// One entry per node, ordered by node id.
    pub stats: Vec<NodeStats>,
}

/// Written by [`Skeleton::dump_stats`] when tracing was off for the run.
pub const TRACE_DISABLED: &str = "trace not enabled";

/// Writes one `node_id<TAB>items<TAB>svc_ms<TAB>retries` line per node, or the
/// [`TRACE_DISABLED`] notice.
pub fn write_stats<W: io::Write + ?Sized>(out: &mut W, summary: &RunSummary) -> io::Result<()> {
    if !summary.trace {
        return writeln!(out, "{TRACE_DISABLED}");
    }
    for s in &summary.stats {
        writeln!(
            out,
            "{}\t{}\t{:.3}\t{}",
            s.node_id,
            s.items_processed,
            s.svc_time.as_secs_f64() * 1e3,
            s.retries()
        )?;
    }
    Ok(())
}

/// Timing and statistics queries shared by every runnable skeleton.
pub trait Skeleton {
    fn summary(&self) -> Option<&RunSummary>;

    /// Wall time of the whole run, including `init`/`end` hooks.
    fn total_time(&self) -> Result<Duration, Error> {
        self.summary().map(|s| s.total).ok_or(Error::NotCompleted)
    }

    /// Wall time spent servicing items only.
    fn work_time(&self) -> Result<Duration, Error> {
        self.summary().map(|s| s.work).ok_or(Error::NotCompleted)
    }

    fn stats(&self) -> Result<&[NodeStats], Error> {
        self.summary()
            .map(|s| s.stats.as_slice())
            .ok_or(Error::NotCompleted)
    }

    fn dump_stats(&self, out: &mut dyn io::Write) -> Result<(), Error> {
        let summary = self.summary().ok_or(Error::NotCompleted)?;
        write_stats(out, summary).map_err(Error::Io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    Unset,
    Started(Instant),
    Stopped(Instant, Instant),
}

/// Monotonic stopwatch for timing portions of code.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    mark: Mark,
}

impl Stopwatch {
    pub fn new() -> Self {
        Self { mark: Mark::Unset }
    }

    /// Starts (or restarts) timing.
    pub fn start(&mut self) {
        self.mark = Mark::Started(Instant::now());
    }

    /// Stops timing and returns the elapsed time. Stopping an unstarted
    /// stopwatch yields zero.
    pub fn stop(&mut self) -> Duration {
        let now = Instant::now();
        let start = match self.mark {
            Mark::Unset => now,
            Mark::Started(s) => s,
            Mark::Stopped(s, _) => s,
        };
        self.mark = Mark::Stopped(start, now);
        now - start
    }

    /// Elapsed time between start and stop; `None` unless stopped.
    pub fn elapsed(&self) -> Option<Duration> {
        match self.mark {
            Mark::Stopped(s, e) => Some(e - s),
            _ => None,
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self.mark, Mark::Started(_))
    }
}

impl Default for Stopwatch {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of cores available to this process. Cached after the first call.
pub fn core_count() -> usize {
    static CORES: OnceLock<usize> = OnceLock::new();
    *CORES.get_or_init(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pinning {
    Pinned,
    /// The platform offers no affinity control; the thread runs unpinned.
    Unsupported,
}

/// Restricts the calling thread to `cpu`.
pub fn pin_thread(cpu: usize) -> Result<Pinning, Error> {
    let cores = core_count();
    if cpu >= cores {
        return Err(Error::CpuOutOfRange { cpu, cores });
    }
    affinity::pin(cpu)
}

/// CPUs the calling thread may run on, where the platform can report it.
pub fn current_affinity() -> Option<Vec<usize>> {
    affinity::current()
}

#[cfg(target_os = "linux")]
mod affinity {
    use super::Pinning;
    use crate::error::Error;
    use std::io;
    use std::mem;

    pub fn pin(cpu: usize) -> Result<Pinning, Error> {
        // SAFETY: cpu_set_t is plain data; CPU_SET stays within its bounds
        // for cpu < CPU_SETSIZE, which core_count() guarantees in practice.
        unsafe {
            let mut set: libc::cpu_set_t = mem::zeroed();
            libc::CPU_ZERO(&mut set);
            libc::CPU_SET(cpu, &mut set);
            if libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                return Err(Error::Affinity(io::Error::last_os_error()));
            }
        }
        Ok(Pinning::Pinned)
    }

    pub fn current() -> Option<Vec<usize>> {
        // SAFETY: as above.
        unsafe {
            let mut set: libc::cpu_set_t = mem::zeroed();
            if libc::sched_getaffinity(0, mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return None;
            }
            let max = libc::CPU_SETSIZE as usize;
            Some((0..max).filter(|&c| libc::CPU_ISSET(c, &set)).collect())
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod affinity {
    use super::Pinning;
    use crate::error::Error;

    pub fn pin(_cpu: usize) -> Result<Pinning, Error> {
        Ok(Pinning::Unsupported)
    }

    pub fn current() -> Option<Vec<usize>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn stopwatch_states() {
        let mut sw = Stopwatch::new();
        assert_eq!(sw.elapsed(), None);
        sw.start();
        assert!(sw.is_running());
        assert_eq!(sw.elapsed(), None);
        thread::sleep(Duration::from_millis(2));
        let d = sw.stop();
        assert!(d >= Duration::from_millis(2));
        assert_eq!(sw.elapsed(), Some(d));
    }

    #[test]
    fn core_count_is_stable_and_positive() {
        let a = core_count();
        assert!(a >= 1);
        assert_eq!(a, core_count());
    }

    #[test]
    fn pin_out_of_range_fails() {
        let n = core_count();
        assert!(matches!(pin_thread(n), Err(Error::CpuOutOfRange { .. })));
    }

    #[test]
    fn pin_to_core_zero_reads_back() {
        thread::spawn(|| match pin_thread(0).unwrap() {
            Pinning::Pinned => {
                if let Some(set) = current_affinity() {
                    assert_eq!(set, vec![0]);
                }
            }
            Pinning::Unsupported => {}
        })
        .join()
        .unwrap();
    }

    #[test]
    fn stats_disabled_notice() {
        let summary = RunSummary {
            total: Duration::ZERO,
            work: Duration::ZERO,
            trace: false,
            stats: vec![NodeStats::new(0)],
        };
        let mut out = Vec::new();
        write_stats(&mut out, &summary).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "trace not enabled\n");
    }

    #[test]
    fn stats_lines_are_tab_separated() {
        let mut s = NodeStats::new(3);
        s.items_processed = 10;
        s.svc_time = Duration::from_micros(1500);
        s.push_retries = 2;
        s.pop_retries = 5;
        let summary = RunSummary {
            total: Duration::ZERO,
            work: Duration::ZERO,
            trace: true,
            stats: vec![s],
        };
        let mut out = Vec::new();
        write_stats(&mut out, &summary).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "3\t10\t1.500\t7\n");
    }
}
