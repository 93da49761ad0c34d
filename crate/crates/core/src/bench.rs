//! Example topologies and the synthetic speedup benchmark behind the `bench`
//! binary. Every example checks its own output against an independent
//! computation so the binary can fail with a nonzero exit code.

use std::collections::BTreeMap;
use std::fmt;
use std::hint::black_box;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use crate::accelerator::Accelerator;
use crate::channel::DEFAULT_CAPACITY;
use crate::error::Error;
use crate::farm::Farm;
use crate::map::{map_run, Granularity, MapTask, Matrix};
use crate::node::{map_fn, node_fn, Context, Item, Node, ServiceResult};
use crate::pipeline::Pipeline;
use crate::runtime::{core_count, Skeleton};

/// Smallest synthetic task cost the speedup benchmark accepts.
pub const MIN_TASK_COST_US: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Hello,
    Sieve,
    Farm,
    FarmNoc,
    Broadcast,
    Map,
    Accel,
    Speedup,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Hello,
        Mode::Sieve,
        Mode::Farm,
        Mode::FarmNoc,
        Mode::Broadcast,
        Mode::Map,
        Mode::Accel,
        Mode::Speedup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hello => "hello",
            Mode::Sieve => "sieve",
            Mode::Farm => "farm",
            Mode::FarmNoc => "farm-noc",
            Mode::Broadcast => "broadcast",
            Mode::Map => "map",
            Mode::Accel => "accel",
            Mode::Speedup => "speedup",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub workers: usize,
    pub stream_len: u64,
    pub task_cost_us: u64,
    pub queue_capacity: usize,
    pub trace: bool,
    pub report: Option<PathBuf>,
    /// Matrix dimension for `map`.
    pub dim: usize,
}

impl BenchConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            workers: 2,
            stream_len: 10,
            task_cost_us: 200,
            queue_capacity: DEFAULT_CAPACITY,
            trace: false,
            report: None,
            dim: 16,
        }
    }
}

/// One self-check of an example run.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of a bench run: key/value results, self-checks and stats text.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub values: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub stats: String,
}

impl Report {
    fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_owned(), value.to_string());
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        });
    }

    fn stats_of(&mut self, skel: &dyn Skeleton) -> Result<(), Error> {
        let mut buf = Vec::new();
        skel.dump_stats(&mut buf)?;
        self.stats = String::from_utf8_lossy(&buf).into_owned();
        if let (Ok(total), Ok(work)) = (skel.total_time(), skel.work_time()) {
            self.set("total_ms", ms(total));
            self.set("work_ms", ms(work));
        }
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Machine-readable form: one `key=value` per line.
    pub fn write_key_values<W: Write>(&self, out: &mut W) -> io::Result<()> {
        for (k, v) in &self.values {
            writeln!(out, "{k}={v}")?;
        }
        Ok(())
    }

    /// Human-readable table followed by check results and stats.
    pub fn write_human<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let width = self.values.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in &self.values {
            writeln!(out, "{k:<width$}  {v}")?;
        }
        for n in &self.notes {
            writeln!(out, "note: {n}")?;
        }
        for c in &self.checks {
            let tag = if c.passed { "ok" } else { "FAILED" };
            writeln!(out, "check {}: {tag} ({})", c.name, c.detail)?;
        }
        if !self.stats.is_empty() {
            out.write_all(self.stats.as_bytes())?;
        }
        Ok(())
    }
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Calibrated busy loop used as synthetic task cost. Counts iterations
/// rather than polling the clock so a preempted task still does its full
/// share of work.
#[derive(Debug, Clone, Copy)]
pub struct Spin {
    iters_per_us: f64,
}

fn burn(iters: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..iters {
        x = black_box(x.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(i));
    }
    x
}

impl Spin {
    /// Best rate over several batches, so a batch slowed by preemption does
    /// not skew the estimate.
    pub fn calibrate() -> Self {
        const BATCH: u64 = 200_000;
        burn(BATCH);
        let best = (0..9)
            .map(|_| {
                let t = Instant::now();
                black_box(burn(BATCH));
                t.elapsed()
            })
            .min()
            .unwrap();
        let us = best.as_secs_f64() * 1e6;
        Self {
            iters_per_us: BATCH as f64 / us.max(1e-3),
        }
    }

    /// Process-wide calibration, measured on first use.
    pub fn global() -> Spin {
        static SPIN: OnceLock<Spin> = OnceLock::new();
        *SPIN.get_or_init(Spin::calibrate)
    }

    pub fn iters_per_us(&self) -> f64 {
        self.iters_per_us
    }

    pub fn run(&self, us: u64) {
        black_box(burn((self.iters_per_us * us as f64).round() as u64));
    }
}

/// Runs the example selected by `cfg.mode`.
pub fn run_example(cfg: &BenchConfig) -> Result<Report, Error> {
    let mut r = Report::default();
    r.set("mode", cfg.mode);
    match cfg.mode {
        Mode::Hello => hello(cfg, &mut r)?,
        Mode::Sieve => sieve(cfg, &mut r)?,
        Mode::Farm => farm(cfg, &mut r)?,
        Mode::FarmNoc => farm_noc(cfg, &mut r)?,
        Mode::Broadcast => broadcast(cfg, &mut r)?,
        Mode::Map => map(cfg, &mut r)?,
        Mode::Accel => accel(cfg, &mut r)?,
        Mode::Speedup => return run_speedup(cfg).map(|s| s.report(cfg)),
    }
    if !cfg.trace && r.stats.is_empty() {
        r.stats = format!("{}\n", crate::runtime::TRACE_DISABLED);
    }
    Ok(r)
}

type Shared<T> = Arc<Mutex<Vec<T>>>;

fn collected<T>() -> (Shared<T>, Shared<T>) {
    let v = Arc::new(Mutex::new(Vec::new()));
    (Arc::clone(&v), v)
}

fn take<T>(v: &Mutex<Vec<T>>) -> Vec<T> {
    std::mem::take(&mut *v.lock().unwrap())
}

fn configure_pipe(p: &mut Pipeline, cfg: &BenchConfig) -> Result<(), Error> {
    p.set_capacity(cfg.queue_capacity)?.set_trace(cfg.trace);
    Ok(())
}

fn configure_farm(f: &mut Farm, cfg: &BenchConfig) -> Result<(), Error> {
    f.set_capacity(cfg.queue_capacity)?.set_trace(cfg.trace);
    Ok(())
}

/// Two stages: the first emits "Hello" `stream_len` times, the second
/// completes each greeting.
fn hello(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let (out, sink) = collected::<String>();
    let mut left = cfg.stream_len;
    let mut p = Pipeline::new();
    configure_pipe(&mut p, cfg)?;
    p.add_stage(node_fn(move |_, _| {
        if left == 0 {
            return ServiceResult::End;
        }
        left -= 1;
        ServiceResult::emit(String::from("Hello"))
    }))?;
    p.add_stage(node_fn(move |x, _| {
        if let Some(s) = x.and_then(|x| x.downcast::<String>().ok()) {
            sink.lock().unwrap().push(format!("{s} World"));
        }
        ServiceResult::Continue
    }))?;
    p.run_and_wait_end()?;
    r.stats_of(&p)?;
    let got = take(&out);
    r.set("greetings", got.len());
    let ok = got.len() as u64 == cfg.stream_len && got.iter().all(|s| s == "Hello World");
    r.check("greetings", ok, format!("{} of {} read \"Hello World\"", got.len(), cfg.stream_len));
    Ok(())
}

/// Pipeline prime sieve: each stage keeps the first number it sees and
/// filters its multiples; the printer receives whatever survives.
struct SieveStage {
    prime: Option<u64>,
    held: Arc<Mutex<Vec<(usize, u64)>>>,
}

impl Node for SieveStage {
    fn service(&mut self, input: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult {
        let Some(x) = input.and_then(|x| x.downcast::<u64>().ok()) else {
            return ServiceResult::End;
        };
        match self.prime {
            None => {
                self.prime = Some(x);
                ServiceResult::Continue
            }
            Some(p) if x % p == 0 => {
                let _ = ctx;
                ServiceResult::Continue
            }
            Some(_) => ServiceResult::emit(x),
        }
    }

    fn end(&mut self, ctx: &mut Context<'_>) {
        if let Some(p) = self.prime {
            self.held.lock().unwrap().push((ctx.id(), p));
        }
    }
}

/// Independent oracle: trial division over the generator's range.
fn primes_below(limit: u64) -> Vec<u64> {
    (2..limit)
        .filter(|&n| (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0))
        .collect()
}

fn sieve(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let held = Arc::new(Mutex::new(Vec::new()));
    let (printed, sink) = collected::<u64>();
    let mut next = 2u64;
    let limit = cfg.stream_len;
    let mut p = Pipeline::new();
    configure_pipe(&mut p, cfg)?;
    p.add_stage(node_fn(move |_, _| {
        if next >= limit {
            return ServiceResult::End;
        }
        next += 1;
        ServiceResult::emit(next - 1)
    }))?;
    for _ in 0..cfg.workers {
        p.add_stage(SieveStage {
            prime: None,
            held: Arc::clone(&held),
        })?;
    }
    p.add_stage(node_fn(move |x, _| {
        if let Some(x) = x.and_then(|x| x.downcast::<u64>().ok()) {
            sink.lock().unwrap().push(x);
        }
        ServiceResult::Continue
    }))?;
    let t = Instant::now();
    p.run_and_wait_end()?;
    let elapsed = t.elapsed();
    r.stats_of(&p)?;

    let mut held = take(&held);
    held.sort();
    let primes: Vec<u64> = held.iter().map(|&(_, p)| p).collect();
    let printed = take(&printed);
    let oracle = primes_below(limit);
    let k = cfg.workers.min(oracle.len());
    r.set("primes", join(&primes));
    r.set("boundary", printed.first().map_or("none".into(), u64::to_string));
    r.set("elapsed_ms", ms(elapsed));
    r.check(
        "sieve primes",
        primes == oracle[..k],
        format!("held {:?}, expected {:?}", primes, &oracle[..k]),
    );
    r.check(
        "printer boundary",
        printed.first() == oracle.get(k),
        format!("first printed {:?}, expected {:?}", printed.first(), oracle.get(k)),
    );
    r.check(
        "survivors are prime",
        printed.iter().all(|x| oracle.contains(x)) || k < cfg.workers,
        format!("{} values reached the printer", printed.len()),
    );
    Ok(())
}

fn counting_source(from: u64, to: u64) -> impl Node {
    let mut next = from;
    node_fn(move |_, _| {
        if next >= to {
            return ServiceResult::End;
        }
        next += 1;
        ServiceResult::emit(next - 1)
    })
}

/// Emitter generating 1..stream_len, workers incrementing, collector
/// gathering.
fn farm(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let (got, sink) = collected::<u64>();
    let mut f = Farm::new();
    configure_farm(&mut f, cfg)?;
    f.add_emitter(counting_source(1, cfg.stream_len))?;
    f.add_workers((0..cfg.workers).map(|_| map_fn(|x: u64| x + 1)))?;
    f.add_collector(node_fn(move |x, _| {
        if let Some(x) = x.and_then(|x| x.downcast::<u64>().ok()) {
            sink.lock().unwrap().push(x);
        }
        ServiceResult::Continue
    }))?;
    f.run_and_wait_end()?;
    r.stats_of(&f)?;
    let mut got = take(&got);
    got.sort_unstable();
    let expected: Vec<u64> = (1..cfg.stream_len).map(|i| i + 1).collect();
    r.set("collected", join(&got));
    r.check("collected multiset", got == expected, format!("expected {expected:?}"));
    Ok(())
}

/// Farm without collector: each worker stores `t + 1` for task `(i, i²)` at
/// `results[i]` in a shared vector.
fn farm_noc(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let n = cfg.stream_len as usize;
    let results: Arc<Vec<AtomicU64>> = Arc::new((0..n).map(|_| AtomicU64::new(0)).collect());
    let mut i = 1u64;
    let len = cfg.stream_len;
    let mut f = Farm::new();
    configure_farm(&mut f, cfg)?;
    f.add_emitter(node_fn(move |_, _| {
        if i >= len {
            return ServiceResult::End;
        }
        i += 1;
        ServiceResult::emit((i - 1, (i - 1) * (i - 1)))
    }))?;
    for _ in 0..cfg.workers {
        let results = Arc::clone(&results);
        f.add_worker(node_fn(move |x, _| {
            if let Some((i, t)) = x.and_then(|x| x.downcast::<(u64, u64)>().ok()) {
                results[i as usize].store(t + 1, Ordering::Relaxed);
            }
            ServiceResult::Continue
        }))?;
    }
    f.run_and_wait_end()?;
    r.stats_of(&f)?;
    let got: Vec<u64> = results.iter().map(|x| x.load(Ordering::Relaxed)).collect();
    let expected: Vec<u64> = (0..cfg.stream_len).map(|i| if i == 0 { 0 } else { i * i + 1 }).collect();
    r.set("results", join(&got));
    r.check("results vector", got == expected, format!("expected {expected:?}"));
    Ok(())
}

/// Every task goes to every worker; even-indexed workers square, odd ones
/// take the square root.
fn broadcast(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let counts: Arc<Vec<AtomicU64>> = Arc::new((0..cfg.workers).map(|_| AtomicU64::new(0)).collect());
    let (got, sink) = collected::<(usize, f64)>();
    let mut next = 1u64;
    let len = cfg.stream_len;
    let mut f = Farm::new();
    configure_farm(&mut f, cfg)?;
    f.add_emitter(node_fn(move |_, ctx| {
        if next > len {
            return ServiceResult::End;
        }
        next += 1;
        match ctx.broadcast(Item::cloneable(next - 1)) {
            Ok(()) => ServiceResult::Continue,
            Err(e) => panic!("broadcast failed: {e}"),
        }
    }))?;
    for w in 0..cfg.workers {
        let counts = Arc::clone(&counts);
        f.add_worker(node_fn(move |x, _| {
            let Some(x) = x.and_then(|x| x.downcast::<u64>().ok()) else {
                return ServiceResult::Continue;
            };
            counts[w].fetch_add(1, Ordering::Relaxed);
            let x = x as f64;
            ServiceResult::emit((w, if w % 2 == 0 { x * x } else { x.sqrt() }))
        }))?;
    }
    f.add_collector(node_fn(move |x, _| {
        if let Some(v) = x.and_then(|x| x.downcast::<(usize, f64)>().ok()) {
            sink.lock().unwrap().push(v);
        }
        ServiceResult::Continue
    }))?;
    f.run_and_wait_end()?;
    r.stats_of(&f)?;
    let counts: Vec<u64> = counts.iter().map(|c| c.load(Ordering::Relaxed)).collect();
    let got = take(&got);
    r.set("per_worker", join(&counts));
    r.set("results", got.len());
    r.check(
        "every worker saw every task",
        counts.iter().all(|&c| c == len),
        format!("counts {counts:?}, expected {len} each"),
    );
    let mut sums = vec![0.0f64; cfg.workers];
    for (w, v) in &got {
        sums[*w] += v;
    }
    let squares: f64 = (1..=len).map(|x| (x * x) as f64).sum();
    let roots: f64 = (1..=len).map(|x| (x as f64).sqrt()).sum();
    let sums_ok = sums.iter().enumerate().all(|(w, s)| {
        let want = if w % 2 == 0 { squares } else { roots };
        (s - want).abs() <= 1e-9 * want.max(1.0)
    });
    r.check(
        "function results",
        got.len() as u64 == len * cfg.workers as u64 && sums_ok,
        format!("{} results", got.len()),
    );
    Ok(())
}

fn map_operand(n: usize, salt: u64) -> Matrix<i64> {
    Matrix::from_fn(n, |i, j| ((salt * 31 + i as u64 * 7 + j as u64 * 3) % 11) as i64 - 5)
}

/// Schoolbook product with the i-k-j loop order, written independently of
/// the map's inner-product kernel.
fn serial_product(a: &Matrix<i64>, b: &Matrix<i64>) -> Matrix<i64> {
    let n = a.dim();
    let mut c = vec![vec![0i64; n]; n];
    for (i, row) in c.iter_mut().enumerate() {
        for k in 0..n {
            let aik = a.get(i, k);
            for (j, x) in row.iter_mut().enumerate() {
                *x += aik * b.get(k, j);
            }
        }
    }
    Matrix::from_rows(&c)
}

fn map(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let tasks: Vec<MapTask<i64>> = (0..cfg.stream_len)
        .map(|t| MapTask::new(t, map_operand(cfg.dim, 2 * t), map_operand(cfg.dim, 2 * t + 1)))
        .collect();
    let t = Instant::now();
    let done = map_run(cfg.workers, Granularity::Element, tasks)?;
    r.set("elapsed_ms", ms(t.elapsed()));
    r.set("tasks", done.len());
    let mut tags: Vec<u64> = done.iter().map(|t| t.tag).collect();
    tags.sort_unstable();
    r.check(
        "every task completed once",
        tags == (0..cfg.stream_len).collect::<Vec<_>>(),
        format!("{} tasks back", done.len()),
    );
    let wrong: Vec<u64> = done
        .iter()
        .filter(|t| t.c != serial_product(&t.a, &t.b))
        .map(|t| t.tag)
        .collect();
    r.check("products match serial oracle", wrong.is_empty(), format!("mismatching tags {wrong:?}"));
    Ok(())
}

/// Increment farm run as an accelerator; a second thread reads results while
/// the host offloads.
fn accel(cfg: &BenchConfig, r: &mut Report) -> Result<(), Error> {
    let mut f = Farm::new();
    configure_farm(&mut f, cfg)?;
    f.add_workers((0..cfg.workers).map(|_| map_fn(|x: u64| x + 1)))?;
    f.add_collector(map_fn(|x: u64| x))?;
    let mut acc = Accelerator::new(f);
    acc.set_capacity(cfg.queue_capacity)?.set_trace(cfg.trace);
    acc.run_then_freeze()?;
    let mut results = acc.take_results()?;
    let reader = thread::spawn(move || {
        let mut got = Vec::new();
        while let Some(x) = results.load_result() {
            got.push(x.downcast::<u64>().expect("accelerator yields u64"));
        }
        got
    });
    for i in 1..=cfg.stream_len {
        acc.offload(Item::new(i))?;
    }
    acc.offload_eos()?;
    let mut got = reader.join().expect("result reader panicked");
    acc.wait()?;
    r.stats_of(&acc)?;
    got.sort_unstable();
    let expected: Vec<u64> = (1..=cfg.stream_len).map(|i| i + 1).collect();
    r.set("results", got.len());
    r.check("one result per task", got == expected, format!("{} of {} results", got.len(), expected.len()));
    Ok(())
}

/// Measurements from [`run_speedup`].
#[derive(Debug, Clone)]
pub struct SpeedupReport {
    pub workers: usize,
    pub tasks: u64,
    pub task_cost_us: u64,
    pub cores: usize,
    pub serial: Duration,
    pub parallel: Duration,
    /// `T_seq / T_par` for the farm.
    pub speedup: f64,
    /// Farm model: `nw` (the farm takes `T_seq / nw`).
    pub predicted: f64,
    /// Mean dispatch-to-collection time per task in the farm.
    pub latency: Duration,
    /// Serial time per task.
    pub serial_task: Duration,
    pub stages: usize,
    pub pipe_serial: Duration,
    pub pipe_parallel: Duration,
    /// `Σ T_Si / max T_Si`; `k` for balanced stages.
    pub pipe_predicted: f64,
    /// Measured pipeline time per item.
    pub pipe_service: Duration,
    /// Serial time of one stage on one item.
    pub pipe_max_stage: Duration,
    pub notes: Vec<String>,
}

impl SpeedupReport {
    pub fn pipe_speedup(&self) -> f64 {
        self.pipe_serial.as_secs_f64() / self.pipe_parallel.as_secs_f64()
    }

    /// Relative gap between measured pipeline service time and the slowest
    /// stage's time.
    pub fn pipe_service_error(&self) -> f64 {
        let max = self.pipe_max_stage.as_secs_f64();
        (self.pipe_service.as_secs_f64() - max).abs() / max
    }

    pub fn latency_ratio(&self) -> f64 {
        self.latency.as_secs_f64() / self.serial_task.as_secs_f64()
    }

    pub fn report(&self, cfg: &BenchConfig) -> Report {
        let mut r = Report::default();
        r.set("mode", cfg.mode);
        r.set("workers", self.workers);
        r.set("tasks", self.tasks);
        r.set("task_cost_us", self.task_cost_us);
        r.set("cores", self.cores);
        r.set("serial_ms", ms(self.serial));
        r.set("parallel_ms", ms(self.parallel));
        r.set("speedup", format!("{:.3}", self.speedup));
        r.set("predicted", format!("{:.3}", self.predicted));
        r.set("latency_us", format!("{:.1}", self.latency.as_secs_f64() * 1e6));
        r.set("serial_task_us", format!("{:.1}", self.serial_task.as_secs_f64() * 1e6));
        r.set("pipe_stages", self.stages);
        r.set("pipe_serial_ms", ms(self.pipe_serial));
        r.set("pipe_parallel_ms", ms(self.pipe_parallel));
        r.set("pipe_speedup", format!("{:.3}", self.pipe_speedup()));
        r.set("pipe_predicted", format!("{:.3}", self.pipe_predicted));
        r.set("pipe_service_us", format!("{:.1}", self.pipe_service.as_secs_f64() * 1e6));
        r.set("pipe_max_stage_us", format!("{:.1}", self.pipe_max_stage.as_secs_f64() * 1e6));
        r.notes = self.notes.clone();
        if self.speedup > self.predicted * 1.15 {
            r.notes.push(format!(
                "speedup {:.3} exceeds the {:.0}-worker model; the run was too short or the host noisy",
                self.speedup, self.predicted
            ));
        }
        r.check(
            "latency does not decrease",
            self.latency_ratio() >= 0.9,
            format!("latency/serial task = {:.3}", self.latency_ratio()),
        );
        r.stats = format!("{}\n", crate::runtime::TRACE_DISABLED);
        r
    }
}

struct Timed {
    sent: Instant,
}

/// Farm of `workers` spinning workers against a serial loop, then a
/// balanced pipeline of `workers` spinning stages against its serial
/// equivalent.
pub fn run_speedup(cfg: &BenchConfig) -> Result<SpeedupReport, Error> {
    let mut notes = Vec::new();
    let cost = if cfg.task_cost_us < MIN_TASK_COST_US {
        notes.push(format!(
            "task cost raised from {}us to the {MIN_TASK_COST_US}us minimum",
            cfg.task_cost_us
        ));
        MIN_TASK_COST_US
    } else {
        cfg.task_cost_us
    };
    let cores = core_count();
    if cfg.workers + 1 > cores {
        notes.push(format!(
            "{} workers requested on {cores} cores; results are oversubscribed",
            cfg.workers
        ));
    }
    let spin = Spin::global();
    let m = cfg.stream_len.max(1);
    let nw = cfg.workers.max(1);

    let serial_loop = |per_item: usize| {
        let t = Instant::now();
        for _ in 0..m {
            for _ in 0..per_item {
                spin.run(cost);
            }
        }
        t.elapsed()
    };
    // the first timed loop after start-up runs slow on a cold core
    spin.run(20_000);
    let serial_before = serial_loop(1);

    let latency_sum = Arc::new(Mutex::new((Duration::ZERO, 0u64)));
    let sink = Arc::clone(&latency_sum);
    let mut issued = 0u64;
    let mut f = Farm::new();
    f.set_capacity(cfg.queue_capacity)?;
    f.add_emitter(node_fn(move |_, _| {
        if issued == m {
            return ServiceResult::End;
        }
        issued += 1;
        ServiceResult::emit(Timed { sent: Instant::now() })
    }))?;
    f.add_workers((0..nw).map(|_| {
        map_fn(move |t: Timed| {
            spin.run(cost);
            t
        })
    }))?;
    f.add_collector(node_fn(move |x, _| {
        if let Some(t) = x.and_then(|x| x.downcast::<Timed>().ok()) {
            let mut s = sink.lock().unwrap();
            s.0 += t.sent.elapsed();
            s.1 += 1;
        }
        ServiceResult::Continue
    }))?;
    let t = Instant::now();
    f.run_and_wait_end()?;
    let parallel = t.elapsed();
    let (lat_total, lat_n) = *latency_sum.lock().unwrap();
    // serial times bracket the parallel run; the faster one is kept
    let serial = serial_before.min(serial_loop(1));

    let k = nw;
    let pipe_serial_before = serial_loop(k);
    let mut p = Pipeline::new();
    p.set_capacity(cfg.queue_capacity)?;
    p.add_stage(counting_source(0, m))?;
    for _ in 0..k {
        p.add_stage(map_fn(move |x: u64| {
            spin.run(cost);
            x
        }))?;
    }
    p.add_stage(node_fn(|_, _| ServiceResult::Continue))?;
    let t = Instant::now();
    p.run_and_wait_end()?;
    let pipe_parallel = t.elapsed();
    let pipe_serial = pipe_serial_before.min(serial_loop(k));

    Ok(SpeedupReport {
        workers: nw,
        tasks: m,
        task_cost_us: cost,
        cores,
        serial,
        parallel,
        speedup: serial.as_secs_f64() / parallel.as_secs_f64(),
        predicted: nw as f64,
        latency: lat_total / lat_n.max(1) as u32,
        serial_task: serial / m as u32,
        stages: k,
        pipe_serial,
        pipe_parallel,
        pipe_predicted: k as f64,
        pipe_service: pipe_parallel / m as u32,
        pipe_max_stage: pipe_serial / (m as u32 * k as u32),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primes_oracle() {
        assert_eq!(primes_below(30), vec![2, 3, 5, 7, 11, 13, 17, 19, 23, 29]);
        assert!(primes_below(2).is_empty());
    }

    #[test]
    fn serial_product_small() {
        let a = Matrix::from_rows(&[vec![1i64, 2], vec![3, 4]]);
        let b = Matrix::from_rows(&[vec![5i64, 6], vec![7, 8]]);
        assert_eq!(serial_product(&a, &b), Matrix::from_rows(&[vec![19, 22], vec![43, 50]]));
    }

    #[test]
    fn spin_is_roughly_calibrated() {
        let spin = Spin::global();
        assert!(spin.iters_per_us() > 0.0);
        let best = (0..5)
            .map(|_| {
                let t = Instant::now();
                spin.run(2000);
                t.elapsed()
            })
            .min()
            .unwrap();
        assert!(best >= Duration::from_micros(1000), "{best:?}");
    }

    #[test]
    fn key_value_lines() {
        let mut r = Report::default();
        r.set("speedup", "1.000");
        r.set("serial_ms", 3);
        let mut out = Vec::new();
        r.write_key_values(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "serial_ms=3\nspeedup=1.000\n");
    }

    #[test]
    fn every_mode_has_a_distinct_name() {
        let names: std::collections::HashSet<_> = Mode::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names.len(), Mode::ALL.len());
    }
}
