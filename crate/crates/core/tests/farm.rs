use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use flowskel::{
    map_fn, node_fn, Context, Error, Farm, Item, Node, Pipeline, Scheduling, SendErrorKind, ServiceResult,
    Skeleton, WorkerLoad,
};
use proptest::prelude::*;

fn counter(from: u64, to: u64) -> impl Node {
    let mut next = from;
    node_fn(move |_, _| {
        if next >= to {
            return ServiceResult::End;
        }
        next += 1;
        ServiceResult::emit(next - 1)
    })
}

fn gather<T: Send + 'static>(out: Arc<Mutex<Vec<T>>>) -> impl Node {
    node_fn(move |x, _| {
        if let Some(x) = x {
            out.lock().unwrap().push(x.downcast::<T>().unwrap());
        }
        ServiceResult::Continue
    })
}

/// Worker that logs (worker index, task) and passes the task on.
fn tagged_worker(w: usize, log: Arc<Mutex<Vec<(usize, u64)>>>) -> impl Node {
    node_fn(move |x, _| {
        let x = x.unwrap().downcast::<u64>().unwrap();
        log.lock().unwrap().push((w, x));
        ServiceResult::emit(x)
    })
}

fn per_worker(log: &[(usize, u64)], workers: usize) -> Vec<Vec<u64>> {
    let mut v = vec![Vec::new(); workers];
    for &(w, x) in log {
        v[w].push(x);
    }
    v
}

#[test]
fn increment_farm_collects_two_to_ten() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_emitter(counter(1, 10)).unwrap();
    f.add_workers((0..2).map(|_| map_fn(|x: u64| x + 1))).unwrap();
    f.add_collector(gather::<u64>(out.clone())).unwrap();
    f.run_and_wait_end().unwrap();
    let mut got = out.lock().unwrap().clone();
    got.sort_unstable();
    assert_eq!(got, (2..=10).collect::<Vec<_>>());
}

fn no_collector_results(workers: usize, len: u64) -> Vec<u64> {
    let results: Arc<Vec<AtomicU64>> = Arc::new((0..len).map(|_| AtomicU64::new(0)).collect());
    let mut i = 1u64;
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, _| {
        if i >= len {
            return ServiceResult::End;
        }
        i += 1;
        ServiceResult::emit((i - 1, (i - 1) * (i - 1)))
    }))
    .unwrap();
    for _ in 0..workers {
        let r = results.clone();
        f.add_worker(node_fn(move |x, _| {
            let (i, t) = x.unwrap().downcast::<(u64, u64)>().unwrap();
            r[i as usize].store(t + 1, Ordering::Relaxed);
            ServiceResult::Continue
        }))
        .unwrap();
    }
    f.run_and_wait_end().unwrap();
    results.iter().map(|x| x.load(Ordering::Relaxed)).collect()
}

#[test]
fn no_collector_consolidation_any_worker_count() {
    for workers in 1..=8 {
        assert_eq!(
            no_collector_results(workers, 10),
            [0, 2, 5, 10, 17, 26, 37, 50, 65, 82],
            "{workers} workers"
        );
    }
}

#[test]
fn round_robin_four_tasks_two_workers() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_emitter(counter(1, 5)).unwrap();
    for w in 0..2 {
        f.add_worker(tagged_worker(w, log.clone())).unwrap();
    }
    f.run_and_wait_end().unwrap();
    assert_eq!(per_worker(&log.lock().unwrap(), 2), [vec![1, 3], vec![2, 4]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Worker j gets exactly the tasks whose dispatch ordinal is j mod k,
    /// in order.
    #[test]
    fn round_robin_is_deterministic(n in 0u64..400, k in 1usize..6, cap in 1usize..8) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut f = Farm::new();
        f.set_capacity(cap).unwrap();
        f.add_emitter(counter(0, n)).unwrap();
        for w in 0..k {
            f.add_worker(tagged_worker(w, log.clone())).unwrap();
        }
        f.run_and_wait_end().unwrap();
        let got = per_worker(&log.lock().unwrap(), k);
        for (j, tasks) in got.iter().enumerate() {
            let want: Vec<u64> = (0..n).filter(|t| *t as usize % k == j).collect();
            prop_assert_eq!(tasks, &want);
        }
    }

    /// Items in = items out, and one worker keeps its emission order at the
    /// collector.
    #[test]
    fn collector_conserves_items(n in 0u64..300, k in 1usize..5) {
        let out = Arc::new(Mutex::new(Vec::new()));
        let mut f = Farm::new();
        f.add_emitter(counter(0, n)).unwrap();
        f.add_workers((0..k).map(|_| map_fn(|x: u64| x))).unwrap();
        f.add_collector(gather::<u64>(out.clone())).unwrap();
        f.run_and_wait_end().unwrap();
        let mut got = out.lock().unwrap().clone();
        if k == 1 {
            prop_assert_eq!(&got, &(0..n).collect::<Vec<_>>());
        }
        got.sort_unstable();
        prop_assert_eq!(got, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn sticky_victim_routes_everything() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut next = 1u64;
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, ctx| {
        if next > 4 {
            return ServiceResult::End;
        }
        ctx.set_victim(1).unwrap();
        next += 1;
        ServiceResult::emit(next - 1)
    }))
    .unwrap();
    for w in 0..2 {
        f.add_worker(tagged_worker(w, log.clone())).unwrap();
    }
    f.run_and_wait_end().unwrap();
    assert_eq!(per_worker(&log.lock().unwrap(), 2), [vec![], vec![1, 2, 3, 4]]);
}

#[test]
fn victim_sequence_is_followed_exactly() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let plan: Vec<usize> = (0..300).map(|i| (i * 7 + i / 3) % 3).collect();
    let p2 = plan.clone();
    let mut i = 0;
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, ctx| {
        if i == p2.len() {
            return ServiceResult::End;
        }
        ctx.set_victim(p2[i]).unwrap();
        i += 1;
        ServiceResult::emit(i as u64 - 1)
    }))
    .unwrap();
    for w in 0..3 {
        f.add_worker(tagged_worker(w, log.clone())).unwrap();
    }
    f.run_and_wait_end().unwrap();
    let mut assigned = vec![usize::MAX; plan.len()];
    for &(w, x) in log.lock().unwrap().iter() {
        assigned[x as usize] = w;
    }
    assert_eq!(assigned, plan);
}

#[test]
fn invalid_victim_is_rejected() {
    let outcome = Arc::new(Mutex::new(None));
    let o = outcome.clone();
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, ctx| {
        *o.lock().unwrap() = Some(ctx.set_victim(5));
        ServiceResult::End
    }))
    .unwrap();
    f.add_workers((0..2).map(|_| map_fn(|x: u64| x))).unwrap();
    f.run_and_wait_end().unwrap();
    assert!(matches!(
        outcome.lock().unwrap().take(),
        Some(Err(Error::InvalidWorker { index: 5, workers: 2 }))
    ));
}

/// Always picks the last worker.
struct Last;

impl Scheduling for Last {
    fn select_worker(&mut self, load: &WorkerLoad<'_>) -> Option<usize> {
        Some(load.workers() - 1)
    }
}

#[test]
fn custom_scheduling_policy() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_emitter(counter(0, 20)).unwrap();
    for w in 0..3 {
        f.add_worker(tagged_worker(w, log.clone())).unwrap();
    }
    f.set_scheduling(Last).unwrap();
    f.run_and_wait_end().unwrap();
    let got = per_worker(&log.lock().unwrap(), 3);
    assert_eq!(got[2], (0..20).collect::<Vec<_>>());
}

#[test]
fn broadcast_square_and_root() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut x = 1u32;
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, ctx| {
        if x > 10 {
            return ServiceResult::End;
        }
        ctx.broadcast(Item::cloneable(Arc::new(x as f64))).unwrap();
        x += 1;
        ServiceResult::Continue
    }))
    .unwrap();
    f.add_worker(map_fn(|x: Arc<f64>| ("f1", *x * *x))).unwrap();
    f.add_worker(map_fn(|x: Arc<f64>| ("f2", x.sqrt()))).unwrap();
    f.add_collector(gather::<(&str, f64)>(out.clone())).unwrap();
    f.run_and_wait_end().unwrap();
    let got = out.lock().unwrap();
    assert_eq!(got.len(), 20);
    for f in ["f1", "f2"] {
        let mut xs: Vec<f64> = got.iter().filter(|r| r.0 == f).map(|r| r.1).collect();
        xs.sort_by(f64::total_cmp);
        let want: Vec<f64> = (1..=10)
            .map(|i| i as f64)
            .map(|i| if f == "f1" { i * i } else { i.sqrt() })
            .collect();
        assert_eq!(xs, want, "{f}");
    }
}

#[test]
fn broadcast_needs_cloneable_items_and_an_emitter() {
    let outcome = Arc::new(Mutex::new(Vec::new()));
    let o = outcome.clone();
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |_, ctx| {
        let e = ctx.broadcast(Item::new(1u8)).unwrap_err();
        o.lock().unwrap().push(e.kind);
        ServiceResult::End
    }))
    .unwrap();
    let o = outcome.clone();
    f.add_worker(node_fn(move |_, _| ServiceResult::Continue)).unwrap();
    let mut p = Pipeline::new();
    p.add_stage(f).unwrap();
    p.add_stage(node_fn(move |_, ctx| {
        let _ = ctx;
        ServiceResult::Continue
    }))
    .unwrap();
    let mut f2 = Farm::new();
    f2.add_emitter(counter(0, 1)).unwrap();
    f2.add_worker(node_fn(move |x, ctx| {
        if let Some(x) = x {
            o.lock().unwrap().push(ctx.broadcast(x).unwrap_err().kind);
        }
        ServiceResult::Continue
    }))
    .unwrap();
    p.run_and_wait_end().unwrap();
    f2.run_and_wait_end().unwrap();
    let got = outcome.lock().unwrap();
    assert_eq!(*got, [SendErrorKind::NotCloneable, SendErrorKind::NotEmitter]);
}

#[test]
fn broadcast_multiplicity() {
    for k in [2usize, 3, 5] {
        let counts: Arc<Vec<AtomicUsize>> = Arc::new((0..k).map(|_| AtomicUsize::new(0)).collect());
        let mut i = 0u32;
        let mut f = Farm::new();
        f.add_emitter(node_fn(move |_, ctx| {
            if i == 1000 {
                return ServiceResult::End;
            }
            i += 1;
            ctx.broadcast(Item::cloneable(i)).unwrap();
            ServiceResult::Continue
        }))
        .unwrap();
        for w in 0..k {
            let c = counts.clone();
            f.add_worker(node_fn(move |_, _| {
                c[w].fetch_add(1, Ordering::Relaxed);
                ServiceResult::Continue
            }))
            .unwrap();
        }
        f.run_and_wait_end().unwrap();
        assert!(counts.iter().all(|c| c.load(Ordering::Relaxed) == 1000), "k={k}");
    }
}

#[test]
fn on_demand_starves_the_slow_worker() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_emitter(counter(0, 400)).unwrap();
    for w in 0..4 {
        let log = log.clone();
        let pause = if w == 0 { Duration::from_millis(3) } else { Duration::from_micros(100) };
        f.add_worker(node_fn(move |x, _| {
            x.unwrap();
            thread::sleep(pause);
            log.lock().unwrap().push(w);
            ServiceResult::Continue
        }))
        .unwrap();
    }
    f.set_scheduling_ondemand().unwrap();
    f.run_and_wait_end().unwrap();
    let log = log.lock().unwrap();
    let count = |w| log.iter().filter(|&&x| x == w).count();
    assert_eq!(log.len(), 400);
    for w in 1..4 {
        assert!(count(0) < count(w), "slow {} vs worker {w} {}", count(0), count(w));
    }
}

#[test]
fn collector_that_never_emits_still_terminates() {
    let seen = Arc::new(AtomicUsize::new(0));
    let s = seen.clone();
    let mut f = Farm::new();
    f.add_emitter(counter(0, 50)).unwrap();
    f.add_workers((0..3).map(|_| map_fn(|x: u64| x))).unwrap();
    f.add_collector(node_fn(move |_, _| {
        s.fetch_add(1, Ordering::Relaxed);
        ServiceResult::Continue
    }))
    .unwrap();
    let mut p = Pipeline::new();
    let after = Arc::new(AtomicUsize::new(0));
    let a = after.clone();
    p.add_stage(f).unwrap();
    p.add_stage(node_fn(move |x, _| {
        if x.is_some() {
            a.fetch_add(1, Ordering::Relaxed);
        }
        ServiceResult::Continue
    }))
    .unwrap();
    p.run_and_wait_end().unwrap();
    assert_eq!(seen.load(Ordering::Relaxed), 50);
    assert_eq!(after.load(Ordering::Relaxed), 0);
}

#[test]
fn pipelines_as_workers() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_emitter(counter(0, 60)).unwrap();
    for _ in 0..3 {
        let mut w = Pipeline::new();
        w.add_stage(map_fn(|x: u64| x + 1)).unwrap();
        w.add_stage(map_fn(|x: u64| x * 3)).unwrap();
        f.add_worker(w).unwrap();
    }
    f.add_collector(gather::<u64>(out.clone())).unwrap();
    f.run_and_wait_end().unwrap();
    let mut got = out.lock().unwrap().clone();
    got.sort_unstable();
    assert_eq!(got, (0..60).map(|x| (x + 1) * 3).collect::<Vec<_>>());
}

#[test]
fn farm_without_emitter_is_fed_upstream() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut f = Farm::new();
    f.add_workers((0..2).map(|_| map_fn(|x: u64| x + 100))).unwrap();
    f.add_collector(gather::<u64>(out.clone())).unwrap();
    let mut p = Pipeline::new();
    p.add_stage(counter(0, 20)).unwrap();
    p.add_stage(f).unwrap();
    p.run_and_wait_end().unwrap();
    let mut got = out.lock().unwrap().clone();
    got.sort_unstable();
    assert_eq!(got, (100..120).collect::<Vec<_>>());
}

#[test]
fn farm_validation() {
    let mut f = Farm::new();
    assert!(matches!(f.run_and_wait_end(), Err(Error::NoWorkers)));
    let mut f = Farm::new();
    f.add_worker(map_fn(|x: u64| x)).unwrap();
    assert!(matches!(f.run_and_wait_end(), Err(Error::UnfedFarm)));
    let mut f = Farm::new();
    assert!(matches!(f.set_capacity(0), Err(Error::ZeroCapacity)));
}

/// Emitter of the divide loop: injects one task of size 8, forwards halves
/// coming back, and ends once all unit tasks have been counted.
fn divide_farm(collector: bool) -> (Farm, Arc<AtomicUsize>) {
    let units = Arc::new(AtomicUsize::new(0));
    let u = units.clone();
    let mut f = Farm::new();
    f.add_emitter(node_fn(move |x, _| match x.map(|x| x.downcast::<u64>().unwrap()) {
        None => ServiceResult::emit(8u64),
        Some(1) => {
            if u.fetch_add(1, Ordering::Relaxed) + 1 == 8 {
                ServiceResult::End
            } else {
                ServiceResult::Continue
            }
        }
        Some(s) => ServiceResult::emit(s),
    }))
    .unwrap();
    for _ in 0..3 {
        f.add_worker(node_fn(|x, ctx| {
            let s = x.unwrap().downcast::<u64>().unwrap();
            if s > 1 {
                ctx.send_out(Item::new(s / 2)).unwrap();
                ServiceResult::emit(s - s / 2)
            } else {
                ServiceResult::emit(s)
            }
        }))
        .unwrap();
    }
    if collector {
        f.add_collector(node_fn(|x, _| ServiceResult::Emit(x.unwrap()))).unwrap();
    }
    f.wrap_around().unwrap();
    (f, units)
}

#[test]
fn divide_loop_through_collector() {
    let (mut f, units) = divide_farm(true);
    f.run_and_wait_end().unwrap();
    assert_eq!(units.load(Ordering::Relaxed), 8);
}

#[test]
fn divide_loop_merging_worker_outputs() {
    let (mut f, units) = divide_farm(false);
    f.run_and_wait_end().unwrap();
    assert_eq!(units.load(Ordering::Relaxed), 8);
}

#[test]
fn traced_stats_conserve_dispatched_tasks() {
    let mut f = Farm::new();
    f.add_emitter(counter(0, 10)).unwrap();
    f.add_workers((0..2).map(|_| node_fn(|_, _| ServiceResult::Continue))).unwrap();
    f.set_trace(true);
    f.run_and_wait_end().unwrap();
    let stats = f.stats().unwrap();
    assert_eq!(stats.len(), 3);
    assert_eq!(stats[1].items_processed + stats[2].items_processed, 10);
    assert_eq!(stats[0].items_processed, 0);
    assert_eq!(stats[0].service_calls, 11);
}

#[test]
fn farm_thread_count() {
    let mut f = Farm::new();
    f.add_workers((0..4).map(|_| map_fn(|x: u64| x))).unwrap();
    assert_eq!(f.thread_count(), 5);
    f.add_collector(map_fn(|x: u64| x)).unwrap();
    assert_eq!(f.thread_count(), 6);
}

#[test]
fn farm_has_emitter_reports_setup() {
    let mut f = Farm::new();
    assert!(!f.has_emitter());
    f.add_emitter(counter(0, 1)).unwrap();
    assert!(f.has_emitter());
    assert_eq!(f.worker_count(), 0);
}

struct Ctx;

impl Node for Ctx {
    fn service(&mut self, x: Option<Item>, ctx: &mut Context<'_>) -> ServiceResult {
        assert_eq!(ctx.worker_count(), Some(2));
        match x {
            None => ServiceResult::End,
            Some(x) => ServiceResult::Emit(x),
        }
    }
}

#[test]
fn emitter_sees_worker_count() {
    let mut f = Farm::new();
    f.add_emitter(Ctx).unwrap();
    f.add_workers((0..2).map(|_| map_fn(|x: u64| x))).unwrap();
    f.run_and_wait_end().unwrap();
}
