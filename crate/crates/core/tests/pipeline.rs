use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use flowskel::{map_fn, node_fn, Context, Error, Farm, Item, Node, Pipeline, ServiceResult};
use proptest::prelude::*;

fn range_source(from: u64, to: u64) -> impl Node {
    let mut next = from;
    node_fn(move |_, _| {
        if next >= to {
            return ServiceResult::End;
        }
        next += 1;
        ServiceResult::emit(next - 1)
    })
}

fn collect_u64(out: Arc<Mutex<Vec<u64>>>) -> impl Node {
    node_fn(move |x, _| {
        if let Some(x) = x {
            out.lock().unwrap().push(x.downcast::<u64>().unwrap());
        }
        ServiceResult::Continue
    })
}

struct Sieve {
    prime: Option<u64>,
    seen: u64,
    held: Arc<Mutex<Vec<(usize, u64)>>>,
    ended: Arc<AtomicUsize>,
}

impl Node for Sieve {
    fn service(&mut self, x: Option<Item>, _: &mut Context<'_>) -> ServiceResult {
        let x = x.unwrap().downcast::<u64>().unwrap();
        self.seen += 1;
        match self.prime {
            None => {
                self.prime = Some(x);
                ServiceResult::Continue
            }
            Some(p) if x.is_multiple_of(p) => ServiceResult::Continue,
            Some(_) => ServiceResult::emit(x),
        }
    }

    fn end(&mut self, ctx: &mut Context<'_>) {
        self.ended.fetch_add(1, Ordering::Relaxed);
        if let Some(p) = self.prime {
            self.held.lock().unwrap().push((ctx.id(), p));
        }
    }
}

fn is_prime(n: u64) -> bool {
    n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
}

fn run_sieve(stages: usize, limit: u64) -> (Vec<u64>, Vec<u64>, usize) {
    let held = Arc::new(Mutex::new(Vec::new()));
    let printed = Arc::new(Mutex::new(Vec::new()));
    let ended = Arc::new(AtomicUsize::new(0));
    let mut p = Pipeline::new();
    p.add_stage(range_source(2, limit)).unwrap();
    for _ in 0..stages {
        p.add_stage(Sieve {
            prime: None,
            seen: 0,
            held: held.clone(),
            ended: ended.clone(),
        })
        .unwrap();
    }
    p.add_stage(collect_u64(printed.clone())).unwrap();
    p.run_and_wait_end().unwrap();
    let mut held = held.lock().unwrap().clone();
    held.sort();
    let primes = held.into_iter().map(|h| h.1).collect();
    let printed = printed.lock().unwrap().clone();
    (primes, printed, ended.load(Ordering::Relaxed))
}

#[test]
fn sieve_seven_stages_up_to_thirty() {
    let (primes, printed, ended) = run_sieve(7, 30);
    assert_eq!(primes, [2, 3, 5, 7, 11, 13, 17]);
    assert_eq!(printed.first(), Some(&19));
    assert_eq!(ended, 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sieve_matches_trial_division(stages in 1usize..8, limit in 2u64..120) {
        let (primes, printed, ended) = run_sieve(stages, limit);
        let oracle: Vec<u64> = (2..limit).filter(|&n| is_prime(n)).collect();
        let k = stages.min(oracle.len());
        prop_assert_eq!(&primes[..], &oracle[..k]);
        prop_assert_eq!(printed.first(), oracle.get(k));
        prop_assert_eq!(ended, stages);
    }

    #[test]
    fn identity_stages_preserve_order(n in 0u64..500, k in 1usize..6, cap in 1usize..16) {
        let out = Arc::new(Mutex::new(Vec::new()));
        let mut p = Pipeline::new();
        p.set_capacity(cap).unwrap();
        p.add_stage(range_source(0, n)).unwrap();
        for _ in 0..k {
            p.add_stage(map_fn(|x: u64| x)).unwrap();
        }
        p.add_stage(collect_u64(out.clone())).unwrap();
        p.run_and_wait_end().unwrap();
        prop_assert_eq!(out.lock().unwrap().clone(), (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn empty_stream_terminates_cleanly() {
    let (primes, printed, ended) = run_sieve(3, 2);
    assert!(primes.is_empty() && printed.is_empty());
    assert_eq!(ended, 3);
}

#[test]
fn thousand_items_through_five_identity_stages() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut p = Pipeline::new();
    p.add_stage(range_source(1, 1001)).unwrap();
    for _ in 0..5 {
        p.add_stage(map_fn(|x: u64| x)).unwrap();
    }
    p.add_stage(collect_u64(out.clone())).unwrap();
    p.run_and_wait_end().unwrap();
    assert_eq!(*out.lock().unwrap(), (1..=1000).collect::<Vec<_>>());
}

#[test]
fn farm_as_a_stage() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut farm = Farm::new();
    farm.add_workers((0..3).map(|_| map_fn(|x: u64| x * 10))).unwrap();
    farm.add_collector(map_fn(|x: u64| x + 1)).unwrap();
    let mut p = Pipeline::new();
    p.add_stage(range_source(0, 100)).unwrap();
    p.add_stage(farm).unwrap();
    p.add_stage(collect_u64(out.clone())).unwrap();
    p.run_and_wait_end().unwrap();
    let mut got = out.lock().unwrap().clone();
    got.sort_unstable();
    assert_eq!(got, (0..100).map(|x| x * 10 + 1).collect::<Vec<_>>());
}

#[test]
fn nested_pipeline_as_a_stage() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut inner = Pipeline::new();
    inner.add_stage(map_fn(|x: u64| x + 1)).unwrap();
    inner.add_stage(map_fn(|x: u64| x * 2)).unwrap();
    let mut p = Pipeline::new();
    p.add_stage(range_source(0, 50)).unwrap();
    p.add_stage(inner).unwrap();
    p.add_stage(collect_u64(out.clone())).unwrap();
    p.run_and_wait_end().unwrap();
    assert_eq!(*out.lock().unwrap(), (0..50).map(|x| (x + 1) * 2).collect::<Vec<_>>());
}

#[test]
fn wrapped_counter_from_five() {
    let calls: Arc<[AtomicUsize; 3]> = Arc::new(Default::default());
    let c = calls.clone();
    let mut p = Pipeline::new();
    p.add_stage(node_fn(move |x, _| {
        c[0].fetch_add(1, Ordering::Relaxed);
        match x.map(|x| x.downcast::<u32>().unwrap()) {
            None => ServiceResult::emit(5u32),
            Some(0) => ServiceResult::End,
            Some(n) => ServiceResult::emit(n),
        }
    }))
    .unwrap();
    let c = calls.clone();
    p.add_stage(node_fn(move |x, _| {
        c[1].fetch_add(1, Ordering::Relaxed);
        ServiceResult::emit(x.unwrap().downcast::<u32>().unwrap() - 1)
    }))
    .unwrap();
    let c = calls.clone();
    p.add_stage(node_fn(move |x, _| {
        c[2].fetch_add(1, Ordering::Relaxed);
        ServiceResult::Emit(x.unwrap())
    }))
    .unwrap();
    p.wrap_around().unwrap();
    p.run_and_wait_end().unwrap();
    let calls: Vec<usize> = calls.iter().map(|c| c.load(Ordering::Relaxed)).collect();
    // head: one activation plus feedback 4,3,2,1,0; the others see 5..1
    assert_eq!(calls, [6, 5, 5]);
}

#[test]
fn wrapped_items_circulate_in_fifo_order() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    let mut p = Pipeline::new();
    p.add_stage(node_fn(move |x, ctx| match x {
        None => {
            for i in 0..3u64 {
                ctx.send_out(Item::new(i)).unwrap();
            }
            ServiceResult::Continue
        }
        Some(x) => {
            let x = x.downcast::<u64>().unwrap();
            let mut s = s.lock().unwrap();
            s.push(x);
            if s.len() == 30 {
                ServiceResult::End
            } else {
                ServiceResult::emit(x + 3)
            }
        }
    }))
    .unwrap();
    p.add_stage(map_fn(|x: u64| x)).unwrap();
    p.add_stage(map_fn(|x: u64| x)).unwrap();
    p.wrap_around().unwrap();
    p.run_and_wait_end().unwrap();
    assert_eq!(*seen.lock().unwrap(), (0..30).collect::<Vec<_>>());
}

#[test]
fn wrapped_cycle_with_small_queues_does_not_wedge() {
    // the head floods the loop far beyond the total queue capacity
    let done = Arc::new(AtomicUsize::new(0));
    let d = done.clone();
    let mut p = Pipeline::new();
    p.set_capacity(2).unwrap();
    p.add_stage(node_fn(move |x, ctx| match x {
        None => {
            for i in 0..200u64 {
                ctx.send_out(Item::new(i)).unwrap();
            }
            ServiceResult::Continue
        }
        Some(_) => {
            if d.fetch_add(1, Ordering::Relaxed) + 1 == 200 {
                ServiceResult::End
            } else {
                ServiceResult::Continue
            }
        }
    }))
    .unwrap();
    p.add_stage(map_fn(|x: u64| x)).unwrap();
    p.wrap_around().unwrap();
    p.run_and_wait_end().unwrap();
    assert_eq!(done.load(Ordering::Relaxed), 200);
}

#[test]
fn wrapped_skeletons_cannot_nest() {
    let mut inner = Pipeline::new();
    inner.add_stage(map_fn(|x: u64| x)).unwrap();
    inner.wrap_around().unwrap();
    let mut farm = Farm::new();
    assert!(matches!(farm.add_worker(inner), Err(Error::NestedFeedback)));

    let mut wrapped_farm = Farm::new();
    wrapped_farm.add_worker(map_fn(|x: u64| x)).unwrap();
    wrapped_farm.wrap_around().unwrap();
    let mut p = Pipeline::new();
    assert!(matches!(p.add_stage(wrapped_farm), Err(Error::NestedFeedback)));
}

#[test]
fn single_stage_hello() {
    let ran = Arc::new(AtomicUsize::new(0));
    let r = ran.clone();
    let mut p = Pipeline::new();
    p.add_stage(node_fn(move |_, _| {
        r.fetch_add(1, Ordering::Relaxed);
        ServiceResult::End
    }))
    .unwrap();
    assert!(p.run_and_wait_end().unwrap() > std::time::Duration::ZERO);
    assert_eq!(ran.load(Ordering::Relaxed), 1);
}

#[test]
fn pipeline_moves_between_threads_before_run() {
    let out = Arc::new(Mutex::new(Vec::new()));
    let mut p = Pipeline::new();
    p.add_stage(range_source(0, 10)).unwrap();
    p.add_stage(collect_u64(out.clone())).unwrap();
    std::thread::spawn(move || p.run_and_wait_end().unwrap())
        .join()
        .unwrap();
    assert_eq!(out.lock().unwrap().len(), 10);
}
