// SPDX-License-Identifier: Apache-2.0

use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::enclave::{Enclave, EnclaveConfig, Mode, PAGE_SIZE};

fn fixture(tcs: u32, policy: SchedPolicy) -> (Arc<Enclave>, Scheduler) {
    let cfg = EnclaveConfig {
        heap_limit: 256 * PAGE_SIZE,
        epc_limit: 256 * PAGE_SIZE,
        tcs_count: tcs,
        mode: Mode::HardwareSim,
        ..EnclaveConfig::default()
    };
    let enclave = Arc::new(Enclave::create(b"sched tests", cfg).unwrap());
    (enclave.clone(), Scheduler::new(enclave, policy))
}

type Log = Arc<Mutex<Vec<u32>>>;

fn log_push(log: &Log, v: u32) {
    log.lock().unwrap().push(v);
}

#[test]
fn round_robin_yields_in_spawn_order() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let log: Log = Arc::new(Mutex::new(Vec::new()));
    for i in 1..=3u32 {
        let log = log.clone();
        sched.spawn(&format!("t{i}"), move || {
            for _ in 0..3 {
                log_push(&log, i);
                yield_now();
            }
        });
    }
    sched.run_to_completion();
    assert_eq!(*log.lock().unwrap(), vec![1, 2, 3, 1, 2, 3, 1, 2, 3]);
}

#[test]
fn wake_with_no_waiter_sticks_once() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let wq = sched.wait_queue();
    sched.spawn("t", move || {
        assert!(!wq.wake_one());
        // Token pending: this wait returns without blocking. If the token
        // were dropped the scheduler would stall here.
        wq.wait();
    });
    sched.run_to_completion();
    assert_eq!(sched.profile().class("futex").count, 0);
}

#[test]
fn waiters_resume_in_fifo_order() {
    let (_, sched) = fixture(8, SchedPolicy::RoundRobin);
    let wq = sched.wait_queue();
    let log: Log = Arc::new(Mutex::new(Vec::new()));
    for i in 1..=3u32 {
        let wq = wq.clone();
        let log = log.clone();
        sched.spawn(&format!("w{i}"), move || {
            wq.wait();
            log_push(&log, i);
        });
    }
    sched.spawn("waker", move || {
        for _ in 0..3 {
            assert!(wq.wake_one());
        }
    });
    sched.run_to_completion();
    assert_eq!(*log.lock().unwrap(), vec![1, 2, 3]);
}

#[test]
fn long_sleep_exits_outside_and_bills_nanosleep() {
    let (enclave, sched) = fixture(4, SchedPolicy::RoundRobin);
    sched.spawn("sleeper", || sleep(50_000));
    sched.run_to_completion();
    // Exit at t=0 costs 5000, the wake fires at the original deadline
    // 50000, and the entry on resume costs another 5000.
    let totals = enclave.cost_totals();
    assert_eq!(enclave.virtual_now(), 55_000);
    assert_eq!(totals.transition, 10_000);
    assert_eq!(totals.idle, 45_000);
    let p = sched.profile();
    assert_eq!(p.class("nanosleep"), ClassStat { time: 45_000, count: 1 });
    assert_eq!(p.spin_count, 0);
}

#[test]
fn short_sleep_spins_inside() {
    let (enclave, sched) = fixture(4, SchedPolicy::RoundRobin);
    sched.spawn("napper", || sleep(100));
    sched.run_to_completion();
    let totals = enclave.cost_totals();
    assert_eq!(enclave.virtual_now(), 100);
    assert_eq!(totals.transition, 0);
    assert_eq!(totals.idle, 100);
    let p = sched.profile();
    assert_eq!(p.spin_count, 1);
    assert_eq!(p.spin_time, 100);
    assert_eq!(p.class("nanosleep").count, 0);
}

#[test]
fn context_pressure_demotes_oldest_spinner() {
    let (enclave, sched) = fixture(2, SchedPolicy::RoundRobin);
    sched.spawn("a", || sleep(100));
    sched.spawn("b", || sleep(100));
    sched.spawn("c", || {});
    sched.run_to_completion();
    let p = sched.profile();
    assert_eq!(p.downgrades, 1);
    assert_eq!(p.max_held_slots, 2);
    assert_eq!(p.spin_count, 2);
    // The demoted spinner pays one exit, then one entry when it resumes.
    assert_eq!(enclave.cost_totals().transition, 10_000);
}

#[test]
fn blocked_intervals_land_in_the_right_profile_rows() {
    let (enclave, sched) = fixture(4, SchedPolicy::RoundRobin);
    let wq = sched.wait_queue();
    let wq2 = wq.clone();
    sched.spawn("waiter", move || wq.wait());
    sched.spawn("waker", move || {
        sleep(30_000);
        wq2.wake_one();
    });
    sched.run_to_completion();
    let p = sched.profile();
    assert_eq!(p.class("futex"), ClassStat { time: 35_000, count: 1 });
    assert_eq!(p.class("nanosleep"), ClassStat { time: 25_000, count: 1 });
    assert_eq!(enclave.cost_totals().transition, 20_000);
    assert_eq!(enclave.virtual_now(), 45_000);
    assert!(p.futex_share() > 0.5);
}

#[test]
fn join_hands_back_the_result() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let worker = sched.spawn("worker", || 21 * 2);
    let outer = sched.spawn("joiner", move || worker.join().unwrap() + 1);
    sched.run_to_completion();
    assert_eq!(outer.join().unwrap(), 43);
}

#[test]
fn panic_reaches_the_joiner_as_err() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let worker = sched.spawn("bad", || panic!("boom"));
    let joiner = sched.spawn("joiner", move || {
        let err = worker.join().unwrap_err();
        *err.downcast_ref::<&str>().unwrap()
    });
    sched.run_to_completion();
    assert_eq!(joiner.join().unwrap(), "boom");
}

#[test]
#[should_panic(expected = "panicked")]
fn unjoined_panic_fails_the_run() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    sched.spawn("bad", || panic!("unobserved failure"));
    sched.run_to_completion();
}

#[test]
#[should_panic(expected = "scheduler stalled")]
fn wait_with_no_possible_waker_is_reported() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let wq = sched.wait_queue();
    sched.spawn("stuck", move || wq.wait());
    sched.run_to_completion();
}

#[test]
fn same_seed_reproduces_the_same_interleaving() {
    let run = |seed: u64| -> (Vec<u32>, u64) {
        let (enclave, sched) = fixture(2, SchedPolicy::Seeded(seed));
        let log: Log = Arc::new(Mutex::new(Vec::new()));
        for i in 1..=4u32 {
            let log = log.clone();
            sched.spawn(&format!("t{i}"), move || {
                for _ in 0..5 {
                    log_push(&log, i);
                    if i % 2 == 0 {
                        sleep(3_000);
                    } else {
                        yield_now();
                    }
                }
            });
        }
        sched.run_to_completion();
        let order = log.lock().unwrap().clone();
        (order, enclave.virtual_now())
    };
    let (a_order, a_clock) = run(42);
    let (b_order, b_clock) = run(42);
    assert_eq!(a_order, b_order);
    assert_eq!(a_clock, b_clock);
}

#[test]
fn green_mutex_is_mutually_exclusive_across_yields() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let m = GreenMutex::new(&sched, (0u64, 0u64));
    for i in 0..4 {
        let m = m.clone();
        sched.spawn(&format!("t{i}"), move || {
            for _ in 0..25 {
                let mut g = m.lock();
                g.1 += 1;
                assert_eq!(g.1, 1, "two threads inside the critical section");
                yield_now();
                g.1 -= 1;
                g.0 += 1;
            }
        });
    }
    sched.run_to_completion();
    let m2 = m.clone();
    let check = sched.spawn("check", move || *m2.lock());
    sched.run_to_completion();
    assert_eq!(check.join().unwrap(), (100, 0));
}

#[test]
fn channel_conserves_items_and_respects_capacity() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let ch = BoundedChannel::new(&sched, 4);
    let tx = ch.clone();
    sched.spawn("producer", move || {
        for i in 0..100u64 {
            tx.push(i).unwrap();
            assert!(tx.len() <= tx.capacity());
        }
        tx.close();
    });
    let rx = ch.clone();
    let consumer = sched.spawn("consumer", move || {
        let mut sum = 0u64;
        let mut n = 0u64;
        while let Some(v) = rx.pop() {
            sum += v;
            n += 1;
        }
        (sum, n)
    });
    sched.run_to_completion();
    assert_eq!(consumer.join().unwrap(), (4950, 100));
}

#[test]
fn channel_close_semantics() {
    let (_, sched) = fixture(4, SchedPolicy::RoundRobin);
    let ch: BoundedChannel<u32> = BoundedChannel::new(&sched, 2);
    let c = ch.clone();
    let h = sched.spawn("t", move || {
        c.push(1).unwrap();
        c.push(2).unwrap();
        c.close();
        assert_eq!(c.push(3), Err(3));
        let drained = (c.pop(), c.pop(), c.pop());
        assert_eq!(drained, (Some(1), Some(2), None));
    });
    sched.run_to_completion();
    h.join().unwrap();
}

/// Randomized schedules: threads mix yields, sleeps, lock traffic, and a
/// producer/consumer channel under seeded random dispatch. Whatever the
/// interleaving, everything must terminate with nothing lost and never
/// more context holders than contexts.
fn random_schedule_trial(seed: u64, tcs: u32, workers: u32, ops: u32) {
    let (_, sched) = fixture(tcs, SchedPolicy::Seeded(seed));
    let m = GreenMutex::new(&sched, 0u64);
    let ch = BoundedChannel::new(&sched, 3);
    let per_worker_pushes = 4u32;
    for i in 0..workers {
        let m = m.clone();
        let tx = ch.clone();
        sched.spawn(&format!("w{i}"), move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37)) ;
            let mut pushed = 0;
            for _ in 0..ops {
                match rng.gen_range(0..4) {
                    0 => yield_now(),
                    1 => sleep(rng.gen_range(0..25_000)),
                    2 => {
                        let mut g = m.lock();
                        if rng.gen_bool(0.5) {
                            yield_now();
                        }
                        *g += 1;
                    }
                    _ => {
                        if pushed < per_worker_pushes {
                            tx.push(1u64).unwrap();
                            pushed += 1;
                        } else {
                            yield_now();
                        }
                    }
                }
            }
            while pushed < per_worker_pushes {
                tx.push(1u64).unwrap();
                pushed += 1;
            }
        });
    }
    let rx = ch.clone();
    let total = (workers * per_worker_pushes) as u64;
    let consumer = sched.spawn("consumer", move || {
        let mut got = 0u64;
        for _ in 0..total {
            got += rx.pop().unwrap();
        }
        got
    });
    sched.run_to_completion();
    assert_eq!(consumer.join().unwrap(), total);
    let p = sched.profile();
    assert!(p.max_held_slots <= tcs as usize);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn randomized_schedules_preserve_invariants(
        seed in any::<u64>(),
        tcs in 1u32..=4,
        workers in 2u32..=5,
        ops in 4u32..=12,
    ) {
        random_schedule_trial(seed, tcs, workers, ops);
    }
}
