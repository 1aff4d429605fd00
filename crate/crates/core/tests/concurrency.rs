use std::sync::{Arc, Barrier};
use std::thread;

use limitd_core::atomic::{AtomicLimiter, LimitKey};
use limitd_core::engine::Engine;
use limitd_core::{ManualClock, RuleParams};

fn admitted(threads: usize, params: &RuleParams) -> usize {
    let engine = Arc::new(Engine::new(Arc::new(ManualClock::new(0.0))));
    let limiter = Arc::new(AtomicLimiter::new(engine).unwrap());
    let barrier = Arc::new(Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let limiter = limiter.clone();
            let barrier = barrier.clone();
            let params = params.clone();
            thread::spawn(move || {
                let key = LimitKey::rate_limiter("shared").unwrap();
                barrier.wait();
                // All threads use the same instant, so every member collides
                // on its rendered timestamp and needs the suffix path.
                limiter.check(&key, &params, 1.0, 1.0).unwrap().allowed
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).filter(|a| *a).count()
}

#[test]
fn rolling_window_never_over_admits() {
    for round in 0..100 {
        let threads = 8 + round % 17;
        let max = 1 + (round as u64 * 7) % 20;
        let got = admitted(threads, &RuleParams::rolling_window(60.0, max));
        assert_eq!(got, threads.min(max as usize), "round {round}");
    }
}

#[test]
fn concurrent_limiter_never_over_admits() {
    for round in 0..50 {
        let threads = 10 + round % 11;
        let max = 1 + (round as u64 * 3) % 15;
        let got = admitted(threads, &RuleParams::concurrent(max, 60.0));
        assert_eq!(got, threads.min(max as usize), "round {round}");
    }
}

#[test]
fn fixed_window_and_token_bucket_never_over_admit() {
    for round in 0..30 {
        let threads = 12 + round % 5;
        let max = 1 + (round as u64 * 5) % 13;
        assert_eq!(admitted(threads, &RuleParams::fixed_window(60.0, max)), threads.min(max as usize));
        assert_eq!(
            admitted(threads, &RuleParams::token_bucket(max as f64, 0.001)),
            threads.min(max as usize)
        );
    }
}
