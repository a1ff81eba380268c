//! Runs every acceptance criterion and prints one PASS/FAIL line for each.

mod common;

use std::time::Instant;

use common::checks::{self, Check};

type Criterion = (&'static str, Box<dyn Fn() -> Check>);

#[test]
fn acceptance_criteria() {
    let criteria: Vec<Criterion> = vec![
        ("state machine", Box::new(|| checks::state_machine(1000))),
        ("expansion", Box::new(checks::expansion)),
        ("scheduling oracle", Box::new(|| checks::scheduling(500))),
        ("replica selection", Box::new(|| checks::replica_selection(300))),
        ("crash recovery", Box::new(|| checks::crash_recovery(5, 200, 20))),
        ("fault tolerance", Box::new(checks::fault_tolerance)),
        ("bench profiles", Box::new(|| checks::bench_profiles(50))),
        ("memory bound", Box::new(|| checks::memory_bound(2000, 100))),
        ("no secrets", Box::new(checks::no_secrets)),
        ("adapter interchangeability", Box::new(checks::interchangeability)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg} [{secs:.2} s]", i + 1),
            Err(msg) => {
                println!("criterion {:>2} FAIL {name}: {msg} [{secs:.2} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
