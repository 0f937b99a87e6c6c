use std::time::{Duration, Instant};

use joulemeter::harness::{spawn_gated, Launch};
use joulemeter::perf::{CounterGroup, LlcEvent, PerfError, Target};

fn sh(script: &str) -> Launch {
    Launch { argv: vec!["/bin/sh".into(), "-c".into(), script.into()], ..Launch::default() }
}

/// Attach `groups` counter groups to a gated child, run it, and return the
/// task clock of each group with the wall time.
fn run_counted(script: &str, groups: usize) -> Option<(Vec<u64>, Duration)> {
    let mut child = spawn_gated(&sh(script)).unwrap();
    let mut attached = Vec::new();
    for _ in 0..groups {
        match CounterGroup::attach(Target::Process(child.pid()), LlcEvent::Off, true) {
            Ok(g) => attached.push(g),
            Err(PerfError::Permission { source }) => {
                eprintln!("skipping: perf events not permitted here ({source})");
                child.release().unwrap();
                child.wait().unwrap();
                return None;
            }
            Err(e) => panic!("{e}"),
        }
    }
    let start = Instant::now();
    child.release().unwrap();
    assert!(child.wait().unwrap().status.success());
    let wall = start.elapsed();
    Some((attached.iter_mut().map(|g| g.read().unwrap().counters.task_clock_ns).collect(), wall))
}

#[test]
fn short_lived_child_has_task_clock() {
    if let Some((clock, _)) = run_counted("true", 1) {
        assert!(clock[0] > 0);
    }
}

#[test]
fn sleeping_child_uses_little_task_clock() {
    if let Some((clock, wall)) = run_counted("sleep 2", 1) {
        assert!(wall >= Duration::from_secs(2));
        assert!((clock[0] as f64) < 0.05 * wall.as_nanos() as f64, "{} ns of {wall:?}", clock[0]);
    }
}

#[test]
fn second_attach_is_independent() {
    if let Some((clock, wall)) = run_counted("i=0; while [ $i -lt 100000 ]; do i=$((i+1)); done", 2) {
        let (a, b) = (clock[0] as f64, clock[1] as f64);
        assert!(a > 0.0 && b > 0.0);
        // Both groups observe the same exec; they differ only by the
        // moments their enable and disable land.
        assert!((a - b).abs() <= 0.02 * a.max(b) + 2e6, "{a} vs {b} over {wall:?}");
    }
}
