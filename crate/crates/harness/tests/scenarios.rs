//! Whole-system runs inside the simulator: fault injection, late
//! arrivals, capability mismatches, and a randomized scenario sweep
//! checked against the sequential oracle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use taskfarm_core::client::ComputeError;
use taskfarm_core::trace::TraceEvent;
use taskfarm_harness::scenario::{
    expected_outputs, run_scenario, ClientSection, FaultSpec, InputSection, JobSection, Scenario,
    ScenarioOutcome, WorkerSection,
};

fn run(src: &str) -> ScenarioOutcome {
    let s = Scenario::from_toml(src).unwrap();
    run_scenario(&s).unwrap()
}

#[test]
fn silent_worker_is_detected_by_ping_timeout() {
    let src = r#"
        [job]
        skeleton = "farm(seq(delay))"
        [input]
        count = 40
        payload = "t"
        [[workers]]
        processors = ["delay"]
        service-time-ms = 20
        fault = { kind = "drop-after-assign" }
        [[workers]]
        processors = ["delay"]
        service-time-ms = 20
    "#;
    let s = Scenario::from_toml(src).unwrap();
    let outcome = run_scenario(&s).unwrap();
    let got = outcome.result.expect("healthy worker finishes the job");
    assert_eq!(got, expected_outputs(&s).unwrap());
    outcome.trace.assert_well_formed();

    // The partitioned worker answers nothing, so only the keepalive can
    // notice: one ping interval of silence, one timeout of waiting.
    let hosts = outcome.trace.service_hosts();
    let dropped = hosts
        .iter()
        .find(|(_, h)| h.as_str() == "worker0")
        .map(|(s, _)| *s)
        .expect("partitioned worker registered");
    let assigned = outcome
        .trace
        .first(|e| matches!(e, TraceEvent::Assigned { service, .. } if *service == dropped))
        .expect("partitioned worker got a task")
        .at_ms;
    let failed = outcome
        .trace
        .first(|e| matches!(e, TraceEvent::Failed { service } if *service == dropped))
        .expect("partitioned worker declared dead")
        .at_ms;
    let detection = failed - assigned;
    assert!(
        (4_000..4_200).contains(&detection),
        "detection after one interval plus one timeout, got {detection} ms"
    );
    assert!(
        outcome
            .trace
            .count(|e| matches!(e, TraceEvent::Rescheduled { .. }))
            >= 1,
        "the silently lost task must be rescheduled"
    );
}

#[test]
fn late_worker_rescues_a_stalled_job() {
    let src = r#"
        [job]
        skeleton = "farm(seq(reverse))"
        [input]
        lines = ["one", "two", "three"]
        [[workers]]
        processors = ["reverse"]
        service-time-ms = 5
        arrival-ms = 3000
    "#;
    let s = Scenario::from_toml(src).unwrap();
    let outcome = run_scenario(&s).unwrap();
    let got = outcome.result.expect("late worker still completes the job");
    assert_eq!(got, expected_outputs(&s).unwrap());
    // Nothing can be assigned before the worker exists.
    let first_assign = outcome
        .trace
        .first(|e| matches!(e, TraceEvent::Assigned { .. }))
        .unwrap()
        .at_ms;
    assert!(first_assign >= 3000, "assignment before the worker arrived");
    assert!(
        outcome
            .trace
            .count(|e| matches!(e, TraceEvent::Notified { .. }))
            >= 1,
        "the late worker must come in through a subscription push"
    );
}

#[test]
fn no_matching_worker_fails_after_the_startup_window() {
    let src = r#"
        [job]
        skeleton = "farm(seq(identity))"
        [input]
        lines = ["x"]
        [[workers]]
        processors = ["reverse"]
        [client]
        startup-window-ms = 500
    "#;
    let outcome = run(src);
    match outcome.result {
        Err(ComputeError::NoServicesAvailable) => {}
        other => panic!("expected NoServicesAvailable, got {other:?}"),
    }
    assert_eq!(
        outcome
            .trace
            .count(|e| matches!(e, TraceEvent::Recruited { .. })),
        0
    );
}

#[test]
fn partially_capable_worker_is_rejected_at_recruitment() {
    // worker0 advertises the first stage only, so it matches the
    // subscription filter but cannot instantiate the full pipeline.
    let src = r#"
        [job]
        skeleton = "pipe(farm(seq(reverse)), seq(append))"
        [job.config]
        append = "!"
        [input]
        lines = ["ab", "cd", "ef"]
        [[workers]]
        processors = ["reverse"]
        [[workers]]
        processors = ["reverse", "append"]
        service-time-ms = 3
    "#;
    let s = Scenario::from_toml(src).unwrap();
    let outcome = run_scenario(&s).unwrap();
    let got = outcome
        .result
        .expect("fully capable worker carries the job");
    assert_eq!(got, expected_outputs(&s).unwrap());
    assert_eq!(got[0], b"ba!".to_vec());
    // Exactly one worker ever serves tasks.
    assert_eq!(outcome.trace.completed_counts_by_host().len(), 1);
}

#[test]
fn crash_at_time_before_arrival_never_serves() {
    let src = r#"
        [job]
        skeleton = "farm(seq(reverse))"
        [input]
        lines = ["live", "wire"]
        [[workers]]
        processors = ["reverse"]
        arrival-ms = 1000
        fault = { kind = "crash-at-time", at-ms = 200 }
        [[workers]]
        processors = ["reverse"]
    "#;
    let s = Scenario::from_toml(src).unwrap();
    let outcome = run_scenario(&s).unwrap();
    assert_eq!(outcome.result.unwrap(), expected_outputs(&s).unwrap());
    let hosts = outcome.trace.service_hosts();
    assert!(
        !hosts.values().any(|h| h == "worker0"),
        "a worker crashed before arrival must never register"
    );
}

fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (skeleton, leaves, config): (&str, Vec<&str>, Vec<(&str, &str)>) = match rng.gen_range(0..4)
    {
        0 => ("farm(seq(reverse))", vec!["reverse"], vec![]),
        1 => (
            "farm(pipe(seq(reverse), seq(append)))",
            vec!["reverse", "append"],
            vec![("append", "!")],
        ),
        2 => ("farm(seq(delay))", vec!["delay"], vec![]),
        _ => (
            "pipe(farm(seq(identity)), seq(append))",
            vec!["identity", "append"],
            vec![("append", "?")],
        ),
    };

    let tasks = rng.gen_range(5..45);
    let lines = (0..tasks)
        .map(|_| {
            let len = rng.gen_range(0..12);
            (0..len)
                .map(|_| rng.gen_range(b'a'..=b'z') as char)
                .collect::<String>()
        })
        .collect();

    let mut workers = Vec::new();
    for _ in 0..rng.gen_range(1..4) {
        workers.push(WorkerSection {
            processors: leaves.iter().map(|s| s.to_string()).collect(),
            service_time_ms: rng.gen_range(1..40),
            arrival_ms: if rng.gen_bool(0.7) {
                0
            } else {
                rng.gen_range(1..1500)
            },
            fault: None,
        });
    }
    if rng.gen_bool(0.5) {
        let fault = match rng.gen_range(0..3) {
            0 => FaultSpec::CrashAfterTasks {
                completed: rng.gen_range(0..4),
            },
            1 => FaultSpec::CrashAtTime {
                at_ms: rng.gen_range(200..2500),
            },
            _ => FaultSpec::DropAfterAssign,
        };
        workers.push(WorkerSection {
            processors: leaves.iter().map(|s| s.to_string()).collect(),
            service_time_ms: rng.gen_range(1..40),
            arrival_ms: 0,
            fault: Some(fault),
        });
    }

    Scenario {
        seed,
        latency_ms: rng.gen_range(0..4),
        time_limit_ms: 600_000,
        job: JobSection {
            skeleton: skeleton.to_string(),
            config: config
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<BTreeMap<_, _>>(),
        },
        input: InputSection {
            lines,
            count: None,
            payload: None,
        },
        workers,
        client: ClientSection::default(),
    }
}

#[test]
fn randomized_sweep_matches_sequential_oracle() {
    for seed in 0..40 {
        let s = random_scenario(seed);
        let outcome = run_scenario(&s).unwrap();
        let got = outcome
            .result
            .unwrap_or_else(|e| panic!("seed {seed}: computation failed: {e}"));
        let want = expected_outputs(&s).unwrap();
        assert_eq!(
            got, want,
            "seed {seed}: outputs diverge from sequential oracle"
        );
        outcome.trace.assert_well_formed();
    }
}
