use std::collections::BTreeSet;

use slice_verify_core::agent::{AgentKind, AgentMode};
use slice_verify_core::bus::{decode_msg, BusMessage};
use slice_verify_core::experiment::{run_experiment, ExperimentConfig, ModelSwap, RunMode};
use slice_verify_core::verifier::EscalationReason;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode: RunMode::ClosedLoop,
        seed,
        run_windows: 140,
        ..ExperimentConfig::default()
    };
    cfg.agent.pretrain_windows = 300;
    cfg.closed_loop.burn_in_windows = 20;
    cfg.closed_loop.verifier_warmup_windows = 80;
    cfg
}

#[test]
fn verdict_log_holds_one_line_per_verified_user() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("verdicts.ndjson");
    let mut cfg = small(3);
    cfg.verdict_log = Some(log.clone());
    let bundle = run_experiment(&cfg).unwrap();
    let summary = bundle.closed_loop.as_ref().unwrap();
    assert_eq!(summary.windows, 140);
    assert_eq!(summary.verified_windows, 60);
    assert_eq!(summary.action_counts.iter().sum::<u64>(), 140);

    let text = std::fs::read_to_string(&log).unwrap();
    let mut windows = BTreeSet::new();
    let mut lines = 0;
    for line in text.lines() {
        let BusMessage::Verdict(v) = decode_msg(line.as_bytes()).unwrap() else {
            panic!("non-verdict line {line}");
        };
        assert_eq!(v.flags.misclass, v.predicted_slice != v.true_slice);
        windows.insert(v.window_id);
        lines += 1;
    }
    assert_eq!(lines, 60 * 18);
    assert_eq!(bundle.events.verdicts, 60 * 18);
    assert_eq!(windows.into_iter().collect::<Vec<_>>(), (80..140).collect::<Vec<u64>>());
}

#[test]
fn permuted_model_swap_escalates() {
    let mut cfg = small(5);
    cfg.closed_loop.model_swap = Some(ModelSwap {
        window: 110,
        permutation: [1, 2, 0],
    });
    let bundle = run_experiment(&cfg).unwrap();
    let reasons: Vec<_> = bundle.escalations.iter().map(|e| (e.reason, e.window_id)).collect();
    let conflict = reasons.iter().find(|(r, _)| *r == EscalationReason::Conflict);
    assert!(matches!(conflict, Some((_, w)) if *w >= 110), "{reasons:?}");
    assert!(bundle.events.misclass > 0);
}

#[test]
fn tcp_bus_matches_in_process() {
    let mut inproc = small(9);
    inproc.agent.kind = AgentKind::Heuristic;
    inproc.agent_mode = AgentMode::UrllcOriented;
    let mut tcp = inproc.clone();
    tcp.bus = "tcp://127.0.0.1:0".into();
    let a = run_experiment(&inproc).unwrap();
    let b = run_experiment(&tcp).unwrap();
    assert_eq!(a.classification, b.classification);
    assert_eq!(a.events, b.events);
    assert_eq!(a.closed_loop, b.closed_loop);
}

#[test]
fn invalid_configs_fail_validation() {
    let cases = [
        ExperimentConfig {
            run_windows: 0,
            ..small(1)
        },
        ExperimentConfig {
            bus: "carrier-pigeon".into(),
            ..small(1)
        },
        {
            let mut c = small(1);
            c.closed_loop.model_swap = Some(ModelSwap {
                window: 90,
                permutation: [0, 0, 1],
            });
            c
        },
        {
            let mut c = small(1);
            c.sim.total_prbs = 0;
            c
        },
    ];
    for cfg in cases {
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
}
