mod common;

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use common::*;
use engine_core::executor::ExecKind;
use engine_core::model::{Gate, Origin};
use engine_core::oracle::{Oracle, RecordingBackend, RetryPolicy, Role, ScriptedBackend};
use engine_core::persistence::{parse_log, replay, EventBody, EventKind};

fn kinds(log: &str) -> Vec<EventKind> {
    parse_log(log).unwrap().1.iter().map(|e| e.kind()).collect()
}

#[test]
fn scripted_run_is_byte_identical_and_replays_exactly() {
    let task = toy_task();
    let cfg = small_config(2, 6);
    let counter = Arc::new(AtomicU64::new(0));
    let c = counter.clone();
    let recording = Arc::new(RecordingBackend::new(Arc::new(FnBackend(move |r: &_| default_answer(r, &c)))));
    let source = Oracle::new(recording.clone(), RetryPolicy { max_retry: 0, wait_seconds: 0.0 });
    let dir = tempfile::tempdir().unwrap();
    let (first, first_log) = run_to_log(&task, &cfg, &source, &dir.path().join("source"));
    assert!(first.error.is_none(), "{:?}", first.error);
    let fixture = recording.to_jsonl();

    let mut logs = Vec::new();
    for i in 0..2 {
        let oracle = Oracle::scripted(ScriptedBackend::from_jsonl(&fixture).unwrap());
        let (out, log) = run_to_log(&task, &cfg, &oracle, &dir.path().join(format!("scripted{i}")));
        assert!(out.error.is_none(), "{:?}", out.error);
        let (header, events) = parse_log(&log).unwrap();
        let replayed = replay(header.as_ref(), &events).unwrap();
        assert_eq!(replayed.report.as_ref(), Some(&out.report));
        assert_eq!(replayed.report.unwrap().render(), out.report.render());
        assert_eq!(replayed.memory, out.memory);
        logs.push(log);
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0], first_log);
    assert_eq!(first.report.iterations, 6);
    assert!(first.best.is_some());
}

#[test]
fn commits_are_visible_to_other_traces_next_iteration() {
    let task = toy_task();
    let cfg = small_config(2, 4);
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| {
        // Trace 2's initial candidate is rejected so trace 1's commit is the memory best.
        if r.role == Role::Judge && r.get("hypothesis") == Some("initial direction 2") {
            return "REJECT".into();
        }
        default_answer(r, &counter)
    });
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    assert!(out.error.is_none(), "{:?}", out.error);
    let (_, events) = parse_log(&log).unwrap();
    let commit = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::MemoryCommit { entry } => Some((e.trace_id, entry.iteration, entry.hypothesis.text.clone())),
            _ => None,
        })
        .unwrap();
    assert_eq!(commit, (Some(1), 1, "initial direction 1".to_string()));
    let pool = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::HypothesisChosen { iteration: 2, pool, .. } if e.trace_id == Some(2) => Some(pool.clone()),
            _ => None,
        })
        .unwrap();
    assert!(pool.iter().any(|p| p.text == "initial direction 1" && p.origin == Origin::MemoryBest), "{pool:?}");
}

#[test]
fn disabling_sharing_hides_other_traces() {
    let task = toy_task();
    let cfg = engine_core::multitrace::RunConfig { enable_cross_trace_sharing: false, ..small_config(2, 4) };
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| {
        if r.role == Role::Judge && r.get("hypothesis") == Some("initial direction 2") {
            return "REJECT".into();
        }
        default_answer(r, &counter)
    });
    let dir = tempfile::tempdir().unwrap();
    let (_, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    let (_, events) = parse_log(&log).unwrap();
    let pool = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::HypothesisChosen { iteration: 2, pool, .. } if e.trace_id == Some(2) => Some(pool.clone()),
            _ => None,
        })
        .unwrap();
    assert!(pool.iter().all(|p| p.origin == Origin::Local));
}

#[test]
fn every_decision_follows_execution_and_gates() {
    let task = toy_task();
    let cfg = small_config(3, 7);
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| default_answer(r, &counter));
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    let (_, events) = parse_log(&log).unwrap();
    let decisions = events.iter().filter(|e| e.kind() == EventKind::Decision).count();
    assert_eq!(decisions, 7);
    assert_eq!(out.budget.consumed, 7.0);
    for (i, e) in events.iter().enumerate() {
        if let EventBody::Decision { iteration, .. } = e.body {
            let before = &events[..i];
            let same = |k: EventKind| before.iter().any(|b| b.kind() == k && b.trace_id == e.trace_id && b.body.iteration() == Some(iteration));
            assert!(same(EventKind::Executed) && same(EventKind::GateOutcome));
        }
    }
    assert_eq!(kinds(&log).last(), Some(&EventKind::Final));
    // Final selection re-ran the best candidates on every seed.
    match &events.last().unwrap().body {
        EventBody::Final { seed_scores, mean, partial, .. } => {
            assert_eq!(seed_scores.len(), 2);
            assert!(mean.is_some() && !partial);
        }
        _ => unreachable!(),
    }
}

#[test]
fn zero_budget_returns_the_initial_candidate() {
    let task = toy_task();
    let cfg = small_config(1, 0);
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| default_answer(r, &counter));
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    assert!(out.error.is_none());
    assert_eq!(out.report.iterations, 0);
    assert_eq!(out.best.unwrap().id, "t1-i0");
    assert!(!kinds(&log).contains(&EventKind::Executed));
    assert!(out.report.render().contains("improvement rate n/a"));
}

#[test]
fn failed_implementation_is_a_format_rejection() {
    let task = toy_task();
    let cfg = small_config(1, 1);
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| match r.role {
        Role::Implement => "```sh\n```".into(),
        _ => default_answer(r, &counter),
    });
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    assert!(out.error.is_none(), "{:?}", out.error);
    let (header, events) = parse_log(&log).unwrap();
    let gate = events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::GateOutcome { outcome, .. } => Some(outcome.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!((gate.gate, gate.passed), (Gate::Format, false));
    assert!(events.iter().any(|e| matches!(&e.body, EventBody::Executed { mode: ExecKind::DevSubset, score: None, .. })));
    assert_eq!(out.report.accepted, 0);
    assert_eq!(replay(header.as_ref(), &events).unwrap().report.unwrap(), out.report);
}

#[test]
fn oracle_exhaustion_yields_a_partial_report() {
    let task = toy_task();
    let cfg = small_config(2, 4);
    let script = ScriptedBackend::new()
        .with(Role::InitHypothesis, "a\nModel")
        .with(Role::InitHypothesis, "b\nData")
        .with(Role::Sketch, "plan")
        .with(Role::Implement, include_str!("fixtures/toy_bundle/baseline.sh"))
        .with(Role::Sketch, "plan")
        .with(Role::Implement, include_str!("fixtures/toy_bundle/baseline.sh"));
    let oracle = Oracle::scripted(script);
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    let err = out.error.expect("fixtures run out");
    assert!(err.is_oracle_exhaustion(), "{err}");
    assert!(out.report.partial);
    assert!(out.report.render().contains("PARTIAL"));
    let (header, events) = parse_log(&log).unwrap();
    assert_eq!(events.last().unwrap().kind(), EventKind::Final);
    let replayed = replay(header.as_ref(), &events).unwrap();
    assert_eq!(replayed.report.unwrap(), out.report);
}

#[test]
fn budget_extension_is_logged_and_honoured() {
    let task = toy_task();
    let cfg = engine_core::multitrace::RunConfig { llm_decide_longer_runtime: true, ..small_config(1, 4) };
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| match r.role {
        Role::BudgetDecision => "extend".into(),
        _ => default_answer(r, &counter),
    });
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    assert!(out.error.is_none(), "{:?}", out.error);
    assert_eq!((out.budget.total, out.budget.extensions_granted, out.budget.consumed), (5.0, 1, 5.0));
    assert_eq!(kinds(&log).iter().filter(|k| **k == EventKind::BudgetChange).count(), 1);
    assert_eq!(out.report.iterations, 5);
}

#[test]
fn threaded_mode_spends_the_budget_exactly() {
    let task = toy_task();
    let cfg = engine_core::multitrace::RunConfig { deterministic: false, ..small_config(3, 9) };
    let counter = AtomicU64::new(0);
    let oracle = fn_oracle(move |r| default_answer(r, &counter));
    let dir = tempfile::tempdir().unwrap();
    let (out, log) = run_to_log(&task, &cfg, &oracle, dir.path());
    assert!(out.error.is_none(), "{:?}", out.error);
    assert_eq!(out.report.iterations, 9);
    let (header, events) = parse_log(&log).unwrap();
    assert_eq!(replay(header.as_ref(), &events).unwrap().report.unwrap(), out.report);
}
