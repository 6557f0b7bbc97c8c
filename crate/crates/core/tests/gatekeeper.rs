mod common;

use common::{mock_run, permuted, separable_corpus};
use steerbench::audit::{fit_audit_model, GatekeeperConfig};
use steerbench::pipeline::{reverting_second_turns, route_records, score_records};
use steerbench::schema::{to_jsonl, DirectionTable};

#[test]
fn separable_corpus_has_high_held_out_auc() {
    let (texts, labels) = separable_corpus(600, 1);
    let (_, report) = fit_audit_model(&texts, &labels, &GatekeeperConfig::default()).unwrap();
    let auc = report.validation_auc.unwrap();
    assert!(auc > 0.95, "held-out AUC {auc}");
}

#[test]
fn permuted_labels_give_chance_auc() {
    let (texts, labels) = separable_corpus(2000, 2);
    for seed in 0..5 {
        let cfg = GatekeeperConfig {
            seed,
            ..GatekeeperConfig::default()
        };
        let (_, report) = fit_audit_model(&texts, &permuted(&labels, 100 + seed), &cfg).unwrap();
        let auc = report.validation_auc.unwrap();
        assert!((auc - 0.5).abs() <= 0.07, "seed {seed}: held-out AUC {auc}");
    }
}

#[test]
fn training_is_deterministic() {
    let (texts, labels) = separable_corpus(200, 3);
    let a = fit_audit_model(&texts, &labels, &GatekeeperConfig::default()).unwrap();
    let b = fit_audit_model(&texts, &labels, &GatekeeperConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn routing_above_every_score_is_a_bitwise_no_op() {
    let run = mock_run();
    let max = score_records(&run.records, &run.set)
        .iter()
        .map(|s| s.score)
        .fold(0.0, f64::max);
    let second = reverting_second_turns(&run.records);
    let (out, report) = route_records(
        &run.items,
        &run.records,
        &second,
        &run.set,
        Some(max + 1e-9),
        &DirectionTable::bundled(),
    )
    .unwrap();
    assert_eq!(report.n_flagged, 0);
    assert_eq!(to_jsonl(&out).as_bytes(), to_jsonl(&run.records).as_bytes());
    assert!(out
        .iter()
        .zip(&run.records)
        .all(|(a, b)| a.decision_value.to_bits() == b.decision_value.to_bits()));
}

#[test]
fn mock_audit_reduces_ndm_and_keeps_unflagged_records() {
    let run = mock_run();
    let second = reverting_second_turns(&run.records);
    let (out, report) = route_records(
        &run.items,
        &run.records,
        &second,
        &run.set,
        None,
        &DirectionTable::bundled(),
    )
    .unwrap();
    let (before, after) = (
        report.ndm_cot_before.unwrap(),
        report.ndm_cot_after.unwrap(),
    );
    assert!(report.n_flagged > 0);
    assert!(after < before, "NDM {before} -> {after}");
    let flagged: std::collections::HashSet<_> = score_records(&run.records, &run.set)
        .into_iter()
        .filter(|s| s.flagged)
        .map(|s| (s.item_id, s.condition, s.alpha.to_bits(), s.cot, s.repeat))
        .collect();
    for (a, b) in out.iter().zip(&run.records) {
        if !flagged.contains(&(
            b.item_id.clone(),
            b.condition,
            b.alpha.to_bits(),
            b.cot,
            b.repeat,
        )) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn tau_zero_routes_every_scored_record() {
    let run = mock_run();
    let second = reverting_second_turns(&run.records);
    let (_, report) = route_records(
        &run.items,
        &run.records,
        &second,
        &run.set,
        Some(0.0),
        &DirectionTable::bundled(),
    )
    .unwrap();
    assert_eq!(report.n_flagged, report.n_scored);
}
