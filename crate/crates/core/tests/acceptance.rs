//! One PASS/FAIL line per acceptance criterion. Exits nonzero on any FAIL.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use steerbench::audit::{fit_audit_model, GatekeeperConfig};
use steerbench::irt::regression::item_regression;
use steerbench::irt::{
    fit_2pl, fit_graded, validity_gates, CalibrationDiagnostics, GateLimits, SamplerConfig,
    SeedStability,
};
use steerbench::metrics::{nad, ndm, DriftPair};
use steerbench::pipeline::{
    reverting_second_turns, route_records, run_selfcheck, score_records, Config, EvaluateReport,
    StageContext,
};
use steerbench::schema::{to_jsonl, Condition, DirectionTable, Emotion, Game};
use steerbench::stats::forest::ForestConfig;
use steerbench::stats::{
    bh_adjust, breslow_day, cmh_test, confound_cv, mcnemar_exact, significance_stars,
    PairedFlipTable, Stratum2x2,
};
use steerbench::steering::{derive_steering_vector, DEFAULT_ALPHAS};

const STEERING_BUDGET: Duration = Duration::from_secs(10);
const STATS_BUDGET: Duration = Duration::from_secs(30);
const IRT_BUDGET: Duration = Duration::from_secs(300);
const SELFCHECK_BUDGET: Duration = Duration::from_secs(120);
const FIXTURE_TOLERANCE: f64 = 1e-6;
const RECOVERY_TOLERANCE: f64 = 0.3;
const RECOVERY_SHARE: f64 = 0.8;
const REGRESSION_RELATIVE: f64 = 0.10;
const NOMINAL_REJECT: (f64, f64) = (0.05, 0.02);
const SEPARABLE_AUC: f64 = 0.95;
const CHANCE_AUC: (f64, f64) = (0.5, 0.07);
const CONFOUND_CHANCE: (f64, f64) = (1.0 / 6.0, 0.06);
const CONFOUND_SEPARABLE: f64 = 0.95;

struct Verdict {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.notes.push(what.into());
        } else {
            self.failures.push(what.into());
        }
    }

    fn within(&mut self, start: Instant, budget: Duration) {
        let t = start.elapsed();
        self.require(
            t < budget,
            format!("{:.1}s (limit {}s)", t.as_secs_f64(), budget.as_secs()),
        );
    }
}

fn steering() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    for seed in 0..100 {
        let dump = random_dump(seed);
        let got = derive_steering_vector(&dump, Emotion::Fear)
            .unwrap()
            .direction;
        worst = worst.min(cosine(&got, &oracle_direction(&dump, Emotion::Fear).0));
    }
    v.require(
        worst > 1.0 - COSINE_TOLERANCE,
        format!("100 dumps min cosine {worst:.9}"),
    );
    let mut inv = f64::INFINITY;
    for seed in 0..100 {
        let dump = random_dump(1000 + seed);
        let base = derive_steering_vector(&dump, Emotion::Fear)
            .unwrap()
            .direction;
        for t in [
            transformed(&dump, |k, x| x + 3.0 - k as f32 * 0.2, None),
            transformed(&dump, |_, x| x * 7.5, None),
            transformed(&dump, |_, x| x, Some(seed)),
        ] {
            inv = inv.min(cosine(
                &base,
                &derive_steering_vector(&t, Emotion::Fear).unwrap().direction,
            ));
        }
    }
    v.require(
        inv > 1.0 - COSINE_TOLERANCE,
        format!("invariance min cosine {inv:.9}"),
    );
    v.within(start, STEERING_BUDGET);
    v
}

fn metric() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut err, mut bound_ok) = (0.0f64, true);
    for _ in 0..1000 {
        let raw = random_pairs(&mut rng);
        let pairs: Vec<DriftPair> = raw
            .iter()
            .map(|&(a, b, r, d)| DriftPair::new(a, b, r, d))
            .collect();
        let (want_ndm, want_nad) = brute_force(&raw);
        let (got_ndm, got_nad) = (ndm(&pairs).unwrap(), nad(&pairs).unwrap());
        err = err
            .max((got_ndm - want_ndm).abs())
            .max((got_nad - want_nad).abs());
        bound_ok &= got_nad.abs() <= got_ndm + METRIC_TOLERANCE;
    }
    v.require(
        err <= METRIC_TOLERANCE,
        format!("1000 sets max error {err:.1e}"),
    );
    v.require(bound_ok, "|NAD| <= NDM");
    v
}

#[derive(Deserialize)]
struct Case {
    strata: Vec<[u64; 4]>,
    cmh_chi2: f64,
    cmh_p: f64,
    pooled_rd: f64,
    bd_chi2: f64,
    bd_p: f64,
}

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

fn stats() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let p = mcnemar_exact(&PairedFlipTable {
        n00: 0,
        n01: 1,
        n10: 5,
        n11: 0,
    })
    .unwrap();
    v.require(p == 0.21875, format!("McNemar(1,5) {p}"));
    let q = bh_adjust(&[0.01, 0.02, 0.04]).unwrap();
    let want = [0.03, 0.03, 0.04];
    v.require(
        q.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15),
        format!("BH {q:?}"),
    );
    let f: Fixture = serde_json::from_str(include_str!("fixtures/cmh_breslow_day.json")).unwrap();
    let mut err = 0.0f64;
    for c in &f.cases {
        let s: Vec<Stratum2x2> = c
            .strata
            .iter()
            .map(|&[a, b, cc, d]| Stratum2x2::new(a, b, cc, d))
            .collect();
        let cmh = cmh_test(&s).unwrap();
        let bd = breslow_day(&s).unwrap();
        for (got, want) in [
            (cmh.chi2, c.cmh_chi2),
            (cmh.p, c.cmh_p),
            (cmh.pooled_rd, c.pooled_rd),
            (bd.chi2, c.bd_chi2),
            (bd.p, c.bd_p),
        ] {
            err = err.max((got - want).abs());
        }
    }
    v.require(
        f.cases.len() == 50 && err < FIXTURE_TOLERANCE,
        format!("CMH/BD {} tables max error {err:.1e}", f.cases.len()),
    );
    let stars = [
        (0.05, ""),
        (0.0499, "*"),
        (0.01, "*"),
        (0.0099, "**"),
        (0.001, "**"),
        (0.00099, "***"),
    ];
    v.require(
        stars.iter().all(|&(q, s)| significance_stars(q) == s),
        "stars at 0.05/0.01/0.001",
    );
    v.within(start, STATS_BUDGET);
    v
}

const TABLE_ROWS: [(&str, f64, f64, f64, f64); 7] = [
    ("Escalation", 0.018, 0.52, 0.24, 0.19),
    ("PD", 0.018, 0.49, 0.27, 0.22),
    ("Stag Hunt", 0.016, 0.56, 0.21, 0.18),
    ("Trust trustee", 0.054, 0.51, 0.24, 0.20),
    ("Trust trustor", 0.050, 0.54, 0.22, 0.19),
    ("Ultimatum proposer", 0.024, 0.47, 0.20, 0.17),
    ("Ultimatum responder", 0.018, 0.46, 0.25, 0.21),
];

fn irt() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let (data, truth) = simulate_2pl(200, 20, 7);
    let fit = fit_2pl(
        &data,
        SamplerConfig {
            seed: 11,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    let hits = fit
        .items
        .iter()
        .enumerate()
        .filter(|(j, it)| {
            (it.a - truth.a[*j]).abs() <= RECOVERY_TOLERANCE
                && (it.location.values()[0] - truth.b[*j][0]).abs() <= RECOVERY_TOLERANCE
        })
        .count();
    v.require(
        hits as f64 >= RECOVERY_SHARE * 20.0,
        format!("2PL {hits}/20 items within {RECOVERY_TOLERANCE}"),
    );
    let (data, _) = simulate_graded(200, 12, 5);
    let graded = fit_graded(
        &data,
        SamplerConfig {
            seed: 3,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    let ordered = graded.diagnostics.thresholds_ordered
        && graded
            .items
            .iter()
            .all(|it| it.location.values().windows(2).all(|w| w[0] < w[1]));
    v.require(ordered, "graded thresholds strictly increasing");
    let failing: Vec<&str> = TABLE_ROWS
        .iter()
        .filter(|(_, mae, a, da, db)| {
            let diag = CalibrationDiagnostics {
                ppc_error: *mae,
                min_discrimination: *a,
                thresholds_ordered: true,
                max_rhat: 1.0,
                seed_stability: Some(SeedStability {
                    mean_abs_da: *da,
                    max_abs_da: *da,
                    mean_abs_db: *db,
                    max_abs_db: *db,
                    refits: 3,
                }),
            };
            !validity_gates(&diag, &GateLimits::default()).passed()
        })
        .map(|r| r.0)
        .collect();
    v.require(
        failing.is_empty(),
        format!("calibration rows failing gates {failing:?}"),
    );
    v.within(start, IRT_BUDGET);
    v
}

fn regression() -> Verdict {
    let mut v = Verdict::new();
    let fit = item_regression(&planted_rows(40, PLANTED_BETA, 0.0, 3)).unwrap();
    let b = fit.ndm.coefficient("difficulty").unwrap().beta;
    v.require(
        (b - PLANTED_BETA).abs() <= REGRESSION_RELATIVE * PLANTED_BETA,
        format!("beta {b:.6} vs {PLANTED_BETA}"),
    );
    let rate = permutation_reject_rate(40, 1000, 17);
    v.require(
        (rate - NOMINAL_REJECT.0).abs() <= NOMINAL_REJECT.1,
        format!("permutation null reject rate {rate:.3}"),
    );
    v
}

fn gatekeeper() -> Verdict {
    let mut v = Verdict::new();
    let (texts, labels) = separable_corpus(600, 1);
    let auc = fit_audit_model(&texts, &labels, &GatekeeperConfig::default())
        .unwrap()
        .1
        .validation_auc
        .unwrap();
    v.require(auc > SEPARABLE_AUC, format!("separable AUC {auc:.3}"));
    let (texts, labels) = separable_corpus(2000, 2);
    let chance = (0..5u64)
        .map(|seed| {
            let cfg = GatekeeperConfig {
                seed,
                ..GatekeeperConfig::default()
            };
            fit_audit_model(&texts, &permuted(&labels, 100 + seed), &cfg)
                .unwrap()
                .1
                .validation_auc
                .unwrap()
        })
        .collect::<Vec<_>>();
    v.require(
        chance
            .iter()
            .all(|a| (a - CHANCE_AUC.0).abs() <= CHANCE_AUC.1),
        format!("permuted AUC {chance:.3?}"),
    );
    let run = mock_run();
    let table = DirectionTable::bundled();
    let second = reverting_second_turns(&run.records);
    let max = score_records(&run.records, &run.set)
        .iter()
        .map(|s| s.score)
        .fold(0.0, f64::max);
    let (out, _) = route_records(
        &run.items,
        &run.records,
        &second,
        &run.set,
        Some(max + 1e-9),
        &table,
    )
    .unwrap();
    v.require(
        to_jsonl(&out).as_bytes() == to_jsonl(&run.records).as_bytes(),
        "tau above all scores is a no-op",
    );
    let (_, report) =
        route_records(&run.items, &run.records, &second, &run.set, None, &table).unwrap();
    let (before, after) = (
        report.ndm_cot_before.unwrap(),
        report.ndm_cot_after.unwrap(),
    );
    v.require(
        after < before,
        format!("mock audit NDM {before:.3} -> {after:.3}"),
    );
    v
}

fn confound() -> Verdict {
    let mut v = Verdict::new();
    let (x, y) = null_confound(600, 6, 5);
    let null = confound_cv(&x, &y, 5, 0, &ForestConfig::default())
        .unwrap()
        .mean_accuracy;
    v.require(
        (null - CONFOUND_CHANCE.0).abs() <= CONFOUND_CHANCE.1,
        format!("null accuracy {null:.3}"),
    );
    let (x, y) = separable_confound(400, 6);
    let sep = confound_cv(&x, &y, 5, 0, &ForestConfig::default())
        .unwrap()
        .mean_accuracy;
    v.require(
        sep > CONFOUND_SEPARABLE,
        format!("separable accuracy {sep:.3}"),
    );
    v
}

fn selfcheck() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::selfcheck();
    v.require(
        cfg.alphas == DEFAULT_ALPHAS && cfg.emotions == Emotion::ALL,
        "alphas 0.6/0.8/1.0/1.5, 6 emotions",
    );
    let outcome = run_selfcheck(&StageContext::new(cfg, None, dir.path())).unwrap();
    for c in &outcome.checks {
        v.require(c.passed, format!("{}: {}", c.name, c.detail));
    }
    let text = std::fs::read_to_string(dir.path().join("run1/metrics.json")).unwrap();
    let report: EvaluateReport = serde_json::from_str(&text).unwrap();
    let covered: BTreeSet<(Game, Emotion, u64)> = report
        .cells
        .iter()
        .filter_map(|c| match c.condition {
            Condition::Emotion(e) => Some((c.game, e, c.alpha.to_bits())),
            _ => None,
        })
        .collect();
    v.require(
        covered.len() == 7 * 6 * 4,
        format!("{} game x emotion x alpha cells", covered.len()),
    );
    v.within(start, SELFCHECK_BUDGET);
    v
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("steering_oracle", steering),
        ("metric_oracle", metric),
        ("stats", stats),
        ("irt", irt),
        ("regression", regression),
        ("gatekeeper", gatekeeper),
        ("confound", confound),
        ("selfcheck", selfcheck),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let v = run();
        if v.failures.is_empty() {
            println!("PASS {name}: {}", v.notes.join("; "));
        } else {
            failed += 1;
            println!(
                "FAIL {name}: {} [passed: {}]",
                v.failures.join("; "),
                v.notes.join("; ")
            );
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
