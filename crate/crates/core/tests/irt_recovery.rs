mod common;

use common::{simulate_2pl, simulate_graded};
use steerbench::irt::{fit_2pl, fit_graded, SamplerConfig};

#[test]
fn two_pl_recovers_planted_items() {
    let (data, truth) = simulate_2pl(200, 20, 7);
    let fit = fit_2pl(
        &data,
        SamplerConfig {
            seed: 11,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    let mut ok = 0;
    for (j, it) in fit.items.iter().enumerate() {
        let b = it.location.values()[0];
        let hit = (it.a - truth.a[j]).abs() <= 0.3 && (b - truth.b[j][0]).abs() <= 0.3;
        eprintln!(
            "item {j}: a {:.2} vs {:.2}, b {:.2} vs {:.2} {}",
            it.a,
            truth.a[j],
            b,
            truth.b[j][0],
            if hit { "" } else { "MISS" }
        );
        ok += usize::from(hit);
    }
    eprintln!(
        "recovered {ok}/20, max rhat {:.3}, ppc {:.4}",
        fit.diagnostics.max_rhat, fit.diagnostics.ppc_error
    );
    assert!(ok >= 16);
    let mean_theta = fit.theta.iter().sum::<f64>() / fit.theta.len() as f64;
    assert!(mean_theta.abs() < 0.1);
    assert!(!fit.non_convergence);
}

#[test]
fn graded_recovers_thresholds() {
    let (data, truth) = simulate_graded(200, 12, 5);
    let fit = fit_graded(
        &data,
        SamplerConfig {
            seed: 3,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    assert!(fit.diagnostics.thresholds_ordered);
    let mut ok = 0;
    for (j, it) in fit.items.iter().enumerate() {
        let t = it.location.values();
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        let hit = t
            .iter()
            .zip(&truth.b[j])
            .all(|(x, y)| (x - y).abs() <= 0.35);
        eprintln!("item {j}: {t:.2?} vs {:.2?}", truth.b[j]);
        ok += usize::from(hit);
    }
    eprintln!(
        "graded recovered {ok}/12, ppc {:.4}",
        fit.diagnostics.ppc_error
    );
    assert!(ok * 4 >= 12 * 3);
    let _ = truth.theta;
}
