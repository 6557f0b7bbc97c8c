use proptest::prelude::*;
use serde::Deserialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use steerbench::stats::special::{chi2_sf, t_two_sided};
use steerbench::stats::{
    bh_adjust, breslow_day, cmh_test, mcnemar_exact, PairedFlipTable, Stratum2x2,
};

#[derive(Deserialize)]
struct Case {
    strata: Vec<[u64; 4]>,
    cmh_chi2: f64,
    cmh_p: f64,
    pooled_rd: f64,
    bd_chi2: f64,
    bd_p: f64,
    mh_odds_ratio: f64,
}

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("fixtures/cmh_breslow_day.json")).unwrap()
}

fn strata(c: &Case) -> Vec<Stratum2x2> {
    c.strata
        .iter()
        .map(|&[a, b, cc, d]| Stratum2x2::new(a, b, cc, d))
        .collect()
}

#[test]
fn cmh_and_breslow_day_match_statsmodels() {
    let f = fixture();
    assert_eq!(f.cases.len(), 50);
    for (i, c) in f.cases.iter().enumerate() {
        let s = strata(c);
        let cmh = cmh_test(&s).unwrap();
        let bd = breslow_day(&s).unwrap();
        assert!(
            (cmh.chi2 - c.cmh_chi2).abs() < 1e-6,
            "case {i}: cmh chi2 {} vs {}",
            cmh.chi2,
            c.cmh_chi2
        );
        assert!((cmh.p - c.cmh_p).abs() < 1e-6, "case {i}");
        assert!((cmh.pooled_rd - c.pooled_rd).abs() < 1e-6, "case {i}");
        assert!(
            (bd.chi2 - c.bd_chi2).abs() < 1e-6,
            "case {i}: bd chi2 {} vs {}",
            bd.chi2,
            c.bd_chi2
        );
        assert!((bd.p - c.bd_p).abs() < 1e-6, "case {i}");
        assert!(
            (bd.common_odds_ratio - c.mh_odds_ratio).abs() < 1e-9,
            "case {i}"
        );
        assert_eq!(bd.df, s.len() - 1);
    }
}

#[test]
fn tail_functions_match_statrs() {
    for df in [1.0, 2.0, 3.0, 5.0, 10.0, 40.0] {
        let d = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.5, 1.0, 3.84, 7.5, 20.0, 60.0] {
            let want = d.sf(x);
            assert!((chi2_sf(x, df) - want).abs() < 1e-10, "chi2 df {df} x {x}");
        }
        let t = StudentsT::new(0.0, 1.0, df).unwrap();
        for x in [0.0, 0.3, 1.0, 2.0, 4.5, 9.0] {
            let want = 2.0 * t.sf(x);
            assert!((t_two_sided(x, df) - want).abs() < 1e-10, "t df {df} x {x}");
            assert!((t_two_sided(-x, df) - want).abs() < 1e-10);
        }
    }
}

fn brute_mcnemar(b: u64, c: u64) -> f64 {
    // exact rational: sum C(n, i) for i <= min(b, c), over 2^n
    let n = b + c;
    let mut coef = 1u128;
    let mut sum = 0u128;
    for i in 0..=b.min(c) {
        sum += coef;
        coef = coef * (n - i) as u128 / (i + 1) as u128;
    }
    (2.0 * sum as f64 / 2f64.powi(n as i32)).min(1.0)
}

proptest! {
    #[test]
    fn mcnemar_symmetric_and_exact(b in 0u64..60, c in 0u64..60, n00 in 0u64..20, n11 in 0u64..20) {
        prop_assume!(b + c > 0);
        let t = PairedFlipTable { n00, n01: b, n10: c, n11 };
        let s = PairedFlipTable { n00, n01: c, n10: b, n11 };
        let p = mcnemar_exact(&t).unwrap();
        prop_assert_eq!(p, mcnemar_exact(&s).unwrap());
        prop_assert!((p - brute_mcnemar(b, c)).abs() <= 1e-14 * p.max(1e-300) + 1e-300);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn bh_monotone_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let q = bh_adjust(&p).unwrap();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
        for w in order.windows(2) {
            prop_assert!(q[w[0]] <= q[w[1]]);
        }
        for (pi, qi) in p.iter().zip(&q) {
            prop_assert!(qi >= pi && *qi <= 1.0);
        }
        let top = *order.last().unwrap();
        prop_assert_eq!(q[top], p[top]);
    }

    #[test]
    fn cmh_invariants(tables in prop::collection::vec((1u64..30, 1u64..30, 1u64..30, 1u64..30), 1..6), rot in 0usize..6) {
        let s: Vec<Stratum2x2> = tables.iter().map(|&(a, b, c, d)| Stratum2x2::new(a, b, c, d)).collect();
        let base = cmh_test(&s).unwrap();
        let mut doubled = s.clone();
        doubled.extend(s.iter().copied());
        let dd = cmh_test(&doubled).unwrap();
        prop_assert!((dd.pooled_rd - base.pooled_rd).abs() < 1e-12);
        prop_assert!((dd.chi2 - 2.0 * base.chi2).abs() < 1e-9 * (1.0 + base.chi2));
        let mut rotated = s.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let r = cmh_test(&rotated).unwrap();
        prop_assert!((r.chi2 - base.chi2).abs() < 1e-9 * (1.0 + base.chi2));
        prop_assert!((r.pooled_rd - base.pooled_rd).abs() < 1e-12);
    }

    #[test]
    fn cmh_single_stratum_is_score_test(a in 1u64..40, b in 1u64..40, c in 1u64..40, d in 1u64..40) {
        // unstratified score statistic: n(ad - bc)^2 (n-1)/n over margins product
        let (af, bf, cf, df) = (a as f64, b as f64, c as f64, d as f64);
        let n = af + bf + cf + df;
        let score = (n - 1.0) * (af * df - bf * cf).powi(2) / ((af + bf) * (cf + df) * (af + cf) * (bf + df));
        let r = cmh_test(&[Stratum2x2::new(a, b, c, d)]).unwrap();
        prop_assert!((r.chi2 - score).abs() < 1e-9 * (1.0 + score));
    }
}
