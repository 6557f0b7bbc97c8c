mod common;

use common::{brute_force, random_pairs, METRIC_TOLERANCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerbench::metrics::{compute_cell, nad, ndm, DriftPair, RecordIndex};
use steerbench::schema::{
    Condition, DecisionItem, DecisionOption, DecisionRecord, DirectionTable, Emotion, Game,
};

#[test]
fn pair_metrics_match_brute_force_on_1000_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for set in 0..1000 {
        let raw = random_pairs(&mut rng);
        let pairs: Vec<DriftPair> = raw
            .iter()
            .map(|&(a, b, r, d)| DriftPair::new(a, b, r, d))
            .collect();
        let (want_ndm, want_nad) = brute_force(&raw);
        let (got_ndm, got_nad) = (ndm(&pairs).unwrap(), nad(&pairs).unwrap());
        assert!(
            (got_ndm - want_ndm).abs() <= METRIC_TOLERANCE,
            "set {set}: ndm {got_ndm} vs {want_ndm}"
        );
        assert!(
            (got_nad - want_nad).abs() <= METRIC_TOLERANCE,
            "set {set}: nad {got_nad} vs {want_nad}"
        );
        assert!(got_nad.abs() <= got_ndm + METRIC_TOLERANCE, "set {set}");
    }
}

fn item(id: usize, values: &[f64]) -> DecisionItem {
    DecisionItem {
        item_id: format!("it{id}"),
        game: Game::Trust,
        role: "trustor".into(),
        options: values
            .iter()
            .map(|&v| DecisionOption {
                label: format!("v{v}"),
                value: v,
            })
            .collect(),
        source_tags: Default::default(),
        scenario_text: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Cell NDM/NAD equal the per-repeat brute force averaged over repeats.
    #[test]
    fn cell_matches_brute_force(seed in 0u64..100_000, n_items in 1usize..12, repeats in 1u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = DirectionTable::bundled();
        let emotion = Emotion::ALL[rng.random_range(0..6)];
        let direction = table.get(Game::Trust, "trustor", emotion);
        let items: Vec<DecisionItem> = (0..n_items).map(|i| item(i, &[0.0, 10.0, 20.0, 40.0])).collect();
        let mut records = Vec::new();
        let mut per_repeat = vec![Vec::new(); repeats as usize];
        for it in &items {
            for r in 0..repeats {
                let y0 = it.options[rng.random_range(0..4)].value;
                let ye = it.options[rng.random_range(0..4)].value;
                for (condition, alpha, y) in [(Condition::Neutral, 0.0, y0), (Condition::Emotion(emotion), 1.0, ye)] {
                    records.push(DecisionRecord {
                        item_id: it.item_id.clone(),
                        condition,
                        alpha,
                        cot: false,
                        repeat: r,
                        decision_value: y,
                        reasoning_text: None,
                    });
                }
                per_repeat[r as usize].push((y0, ye, 40.0, direction));
            }
        }
        let index = RecordIndex::new(&records).unwrap();
        let cell = compute_cell(Game::Trust, "trustor", &items, &index, Condition::Emotion(emotion), 1.0, false, &table).unwrap();
        let (mut want_ndm, mut want_nad) = (0.0, 0.0);
        for p in &per_repeat {
            let (a, b) = brute_force(p);
            want_ndm += a;
            want_nad += b;
        }
        want_ndm /= repeats as f64;
        want_nad /= repeats as f64;
        prop_assert!((cell.ndm - want_ndm).abs() <= METRIC_TOLERANCE);
        prop_assert!((cell.nad - want_nad).abs() <= METRIC_TOLERANCE);
        prop_assert!(cell.nad.abs() <= cell.ndm + METRIC_TOLERANCE);
        prop_assert_eq!(cell.n_items, n_items);
    }
}
