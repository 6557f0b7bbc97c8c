//! Generators and independent oracles shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use steerbench::audit::GatekeeperSet;
use steerbench::irt::ResponseMatrix;
use steerbench::pipeline::{
    derive_vectors, group_vectors, sweep_records, synth_items, synthetic_dumps, train_gatekeepers,
    Config,
};
use steerbench::schema::{ActivationDump, ActivationRow, DecisionItem, DecisionRecord, Emotion};

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

pub const COSINE_TOLERANCE: f64 = 1e-6;

/// Leading eigenvector of the target-contrast covariance by a dense
/// symmetric eigendecomposition, sign-aligned with the centroid difference.
pub fn oracle_direction(dump: &ActivationDump, emotion: Emotion) -> (Vec<f64>, f64) {
    let d = dump.dim();
    let rows = |target: bool| -> Vec<Vec<f64>> {
        dump.rows()
            .iter()
            .filter(|r| (r.emotion == emotion) == target)
            .map(|r| r.vector.iter().map(|&x| x as f64).collect())
            .collect()
    };
    let (pos, neg) = (rows(true), rows(false));
    let centroid = |xs: &[Vec<f64>]| -> Vec<f64> {
        (0..d)
            .map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64)
            .collect()
    };
    let (mu_e, mu_not) = (centroid(&pos), centroid(&neg));
    let m = DMatrix::from_fn(pos.len(), d, |i, k| pos[i][k] - mu_e[k]);
    let cov = (m.transpose() * &m) / (pos.len().max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.imax();
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let contrast: Vec<f64> = mu_e.iter().zip(&mu_not).map(|(a, b)| a - b).collect();
    if v.iter().zip(&contrast).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, eig.eigenvalues[top] / cov.trace())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

const OTHERS: [Emotion; 5] = [
    Emotion::Anger,
    Emotion::Happiness,
    Emotion::Disgust,
    Emotion::Sadness,
    Emotion::Surprise,
];

/// Random dump with n <= 40 rows and d <= 16. Target rows carry a random
/// planted axis with a random spread so the leading eigenvalue is separated.
pub fn random_dump(seed: u64) -> ActivationDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=16);
    let n = rng.random_range(8..=40);
    let n_pos = rng.random_range(3..=n - 3);
    let axis: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let spread = rng.random_range(1.5..4.0);
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let rows = (0..n)
        .map(|i| {
            let target = i < n_pos;
            let s: f64 = if target {
                spread * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let vector = (0..d)
                .map(|k| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let shift = if target { offset[k] } else { 0.0 };
                    (s * axis[k] + 0.3 * noise + shift) as f32
                })
                .collect();
            ActivationRow {
                sample_id: format!("r{i}"),
                emotion: if target {
                    Emotion::Fear
                } else {
                    OTHERS[i % OTHERS.len()]
                },
                vector,
            }
        })
        .collect();
    ActivationDump::new(0, d, rows).unwrap()
}

pub fn transformed(
    dump: &ActivationDump,
    f: impl Fn(usize, f32) -> f32,
    shuffle_seed: Option<u64>,
) -> ActivationDump {
    let mut rows: Vec<ActivationRow> = dump
        .rows()
        .iter()
        .map(|r| ActivationRow {
            vector: r.vector.iter().enumerate().map(|(k, &x)| f(k, x)).collect(),
            ..r.clone()
        })
        .collect();
    if let Some(s) = shuffle_seed {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    ActivationDump::new(dump.layer(), dump.dim(), rows).unwrap()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub const METRIC_TOLERANCE: f64 = 1e-12;

/// Straight-from-the-definition NDM and NAD over one pair set.
pub fn brute_force(pairs: &[(f64, f64, f64, i8)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut signed = 0.0;
    for &(y0, ye, r, d) in pairs {
        abs += ((ye - y0) / r).abs();
        signed += f64::from(d) * (ye - y0) / r;
    }
    (abs / n, signed / n)
}

pub fn random_pairs(rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64, i8)> {
    let n = rng.random_range(1..60);
    (0..n)
        .map(|_| {
            let lo: f64 = rng.random_range(-50.0..50.0);
            let r: f64 = rng.random_range(0.5..100.0);
            let y0 = lo + r * rng.random::<f64>();
            let ye = lo + r * rng.random::<f64>();
            (y0, ye, r, rng.random_range(-1..=1))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// IRT
// ---------------------------------------------------------------------------

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Truth {
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

pub fn simulate_2pl(n: usize, m: usize, seed: u64) -> (ResponseMatrix, Truth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.8..2.0)).collect();
    let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
    let theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let responses = theta
        .iter()
        .map(|t| {
            (0..m)
                .map(|j| Some(u8::from(rng.random::<f64>() < logistic(a[j] * (t - b[j])))))
                .collect()
        })
        .collect();
    let data = ResponseMatrix::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        (0..m).map(|j| format!("i{j}")).collect(),
        responses,
    )
    .unwrap();
    (
        data,
        Truth {
            a,
            b: b.into_iter().map(|x| vec![x]).collect(),
            theta,
        },
    )
}

pub fn simulate_graded(n: usize, m: usize, seed: u64) -> (ResponseMatrix, Truth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.8..2.0)).collect();
    let b: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let b1 = rng.random_range(-1.5..-0.5);
            let b2 = b1 + rng.random_range(0.5..1.0);
            let b3 = b2 + rng.random_range(0.5..1.0);
            vec![b1, b2, b3]
        })
        .collect();
    let theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let responses = theta
        .iter()
        .map(|t| {
            (0..m)
                .map(|j| {
                    let u: f64 = rng.random();
                    let level = b[j]
                        .iter()
                        .filter(|&&bk| u < logistic(a[j] * (t - bk)))
                        .count();
                    Some(level as u8)
                })
                .collect()
        })
        .collect();
    let data = ResponseMatrix::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        (0..m).map(|j| format!("i{j}")).collect(),
        responses,
    )
    .unwrap();
    (data, Truth { a, b, theta })
}

// ---------------------------------------------------------------------------
// Item regression
// ---------------------------------------------------------------------------

pub const PLANTED_BETA: f64 = 0.0245;

/// Items with difficulty ~ U(-2, 2) and discrimination ~ U(0.5, 2); delta
/// NDM is `beta * difficulty + sigma * N(0, 1)` and delta NAD is pure noise.
pub fn planted_rows(
    n: usize,
    beta: f64,
    sigma: f64,
    seed: u64,
) -> Vec<steerbench::irt::regression::RegressionRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let difficulty = rng.random_range(-2.0..2.0);
            let discrimination = rng.random_range(0.5..2.0);
            let e: f64 = rng.sample(StandardNormal);
            let f: f64 = rng.sample(StandardNormal);
            steerbench::irt::regression::RegressionRow {
                difficulty,
                discrimination,
                delta_ndm: 0.1 + beta * difficulty + sigma * e,
                delta_nad: sigma * f,
            }
        })
        .collect()
}

/// Fraction of `permutations` shuffles of delta NDM whose difficulty
/// coefficient has p < 0.05.
pub fn permutation_reject_rate(n: usize, permutations: usize, seed: u64) -> f64 {
    use steerbench::irt::regression::{item_regression, RegressionRow};
    let base = planted_rows(n, PLANTED_BETA, 0.05, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut y: Vec<f64> = base.iter().map(|r| r.delta_ndm).collect();
    let mut rejects = 0;
    for _ in 0..permutations {
        y.shuffle(&mut rng);
        let rows: Vec<RegressionRow> = base
            .iter()
            .zip(&y)
            .map(|(r, &v)| RegressionRow { delta_ndm: v, ..*r })
            .collect();
        let fit = item_regression(&rows).unwrap();
        let p = fit.ndm.coefficient("difficulty").unwrap().p.unwrap();
        rejects += usize::from(p < 0.05);
    }
    rejects as f64 / permutations as f64
}

// ---------------------------------------------------------------------------
// Gatekeeper
// ---------------------------------------------------------------------------

const FILLER: [&str; 12] = [
    "consider", "the", "payoff", "option", "other", "player", "expected", "value", "risk",
    "choose", "because", "round",
];
const FLIP_CUES: [&str; 6] = [
    "furious",
    "outraged",
    "terrified",
    "dread",
    "elated",
    "thrilled",
];
const STAY_CUES: [&str; 6] = [
    "steady",
    "consistent",
    "baseline",
    "unchanged",
    "calm",
    "measured",
];

/// Reasoning texts where flipped decisions carry cue words from one list and
/// kept decisions from another, over shared filler.
pub fn separable_corpus(n: usize, seed: u64) -> (Vec<String>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let flipped = i % 3 == 0;
        let cues = if flipped { &FLIP_CUES } else { &STAY_CUES };
        let mut words: Vec<&str> = (0..rng.random_range(8..16))
            .map(|_| FILLER[rng.random_range(0..FILLER.len())])
            .collect();
        for _ in 0..rng.random_range(1..3) {
            let at = rng.random_range(0..=words.len());
            words.insert(at, cues[rng.random_range(0..cues.len())]);
        }
        texts.push(words.join(" "));
        labels.push(flipped);
    }
    (texts, labels)
}

pub fn permuted(labels: &[bool], seed: u64) -> Vec<bool> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

// ---------------------------------------------------------------------------
// Confound
// ---------------------------------------------------------------------------

/// n x 8 features with labels drawn independently of them.
pub fn null_confound(n: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n)
        .map(|_| (0..8).map(|_| rng.random::<f64>()).collect())
        .collect();
    let y = (0..n).map(|i| i % classes).collect::<Vec<_>>();
    let mut y = y;
    y.shuffle(&mut rng);
    (x, y)
}

/// Two clusters at -1 and +1 on every feature (sd 0.5); rows within unit
/// margin of the separating hyperplane sum(x) = 0 are redrawn, so the
/// classes are linearly separable.
pub fn separable_confound(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    while x.len() < n {
        let class = x.len() % 2;
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let row: Vec<f64> = (0..8)
            .map(|_| sign + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if sign * row.iter().sum::<f64>() < 1.0 {
            continue;
        }
        y.push(class);
        x.push(row);
    }
    (x, y)
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// Synthetic sweep with per-emotion gatekeepers trained on it.
pub struct MockRun {
    pub items: Vec<DecisionItem>,
    pub records: Vec<DecisionRecord>,
    pub set: GatekeeperSet,
}

pub fn mock_run() -> MockRun {
    let cfg = Config {
        items_per_game: 6,
        repeats: 2,
        ..Config::default()
    };
    let (dumps, _) = synthetic_dumps(6, cfg.synthetic_dim, cfg.seed);
    let (_, _, vectors) = derive_vectors(&dumps, &cfg).unwrap();
    let groups = group_vectors(vectors).unwrap();
    let items = synth_items(&cfg);
    let records = sweep_records(&items, &groups, &cfg).unwrap();
    let (models, _) = train_gatekeepers(&records, &cfg).unwrap();
    let map: BTreeMap<_, _> = models
        .into_iter()
        .map(|(label, m)| (label.parse().unwrap(), m))
        .collect();
    MockRun {
        items,
        records,
        set: GatekeeperSet::PerEmotion(map),
    }
}
