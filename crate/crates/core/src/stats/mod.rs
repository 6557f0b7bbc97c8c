//! Significance tests over neutral/steered decisions: exact McNemar,
//! Benjamini-Hochberg, Cochran-Mantel-Haenszel with a pooled risk
//! difference, Breslow-Day, and the shallow-feature confound audit.

pub mod forest;
pub mod special;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::response_range;
use crate::metrics::{pair_records, RecordIndex};
use crate::schema::{Condition, DecisionItem, DirectionTable, Game};
use forest::{ForestConfig, RandomForest};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no discordant pairs (b + c = 0)")]
    NoDiscordantPairs,
    #[error("every stratum has a zero margin")]
    AllStrataDegenerate,
    #[error("Breslow-Day needs at least 2 usable strata, found {0}")]
    TooFewStrata(usize),
    #[error("p-value {0} is outside [0, 1]")]
    InvalidPValue(f64),
    #[error("{folds} folds exceed the smallest class size {smallest}")]
    FoldsExceedClass { folds: usize, smallest: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("features and labels disagree in length ({features} vs {labels})")]
    ShapeMismatch { features: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
}

// ---------------------------------------------------------------------------
// McNemar
// ---------------------------------------------------------------------------

/// Neutral decision (row) by steered decision (column) on the focal indicator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedFlipTable {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

/// P(X <= k) for X ~ Binomial(n, 1/2).
fn binom_half_cdf(k: u64, n: u64) -> f64 {
    if n <= 1000 {
        let mut term = 0.5f64.powi(n as i32);
        let mut sum = term;
        for i in 0..k {
            term *= (n - i) as f64 / (i + 1) as f64;
            sum += term;
        }
        sum
    } else {
        let ln_half = -(n as f64) * std::f64::consts::LN_2;
        let ln_n1 = special::ln_gamma(n as f64 + 1.0);
        let logs: Vec<f64> = (0..=k)
            .map(|i| {
                ln_n1 - special::ln_gamma(i as f64 + 1.0) - special::ln_gamma((n - i) as f64 + 1.0)
                    + ln_half
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m.exp() * logs.iter().map(|l| (l - m).exp()).sum::<f64>()
    }
}

/// Two-sided exact McNemar p-value.
pub fn mcnemar_exact(t: &PairedFlipTable) -> Result<f64, StatsError> {
    let (b, c) = (t.n01, t.n10);
    if b + c == 0 {
        return Err(StatsError::NoDiscordantPairs);
    }
    Ok((2.0 * binom_half_cdf(b.min(c), b + c)).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarOutcome {
    pub p: f64,
    pub no_discordant: bool,
}

/// McNemar with p = 1 (flagged) when nothing is discordant.
pub fn mcnemar_or_one(t: &PairedFlipTable) -> McNemarOutcome {
    match mcnemar_exact(t) {
        Ok(p) => McNemarOutcome {
            p,
            no_discordant: false,
        },
        Err(_) => McNemarOutcome {
            p: 1.0,
            no_discordant: true,
        },
    }
}

// ---------------------------------------------------------------------------
// FDR
// ---------------------------------------------------------------------------

/// Benjamini-Hochberg step-up q-values, in input order.
pub fn bh_adjust(pvals: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].total_cmp(&pvals[j]).then(i.cmp(&j)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &i) in order.iter().enumerate().rev() {
        let v = pvals[i] * (m as f64 / (rank0 + 1) as f64);
        running = running.min(v);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

pub fn significance_stars(q: f64) -> &'static str {
    if q < 0.001 {
        "***"
    } else if q < 0.01 {
        "**"
    } else if q < 0.05 {
        "*"
    } else {
        ""
    }
}

// ---------------------------------------------------------------------------
// Stratified tests
// ---------------------------------------------------------------------------

/// One repeat's focal-behavior (columns) by condition (rows) table:
/// a = steered & focal, b = steered & other, c = neutral & focal,
/// d = neutral & other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Stratum2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Stratum2x2 { a, b, c, d }
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn is_includable(&self) -> bool {
        self.a + self.b > 0 && self.c + self.d > 0 && self.a + self.c > 0 && self.b + self.d > 0
    }

    pub fn risk_difference(&self) -> f64 {
        self.a as f64 / (self.a + self.b) as f64 - self.c as f64 / (self.c + self.d) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmhResult {
    pub chi2: f64,
    pub p: f64,
    pub pooled_rd: f64,
    pub strata_used: usize,
    pub strata_skipped: usize,
}

pub fn cmh_test(strata: &[Stratum2x2]) -> Result<CmhResult, StatsError> {
    let used: Vec<&Stratum2x2> = strata.iter().filter(|s| s.is_includable()).collect();
    if used.is_empty() {
        return Err(StatsError::AllStrataDegenerate);
    }
    let (mut dev, mut var, mut rd_num, mut w_sum) = (0.0, 0.0, 0.0, 0.0);
    for s in &used {
        let n = s.n() as f64;
        let n1 = (s.a + s.b) as f64;
        let n0 = (s.c + s.d) as f64;
        let m1 = (s.a + s.c) as f64;
        let m0 = (s.b + s.d) as f64;
        dev += s.a as f64 - n1 * m1 / n;
        var += n1 * n0 * m1 * m0 / (n * n * (n - 1.0));
        let w = n1 * n0 / n;
        rd_num += w * s.risk_difference();
        w_sum += w;
    }
    let chi2 = dev * dev / var;
    Ok(CmhResult {
        chi2,
        p: special::chi2_sf(chi2, 1.0),
        pooled_rd: rd_num / w_sum,
        strata_used: used.len(),
        strata_skipped: strata.len() - used.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreslowDayResult {
    pub chi2: f64,
    pub p: f64,
    pub df: usize,
    pub common_odds_ratio: f64,
    /// 0.5 was added to every cell because the common odds ratio was 0 or infinite.
    pub continuity_added: bool,
}

pub fn breslow_day(strata: &[Stratum2x2]) -> Result<BreslowDayResult, StatsError> {
    let used: Vec<[f64; 4]> = strata
        .iter()
        .filter(|s| s.is_includable())
        .map(|s| [s.a as f64, s.b as f64, s.c as f64, s.d as f64])
        .collect();
    if used.len() < 2 {
        return Err(StatsError::TooFewStrata(used.len()));
    }
    let mh = |cells: &[[f64; 4]]| {
        let num: f64 = cells
            .iter()
            .map(|[a, b, c, d]| a * d / (a + b + c + d))
            .sum();
        let den: f64 = cells
            .iter()
            .map(|[a, b, c, d]| b * c / (a + b + c + d))
            .sum();
        num / den
    };
    let mut cells = used;
    let mut psi = mh(&cells);
    let continuity_added = !(psi.is_finite() && psi > 0.0);
    if continuity_added {
        cells.iter_mut().flatten().for_each(|v| *v += 0.5);
        psi = mh(&cells);
    }
    let mut chi2 = 0.0;
    for [a, b, c, d] in &cells {
        let n1 = a + b;
        let n0 = c + d;
        let m1 = a + c;
        let lo = (m1 - n0).max(0.0);
        let hi = n1.min(m1);
        let fitted = if (psi - 1.0).abs() < 1e-12 {
            n1 * m1 / (n1 + n0)
        } else {
            let qa = 1.0 - psi;
            let qb = n0 - m1 + psi * (n1 + m1);
            let qc = -psi * n1 * m1;
            let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
            let r1 = (-qb + disc) / (2.0 * qa);
            let r2 = (-qb - disc) / (2.0 * qa);
            let inside = |r: f64| r >= lo - 1e-9 && r <= hi + 1e-9;
            if inside(r1) {
                r1
            } else {
                r2
            }
        };
        let eb = n1 - fitted;
        let ec = m1 - fitted;
        let ed = n0 - m1 + fitted;
        let v = 1.0 / (1.0 / fitted + 1.0 / eb + 1.0 / ec + 1.0 / ed);
        chi2 += (a - fitted).powi(2) / v;
    }
    let df = cells.len() - 1;
    Ok(BreslowDayResult {
        chi2,
        p: special::chi2_sf(chi2, df as f64),
        df,
        common_odds_ratio: psi,
        continuity_added,
    })
}

/// Fraction of usable strata whose risk difference has the same sign as
/// `pooled` (zero matches zero).
pub fn sign_stable_fraction(strata: &[Stratum2x2], pooled: f64) -> Option<f64> {
    let rds: Vec<f64> = strata
        .iter()
        .filter(|s| s.is_includable())
        .map(|s| s.risk_difference())
        .collect();
    if rds.is_empty() {
        return None;
    }
    let sign = |x: f64| {
        if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        }
    };
    Some(rds.iter().filter(|&&r| sign(r) == sign(pooled)).count() as f64 / rds.len() as f64)
}

// ---------------------------------------------------------------------------
// Per-cell pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// Binary focal indicator: value above the midpoint of the item's range.
    #[default]
    Focal,
    /// Any change counts; discordant cells are decreases and increases.
    Changed,
}

/// Whether `y` is the focal behavior on `item`.
pub fn focal_indicator(item: &DecisionItem, y: f64) -> bool {
    let lo = item.y_min();
    let range = item.y_max() - lo;
    range > 0.0 && (y - lo) / range > 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsCell {
    pub game: Game,
    pub role: String,
    pub condition: Condition,
    pub alpha: f64,
    pub cot: bool,
    pub n_pairs: usize,
    pub flips: PairedFlipTable,
    pub p_raw: f64,
    pub no_discordant: bool,
    pub q: f64,
    pub stars: String,
    pub cmh: Option<CmhResult>,
    pub breslow_day: Option<BreslowDayResult>,
    pub sign_stable_fraction: Option<f64>,
    pub notes: Vec<String>,
}

/// Flip table and per-repeat strata for one cell; BH is applied later
/// across the family, so `q`/`stars` are placeholders here.
pub fn cell_tests(
    game: Game,
    role: &str,
    items: &[DecisionItem],
    index: &RecordIndex<'_>,
    condition: Condition,
    alpha: f64,
    cot: bool,
    mode: FlipMode,
    table: &DirectionTable,
) -> StatsCell {
    let set = pair_records(items, index, condition, alpha, cot, table);
    let mut flips = PairedFlipTable::default();
    let mut strata = Vec::new();
    let mut n_pairs = 0;
    for pairs in set.by_repeat.values() {
        let mut s = Stratum2x2::default();
        for p in pairs {
            n_pairs += 1;
            let f0 = focal_indicator(p.item, p.pair.y0);
            let fe = focal_indicator(p.item, p.pair.ye);
            match mode {
                FlipMode::Focal => match (f0, fe) {
                    (false, false) => flips.n00 += 1,
                    (false, true) => flips.n01 += 1,
                    (true, false) => flips.n10 += 1,
                    (true, true) => flips.n11 += 1,
                },
                FlipMode::Changed => {
                    if p.pair.ye < p.pair.y0 {
                        flips.n01 += 1;
                    } else if p.pair.ye > p.pair.y0 {
                        flips.n10 += 1;
                    } else if fe {
                        flips.n11 += 1;
                    } else {
                        flips.n00 += 1;
                    }
                }
            }
            if fe {
                s.a += 1;
            } else {
                s.b += 1;
            }
            if f0 {
                s.c += 1;
            } else {
                s.d += 1;
            }
        }
        strata.push(s);
    }
    let mut notes = Vec::new();
    let skipped = strata.iter().filter(|s| !s.is_includable()).count();
    if skipped > 0 {
        notes.push(format!("{skipped} stratum(s) with a zero margin skipped"));
    }
    let mc = mcnemar_or_one(&flips);
    if mc.no_discordant {
        notes.push("no discordant pairs; p set to 1".to_string());
    }
    let cmh = cmh_test(&strata).ok();
    let breslow_day = match breslow_day(&strata) {
        Ok(bd) => {
            if bd.continuity_added {
                notes.push("0.5 added to every cell for Breslow-Day".to_string());
            }
            Some(bd)
        }
        Err(e) => {
            notes.push(format!("Breslow-Day not computed: {e}"));
            None
        }
    };
    let sign_stable_fraction = cmh.and_then(|c| sign_stable_fraction(&strata, c.pooled_rd));
    StatsCell {
        game,
        role: role.to_string(),
        condition,
        alpha,
        cot,
        n_pairs,
        flips,
        p_raw: mc.p,
        no_discordant: mc.no_discordant,
        q: mc.p,
        stars: String::new(),
        cmh,
        breslow_day,
        sign_stable_fraction,
        notes,
    }
}

/// Applies BH within each (alpha, cot) family of cells.
pub fn adjust_families(cells: &mut [StatsCell]) {
    let mut families: BTreeMap<(u64, bool), Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        families
            .entry((c.alpha.to_bits(), c.cot))
            .or_default()
            .push(i);
    }
    for idx in families.values() {
        let p: Vec<f64> = idx.iter().map(|&i| cells[i].p_raw).collect();
        let q = bh_adjust(&p).expect("p-values come from mcnemar and lie in [0, 1]");
        for (&i, q) in idx.iter().zip(q) {
            cells[i].q = q;
            cells[i].stars = significance_stars(q).to_string();
        }
    }
}

/// Items on which the range is degenerate never reach the tests.
pub fn testable_items(items: &[DecisionItem]) -> Vec<DecisionItem> {
    items
        .iter()
        .filter(|i| response_range(i).is_ok())
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Confound audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Stratified k-fold accuracy of a seeded random forest.
pub fn confound_cv(
    features: &[Vec<f64>],
    labels: &[usize],
    folds: usize,
    seed: u64,
    config: &ForestConfig,
) -> Result<CvResult, StatsError> {
    if features.len() != labels.len() {
        return Err(StatsError::ShapeMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if folds < 2 {
        return Err(StatsError::TooFewFolds(folds));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let smallest = by_class
        .iter()
        .map(Vec::len)
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    if folds > smallest {
        return Err(StatsError::FoldsExceedClass { folds, smallest });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut offset = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + k) % folds;
        }
        offset += members.len();
    }
    let mut accuracies = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut xt, mut yt) = (Vec::new(), Vec::new());
        for i in 0..labels.len() {
            if fold_of[i] != f {
                xt.push(features[i].clone());
                yt.push(labels[i]);
            }
        }
        let forest = RandomForest::fit(&xt, &yt, classes, config, seed.wrapping_add(1 + f as u64));
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let correct = test
            .iter()
            .filter(|&&i| forest.predict(&features[i]) == labels[i])
            .count();
        accuracies.push(correct as f64 / test.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / folds as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (folds - 1) as f64;
    Ok(CvResult {
        mean_accuracy: mean,
        sd_accuracy: var.sqrt(),
        fold_accuracies: accuracies,
    })
}
