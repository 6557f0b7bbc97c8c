//! Bayesian item calibration: 2PL for binary items, a graded cumulative-logit
//! model for ordinal items, validity gates and seed stability.

pub mod regression;
mod sampler;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sampler::{
    run_chains, split_rhat, ChainDraws, Graded, ItemModel, Observations, RunSpec, TwoPl,
};

pub use sampler::split_rhat as split_chain_rhat;

#[derive(Debug, Error, PartialEq)]
pub enum IrtError {
    #[error("response matrix has {rows} rows for {respondents} respondents, or a row of the wrong width")]
    Shape { rows: usize, respondents: usize },
    #[error("respondent {0:?} has no observed responses")]
    EmptyRespondent(String),
    #[error("item {item:?} has response {value} outside 0..{levels}")]
    ResponseOutOfRange {
        item: String,
        value: u8,
        levels: usize,
    },
    #[error("graded model needs at least 3 response levels, found {0}")]
    TooFewLevels(usize),
    #[error("no item has two distinct observed responses")]
    NoUsableItems,
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
}

/// Respondents by items; `None` is a missing cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub respondents: Vec<String>,
    pub items: Vec<String>,
    pub responses: Vec<Vec<Option<u8>>>,
}

impl ResponseMatrix {
    pub fn new(
        respondents: Vec<String>,
        items: Vec<String>,
        responses: Vec<Vec<Option<u8>>>,
    ) -> Result<Self, IrtError> {
        if responses.len() != respondents.len() || responses.iter().any(|r| r.len() != items.len())
        {
            return Err(IrtError::Shape {
                rows: responses.len(),
                respondents: respondents.len(),
            });
        }
        for (name, row) in respondents.iter().zip(&responses) {
            if row.iter().all(Option::is_none) {
                return Err(IrtError::EmptyRespondent(name.clone()));
            }
        }
        Ok(ResponseMatrix {
            respondents,
            items,
            responses,
        })
    }

    pub fn levels(&self) -> usize {
        self.responses
            .iter()
            .flatten()
            .flatten()
            .map(|&y| y as usize + 1)
            .max()
            .unwrap_or(0)
    }

    fn observed_levels(&self, j: usize) -> BTreeSet<u8> {
        self.responses.iter().filter_map(|r| r[j]).collect()
    }

    /// Indices of items with at least two distinct observed responses.
    pub fn usable_items(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&j| self.observed_levels(j).len() >= 2)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            iterations: 4000,
            burn_in: 2000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<(), IrtError> {
        if self.chains == 0 {
            return Err(IrtError::InvalidConfig("chains must be >= 1".into()));
        }
        if self.burn_in >= self.iterations || self.iterations - self.burn_in < 4 {
            return Err(IrtError::InvalidConfig(format!(
                "need at least 4 post-burn-in iterations (iterations {}, burn_in {})",
                self.iterations, self.burn_in
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Difficulty(f64),
    Thresholds(Vec<f64>),
}

impl Location {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Location::Difficulty(b) => vec![*b],
            Location::Thresholds(t) => t.clone(),
        }
    }

    /// Difficulty, or the mean threshold for graded items.
    pub fn center(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub item_id: String,
    pub a: f64,
    pub a_sd: f64,
    pub location: Location,
    pub location_sd: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStability {
    pub mean_abs_da: f64,
    pub max_abs_da: f64,
    pub mean_abs_db: f64,
    pub max_abs_db: f64,
    pub refits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub ppc_error: f64,
    pub min_discrimination: f64,
    pub thresholds_ordered: bool,
    pub max_rhat: f64,
    pub seed_stability: Option<SeedStability>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TwoPl,
    Graded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: ModelKind,
    pub items: Vec<ItemParams>,
    pub theta: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub excluded_items: Vec<String>,
    pub diagnostics: CalibrationDiagnostics,
    /// Some split-chain R-hat exceeds 1.1.
    pub non_convergence: bool,
    pub config: SamplerConfig,
}

pub const RHAT_LIMIT: f64 = 1.1;
const PPC_THIN: usize = 10;

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Mean absolute difference between observed and predicted proportions.
pub fn ppc_mae(observed: &[Vec<f64>], predicted: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (o, p) in observed.iter().zip(predicted) {
        for (a, b) in o.iter().zip(p) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize<M: ItemModel>(
    model: &M,
    kind: ModelKind,
    data: &ResponseMatrix,
    usable: &[usize],
    obs: &Observations,
    chains: &[ChainDraws],
    config: SamplerConfig,
) -> Calibration {
    let width = model.width();
    let draws = || chains.iter().flat_map(|c| c.items.iter());
    let mut items = Vec::with_capacity(usable.len());
    let mut max_rhat = 1.0f64;
    for (jj, &j) in usable.iter().enumerate() {
        let mut est = Vec::with_capacity(width);
        for k in 0..width {
            let col = jj * width + k;
            est.push(mean_sd(draws().map(move |d| d[col])));
            let per_chain: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.items.iter().map(|d| d[col]).collect())
                .collect();
            let r = split_rhat(&per_chain);
            if r.is_finite() {
                max_rhat = max_rhat.max(r);
            } else if r.is_infinite() {
                max_rhat = f64::INFINITY;
            }
        }
        let location = match kind {
            ModelKind::TwoPl => Location::Difficulty(est[1].0),
            ModelKind::Graded => Location::Thresholds(est[1..].iter().map(|e| e.0).collect()),
        };
        items.push(ItemParams {
            item_id: data.items[j].clone(),
            a: est[0].0,
            a_sd: est[0].1,
            location,
            location_sd: est[1..].iter().map(|e| e.1).collect(),
        });
    }
    let n_resp = data.respondents.len();
    let mut theta = Vec::with_capacity(n_resp);
    let mut theta_sd = Vec::with_capacity(n_resp);
    for i in 0..n_resp {
        let (m, s) = mean_sd(
            chains
                .iter()
                .flat_map(|c| c.theta.iter())
                .map(move |t| t[i]),
        );
        theta.push(m);
        theta_sd.push(s);
        let per_chain: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.theta.iter().map(|t| t[i]).collect())
            .collect();
        let r = split_rhat(&per_chain);
        if !r.is_nan() {
            max_rhat = max_rhat.max(r);
        }
    }

    // Posterior-predictive expected category proportions per item.
    let cats = if kind == ModelKind::TwoPl { 2 } else { width };
    let mut observed = Vec::with_capacity(usable.len());
    let mut predicted = Vec::with_capacity(usable.len());
    for (jj, cells) in obs.by_item.iter().enumerate() {
        let mut o = vec![0.0; cats];
        for &(_, y) in cells {
            o[y as usize] += 1.0;
        }
        o.iter_mut().for_each(|v| *v /= cells.len() as f64);
        let mut p = vec![0.0; cats];
        let mut used = 0usize;
        for c in chains {
            for (d, (item_draw, theta_draw)) in c.items.iter().zip(&c.theta).enumerate() {
                if d % PPC_THIN != 0 {
                    continue;
                }
                used += 1;
                let nat = &item_draw[jj * width..(jj + 1) * width];
                for &(i, _) in cells {
                    for (acc, q) in p.iter_mut().zip(model.category_probs(nat, theta_draw[i])) {
                        *acc += q;
                    }
                }
            }
        }
        let denom = (used * cells.len()) as f64;
        p.iter_mut().for_each(|v| *v /= denom);
        if kind == ModelKind::TwoPl {
            observed.push(vec![o[1]]);
            predicted.push(vec![p[1]]);
        } else {
            observed.push(o);
            predicted.push(p);
        }
    }

    let thresholds_ordered = items
        .iter()
        .all(|it| it.location.values().windows(2).all(|w| w[0] < w[1]));
    let min_discrimination = items.iter().map(|it| it.a).fold(f64::INFINITY, f64::min);
    Calibration {
        model: kind,
        items,
        theta,
        theta_sd,
        excluded_items: (0..data.items.len())
            .filter(|j| !usable.contains(j))
            .map(|j| data.items[j].clone())
            .collect(),
        diagnostics: CalibrationDiagnostics {
            ppc_error: ppc_mae(&observed, &predicted),
            min_discrimination,
            thresholds_ordered,
            max_rhat,
            seed_stability: None,
        },
        non_convergence: !(max_rhat <= RHAT_LIMIT),
        config,
    }
}

fn check_range(data: &ResponseMatrix, levels: usize) -> Result<(), IrtError> {
    for row in &data.responses {
        for (j, y) in row.iter().enumerate() {
            if let Some(y) = *y {
                if y as usize >= levels {
                    return Err(IrtError::ResponseOutOfRange {
                        item: data.items[j].clone(),
                        value: y,
                        levels,
                    });
                }
            }
        }
    }
    Ok(())
}

fn fit_with<M: ItemModel>(
    model: &M,
    kind: ModelKind,
    data: &ResponseMatrix,
    config: SamplerConfig,
) -> Result<Calibration, IrtError> {
    config.validate()?;
    let usable = data.usable_items();
    if usable.is_empty() {
        return Err(IrtError::NoUsableItems);
    }
    let obs = Observations::new(&data.responses, &usable);
    let spec = RunSpec {
        iterations: config.iterations,
        burn_in: config.burn_in,
        seed: config.seed,
    };
    let chains = run_chains(model, &obs, spec, config.chains);
    Ok(summarize(model, kind, data, &usable, &obs, &chains, config))
}

/// 2PL: P(y = 1) = logistic(a (theta - b)). Items with a single observed
/// response are excluded and listed in `excluded_items`.
pub fn fit_2pl(data: &ResponseMatrix, config: SamplerConfig) -> Result<Calibration, IrtError> {
    check_range(data, 2)?;
    fit_with(&TwoPl, ModelKind::TwoPl, data, config)
}

/// Graded model: P(y >= k) = logistic(a (theta - b_k)) with ordered b_k.
pub fn fit_graded(data: &ResponseMatrix, config: SamplerConfig) -> Result<Calibration, IrtError> {
    let levels = data.levels();
    if levels < 3 {
        return Err(IrtError::TooFewLevels(levels));
    }
    fit_with(&Graded { levels }, ModelKind::Graded, data, config)
}

/// Parameter movement of every refit against the first, over items present
/// in both. `None` with fewer than two fits.
pub fn seed_stability(fits: &[Calibration]) -> Option<SeedStability> {
    if fits.len() < 2 {
        return None;
    }
    let base = &fits[0];
    let (mut da, mut db) = (Vec::new(), Vec::new());
    for other in &fits[1..] {
        for it in &base.items {
            if let Some(o) = other.items.iter().find(|o| o.item_id == it.item_id) {
                da.push((it.a - o.a).abs());
                for (x, y) in it.location.values().iter().zip(o.location.values()) {
                    db.push((x - y).abs());
                }
            }
        }
    }
    let stat = |v: &[f64]| {
        if v.is_empty() {
            (0.0, 0.0)
        } else {
            (
                v.iter().sum::<f64>() / v.len() as f64,
                v.iter().copied().fold(0.0, f64::max),
            )
        }
    };
    let (mean_abs_da, max_abs_da) = stat(&da);
    let (mean_abs_db, max_abs_db) = stat(&db);
    Some(SeedStability {
        mean_abs_da,
        max_abs_da,
        mean_abs_db,
        max_abs_db,
        refits: fits.len(),
    })
}

/// Fits once per seed; the first fit is returned with stability filled in.
pub fn fit_with_refits(
    data: &ResponseMatrix,
    kind: ModelKind,
    config: SamplerConfig,
    seeds: &[u64],
) -> Result<Calibration, IrtError> {
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![config.seed]
    } else {
        seeds.to_vec()
    };
    let mut fits = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let cfg = SamplerConfig { seed, ..config };
        fits.push(match kind {
            ModelKind::TwoPl => fit_2pl(data, cfg)?,
            ModelKind::Graded => fit_graded(data, cfg)?,
        });
    }
    let stability = seed_stability(&fits);
    let mut first = fits.swap_remove(0);
    first.diagnostics.seed_stability = stability;
    Ok(first)
}

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateLimits {
    pub max_ppc_error: f64,
    /// Discrimination must be strictly greater than this.
    pub min_discrimination: f64,
    pub max_abs_da: f64,
    pub max_abs_db: f64,
}

impl Default for GateLimits {
    fn default() -> Self {
        GateLimits {
            max_ppc_error: 0.08,
            min_discrimination: 0.0,
            max_abs_da: 0.3,
            max_abs_db: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Pass,
    Fail,
    NotEvaluated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub status: GateStatus,
    pub measured: Vec<f64>,
    pub limit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub gates: Vec<Gate>,
}

impl GateReport {
    /// No gate failed (not-evaluated gates do not count against).
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.status != GateStatus::Fail)
    }

    pub fn status(&self, name: &str) -> Option<GateStatus> {
        self.gates.iter().find(|g| g.name == name).map(|g| g.status)
    }
}

fn verdict(ok: bool) -> GateStatus {
    if ok {
        GateStatus::Pass
    } else {
        GateStatus::Fail
    }
}

pub fn validity_gates(diag: &CalibrationDiagnostics, limits: &GateLimits) -> GateReport {
    let mut gates = vec![
        Gate {
            name: "ppc_error".into(),
            status: verdict(diag.ppc_error <= limits.max_ppc_error),
            measured: vec![diag.ppc_error],
            limit: vec![limits.max_ppc_error],
        },
        Gate {
            name: "positive_discrimination".into(),
            status: verdict(diag.min_discrimination > limits.min_discrimination),
            measured: vec![diag.min_discrimination],
            limit: vec![limits.min_discrimination],
        },
        Gate {
            name: "ordered_thresholds".into(),
            status: verdict(diag.thresholds_ordered),
            measured: vec![],
            limit: vec![],
        },
    ];
    gates.push(match diag.seed_stability {
        Some(s) => Gate {
            name: "seed_stability".into(),
            status: verdict(s.max_abs_da <= limits.max_abs_da && s.max_abs_db <= limits.max_abs_db),
            measured: vec![s.max_abs_da, s.max_abs_db],
            limit: vec![limits.max_abs_da, limits.max_abs_db],
        },
        None => Gate {
            name: "seed_stability".into(),
            status: GateStatus::NotEvaluated,
            measured: vec![],
            limit: vec![limits.max_abs_da, limits.max_abs_db],
        },
    });
    GateReport { gates }
}
