//! Normalized drift magnitude (NDM) and normalized aligned drift (NAD).
//!
//! ```text
//! NDM = mean |y_e - y_0| / R
//! NAD = mean d_human * (y_e - y_0) / R
//! ```
//!
//! With sampling repeats the metrics are computed per repeat and averaged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::response_range;
use crate::schema::{
    Condition, DecisionItem, DecisionRecord, DirectionTable, Emotion, Game, RecordKey,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no pairs to average")]
    EmptyInput,
    #[error("pair {index} has non-positive range {range}")]
    NonpositiveRange { index: usize, range: f64 },
    #[error("direction {0} is not one of -1, 0, +1")]
    InvalidDirection(i8),
    #[error("duplicate record for item {item_id:?} under {condition} (alpha {alpha}, cot {cot}, repeat {repeat})")]
    DuplicateRecord {
        item_id: String,
        condition: Condition,
        alpha: f64,
        cot: bool,
        repeat: u32,
    },
}

/// One neutral/steered decision pair on one item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPair {
    pub y0: f64,
    pub ye: f64,
    pub range: f64,
    pub direction: i8,
}

impl DriftPair {
    pub fn new(y0: f64, ye: f64, range: f64, direction: i8) -> Self {
        DriftPair {
            y0,
            ye,
            range,
            direction,
        }
    }

    fn drift(&self) -> f64 {
        (self.ye - self.y0) / self.range
    }
}

fn check_pairs(pairs: &[DriftPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for (index, p) in pairs.iter().enumerate() {
        if !(p.range > 0.0) {
            return Err(MetricsError::NonpositiveRange {
                index,
                range: p.range,
            });
        }
        if !(-1..=1).contains(&p.direction) {
            return Err(MetricsError::InvalidDirection(p.direction));
        }
    }
    Ok(())
}

/// Accumulates in index order.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

pub fn ndm(pairs: &[DriftPair]) -> Result<f64, MetricsError> {
    check_pairs(pairs)?;
    Ok(mean(pairs.iter().map(|p| p.drift().abs())))
}

pub fn nad(pairs: &[DriftPair]) -> Result<f64, MetricsError> {
    check_pairs(pairs)?;
    Ok(mean(pairs.iter().map(|p| p.direction as f64 * p.drift())))
}

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Unpaired,
    DegenerateRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub item_id: String,
    pub repeat: Option<u32>,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem<'a> {
    pub item: &'a DecisionItem,
    pub pair: DriftPair,
}

/// Neutral/steered pairs for one (condition, alpha, cot) slice, grouped by repeat.
#[derive(Clone, Debug, Default)]
pub struct PairedSet<'a> {
    pub by_repeat: BTreeMap<u32, Vec<PairedItem<'a>>>,
    pub excluded: Vec<Exclusion>,
}

impl<'a> PairedSet<'a> {
    pub fn all_pairs(&self) -> Vec<DriftPair> {
        self.by_repeat.values().flatten().map(|p| p.pair).collect()
    }
}

/// Index over a decision log: duplicates are rejected up front.
pub struct RecordIndex<'r> {
    map: HashMap<RecordKey, &'r DecisionRecord>,
    repeats: HashMap<(String, Condition, u64, bool), BTreeSet<u32>>,
}

impl<'r> RecordIndex<'r> {
    pub fn new(records: &'r [DecisionRecord]) -> Result<Self, MetricsError> {
        let mut map = HashMap::with_capacity(records.len());
        let mut repeats: HashMap<_, BTreeSet<u32>> = HashMap::new();
        for r in records {
            repeats
                .entry((r.item_id.clone(), r.condition, r.alpha.to_bits(), r.cot))
                .or_default()
                .insert(r.repeat);
            if map.insert(r.key(), r).is_some() {
                return Err(MetricsError::DuplicateRecord {
                    item_id: r.item_id.clone(),
                    condition: r.condition,
                    alpha: r.alpha,
                    cot: r.cot,
                    repeat: r.repeat,
                });
            }
        }
        Ok(RecordIndex { map, repeats })
    }

    pub fn get(
        &self,
        item_id: &str,
        condition: Condition,
        alpha: f64,
        cot: bool,
        repeat: u32,
    ) -> Option<&'r DecisionRecord> {
        self.map
            .get(&RecordKey {
                item_id: item_id.to_string(),
                condition,
                alpha_bits: alpha.to_bits(),
                cot,
                repeat,
            })
            .copied()
    }

    pub fn repeats_for(
        &self,
        item_id: &str,
        condition: Condition,
        alpha: f64,
        cot: bool,
    ) -> BTreeSet<u32> {
        self.repeats
            .get(&(item_id.to_string(), condition, alpha.to_bits(), cot))
            .cloned()
            .unwrap_or_default()
    }
}

/// Joins neutral and steered runs per item and repeat. Random-direction
/// pairs carry direction 0 and are re-weighted per emotion in [`compute_cell`].
pub fn pair_records<'a>(
    items: &'a [DecisionItem],
    index: &RecordIndex<'_>,
    condition: Condition,
    alpha: f64,
    cot: bool,
    table: &DirectionTable,
) -> PairedSet<'a> {
    let mut set = PairedSet::default();
    for item in items {
        let range = match response_range(item) {
            Ok(r) => r,
            Err(_) => {
                set.excluded.push(Exclusion {
                    item_id: item.item_id.clone(),
                    repeat: None,
                    reason: ExclusionReason::DegenerateRange,
                });
                continue;
            }
        };
        let direction = condition
            .emotion()
            .map_or(0, |e| table.get(item.game, &item.role, e));
        let mut repeats = index.repeats_for(&item.item_id, condition, alpha, cot);
        repeats.extend(index.repeats_for(&item.item_id, Condition::Neutral, 0.0, cot));
        if repeats.is_empty() {
            set.excluded.push(Exclusion {
                item_id: item.item_id.clone(),
                repeat: None,
                reason: ExclusionReason::Unpaired,
            });
            continue;
        }
        for repeat in repeats {
            let neutral = index.get(&item.item_id, Condition::Neutral, 0.0, cot, repeat);
            let steered = index.get(&item.item_id, condition, alpha, cot, repeat);
            match (neutral, steered) {
                (Some(n), Some(s)) => set.by_repeat.entry(repeat).or_default().push(PairedItem {
                    item,
                    pair: DriftPair::new(n.decision_value, s.decision_value, range, direction),
                }),
                _ => set.excluded.push(Exclusion {
                    item_id: item.item_id.clone(),
                    repeat: Some(repeat),
                    reason: ExclusionReason::Unpaired,
                }),
            }
        }
    }
    set
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatDrift {
    pub repeat: u32,
    pub n_pairs: usize,
    pub ndm: f64,
    pub nad: f64,
}

/// NDM/NAD for one (game, role, condition, alpha, cot) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCell {
    pub game: Game,
    pub role: String,
    pub condition: Condition,
    pub alpha: f64,
    pub cot: bool,
    pub n_items: usize,
    pub ndm: f64,
    pub nad: f64,
    pub per_repeat: Vec<RepeatDrift>,
    pub excluded_items: Vec<Exclusion>,
}

/// NAD of one repeat. Random-direction cells have no expected direction of
/// their own; they are scored against each emotion's direction and averaged.
fn repeat_nad(
    pairs: &[PairedItem<'_>],
    condition: Condition,
    table: &DirectionTable,
) -> Result<f64, MetricsError> {
    match condition {
        Condition::Random => {
            let per: Result<Vec<f64>, _> = Emotion::ALL
                .iter()
                .map(|&e| {
                    let weighted: Vec<DriftPair> = pairs
                        .iter()
                        .map(|p| DriftPair {
                            direction: table.get(p.item.game, &p.item.role, e),
                            ..p.pair
                        })
                        .collect();
                    nad(&weighted)
                })
                .collect();
            Ok(mean(per?.into_iter()))
        }
        _ => nad(&pairs.iter().map(|p| p.pair).collect::<Vec<_>>()),
    }
}

pub fn compute_cell(
    game: Game,
    role: &str,
    items: &[DecisionItem],
    index: &RecordIndex<'_>,
    condition: Condition,
    alpha: f64,
    cot: bool,
    table: &DirectionTable,
) -> Result<DriftCell, MetricsError> {
    let set = pair_records(items, index, condition, alpha, cot, table);
    let mut per_repeat = Vec::new();
    let mut paired_items = BTreeSet::new();
    for (&repeat, pairs) in &set.by_repeat {
        let plain: Vec<DriftPair> = pairs.iter().map(|p| p.pair).collect();
        per_repeat.push(RepeatDrift {
            repeat,
            n_pairs: pairs.len(),
            ndm: ndm(&plain)?,
            nad: repeat_nad(pairs, condition, table)?,
        });
        paired_items.extend(pairs.iter().map(|p| p.item.item_id.as_str()));
    }
    if per_repeat.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(DriftCell {
        game,
        role: role.to_string(),
        condition,
        alpha,
        cot,
        n_items: paired_items.len(),
        ndm: mean(per_repeat.iter().map(|r| r.ndm)),
        nad: mean(per_repeat.iter().map(|r| r.nad)),
        per_repeat,
        excluded_items: set.excluded,
    })
}

// ---------------------------------------------------------------------------
// Self-report margins
// ---------------------------------------------------------------------------

/// Log-probability gap between the target label and its strongest competitor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<Emotion>,
    pub layer: usize,
    pub alpha: f64,
    pub margin: f64,
}

/// (layers with positive margin, layers) at `alpha`.
pub fn margin_ratio(margins: &[MarginRecord], alpha: f64) -> Result<(usize, usize), MetricsError> {
    let at: Vec<&MarginRecord> = margins.iter().filter(|m| m.alpha == alpha).collect();
    if at.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok((at.iter().filter(|m| m.margin > 0.0).count(), at.len()))
}

/// Per-emotion rows of "k/n" ratios across the alphas present.
pub fn margin_table(margins: &[MarginRecord]) -> String {
    let alphas: Vec<f64> = {
        let mut a: Vec<f64> = margins.iter().map(|m| m.alpha).collect();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    };
    let mut rows: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let labels: BTreeSet<Option<Emotion>> = margins.iter().map(|m| m.emotion).collect();
    for label in labels {
        let subset: Vec<MarginRecord> = margins
            .iter()
            .filter(|m| m.emotion == label)
            .cloned()
            .collect();
        let cells = alphas
            .iter()
            .map(|&a| match margin_ratio(&subset, a) {
                Ok((k, n)) => format!("{k}/{n}"),
                Err(_) => "-".to_string(),
            })
            .collect();
        rows.insert(label.map_or("all".to_string(), |e| e.to_string()), cells);
    }
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "");
    for a in &alphas {
        let _ = write!(out, " {:>8}", format!("a@{a}"));
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<10}");
        for c in cells {
            let _ = write!(out, " {c:>8}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Table rendering
// ---------------------------------------------------------------------------

/// Column order of the results grid.
pub const GRID_COLUMNS: [(Game, &str, &str); 9] = [
    (Game::PrisonersDilemma, "*", "Prisoners' Dilemma"),
    (Game::StagHunt, "*", "Stag Hunt"),
    (Game::Escalation, "*", "Escalation Game"),
    (Game::Trust, "trustor", "Trust Trustor"),
    (Game::Trust, "trustee", "Trust Trustee"),
    (Game::Ultimatum, "proposer", "Ultimatum Proposer"),
    (Game::Ultimatum, "responder", "Ultimatum Responder"),
    (Game::BeautyContest, "*", "Beauty Contest"),
    (Game::SealedAuction, "*", "Sealed Auction"),
];

fn column_matches(cell: &DriftCell, game: Game, role: &str) -> bool {
    cell.game == game && (role == "*" || cell.role == role)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub ndm: Option<f64>,
    pub nad: Option<f64>,
}

fn average(cells: &[&DriftCell]) -> GridValue {
    if cells.is_empty() {
        return GridValue::default();
    }
    GridValue {
        ndm: Some(mean(cells.iter().map(|c| c.ndm))),
        nad: Some(mean(cells.iter().map(|c| c.nad))),
    }
}

/// One row of the results grid: per column, (with CoT, without CoT) values
/// averaged over emotions and alphas, then the emotion and random means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub model: String,
    pub columns: Vec<(String, GridValue, GridValue)>,
}

pub fn grid_row(model: &str, cells: &[DriftCell]) -> GridRow {
    let pick = |pred: &dyn Fn(&DriftCell) -> bool| -> Vec<&DriftCell> {
        cells.iter().filter(|c| pred(c)).collect()
    };
    let mut columns = Vec::new();
    for (game, role, title) in GRID_COLUMNS {
        let get = |cot: bool| {
            average(&pick(&|c: &DriftCell| {
                column_matches(c, game, role)
                    && c.cot == cot
                    && matches!(c.condition, Condition::Emotion(_))
            }))
        };
        columns.push((title.to_string(), get(true), get(false)));
    }
    for (title, random) in [("Mean_Emotions", false), ("Mean_Random", true)] {
        let get = |cot: bool| {
            average(&pick(&|c: &DriftCell| {
                c.cot == cot
                    && if random {
                        c.condition == Condition::Random
                    } else {
                        matches!(c.condition, Condition::Emotion(_))
                    }
            }))
        };
        columns.push((title.to_string(), get(true), get(false)));
    }
    GridRow {
        model: model.to_string(),
        columns,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "  -  ".to_string(), |x| format!("{x:.3}"))
}

/// Aligned text: two lines per model (NDM then NAD), "with CoT / without CoT".
pub fn render_grid(rows: &[GridRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let width = 21usize;
    let model_w = rows
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(5)
        .max(10);
    let mut out = String::new();
    let _ = write!(out, "{:<model_w$} {:<4}", "Model", "");
    for (title, _, _) in &first.columns {
        let _ = write!(out, " {title:>width$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<model_w$} {:<4}", "", "");
    for _ in &first.columns {
        let _ = write!(out, " {:>width$}", "w./w.o. CoT");
    }
    out.push('\n');
    for row in rows {
        for (metric, get) in [
            (
                "NDM",
                (|g: &GridValue| g.ndm) as fn(&GridValue) -> Option<f64>,
            ),
            ("NAD", |g: &GridValue| g.nad),
        ] {
            let name = if metric == "NDM" {
                row.model.as_str()
            } else {
                ""
            };
            let _ = write!(out, "{name:<model_w$} {metric:<4}");
            for (_, with, without) in &row.columns {
                let cell = format!("{} / {}", fmt_opt(get(with)), fmt_opt(get(without)));
                let _ = write!(out, " {cell:>width$}");
            }
            out.push('\n');
        }
    }
    out
}
