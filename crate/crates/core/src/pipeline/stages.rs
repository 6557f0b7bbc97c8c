use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Config, PipelineError, Result, RunManifest, StageOutput};
use crate::audit::{
    affect_word_count, fit_audit_model, flip_labels, route_and_score, AuditError, AuditModel,
    GatekeeperConfig, GatekeeperSet, TrainReport,
};
use crate::games::{bundled_emotion_lexicons, synth_desk_items, Lexicon};
use crate::irt::regression::{grouped_item_regression, RegressionReport, RegressionRow};
use crate::irt::{
    fit_with_refits, validity_gates, Calibration, GateReport, IrtError, ModelKind, ResponseMatrix,
};
use crate::metrics::{
    compute_cell, grid_row, margin_table, pair_records, render_grid, DriftCell, GridRow,
    MarginRecord, MetricsError, RecordIndex,
};
use crate::schema::{
    manifest_path, parse_decision_log, parse_items, read_activation_dump, to_jsonl, ActivationDump,
    Condition, DecisionItem, DecisionRecord, DirectionTable, Emotion, Game, RecordKey,
};
use crate::stats::forest::ForestConfig;
use crate::stats::{
    adjust_families, cell_tests, confound_cv, focal_indicator, testable_items, CvResult, FlipMode,
    StatsCell,
};
use crate::steering::{
    derive_steering_vector, random_direction, select_control_layers, steering_from_json,
    steering_to_json, MockModel, MockRequest, Provenance, SteeringError, SteeringVector,
};

/// Where a stage runs and with which config.
#[derive(Clone, Debug)]
pub struct StageContext {
    pub config: Config,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl StageContext {
    pub fn new(config: Config, config_path: Option<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        StageContext {
            config,
            config_path,
            out_dir: out_dir.into(),
        }
    }

    fn begin(&self, stage: &str) -> Result<StageOutput> {
        let mut out = StageOutput::new(&self.out_dir, stage, self.config.seed)?;
        out.config_file(self.config_path.as_deref())?;
        Ok(out)
    }
}

fn bad_input(path: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Input {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn read_items(out: &mut StageOutput, path: &Path) -> Result<Vec<DecisionItem>> {
    let text = out.read_text(path)?;
    Ok(parse_items(&text).into_strict()?)
}

fn read_records(
    out: &mut StageOutput,
    path: &Path,
    items: &[DecisionItem],
) -> Result<Vec<DecisionRecord>> {
    let text = out.read_text(path)?;
    Ok(parse_decision_log(&text, items).into_strict()?)
}

fn read_json<T: DeserializeOwned>(out: &mut StageOutput, path: &Path) -> Result<T> {
    let text = out.read_text(path)?;
    serde_json::from_str(&text).map_err(|e| bad_input(path, e))
}

fn read_direction_table(out: &mut StageOutput, path: Option<&Path>) -> Result<DirectionTable> {
    match path {
        Some(p) => Ok(DirectionTable::from_json(&out.read_text(p)?)?),
        None => Ok(DirectionTable::bundled()),
    }
}

/// Files directly under `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::MissingInput(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

// ---------------------------------------------------------------------------
// derive
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedVector {
    pub file: String,
    pub label: Condition,
    pub layer: usize,
    pub explained_variance_ratio: f64,
    pub seed: Option<u64>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveSummary {
    pub num_layers: usize,
    pub control_layers: Vec<usize>,
    pub vectors: Vec<DerivedVector>,
}

pub fn steering_file_name(label: Condition, layer: usize) -> String {
    match label {
        Condition::Emotion(e) => format!("{e}_layer{layer:02}.json"),
        other => format!("{other}_layer{layer:02}.json"),
    }
}

pub fn random_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer as u64
}

/// Emotion vectors for every configured emotion plus one random baseline,
/// at each control layer.
pub fn derive_vectors(
    dumps: &[ActivationDump],
    cfg: &Config,
) -> Result<(usize, Vec<usize>, Vec<SteeringVector>)> {
    let mut by_layer: BTreeMap<usize, &ActivationDump> = BTreeMap::new();
    for d in dumps {
        if by_layer.insert(d.layer(), d).is_some() {
            return Err(PipelineError::Usage(format!(
                "more than one dump for layer {}",
                d.layer()
            )));
        }
    }
    let max_layer = by_layer.keys().next_back().copied();
    let num_layers = match (cfg.num_layers, max_layer) {
        (Some(n), _) => n,
        (None, Some(m)) => m + 1,
        (None, None) => return Err(PipelineError::MissingInput("no activation dumps".into())),
    };
    let control = match &cfg.layers {
        Some(l) => l.clone(),
        None => select_control_layers(num_layers)?,
    };
    let mut vectors = Vec::new();
    for &layer in &control {
        let dump = by_layer.get(&layer).ok_or_else(|| {
            PipelineError::MissingInput(format!("no dump for control layer {layer}"))
        })?;
        for &e in &cfg.emotions {
            vectors.push(derive_steering_vector(dump, e)?);
        }
        let mut r = random_direction(dump.dim(), random_seed(cfg.seed, layer))?;
        r.layer_index = layer;
        vectors.push(r);
    }
    Ok((num_layers, control, vectors))
}

/// Expands directories to their `*.bin` dumps.
pub fn dump_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_files(p, "bin")?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(PipelineError::MissingInput("no activation dumps".into()));
    }
    Ok(out)
}

pub fn derive_stage(ctx: &StageContext, inputs: &[PathBuf]) -> Result<RunManifest> {
    let mut out = ctx.begin("derive")?;
    let mut dumps = Vec::new();
    for path in dump_paths(inputs)? {
        out.read(&path)?;
        let sidecar = manifest_path(&path);
        if sidecar.exists() {
            out.read(&sidecar)?;
        }
        dumps.push(read_activation_dump(&path)?);
    }
    let (num_layers, control_layers, vectors) = derive_vectors(&dumps, &ctx.config)?;
    let mut summary = DeriveSummary {
        num_layers,
        control_layers,
        vectors: Vec::new(),
    };
    for v in &vectors {
        let file = format!("steering/{}", steering_file_name(v.label, v.layer_index));
        out.write(&file, steering_to_json(v, &ctx.config.alphas).as_bytes())?;
        summary.vectors.push(DerivedVector {
            file,
            label: v.label,
            layer: v.layer_index,
            explained_variance_ratio: v.explained_variance_ratio,
            seed: v.seed,
            provenance: v.provenance.clone(),
        });
    }
    out.write_json("derive.json", &summary)?;
    out.finish()
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Desk-scale items for all seven games.
pub fn synth_items(cfg: &Config) -> Vec<DecisionItem> {
    Game::ALL
        .iter()
        .flat_map(|&g| synth_desk_items(g, cfg.items_per_game, cfg.seed))
        .map(|d| d.item)
        .collect()
}

/// Steering vectors grouped by label, ordered by layer.
pub fn group_vectors(
    vectors: Vec<SteeringVector>,
) -> Result<BTreeMap<Condition, Vec<SteeringVector>>> {
    let dim = vectors.first().map(SteeringVector::dim).unwrap_or(0);
    let mut groups: BTreeMap<Condition, Vec<SteeringVector>> = BTreeMap::new();
    for v in vectors {
        if v.dim() != dim {
            return Err(SteeringError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            }
            .into());
        }
        groups.entry(v.label).or_default().push(v);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|v| v.layer_index);
    }
    Ok(groups)
}

fn affect_vocabulary() -> Vec<(Emotion, Vec<String>)> {
    bundled_emotion_lexicons()
        .into_iter()
        .map(|(e, lex): (Emotion, Lexicon)| (e, lex.iter().map(str::to_string).collect()))
        .collect()
}

/// Mock decisions for every item: neutral first, then each steered
/// condition over alphas, then cot, then repeats.
pub fn sweep_records(
    items: &[DecisionItem],
    groups: &BTreeMap<Condition, Vec<SteeringVector>>,
    cfg: &Config,
) -> Result<Vec<DecisionRecord>> {
    let dim = groups
        .values()
        .flatten()
        .map(SteeringVector::dim)
        .next()
        .ok_or_else(|| PipelineError::MissingInput("no steering vectors".into()))?;
    let mock = MockModel::new(dim, cfg.seed).with_affect_words(affect_vocabulary());
    let steered: Vec<(Condition, &[SteeringVector])> = groups
        .iter()
        .filter(|(c, _)| match c {
            Condition::Emotion(e) => cfg.emotions.contains(e),
            Condition::Random => true,
            Condition::Neutral => false,
        })
        .map(|(c, v)| (*c, v.as_slice()))
        .collect();
    let per_item: std::result::Result<Vec<Vec<DecisionRecord>>, SteeringError> = items
        .par_iter()
        .map(|item| {
            let mut out = Vec::new();
            for &cot in &cfg.cot {
                for repeat in 0..cfg.repeats {
                    let req = MockRequest {
                        condition: Condition::Neutral,
                        cot,
                        repeat,
                    };
                    out.push(mock.decide(item, None, req)?);
                }
            }
            for &(condition, vectors) in &steered {
                for &alpha in &cfg.alphas {
                    for &cot in &cfg.cot {
                        for repeat in 0..cfg.repeats {
                            let req = MockRequest {
                                condition,
                                cot,
                                repeat,
                            };
                            out.push(mock.decide(item, Some((vectors, alpha)), req)?);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect();
    Ok(per_item?.into_iter().flatten().collect())
}

pub fn read_steering_dir(out: &mut StageOutput, dir: &Path) -> Result<Vec<SteeringVector>> {
    let mut vectors = Vec::new();
    for path in list_files(dir, "json")? {
        let text = out.read_text(&path)?;
        vectors.push(steering_from_json(&text, &path.display().to_string())?.0);
    }
    if vectors.is_empty() {
        return Err(PipelineError::MissingInput(format!(
            "no steering files in {}",
            dir.display()
        )));
    }
    Ok(vectors)
}

/// Runs the mock over `items` (or freshly synthesized items, written to
/// `items.jsonl`) and writes `decisions.jsonl`.
pub fn sweep_stage(
    ctx: &StageContext,
    steering_dir: &Path,
    items: Option<&Path>,
) -> Result<RunManifest> {
    let mut out = ctx.begin("sweep")?;
    let groups = group_vectors(read_steering_dir(&mut out, steering_dir)?)?;
    let items = match items {
        Some(p) => read_items(&mut out, p)?,
        None => {
            let items = synth_items(&ctx.config);
            out.write("items.jsonl", to_jsonl(&items).as_bytes())?;
            items
        }
    };
    let records = sweep_records(&items, &groups, &ctx.config)?;
    out.write("decisions.jsonl", to_jsonl(&records).as_bytes())?;
    out.finish()
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub type CellKey = (Condition, u64, bool);

fn item_groups(items: &[DecisionItem]) -> BTreeMap<(Game, String), Vec<DecisionItem>> {
    let mut groups: BTreeMap<(Game, String), Vec<DecisionItem>> = BTreeMap::new();
    for it in items {
        groups
            .entry((it.game, it.role.clone()))
            .or_default()
            .push(it.clone());
    }
    groups
}

fn steered_keys(records: &[DecisionRecord]) -> BTreeSet<CellKey> {
    records
        .iter()
        .filter(|r| r.condition != Condition::Neutral)
        .map(|r| (r.condition, r.alpha.to_bits(), r.cot))
        .collect()
}

/// One drift cell per (game, role) and steered (condition, alpha, cot).
pub fn evaluate_cells(
    items: &[DecisionItem],
    records: &[DecisionRecord],
    table: &DirectionTable,
) -> Result<Vec<DriftCell>> {
    let index = RecordIndex::new(records)?;
    let keys = steered_keys(records);
    let mut cells = Vec::new();
    for ((game, role), group) in item_groups(items) {
        for &(condition, bits, cot) in &keys {
            match compute_cell(
                game,
                &role,
                &group,
                &index,
                condition,
                f64::from_bits(bits),
                cot,
                table,
            ) {
                Ok(c) => cells.push(c),
                Err(MetricsError::EmptyInput) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub model: String,
    pub cells: Vec<DriftCell>,
    pub grid: GridRow,
}

pub fn evaluate_stage(
    ctx: &StageContext,
    items: &Path,
    decisions: &Path,
    directions: Option<&Path>,
) -> Result<RunManifest> {
    let mut out = ctx.begin("evaluate")?;
    let items = read_items(&mut out, items)?;
    let records = read_records(&mut out, decisions, &items)?;
    let table = read_direction_table(&mut out, directions)?;
    let cells = evaluate_cells(&items, &records, &table)?;
    let grid = grid_row(&ctx.config.model_name, &cells);
    out.write(
        "metrics.txt",
        render_grid(std::slice::from_ref(&grid)).as_bytes(),
    )?;
    out.write_json(
        "metrics.json",
        &EvaluateReport {
            model: ctx.config.model_name.clone(),
            cells,
            grid,
        },
    )?;
    out.finish()
}

/// Mean NDM over steered-emotion cells with `cot`.
pub fn mean_emotion_ndm(cells: &[DriftCell], cot: bool) -> Option<f64> {
    mean(
        cells
            .iter()
            .filter(|c| c.cot == cot && matches!(c.condition, Condition::Emotion(_)))
            .map(|c| c.ndm),
    )
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

pub fn stats_cells(
    items: &[DecisionItem],
    records: &[DecisionRecord],
    table: &DirectionTable,
    mode: FlipMode,
) -> Result<Vec<StatsCell>> {
    let index = RecordIndex::new(records)?;
    let keys = steered_keys(records);
    let mut cells = Vec::new();
    for ((game, role), group) in item_groups(&testable_items(items)) {
        for &(condition, bits, cot) in &keys {
            let c = cell_tests(
                game,
                &role,
                &group,
                &index,
                condition,
                f64::from_bits(bits),
                cot,
                mode,
                table,
            );
            if c.n_pairs > 0 {
                cells.push(c);
            }
        }
    }
    adjust_families(&mut cells);
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub flip_mode: FlipMode,
    pub cells: Vec<StatsCell>,
}

/// Shallow features per text with a class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundInput {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundReport {
    pub classes: Vec<String>,
    pub n: usize,
    pub folds: usize,
    pub chance: f64,
    pub cv: CvResult,
}

pub fn confound_report(input: &ConfoundInput, folds: usize, seed: u64) -> Result<ConfoundReport> {
    let classes: Vec<String> = input
        .labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<usize> = input
        .labels
        .iter()
        .map(|l| {
            classes
                .binary_search(l)
                .expect("label is in its own class set")
        })
        .collect();
    let cv = confound_cv(
        &input.features,
        &labels,
        folds,
        seed,
        &ForestConfig::default(),
    )?;
    Ok(ConfoundReport {
        chance: 1.0 / classes.len().max(1) as f64,
        classes,
        n: labels.len(),
        folds,
        cv,
    })
}

/// Per-lexicon affect-word rates and token length of each steered-emotion
/// reasoning text at `alpha`, labeled by emotion.
pub fn affect_features(records: &[DecisionRecord], alpha: f64) -> ConfoundInput {
    let lexicons = bundled_emotion_lexicons();
    let mut input = ConfoundInput {
        features: Vec::new(),
        labels: Vec::new(),
    };
    for r in records {
        let (Some(e), Some(text)) = (r.condition.emotion(), r.reasoning_text.as_deref()) else {
            continue;
        };
        if r.alpha != alpha {
            continue;
        }
        let counts = affect_word_count(text, &lexicons);
        let tokens = counts.tokens.max(1) as f64;
        let mut row: Vec<f64> = counts.counts.values().map(|&c| c as f64 / tokens).collect();
        row.push(counts.tokens as f64);
        input.features.push(row);
        input.labels.push(e.to_string());
    }
    input
}

pub fn stats_stage(
    ctx: &StageContext,
    items: &Path,
    decisions: &Path,
    directions: Option<&Path>,
    confound: Option<&Path>,
) -> Result<RunManifest> {
    let mut out = ctx.begin("stats")?;
    let items = read_items(&mut out, items)?;
    let records = read_records(&mut out, decisions, &items)?;
    let table = read_direction_table(&mut out, directions)?;
    let cells = stats_cells(&items, &records, &table, ctx.config.flip_mode)?;
    out.write_json(
        "stats.json",
        &StatsReport {
            flip_mode: ctx.config.flip_mode,
            cells,
        },
    )?;
    if let Some(path) = confound {
        let input: ConfoundInput = read_json(&mut out, path)?;
        let report = confound_report(&input, ctx.config.cv_folds, ctx.config.seed)?;
        out.write_json("confound.json", &report)?;
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// irt
// ---------------------------------------------------------------------------

/// Responses of one (game, role) item family. Respondents are the
/// (condition, alpha, cot, repeat) profiles seen in the log.
#[derive(Clone, Debug, PartialEq)]
pub struct IrtFamily {
    pub game: Game,
    pub role: String,
    pub model: ModelKind,
    pub data: ResponseMatrix,
}

fn distinct_values(item: &DecisionItem) -> Vec<f64> {
    let mut v: Vec<f64> = item.options.iter().map(|o| o.value).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn profile_name(k: &(Condition, u64, bool, u32)) -> String {
    format!("{}@{}/cot={}/r{}", k.0, f64::from_bits(k.1), k.2, k.3)
}

pub fn irt_families(items: &[DecisionItem], records: &[DecisionRecord]) -> Result<Vec<IrtFamily>> {
    let mut families = Vec::new();
    let by_item: HashMap<&str, Vec<&DecisionRecord>> =
        records.iter().fold(HashMap::new(), |mut m, r| {
            m.entry(r.item_id.as_str()).or_insert_with(Vec::new).push(r);
            m
        });
    for ((game, role), mut group) in item_groups(&testable_items(items)) {
        group.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let binary = group.iter().all(|it| distinct_values(it).len() == 2);
        let mut profiles: BTreeMap<(Condition, u64, bool, u32), BTreeMap<usize, u8>> =
            BTreeMap::new();
        for (j, it) in group.iter().enumerate() {
            let values = distinct_values(it);
            for r in by_item.get(it.item_id.as_str()).into_iter().flatten() {
                let y = if binary {
                    u8::from(focal_indicator(it, r.decision_value))
                } else {
                    values
                        .iter()
                        .position(|&v| v == r.decision_value)
                        .expect("record values are validated") as u8
                };
                profiles
                    .entry((r.condition, r.alpha.to_bits(), r.cot, r.repeat))
                    .or_default()
                    .insert(j, y);
            }
        }
        if profiles.is_empty() {
            continue;
        }
        let respondents = profiles.keys().map(profile_name).collect();
        let responses = profiles
            .values()
            .map(|row| (0..group.len()).map(|j| row.get(&j).copied()).collect())
            .collect();
        let data = ResponseMatrix::new(
            respondents,
            group.iter().map(|i| i.item_id.clone()).collect(),
            responses,
        )?;
        families.push(IrtFamily {
            game,
            role,
            model: if binary {
                ModelKind::TwoPl
            } else {
                ModelKind::Graded
            },
            data,
        });
    }
    Ok(families)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub game: Option<Game>,
    pub role: Option<String>,
    pub model: ModelKind,
    pub n_respondents: usize,
    pub n_items: usize,
    pub calibration: Option<Calibration>,
    pub gates: Option<GateReport>,
    pub error: Option<String>,
}

fn fit_family(
    data: &ResponseMatrix,
    model: ModelKind,
    cfg: &Config,
) -> Result<(Option<Calibration>, Option<GateReport>, Option<String>)> {
    let seeds: Vec<u64> = (0..cfg.irt_refits as u64)
        .map(|k| cfg.seed.wrapping_add(k))
        .collect();
    match fit_with_refits(data, model, cfg.sampler(), &seeds) {
        Ok(c) => {
            let gates = validity_gates(&c.diagnostics, &cfg.gate_limits());
            Ok((Some(c), Some(gates), None))
        }
        Err(e @ (IrtError::NoUsableItems | IrtError::TooFewLevels(_))) => {
            Ok((None, None, Some(e.to_string())))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionEntry {
    pub emotion: Emotion,
    pub game: Game,
    pub n_items: usize,
    pub report: Option<RegressionReport>,
    pub error: Option<String>,
}

/// Per-item drift averaged over alphas, cot and repeats, regressed on the
/// item's location center and discrimination, per (emotion, game).
pub fn drift_regressions(
    families: &[(IrtFamily, &Calibration)],
    items: &[DecisionItem],
    records: &[DecisionRecord],
    table: &DirectionTable,
) -> Result<Vec<RegressionEntry>> {
    let index = RecordIndex::new(records)?;
    let keys = steered_keys(records);
    let by_id: HashMap<&str, &DecisionItem> =
        items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut rows: Vec<((Emotion, Game), RegressionRow)> = Vec::new();
    for (family, cal) in families {
        let group: Vec<DecisionItem> = cal
            .items
            .iter()
            .map(|p| by_id[p.item_id.as_str()].clone())
            .collect();
        for e in Emotion::ALL {
            let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
            for &(condition, bits, cot) in keys.iter().filter(|k| k.0 == Condition::Emotion(e)) {
                let set = pair_records(&group, &index, condition, f64::from_bits(bits), cot, table);
                for p in set.by_repeat.values().flatten() {
                    let dy = (p.pair.ye - p.pair.y0) / p.pair.range;
                    let a = acc.entry(p.item.item_id.as_str()).or_default();
                    a.0 += dy.abs();
                    a.1 += f64::from(p.pair.direction) * dy;
                    a.2 += 1;
                }
            }
            for params in &cal.items {
                if let Some(&(abs, signed, n)) = acc.get(params.item_id.as_str()) {
                    rows.push((
                        (e, family.game),
                        RegressionRow {
                            difficulty: params.location.center(),
                            discrimination: params.a,
                            delta_ndm: abs / n as f64,
                            delta_nad: signed / n as f64,
                        },
                    ));
                }
            }
        }
    }
    let counts: BTreeMap<(Emotion, Game), usize> =
        rows.iter().fold(BTreeMap::new(), |mut m, (k, _)| {
            *m.entry(*k).or_default() += 1;
            m
        });
    Ok(grouped_item_regression(&rows)
        .into_iter()
        .map(|((emotion, game), r)| {
            let (report, error) = match r {
                Ok(rep) => (Some(rep), None),
                Err(e) => (None, Some(e.to_string())),
            };
            RegressionEntry {
                emotion,
                game,
                n_items: counts[&(emotion, game)],
                report,
                error,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrtReport {
    pub families: Vec<FamilyFit>,
    pub regressions: Vec<RegressionEntry>,
}

pub enum IrtInput<'a> {
    Log {
        items: &'a Path,
        decisions: &'a Path,
        directions: Option<&'a Path>,
    },
    /// A `ResponseMatrix` JSON file; binary matrices get the 2PL model.
    Matrix(&'a Path),
}

pub fn irt_stage(ctx: &StageContext, input: IrtInput<'_>) -> Result<RunManifest> {
    let mut out = ctx.begin("irt")?;
    let cfg = &ctx.config;
    let report = match input {
        IrtInput::Matrix(path) => {
            let m: ResponseMatrix = read_json(&mut out, path)?;
            let data = ResponseMatrix::new(m.respondents, m.items, m.responses)?;
            let model = if data.levels() <= 2 {
                ModelKind::TwoPl
            } else {
                ModelKind::Graded
            };
            let (calibration, gates, error) = fit_family(&data, model, cfg)?;
            IrtReport {
                families: vec![FamilyFit {
                    game: None,
                    role: None,
                    model,
                    n_respondents: data.respondents.len(),
                    n_items: data.items.len(),
                    calibration,
                    gates,
                    error,
                }],
                regressions: Vec::new(),
            }
        }
        IrtInput::Log {
            items,
            decisions,
            directions,
        } => {
            let items = read_items(&mut out, items)?;
            let records = read_records(&mut out, decisions, &items)?;
            let table = read_direction_table(&mut out, directions)?;
            let families = irt_families(&items, &records)?;
            let mut fits = Vec::new();
            for f in &families {
                log::info!(
                    "irt: fitting {} {} ({} items)",
                    f.game,
                    f.role,
                    f.data.items.len()
                );
                let (calibration, gates, error) = fit_family(&f.data, f.model, cfg)?;
                fits.push(FamilyFit {
                    game: Some(f.game),
                    role: Some(f.role.clone()),
                    model: f.model,
                    n_respondents: f.data.respondents.len(),
                    n_items: f.data.items.len(),
                    calibration,
                    gates,
                    error,
                });
            }
            let calibrated: Vec<(IrtFamily, &Calibration)> = families
                .iter()
                .zip(&fits)
                .filter_map(|(f, fit)| fit.calibration.as_ref().map(|c| (f.clone(), c)))
                .collect();
            let regressions = drift_regressions(&calibrated, &items, &records, &table)?;
            IrtReport {
                families: fits,
                regressions,
            }
        }
    };
    out.write_json("irt.json", &report)?;
    out.finish()
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub label: String,
    pub file: String,
    pub n: usize,
    pub n_flipped: usize,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTrainReport {
    pub pooled: bool,
    pub models: Vec<TrainedModel>,
    pub skipped: Vec<(String, String)>,
}

/// Fits one gatekeeper per emotion (or one pooled model) on the steered
/// records with reasoning text. Emotions whose labels are all one class are
/// skipped and reported.
pub fn train_gatekeepers(
    records: &[DecisionRecord],
    cfg: &Config,
) -> Result<(Vec<(String, AuditModel)>, AuditTrainReport)> {
    let labeled = flip_labels(records);
    let gk = GatekeeperConfig {
        lambda: cfg.audit_lambda,
        target_precision: cfg.audit_target_precision,
        seed: cfg.seed,
    };
    let subsets: Vec<(String, Vec<(&DecisionRecord, bool)>)> = if cfg.audit_pooled {
        vec![("pooled".to_string(), labeled)]
    } else {
        cfg.emotions
            .iter()
            .map(|&e| {
                let subset = labeled
                    .iter()
                    .filter(|(r, _)| r.condition == Condition::Emotion(e))
                    .copied()
                    .collect();
                (e.to_string(), subset)
            })
            .collect()
    };
    let mut models = Vec::new();
    let mut report = AuditTrainReport {
        pooled: cfg.audit_pooled,
        models: Vec::new(),
        skipped: Vec::new(),
    };
    for (label, subset) in subsets {
        let texts: Vec<String> = subset
            .iter()
            .map(|(r, _)| {
                r.reasoning_text
                    .clone()
                    .expect("flip_labels keeps records with text")
            })
            .collect();
        let flips: Vec<bool> = subset.iter().map(|(_, f)| *f).collect();
        match fit_audit_model(&texts, &flips, &gk) {
            Ok((model, train)) => {
                report.models.push(TrainedModel {
                    file: format!("model_{label}.json"),
                    label: label.clone(),
                    n: flips.len(),
                    n_flipped: flips.iter().filter(|&&f| f).count(),
                    report: train,
                });
                models.push((label, model));
            }
            Err(e @ (AuditError::SingleClass | AuditError::TooFewPerClass { .. }))
                if !cfg.audit_pooled =>
            {
                log::warn!("audit: skipping {label}: {e}");
                report.skipped.push((label, e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if models.is_empty() {
        return Err(AuditError::SingleClass.into());
    }
    Ok((models, report))
}

pub fn audit_train_stage(
    ctx: &StageContext,
    items: &Path,
    decisions: &Path,
) -> Result<RunManifest> {
    let mut out = ctx.begin("audit-train")?;
    let items = read_items(&mut out, items)?;
    let records = read_records(&mut out, decisions, &items)?;
    let (models, report) = train_gatekeepers(&records, &ctx.config)?;
    for (label, m) in &models {
        let mut text = m.to_json();
        text.push('\n');
        out.write(&format!("model_{label}.json"), text.as_bytes())?;
    }
    out.write_json("train_report.json", &report)?;
    out.finish()
}

/// `model_pooled.json` if present, otherwise every `model_<emotion>.json`.
pub fn load_gatekeepers(out: &mut StageOutput, dir: &Path) -> Result<GatekeeperSet> {
    let pooled = dir.join("model_pooled.json");
    let parse = |out: &mut StageOutput, p: &Path| -> Result<AuditModel> {
        Ok(AuditModel::from_json(&out.read_text(p)?)?)
    };
    if pooled.exists() {
        return Ok(GatekeeperSet::Pooled(parse(out, &pooled)?));
    }
    let mut map = BTreeMap::new();
    for e in Emotion::ALL {
        let p = dir.join(format!("model_{e}.json"));
        if p.exists() {
            map.insert(e, parse(out, &p)?);
        }
    }
    if map.is_empty() {
        return Err(PipelineError::MissingInput(format!(
            "no gatekeeper models in {}",
            dir.display()
        )));
    }
    Ok(GatekeeperSet::PerEmotion(map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub item_id: String,
    pub condition: Condition,
    pub alpha: f64,
    pub cot: bool,
    pub repeat: u32,
    pub score: f64,
    pub tau: f64,
    pub flagged: bool,
}

pub fn score_records(records: &[DecisionRecord], models: &GatekeeperSet) -> Vec<ScoreRow> {
    records
        .iter()
        .filter_map(|r| {
            let m = models.model_for(r.condition)?;
            let text = r.reasoning_text.as_deref()?;
            let score = m.score(text);
            Some(ScoreRow {
                item_id: r.item_id.clone(),
                condition: r.condition,
                alpha: r.alpha,
                cot: r.cot,
                repeat: r.repeat,
                score,
                tau: m.tau,
                flagged: score >= m.tau,
            })
        })
        .collect()
}

pub fn audit_score_stage(
    ctx: &StageContext,
    models: &Path,
    items: &Path,
    decisions: &Path,
) -> Result<RunManifest> {
    let mut out = ctx.begin("audit-score")?;
    let set = load_gatekeepers(&mut out, models)?;
    let items = read_items(&mut out, items)?;
    let records = read_records(&mut out, decisions, &items)?;
    out.write(
        "scores.jsonl",
        to_jsonl(&score_records(&records, &set)).as_bytes(),
    )?;
    out.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub n_scored: usize,
    pub n_flagged: usize,
    pub tau_override: Option<f64>,
    pub ndm_cot_before: Option<f64>,
    pub ndm_cot_after: Option<f64>,
}

/// Second-turn decision for every steered CoT record: the neutral decision
/// of the same item, cot and repeat. This is what the mock reverts to.
pub fn reverting_second_turns(records: &[DecisionRecord]) -> Vec<DecisionRecord> {
    let neutral: HashMap<(&str, bool, u32), f64> = records
        .iter()
        .filter(|r| r.condition == Condition::Neutral)
        .map(|r| ((r.item_id.as_str(), r.cot, r.repeat), r.decision_value))
        .collect();
    records
        .iter()
        .filter(|r| r.condition != Condition::Neutral && r.reasoning_text.is_some())
        .filter_map(|r| {
            let y0 = *neutral.get(&(r.item_id.as_str(), r.cot, r.repeat))?;
            Some(DecisionRecord {
                decision_value: y0,
                reasoning_text: None,
                ..r.clone()
            })
        })
        .collect()
}

pub fn route_records(
    items: &[DecisionItem],
    records: &[DecisionRecord],
    second: &[DecisionRecord],
    set: &GatekeeperSet,
    tau: Option<f64>,
    table: &DirectionTable,
) -> Result<(Vec<DecisionRecord>, RouteReport)> {
    let set = match tau {
        Some(t) => set.with_tau(t),
        None => set.clone(),
    };
    let second_turn: HashMap<RecordKey, f64> =
        second.iter().map(|r| (r.key(), r.decision_value)).collect();
    let routed = route_and_score(records, &set, &second_turn)?;
    let before = evaluate_cells(items, records, table)?;
    let after = evaluate_cells(items, &routed.records, table)?;
    let report = RouteReport {
        n_scored: routed.scores.len(),
        n_flagged: routed.flagged.len(),
        tau_override: tau,
        ndm_cot_before: mean_emotion_ndm(&before, true),
        ndm_cot_after: mean_emotion_ndm(&after, true),
    };
    Ok((routed.records, report))
}

pub struct RouteInputs<'a> {
    pub models: &'a Path,
    pub items: &'a Path,
    pub decisions: &'a Path,
    pub second_turn: &'a Path,
    pub directions: Option<&'a Path>,
    pub tau: Option<f64>,
}

pub fn audit_route_stage(ctx: &StageContext, inputs: RouteInputs<'_>) -> Result<RunManifest> {
    let mut out = ctx.begin("audit-route")?;
    let set = load_gatekeepers(&mut out, inputs.models)?;
    let items = read_items(&mut out, inputs.items)?;
    let records = read_records(&mut out, inputs.decisions, &items)?;
    let second = read_records(&mut out, inputs.second_turn, &items)?;
    let table = read_direction_table(&mut out, inputs.directions)?;
    let (audited, report) = route_records(&items, &records, &second, &set, inputs.tau, &table)?;
    out.write("decisions_audited.jsonl", to_jsonl(&audited).as_bytes())?;
    out.write_json("route.json", &report)?;
    out.finish()
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: String,
    pub grid: GridRow,
    pub n_cells: usize,
    pub significant: Vec<StatsCell>,
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn render_report(
    metrics: &EvaluateReport,
    stats: &StatsReport,
    margins: Option<&[MarginRecord]>,
) -> (String, FinalReport) {
    let significant: Vec<StatsCell> = stats.cells.iter().filter(|c| c.q < 0.05).cloned().collect();
    let mut text = String::new();
    let _ = writeln!(text, "model: {}", metrics.model);
    text.push('\n');
    text.push_str(&render_grid(std::slice::from_ref(&metrics.grid)));
    text.push('\n');
    let _ = writeln!(
        text,
        "significant cells (BH q < 0.05): {} of {}",
        significant.len(),
        stats.cells.len()
    );
    let _ = writeln!(
        text,
        "{:<18} {:<10} {:<18} {:>5} {:>5} {:>5} {:>5} {:>5} {:>10} {:>10} {:<3}",
        "game", "role", "condition", "alpha", "cot", "n", "b", "c", "p", "q", ""
    );
    for c in &significant {
        let _ = writeln!(
            text,
            "{:<18} {:<10} {:<18} {:>5} {:>5} {:>5} {:>5} {:>5} {:>10} {:>10} {:<3}",
            c.game.as_str(),
            c.role,
            c.condition.to_string(),
            c.alpha,
            c.cot,
            c.n_pairs,
            c.flips.n01,
            c.flips.n10,
            fmt_p(c.p_raw),
            fmt_p(c.q),
            c.stars
        );
    }
    if let Some(m) = margins {
        text.push('\n');
        text.push_str("self-report margin > 0 (layers)\n");
        text.push_str(&margin_table(m));
    }
    let report = FinalReport {
        model: metrics.model.clone(),
        grid: metrics.grid.clone(),
        n_cells: stats.cells.len(),
        significant,
    };
    (text, report)
}

pub fn report_stage(
    ctx: &StageContext,
    metrics: &Path,
    stats: &Path,
    margins: Option<&Path>,
) -> Result<RunManifest> {
    let mut out = ctx.begin("report")?;
    let m: EvaluateReport = read_json(&mut out, metrics)?;
    let s: StatsReport = read_json(&mut out, stats)?;
    let margins: Option<Vec<MarginRecord>> = match margins {
        Some(p) => {
            let text = out.read_text(p)?;
            let rows: std::result::Result<Vec<MarginRecord>, _> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect();
            Some(rows.map_err(|e| bad_input(p, e))?)
        }
        None => None,
    };
    let (text, report) = render_report(&m, &s, margins.as_deref());
    out.write("report.txt", text.as_bytes())?;
    out.write_json("report.json", &report)?;
    out.finish()
}
