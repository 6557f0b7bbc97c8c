//! Shared data model and on-disk formats.
//!
//! Activation dumps are a small binary container (`EMAC` header followed by
//! row-major little-endian `f32`) with a JSON sidecar manifest holding the
//! sample ids and emotion labels. Items and decision logs are JSONL.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DUMP_MAGIC: &[u8; 4] = b"EMAC";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected EMAC, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dump version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has length {len}, expected dimension {dim}")]
    DimMismatch { row: usize, len: usize, dim: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("unknown emotion label {0:?}")]
    UnknownEmotion(String),
    #[error("invalid manifest json: {0}")]
    ManifestJson(#[source] serde_json::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid item {item_id:?}: {message}")]
    InvalidItem { item_id: String, message: String },
    #[error("invalid direction table: {0}")]
    DirectionTable(String),
}

impl SchemaError {
    /// Short stable code used by the CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::Io { .. } => "io",
            SchemaError::BadMagic(_) => "bad-magic",
            SchemaError::UnsupportedVersion(_) => "bad-version",
            SchemaError::Truncated { .. } => "truncated",
            SchemaError::TrailingData { .. } => "trailing-data",
            SchemaError::ManifestMismatch(_) => "manifest-mismatch",
            SchemaError::NonFinite { .. } => "non-finite",
            SchemaError::DimMismatch { .. } => "dim-mismatch",
            SchemaError::DuplicateSampleId(_) => "duplicate-sample",
            SchemaError::UnknownEmotion(_) => "unknown-emotion",
            SchemaError::ManifestJson(_) => "manifest-json",
            SchemaError::Line { .. } => "schema-line",
            SchemaError::InvalidItem { .. } => "invalid-item",
            SchemaError::DirectionTable(_) => "direction-table",
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SchemaError {
    SchemaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// The six basic emotions. "joy" and "happiness" are the same label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Anger,
    Happiness,
    Fear,
    Disgust,
    Sadness,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Sadness,
        Emotion::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anger" => Ok(Emotion::Anger),
            "joy" | "happiness" => Ok(Emotion::Happiness),
            "fear" => Ok(Emotion::Fear),
            "disgust" => Ok(Emotion::Disgust),
            "sadness" => Ok(Emotion::Sadness),
            "surprise" => Ok(Emotion::Surprise),
            _ => Err(SchemaError::UnknownEmotion(s.to_string())),
        }
    }
}

impl Serialize for Emotion {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Emotion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The seven game templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Game {
    PrisonersDilemma,
    StagHunt,
    Escalation,
    Trust,
    Ultimatum,
    SealedAuction,
    BeautyContest,
}

impl Game {
    pub const ALL: [Game; 7] = [
        Game::PrisonersDilemma,
        Game::StagHunt,
        Game::Escalation,
        Game::Trust,
        Game::Ultimatum,
        Game::SealedAuction,
        Game::BeautyContest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Game::PrisonersDilemma => "prisoners_dilemma",
            Game::StagHunt => "stag_hunt",
            Game::Escalation => "escalation",
            Game::Trust => "trust",
            Game::Ultimatum => "ultimatum",
            Game::SealedAuction => "sealed_auction",
            Game::BeautyContest => "beauty_contest",
        }
    }
}

impl fmt::Display for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Game {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Game::ALL
            .iter()
            .copied()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown game {s:?}"))
    }
}

/// Experimental condition under which a decision was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Neutral,
    Emotion(Emotion),
    Random,
}

impl Condition {
    pub fn emotion(self) -> Option<Emotion> {
        match self {
            Condition::Emotion(e) => Some(e),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Neutral => f.write_str("neutral"),
            Condition::Emotion(e) => write!(f, "emotion:{e}"),
            Condition::Random => f.write_str("random"),
        }
    }
}

impl FromStr for Condition {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(Condition::Neutral),
            "random" => Ok(Condition::Random),
            other => match other.strip_prefix("emotion:") {
                Some(name) => Ok(Condition::Emotion(name.parse()?)),
                None => Err(SchemaError::UnknownEmotion(other.to_string())),
            },
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    MultiTurn,
    MultiModal,
    MultiAgent,
}

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRow {
    pub sample_id: String,
    pub emotion: Emotion,
    pub vector: Vec<f32>,
}

/// Final-position hidden states of one layer, one row per stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    layer: usize,
    dim: usize,
    rows: Vec<ActivationRow>,
}

impl ActivationDump {
    pub fn new(layer: usize, dim: usize, rows: Vec<ActivationRow>) -> Result<Self, SchemaError> {
        if dim == 0 {
            return Err(SchemaError::ManifestMismatch(
                "dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.vector.len() != dim {
                return Err(SchemaError::DimMismatch {
                    row: i,
                    len: row.vector.len(),
                    dim,
                });
            }
            if let Some(col) = row.vector.iter().position(|v| !v.is_finite()) {
                return Err(SchemaError::NonFinite { row: i, col });
            }
            if !seen.insert(row.sample_id.as_str()) {
                return Err(SchemaError::DuplicateSampleId(row.sample_id.clone()));
            }
        }
        Ok(ActivationDump { layer, dim, rows })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[ActivationRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ActivationRow> {
        self.rows
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    layer: usize,
    dim: usize,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    emotion: Emotion,
}

/// `dir/name.bin` -> `dir/name.manifest.json`.
pub fn manifest_path(dump_path: &Path) -> PathBuf {
    let stem = dump_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dump_path.with_file_name(format!("{stem}.manifest.json"))
}

/// Encodes the binary payload only (header + floats).
pub fn encode_dump_payload(dump: &ActivationDump) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dump.rows.len() * dump.dim * 4);
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(dump.rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dump.dim as u64).to_le_bytes());
    for row in &dump.rows {
        for v in &row.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct DecodedPayload {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

fn decode_dump_payload(bytes: &[u8]) -> Result<DecodedPayload, SchemaError> {
    if bytes.len() < 4 {
        return Err(SchemaError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice of 4");
    if &magic != DUMP_MAGIC {
        return Err(SchemaError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SchemaError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of 4"));
    if version != DUMP_VERSION {
        return Err(SchemaError::UnsupportedVersion(version));
    }
    let n_rows = u64::from_le_bytes(bytes[8..16].try_into().expect("slice of 8")) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().expect("slice of 8")) as usize;
    let expected = n_rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| SchemaError::ManifestMismatch("header sizes overflow".into()))?;
    if bytes.len() < expected {
        return Err(SchemaError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SchemaError::TrailingData {
            expected,
            actual: bytes.len(),
        });
    }
    let mut vectors = Vec::with_capacity(n_rows);
    let mut chunks = bytes[HEADER_LEN..].chunks_exact(4);
    for row in 0..n_rows {
        let mut v = Vec::with_capacity(dim);
        for col in 0..dim {
            let x = f32::from_le_bytes(
                chunks
                    .next()
                    .expect("length checked")
                    .try_into()
                    .expect("4 bytes"),
            );
            if !x.is_finite() {
                return Err(SchemaError::NonFinite { row, col });
            }
            v.push(x);
        }
        vectors.push(v);
    }
    Ok(DecodedPayload { dim, vectors })
}

pub fn read_activation_dump(path: &Path) -> Result<ActivationDump, SchemaError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let payload = decode_dump_payload(&bytes)?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: DumpManifest = serde_json::from_str(&text).map_err(SchemaError::ManifestJson)?;
    if manifest.dim != payload.dim {
        return Err(SchemaError::ManifestMismatch(format!(
            "manifest dim {} vs header dim {}",
            manifest.dim, payload.dim
        )));
    }
    if manifest.samples.len() != payload.vectors.len() {
        return Err(SchemaError::ManifestMismatch(format!(
            "manifest lists {} samples but payload has {} rows",
            manifest.samples.len(),
            payload.vectors.len()
        )));
    }
    let rows = manifest
        .samples
        .into_iter()
        .zip(payload.vectors)
        .map(|(s, vector)| ActivationRow {
            sample_id: s.id,
            emotion: s.emotion,
            vector,
        })
        .collect();
    ActivationDump::new(manifest.layer, payload.dim, rows)
}

pub fn write_activation_dump(dump: &ActivationDump, path: &Path) -> Result<(), SchemaError> {
    // Re-validate: a dump assembled through `new` is valid, but this is the
    // last point before bytes hit disk.
    let dump = ActivationDump::new(dump.layer, dump.dim, dump.rows.clone())?;
    let manifest = DumpManifest {
        layer: dump.layer,
        dim: dump.dim,
        samples: dump
            .rows
            .iter()
            .map(|r| ManifestSample {
                id: r.sample_id.clone(),
                emotion: r.emotion,
            })
            .collect(),
    };
    fs::write(path, encode_dump_payload(&dump)).map_err(|e| io_err(path, e))?;
    let mpath = manifest_path(path);
    let mut text = serde_json::to_string(&manifest).map_err(SchemaError::ManifestJson)?;
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))
}

// ---------------------------------------------------------------------------
// Items and decision records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionOption {
    pub label: String,
    pub value: f64,
}

/// One benchmark scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionItem {
    pub item_id: String,
    pub game: Game,
    pub role: String,
    pub options: Vec<DecisionOption>,
    #[serde(default)]
    pub source_tags: BTreeSet<SourceTag>,
    #[serde(default)]
    pub scenario_text: String,
}

impl DecisionItem {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let fail = |message: String| SchemaError::InvalidItem {
            item_id: self.item_id.clone(),
            message,
        };
        if self.options.len() < 2 {
            return Err(fail(format!(
                "needs at least 2 options, found {}",
                self.options.len()
            )));
        }
        let mut labels = HashSet::new();
        for opt in &self.options {
            if !opt.value.is_finite() {
                return Err(fail(format!("option {:?} has non-finite value", opt.label)));
            }
            if !labels.insert(opt.label.as_str()) {
                return Err(fail(format!("duplicate option label {:?}", opt.label)));
            }
        }
        Ok(())
    }

    pub fn y_min(&self) -> f64 {
        self.options
            .iter()
            .map(|o| o.value)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn y_max(&self) -> f64 {
        self.options
            .iter()
            .map(|o| o.value)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_value(&self, value: f64) -> bool {
        self.options.iter().any(|o| o.value == value)
    }
}

/// One model response under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub item_id: String,
    pub condition: Condition,
    pub alpha: f64,
    pub cot: bool,
    pub repeat: u32,
    pub decision_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_text: Option<String>,
}

/// Identity of a record within a log: everything except the decision itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub item_id: String,
    pub condition: Condition,
    pub alpha_bits: u64,
    pub cot: bool,
    pub repeat: u32,
}

impl DecisionRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            item_id: self.item_id.clone(),
            condition: self.condition,
            alpha_bits: self.alpha.to_bits(),
            cot: self.cot,
            repeat: self.repeat,
        }
    }

    fn check_against(&self, item: &DecisionItem) -> Result<(), String> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if self.condition == Condition::Neutral && self.alpha != 0.0 {
            return Err(format!("neutral record has alpha {}", self.alpha));
        }
        if !item.has_value(self.decision_value) {
            return Err(format!(
                "decision_value {} is not an option value of item {:?}",
                self.decision_value, item.item_id
            ));
        }
        Ok(())
    }
}

/// Outcome of a lenient parse: every non-blank input line lands either in
/// `rows` or in `errors`.
#[derive(Debug)]
pub struct LoadReport<T> {
    pub rows: Vec<T>,
    pub errors: Vec<(usize, String)>,
}

impl<T> LoadReport<T> {
    pub fn into_strict(self) -> Result<Vec<T>, SchemaError> {
        match self.errors.into_iter().next() {
            Some((line, message)) => Err(SchemaError::Line { line, message }),
            None => Ok(self.rows),
        }
    }
}

fn read_text(path: &Path) -> Result<String, SchemaError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn nonblank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn parse_items(text: &str) -> LoadReport<DecisionItem> {
    let mut report = LoadReport {
        rows: Vec::new(),
        errors: Vec::new(),
    };
    let mut ids = HashSet::new();
    for (line, raw) in nonblank_lines(text) {
        let item: DecisionItem = match serde_json::from_str(raw) {
            Ok(item) => item,
            Err(e) => {
                report.errors.push((line, format!("malformed item: {e}")));
                continue;
            }
        };
        if let Err(e) = item.validate() {
            report.errors.push((line, e.to_string()));
            continue;
        }
        if !ids.insert(item.item_id.clone()) {
            report
                .errors
                .push((line, format!("duplicate item_id {:?}", item.item_id)));
            continue;
        }
        report.rows.push(item);
    }
    report
}

pub fn parse_decision_log(text: &str, items: &[DecisionItem]) -> LoadReport<DecisionRecord> {
    let by_id: HashMap<&str, &DecisionItem> =
        items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut report = LoadReport {
        rows: Vec::new(),
        errors: Vec::new(),
    };
    for (line, raw) in nonblank_lines(text) {
        let record: DecisionRecord = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push((line, format!("malformed record: {e}")));
                continue;
            }
        };
        let Some(item) = by_id.get(record.item_id.as_str()) else {
            report
                .errors
                .push((line, format!("unknown item_id {:?}", record.item_id)));
            continue;
        };
        if let Err(message) = record.check_against(item) {
            report.errors.push((line, message));
            continue;
        }
        report.rows.push(record);
    }
    report
}

pub fn load_items(path: &Path) -> Result<Vec<DecisionItem>, SchemaError> {
    parse_items(&read_text(path)?).into_strict()
}

pub fn load_decision_log(
    path: &Path,
    items: &[DecisionItem],
) -> Result<Vec<DecisionRecord>, SchemaError> {
    parse_decision_log(&read_text(path)?, items).into_strict()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<(), SchemaError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(to_jsonl(rows).as_bytes())
        .map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Direction table
// ---------------------------------------------------------------------------

const BUNDLED_DIRECTIONS: &str = include_str!("../data/direction_table.json");

/// Expected human direction per (game, role, emotion). Role `*` applies to
/// every role of that game; absent cells read as 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionTable {
    entries: BTreeMap<(Game, String, Emotion), i8>,
}

impl DirectionTable {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_DIRECTIONS).expect("bundled direction table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let raw: BTreeMap<String, i64> =
            serde_json::from_str(text).map_err(|e| SchemaError::DirectionTable(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (key, value) in raw {
            let parts: Vec<&str> = key.split('/').collect();
            let [game, role, emotion] = parts[..] else {
                return Err(SchemaError::DirectionTable(format!(
                    "key {key:?} is not game/role/emotion"
                )));
            };
            let game: Game = game.parse().map_err(SchemaError::DirectionTable)?;
            let emotion: Emotion = emotion.parse()?;
            if !(-1..=1).contains(&value) {
                return Err(SchemaError::DirectionTable(format!(
                    "{key}: value {value} not in -1..=1"
                )));
            }
            entries.insert((game, role.to_string(), emotion), value as i8);
        }
        Ok(DirectionTable { entries })
    }

    pub fn get(&self, game: Game, role: &str, emotion: Emotion) -> i8 {
        self.entries
            .get(&(game, role.to_string(), emotion))
            .or_else(|| self.entries.get(&(game, "*".to_string(), emotion)))
            .copied()
            .unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, i8> = self
            .entries
            .iter()
            .map(|((g, r, e), v)| (format!("{g}/{r}/{e}"), *v))
            .collect();
        serde_json::to_string_pretty(&map).expect("map serializes")
    }
}
