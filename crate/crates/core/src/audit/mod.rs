//! Thought-audit gatekeeper: predicts from reasoning text whether a steered
//! decision flipped, routes high-risk records to a second turn, and counts
//! affective words.

pub mod logistic;
pub mod tfidf;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::{words, Lexicon};
use crate::schema::{Condition, DecisionRecord, Emotion, RecordKey};
use logistic::{fit_logistic, predict};
use tfidf::{tfidf_row, tokenize, SparseRow, TfidfVectorizer};

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_TARGET_PRECISION: f64 = 0.9;
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vectorizer used before fitting")]
    NotFitted,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("class {class} has {count} example(s); at least 2 are required")]
    TooFewPerClass { class: bool, count: usize },
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("no second-turn decision for flagged record {0}")]
    MissingSecondTurn(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("no reasoning text for training record of item {0:?}")]
    MissingText(String),
}

// ---------------------------------------------------------------------------
// Ranking metrics and thresholds
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, AuditError> {
    if scores.len() != labels.len() {
        return Err(AuditError::LengthMismatch {
            what: "scores and labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(AuditError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    Ok((rank_sum - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 as f64 * n0 as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub precision: Option<f64>,
    pub flagged: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn above(x: f64) -> f64 {
    let bumped = x + 1e-9 * x.abs().max(1.0);
    if bumped > x {
        bumped
    } else {
        f64::INFINITY
    }
}

/// Smallest observed score whose flagged set (score >= tau) reaches the
/// target precision. Otherwise a sentinel just above every score.
pub fn select_threshold(scores: &[f64], labels: &[bool], target_precision: f64) -> ThresholdChoice {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    for &tau in &distinct {
        let (mut tp, mut flagged) = (0usize, 0usize);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= tau {
                flagged += 1;
                tp += usize::from(l);
            }
        }
        let precision = tp as f64 / flagged as f64;
        if tp > 0 && precision >= target_precision {
            return ThresholdChoice {
                tau,
                precision: Some(precision),
                flagged,
                warning: None,
            };
        }
    }
    let max = distinct.last().copied().unwrap_or(0.0);
    ThresholdChoice {
        tau: above(max),
        precision: None,
        flagged: 0,
        warning: Some(format!(
            "precision {target_precision} is not reachable on the validation set; nothing will be flagged"
        )),
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditModel {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub tau: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl AuditModel {
    pub fn score_tokens(&self, tokens: &[String]) -> f64 {
        predict(
            &self.weights,
            self.bias,
            &tfidf_row(&self.vocabulary, &self.idf, tokens),
        )
    }

    /// Probability that the decision behind `text` was flipped by steering.
    pub fn score(&self, text: &str) -> f64 {
        self.score_tokens(&tokenize(text))
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        let n = self.vocabulary.len();
        if self.idf.len() != n || self.weights.len() != n {
            return Err(AuditError::ModelFile(format!(
                "vocabulary {n}, idf {}, weights {} must agree",
                self.idf.len(),
                self.weights.len()
            )));
        }
        if self.vocabulary.values().any(|&k| k >= n) {
            return Err(AuditError::ModelFile(
                "vocabulary index out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        let m: AuditModel =
            serde_json::from_str(text).map_err(|e| AuditError::ModelFile(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, AuditError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AuditError::ModelFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_validation: usize,
    pub train_auc: Option<f64>,
    pub validation_auc: Option<f64>,
    pub threshold: ThresholdChoice,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatekeeperConfig {
    pub lambda: f64,
    pub target_precision: f64,
    pub seed: u64,
}

impl Default for GatekeeperConfig {
    fn default() -> Self {
        GatekeeperConfig {
            lambda: DEFAULT_LAMBDA,
            target_precision: DEFAULT_TARGET_PRECISION,
            seed: 0,
        }
    }
}

/// Seeded split stratified by label; returns (train, validation) indices in
/// ascending order.
pub fn stratified_split(labels: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let k = ((members.len() as f64) * fraction).round() as usize;
        let k = k.clamp(
            usize::from(members.len() >= 2),
            members.len().saturating_sub(1),
        );
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn check_classes(labels: &[bool]) -> Result<(), AuditError> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AuditError::SingleClass);
    }
    for (class, count) in [(true, pos), (false, neg)] {
        if count < 2 {
            return Err(AuditError::TooFewPerClass { class, count });
        }
    }
    Ok(())
}

/// Logistic gatekeeper on pre-vectorized rows.
pub fn train_gatekeeper(
    x: &[SparseRow],
    dim: usize,
    flipped: &[bool],
    lambda: f64,
) -> Result<logistic::LogisticFit, AuditError> {
    if x.len() != flipped.len() {
        return Err(AuditError::LengthMismatch {
            what: "rows and labels",
            left: x.len(),
            right: flipped.len(),
        });
    }
    check_classes(flipped)?;
    Ok(fit_logistic(x, flipped, dim, lambda))
}

/// Split, fit the vectorizer and classifier on the training part, and pick
/// tau on the validation part.
pub fn fit_audit_model(
    texts: &[String],
    flipped: &[bool],
    config: &GatekeeperConfig,
) -> Result<(AuditModel, TrainReport), AuditError> {
    if texts.len() != flipped.len() {
        return Err(AuditError::LengthMismatch {
            what: "texts and labels",
            left: texts.len(),
            right: flipped.len(),
        });
    }
    check_classes(flipped)?;
    let (train, val) = stratified_split(flipped, VALIDATION_FRACTION, config.seed);
    let tokens: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    let train_docs: Vec<Vec<String>> = train.iter().map(|&i| tokens[i].clone()).collect();
    let train_y: Vec<bool> = train.iter().map(|&i| flipped[i]).collect();
    let vectorizer = TfidfVectorizer::fit(&train_docs)?;
    let x: Vec<SparseRow> = train_docs.iter().map(|d| vectorizer.transform(d)).collect();
    let fit = train_gatekeeper(&x, vectorizer.dim(), &train_y, config.lambda)?;
    let mut model = AuditModel {
        vocabulary: vectorizer.vocabulary,
        idf: vectorizer.idf,
        weights: fit.weights,
        bias: fit.bias,
        tau: 0.0,
        seed: config.seed,
        lambda: config.lambda,
    };
    let train_scores: Vec<f64> = x
        .iter()
        .map(|r| predict(&model.weights, model.bias, r))
        .collect();
    let val_scores: Vec<f64> = val
        .iter()
        .map(|&i| model.score_tokens(&tokens[i]))
        .collect();
    let val_y: Vec<bool> = val.iter().map(|&i| flipped[i]).collect();
    let threshold = select_threshold(&val_scores, &val_y, config.target_precision);
    model.tau = threshold.tau;
    let report = TrainReport {
        n_train: train.len(),
        n_validation: val.len(),
        train_auc: auc(&train_scores, &train_y).ok(),
        validation_auc: auc(&val_scores, &val_y).ok(),
        threshold,
        iterations: fit.iterations,
    };
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Labels and routing
// ---------------------------------------------------------------------------

/// Steered records with reasoning text, labeled by whether the decision
/// differs from the neutral decision of the same item, cot and repeat.
pub fn flip_labels(records: &[DecisionRecord]) -> Vec<(&DecisionRecord, bool)> {
    let neutral: HashMap<(&str, bool, u32), f64> = records
        .iter()
        .filter(|r| r.condition == Condition::Neutral)
        .map(|r| ((r.item_id.as_str(), r.cot, r.repeat), r.decision_value))
        .collect();
    records
        .iter()
        .filter(|r| r.condition != Condition::Neutral && r.reasoning_text.is_some())
        .filter_map(|r| {
            neutral
                .get(&(r.item_id.as_str(), r.cot, r.repeat))
                .map(|&y0| (r, r.decision_value != y0))
        })
        .collect()
}

/// One pooled model or one model per emotion.
#[derive(Clone, Debug, PartialEq)]
pub enum GatekeeperSet {
    Pooled(AuditModel),
    PerEmotion(BTreeMap<Emotion, AuditModel>),
}

impl GatekeeperSet {
    pub fn model_for(&self, condition: Condition) -> Option<&AuditModel> {
        match (self, condition) {
            (_, Condition::Neutral) => None,
            (GatekeeperSet::Pooled(m), _) => Some(m),
            (GatekeeperSet::PerEmotion(map), Condition::Emotion(e)) => map.get(&e),
            (GatekeeperSet::PerEmotion(_), Condition::Random) => None,
        }
    }

    pub fn with_tau(&self, tau: f64) -> GatekeeperSet {
        match self {
            GatekeeperSet::Pooled(m) => GatekeeperSet::Pooled(AuditModel { tau, ..m.clone() }),
            GatekeeperSet::PerEmotion(map) => GatekeeperSet::PerEmotion(
                map.iter()
                    .map(|(e, m)| (*e, AuditModel { tau, ..m.clone() }))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteOutcome {
    pub flagged: Vec<RecordKey>,
    pub scores: Vec<(RecordKey, f64)>,
    pub records: Vec<DecisionRecord>,
}

fn describe(k: &RecordKey) -> String {
    format!(
        "{}/{}/alpha={}/cot={}/repeat={}",
        k.item_id,
        k.condition,
        f64::from_bits(k.alpha_bits),
        k.cot,
        k.repeat
    )
}

/// Flags steered records whose score reaches tau and substitutes their
/// second-turn decision; every other record is copied unchanged.
pub fn route_and_score(
    records: &[DecisionRecord],
    models: &GatekeeperSet,
    second_turn: &HashMap<RecordKey, f64>,
) -> Result<RouteOutcome, AuditError> {
    let mut flagged = Vec::new();
    let mut scores = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let (Some(model), Some(text)) =
            (models.model_for(r.condition), r.reasoning_text.as_deref())
        else {
            out.push(r.clone());
            continue;
        };
        let key = r.key();
        let p = model.score(text);
        scores.push((key.clone(), p));
        if p >= model.tau {
            let y = *second_turn
                .get(&key)
                .ok_or_else(|| AuditError::MissingSecondTurn(describe(&key)))?;
            out.push(DecisionRecord {
                decision_value: y,
                ..r.clone()
            });
            flagged.push(key);
        } else {
            out.push(r.clone());
        }
    }
    Ok(RouteOutcome {
        flagged,
        scores,
        records: out,
    })
}

// ---------------------------------------------------------------------------
// Affective words
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffectCounts {
    pub counts: BTreeMap<Emotion, usize>,
    pub tokens: usize,
}

impl AffectCounts {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Case-insensitive whole-word counts per lexicon, plus the token length.
pub fn affect_word_count(text: &str, lexicons: &[(Emotion, Lexicon)]) -> AffectCounts {
    let mut out = AffectCounts {
        counts: lexicons.iter().map(|(e, _)| (*e, 0)).collect(),
        tokens: 0,
    };
    for w in words(text) {
        out.tokens += 1;
        for (e, lex) in lexicons {
            if lex.contains(&w) {
                *out.counts.get_mut(e).expect("seeded above") += 1;
            }
        }
    }
    out
}
