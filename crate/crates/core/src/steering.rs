//! Emotion steering directions.
//!
//! For a target emotion the per-sample contrasts `h(x) - mu_not_e` of the
//! target rows are mean-centered and their leading principal component is the
//! steering direction, oriented toward `mu_e - mu_not_e`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ActivationDump, Condition, DecisionItem, DecisionRecord, Emotion};

pub const DEFAULT_ALPHAS: [f64; 4] = [0.6, 0.8, 1.0, 1.5];
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("no rows on the {side} side for emotion {emotion}")]
    EmptyClass {
        emotion: Emotion,
        side: &'static str,
    },
    #[error("centroid difference for {0} is zero; no direction can be defined")]
    ZeroContrast(Emotion),
    #[error("dimension mismatch: vector has {got}, steering direction has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("select_control_layers needs at least 3 layers, got {0}")]
    TooFewLayers(usize),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("invalid steering config: {0}")]
    InvalidConfig(String),
    #[error("steering file {path}: {message}")]
    File { path: String, message: String },
}

/// How a vector came out of `derive_steering_vector`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub n_positive: usize,
    pub n_negative: usize,
    /// direction . (mu_e - mu_not_e)
    pub sign_anchor: f64,
    /// Power iteration was skipped because the contrasts had zero spread.
    pub degenerate_pca: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    /// `Condition::Emotion` for derived vectors, `Condition::Random` for the
    /// random-direction baseline.
    pub label: Condition,
    pub layer_index: usize,
    pub direction: Vec<f64>,
    pub explained_variance_ratio: f64,
    pub seed: Option<u64>,
    pub provenance: Option<Provenance>,
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.direction.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringConfig {
    pub alphas: Vec<f64>,
    pub control_layers: Vec<usize>,
    pub seed: u64,
}

impl SteeringConfig {
    pub fn new(
        alphas: Vec<f64>,
        control_layers: Vec<usize>,
        seed: u64,
        num_layers: usize,
    ) -> Result<Self, SteeringError> {
        if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(SteeringError::InvalidConfig(
                "alphas must be non-empty and all > 0".into(),
            ));
        }
        if control_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SteeringError::InvalidConfig(
                "control layers must be strictly increasing".into(),
            ));
        }
        if control_layers.iter().any(|&l| l >= num_layers) {
            return Err(SteeringError::InvalidConfig(format!(
                "control layers must lie below model depth {num_layers}"
            )));
        }
        Ok(SteeringConfig {
            alphas,
            control_layers,
            seed,
        })
    }
}

fn row_f64(v: &[f32]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|&x| x as f64)
}

/// Target and non-target centroids, summed in row order.
pub fn centroids(
    dump: &ActivationDump,
    emotion: Emotion,
) -> Result<(Vec<f64>, Vec<f64>), SteeringError> {
    let d = dump.dim();
    let mut pos = vec![0.0; d];
    let mut neg = vec![0.0; d];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for row in dump.rows() {
        let (acc, n) = if row.emotion == emotion {
            (&mut pos, &mut n_pos)
        } else {
            (&mut neg, &mut n_neg)
        };
        for (a, x) in acc.iter_mut().zip(row_f64(&row.vector)) {
            *a += x;
        }
        *n += 1;
    }
    if n_pos == 0 {
        return Err(SteeringError::EmptyClass {
            emotion,
            side: "target",
        });
    }
    if n_neg == 0 {
        return Err(SteeringError::EmptyClass {
            emotion,
            side: "non-target",
        });
    }
    pos.iter_mut().for_each(|x| *x /= n_pos as f64);
    neg.iter_mut().for_each(|x| *x /= n_neg as f64);
    Ok((pos, neg))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense symmetric matrix, row-major.
struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    fn mul(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.data[i * self.n..(i + 1) * self.n], v);
        }
    }

    fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }
}

/// Sample covariance of mean-centered rows.
fn covariance(centered: &[Vec<f64>], d: usize) -> SymMatrix {
    let mut data = vec![0.0; d * d];
    for row in centered {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                data[i * d + j] += ri * row[j];
            }
        }
    }
    let denom = (centered.len().max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = data[i * d + j] / denom;
            data[i * d + j] = v;
            data[j * d + i] = v;
        }
    }
    SymMatrix { n: d, data }
}

/// Leading eigenvector by power iteration. Returns (vector, eigenvalue, iterations).
fn power_iteration(m: &SymMatrix) -> (Vec<f64>, f64, usize) {
    let n = m.n;
    // Fixed pseudo-random start: never systematically orthogonal to PC1.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut next = vec![0.0; n];
    let mut lambda = 0.0;
    for it in 1..=POWER_MAX_ITERATIONS {
        m.mul(&v, &mut next);
        let nn = norm(&next);
        if nn == 0.0 {
            return (v, 0.0, it);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        lambda = nn;
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOLERANCE {
            return (v, lambda, it);
        }
    }
    (v, lambda, POWER_MAX_ITERATIONS)
}

pub fn derive_steering_vector(
    dump: &ActivationDump,
    emotion: Emotion,
) -> Result<SteeringVector, SteeringError> {
    let (mu_e, mu_not) = centroids(dump, emotion)?;
    let d = dump.dim();
    let contrast: Vec<f64> = mu_e.iter().zip(&mu_not).map(|(a, b)| a - b).collect();

    let targets: Vec<&[f32]> = dump
        .rows()
        .iter()
        .filter(|r| r.emotion == emotion)
        .map(|r| r.vector.as_slice())
        .collect();
    let n_pos = targets.len();
    let n_neg = dump.rows().len() - n_pos;

    // v_x = h(x) - mu_not; centering the v_x subtracts their mean mu_e - mu_not.
    let mut contrasts: Vec<Vec<f64>> = targets
        .iter()
        .map(|h| row_f64(h).zip(&mu_not).map(|(x, m)| x - m).collect())
        .collect();
    let mut mean = vec![0.0; d];
    for v in &contrasts {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_pos as f64);
    for v in &mut contrasts {
        for (x, m) in v.iter_mut().zip(&mean) {
            *x -= m;
        }
    }

    let cov = covariance(&contrasts, d);
    let total = cov.trace();
    let contrast_norm = norm(&contrast);

    let (mut direction, ratio, iterations, degenerate) = if total > 0.0 {
        let (v, lambda, it) = power_iteration(&cov);
        (v, (lambda / total).clamp(0.0, 1.0), it, false)
    } else {
        if contrast_norm == 0.0 {
            return Err(SteeringError::ZeroContrast(emotion));
        }
        log::warn!("zero-spread contrasts for {emotion}; falling back to centroid difference");
        (
            contrast.iter().map(|x| x / contrast_norm).collect(),
            0.0,
            0,
            true,
        )
    };

    let mut anchor = dot(&direction, &contrast);
    if anchor < 0.0 {
        direction.iter_mut().for_each(|x| *x = -*x);
        anchor = -anchor;
    }

    Ok(SteeringVector {
        label: Condition::Emotion(emotion),
        layer_index: dump.layer(),
        direction,
        explained_variance_ratio: ratio,
        seed: None,
        provenance: Some(Provenance {
            n_positive: n_pos,
            n_negative: n_neg,
            sign_anchor: anchor,
            degenerate_pca: degenerate,
            iterations,
        }),
    })
}

/// Middle third of `num_layers` decoder layers: `floor(L/3) ..= floor(2L/3) - 1`.
pub fn select_control_layers(num_layers: usize) -> Result<Vec<usize>, SteeringError> {
    if num_layers < 3 {
        return Err(SteeringError::TooFewLayers(num_layers));
    }
    Ok((num_layers / 3..(2 * num_layers) / 3).collect())
}

/// `h + alpha * s`.
pub fn apply_steering(
    h: &[f64],
    s: &SteeringVector,
    alpha: f64,
) -> Result<Vec<f64>, SteeringError> {
    if h.len() != s.dim() {
        return Err(SteeringError::DimensionMismatch {
            expected: s.dim(),
            got: h.len(),
        });
    }
    Ok(h.iter()
        .zip(&s.direction)
        .map(|(x, u)| x + alpha * u)
        .collect())
}

/// Uniform unit direction on the sphere, reproducible from `seed`.
pub fn random_direction(dim: usize, seed: u64) -> Result<SteeringVector, SteeringError> {
    if dim == 0 {
        return Err(SteeringError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return Ok(SteeringVector {
                label: Condition::Random,
                layer_index: 0,
                direction: v.into_iter().map(|x| x / n).collect(),
                explained_variance_ratio: 0.0,
                seed: Some(seed),
                provenance: None,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Steering vector files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SteeringFile {
    emotion: String,
    layer: usize,
    dim: usize,
    direction: Vec<f64>,
    explained_variance_ratio: f64,
    alpha_recommended: Vec<f64>,
    seed: Option<u64>,
}

pub fn steering_to_json(s: &SteeringVector, alphas: &[f64]) -> String {
    let file = SteeringFile {
        emotion: match s.label {
            Condition::Emotion(e) => e.as_str().to_string(),
            other => other.to_string(),
        },
        layer: s.layer_index,
        dim: s.dim(),
        direction: s.direction.clone(),
        explained_variance_ratio: s.explained_variance_ratio,
        alpha_recommended: alphas.to_vec(),
        seed: s.seed,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("steering file serializes");
    text.push('\n');
    text
}

pub fn steering_from_json(
    text: &str,
    origin: &str,
) -> Result<(SteeringVector, Vec<f64>), SteeringError> {
    let fail = |message: String| SteeringError::File {
        path: origin.to_string(),
        message,
    };
    let file: SteeringFile = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
    if file.direction.len() != file.dim || file.dim == 0 {
        return Err(fail(format!(
            "dim {} but direction has {} entries",
            file.dim,
            file.direction.len()
        )));
    }
    let n = norm(&file.direction);
    if (n - 1.0).abs() > 1e-6 {
        return Err(fail(format!("direction is not unit length (norm {n})")));
    }
    let label = if file.emotion == "random" {
        Condition::Random
    } else {
        Condition::Emotion(
            file.emotion
                .parse()
                .map_err(|e: crate::schema::SchemaError| fail(e.to_string()))?,
        )
    };
    Ok((
        SteeringVector {
            label,
            layer_index: file.layer,
            direction: file.direction,
            explained_variance_ratio: file.explained_variance_ratio,
            seed: file.seed,
            provenance: None,
        },
        file.alpha_recommended,
    ))
}

pub fn read_steering_file(path: &Path) -> Result<(SteeringVector, Vec<f64>), SteeringError> {
    let text = fs::read_to_string(path).map_err(|e| SteeringError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    steering_from_json(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Mock model
// ---------------------------------------------------------------------------

/// Deterministic stand-in for a steered language model.
///
/// The item context and every option get seeded hash embeddings in a
/// `dim`-dimensional space; the steering offset shifts the context and the
/// option with the highest dot-product score wins (first index on ties).
/// Scores are affine in alpha, so once the winner changes it never returns:
/// per-item flips are monotone in alpha for a fixed direction.
#[derive(Clone, Debug)]
pub struct MockModel {
    pub dim: usize,
    pub seed: u64,
    /// Words the mock sprinkles into reasoning text when steering changed its
    /// answer. Keyed by emotion; random steering uses the union.
    pub affect_words: Vec<(Emotion, Vec<String>)>,
}

/// Condition metadata attached to a mock decision.
#[derive(Clone, Copy, Debug)]
pub struct MockRequest {
    pub condition: Condition,
    pub cot: bool,
    pub repeat: u32,
}

const FILLER_WORDS: [&str; 24] = [
    "consider",
    "the",
    "payoff",
    "option",
    "other",
    "player",
    "expected",
    "value",
    "outcome",
    "risk",
    "choose",
    "because",
    "given",
    "structure",
    "round",
    "offer",
    "total",
    "share",
    "strategy",
    "balance",
    "long",
    "term",
    "likely",
    "response",
];

fn fnv1a(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl MockModel {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockModel {
            dim,
            seed,
            affect_words: Vec::new(),
        }
    }

    pub fn with_affect_words(mut self, words: Vec<(Emotion, Vec<String>)>) -> Self {
        self.affect_words = words;
        self
    }

    fn embed(&self, key: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    fn context(&self, item: &DecisionItem, req: &MockRequest) -> Vec<f64> {
        let key = fnv1a(
            self.seed,
            &[
                item.item_id.as_bytes(),
                b"context",
                &[req.cot as u8],
                &req.repeat.to_le_bytes(),
            ],
        );
        self.embed(key, 1.0 / (self.dim as f64).sqrt())
    }

    fn option_embeddings(&self, item: &DecisionItem) -> Vec<Vec<f64>> {
        item.options
            .iter()
            .map(|o| {
                self.embed(
                    fnv1a(
                        self.seed,
                        &[item.item_id.as_bytes(), b"option", o.label.as_bytes()],
                    ),
                    1.0,
                )
            })
            .collect()
    }

    fn argmax(h: &[f64], options: &[Vec<f64>]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, e) in options.iter().enumerate() {
            let s = dot(h, e);
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        best
    }

    /// Decide one item. `steering` is a set of unit directions (one per
    /// control layer) and a strength; the offsets add up in the toy space.
    pub fn decide(
        &self,
        item: &DecisionItem,
        steering: Option<(&[SteeringVector], f64)>,
        req: MockRequest,
    ) -> Result<DecisionRecord, SteeringError> {
        let base = self.context(item, &req);
        let options = self.option_embeddings(item);
        let neutral_choice = Self::argmax(&base, &options);
        let mut h = base;
        let mut alpha_used = 0.0;
        if let Some((vectors, alpha)) = steering {
            for s in vectors {
                h = apply_steering(&h, s, alpha)?;
            }
            alpha_used = alpha;
        }
        let choice = Self::argmax(&h, &options);
        let reasoning_text = req.cot.then(|| {
            self.reasoning(
                item,
                &req,
                choice != neutral_choice,
                &item.options[choice].label,
            )
        });
        Ok(DecisionRecord {
            item_id: item.item_id.clone(),
            condition: req.condition,
            alpha: if req.condition == Condition::Neutral {
                0.0
            } else {
                alpha_used
            },
            cot: req.cot,
            repeat: req.repeat,
            decision_value: item.options[choice].value,
            reasoning_text,
        })
    }

    fn reasoning(
        &self,
        item: &DecisionItem,
        req: &MockRequest,
        flipped: bool,
        answer: &str,
    ) -> String {
        let alpha_tag = req.condition.to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(
            self.seed,
            &[
                item.item_id.as_bytes(),
                b"reasoning",
                alpha_tag.as_bytes(),
                &req.repeat.to_le_bytes(),
            ],
        ));
        use rand::Rng;
        let n_words = rng.random_range(10..18);
        let mut words: Vec<String> = (0..n_words)
            .map(|_| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string())
            .collect();
        let pool: Vec<&String> = match req.condition {
            Condition::Emotion(e) => self
                .affect_words
                .iter()
                .filter(|(em, _)| *em == e)
                .flat_map(|(_, w)| w)
                .collect(),
            Condition::Random => self.affect_words.iter().flat_map(|(_, w)| w).collect(),
            Condition::Neutral => Vec::new(),
        };
        // Affect words mostly accompany flipped answers; a little label noise both ways.
        let emit = if flipped {
            rng.random_bool(0.9)
        } else {
            rng.random_bool(0.08)
        };
        if emit && !pool.is_empty() {
            for _ in 0..rng.random_range(1..4) {
                let w = pool[rng.random_range(0..pool.len())].clone();
                let at = rng.random_range(0..=words.len());
                words.insert(at, w);
            }
        }
        words.push(format!("answer: {answer}"));
        words.join(" ")
    }
}
