//! End-to-end run on synthetic activations with planted emotion directions,
//! executed twice and compared byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stages::*;
use super::{PipelineError, Result, StageOutput};
use crate::schema::{
    parse_decision_log, parse_items, to_jsonl, write_activation_dump, ActivationDump,
    ActivationRow, Condition, Emotion,
};
use crate::steering::read_steering_file;

pub const SYNTHETIC_LAYERS: usize = 6;
pub const SYNTHETIC_ROWS_PER_EMOTION: usize = 40;
pub const PLANTED_COSINE_MIN: f64 = 0.95;

/// Planted unit direction per (layer, emotion).
pub type PlantedDirections = BTreeMap<(usize, Emotion), Vec<f64>>;

/// One dump per layer. Rows of emotion e at layer l are s * u(l, e) plus
/// N(0, 0.2^2) noise with s ~ U(0.5, 3.5); `u` is a seeded unit vector.
pub fn synthetic_dumps(
    layers: usize,
    dim: usize,
    seed: u64,
) -> (Vec<ActivationDump>, PlantedDirections) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD75E_0000);
    let mut planted = BTreeMap::new();
    let mut dumps = Vec::new();
    for layer in 0..layers {
        let mut rows = Vec::new();
        for e in Emotion::ALL {
            let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u: Vec<f64> = u.into_iter().map(|x| x / n).collect();
            for i in 0..SYNTHETIC_ROWS_PER_EMOTION {
                let s: f64 = rng.random_range(0.5..3.5);
                let vector = u
                    .iter()
                    .map(|&x| (s * x + 0.2 * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                rows.push(ActivationRow {
                    sample_id: format!("{e}-{i:03}"),
                    emotion: e,
                    vector,
                });
            }
            planted.insert((layer, e), u);
        }
        dumps.push(ActivationDump::new(layer, dim, rows).expect("synthetic rows are well formed"));
    }
    (dumps, planted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckOutcome {
    pub passed: bool,
    pub checks: Vec<SelfcheckCheck>,
    pub runtime_secs: Vec<f64>,
}

fn write_io(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Write {
        path: path.to_path_buf(),
        source: e,
    }
}

/// The full stage chain into `dir`.
fn run_once(ctx: &StageContext, dir: &Path) -> Result<()> {
    let run = StageContext {
        out_dir: dir.to_path_buf(),
        ..ctx.clone()
    };
    let cfg = &ctx.config;
    let dumps_dir = dir.join("dumps");
    std::fs::create_dir_all(&dumps_dir).map_err(|e| write_io(&dumps_dir, e))?;
    let (dumps, _) = synthetic_dumps(SYNTHETIC_LAYERS, cfg.synthetic_dim, cfg.seed);
    for d in &dumps {
        write_activation_dump(d, &dumps_dir.join(format!("layer_{:02}.bin", d.layer())))?;
    }
    derive_stage(&run, &[dumps_dir])?;
    sweep_stage(&run, &dir.join("steering"), None)?;

    let items_path = dir.join("items.jsonl");
    let decisions_path = dir.join("decisions.jsonl");
    let mut prep = StageOutput::new(dir, "prep", cfg.seed)?;
    let items = parse_items(&prep.read_text(&items_path)?).into_strict()?;
    let records = parse_decision_log(&prep.read_text(&decisions_path)?, &items).into_strict()?;
    prep.write(
        "second_turn.jsonl",
        to_jsonl(&reverting_second_turns(&records)).as_bytes(),
    )?;
    let top_alpha = cfg.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    prep.write_json(
        "confound_features.json",
        &affect_features(&records, top_alpha),
    )?;
    prep.finish()?;

    evaluate_stage(&run, &items_path, &decisions_path, None)?;
    stats_stage(
        &run,
        &items_path,
        &decisions_path,
        None,
        Some(&dir.join("confound_features.json")),
    )?;
    irt_stage(
        &run,
        IrtInput::Log {
            items: &items_path,
            decisions: &decisions_path,
            directions: None,
        },
    )?;
    let audit_dir = dir.join("audit");
    let audit = StageContext {
        out_dir: audit_dir.clone(),
        ..run.clone()
    };
    audit_train_stage(&audit, &items_path, &decisions_path)?;
    audit_score_stage(&audit, &audit_dir, &items_path, &decisions_path)?;
    audit_route_stage(
        &audit,
        RouteInputs {
            models: &audit_dir,
            items: &items_path,
            decisions: &decisions_path,
            second_turn: &dir.join("second_turn.jsonl"),
            directions: None,
            tau: None,
        },
    )?;
    report_stage(
        &run,
        &dir.join("metrics.json"),
        &dir.join("stats.json"),
        None,
    )?;
    Ok(())
}

fn collect_tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| PipelineError::MissingInput(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| write_io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walked under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                let bytes = std::fs::read(&path).map_err(|e| write_io(&path, e))?;
                out.insert(rel, bytes);
            }
        }
    }
    Ok(out)
}

fn check(name: &str, passed: bool, detail: String) -> SelfcheckCheck {
    SelfcheckCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn planted_check(dir: &Path, ctx: &StageContext) -> Result<SelfcheckCheck> {
    let (_, planted) = synthetic_dumps(SYNTHETIC_LAYERS, ctx.config.synthetic_dim, ctx.config.seed);
    let mut worst = f64::INFINITY;
    let mut n = 0;
    for path in list_files(&dir.join("steering"), "json")? {
        let (v, _) = read_steering_file(&path)?;
        let Condition::Emotion(e) = v.label else {
            continue;
        };
        let u = &planted[&(v.layer_index, e)];
        let cos: f64 = u.iter().zip(&v.direction).map(|(a, b)| a * b).sum();
        worst = worst.min(cos);
        n += 1;
    }
    Ok(check(
        "planted_direction_recovery",
        n > 0 && worst > PLANTED_COSINE_MIN,
        format!("{n} vectors, min cosine {worst:.6} (limit > {PLANTED_COSINE_MIN})"),
    ))
}

fn metric_checks(dir: &Path) -> Result<Vec<SelfcheckCheck>> {
    let text = std::fs::read_to_string(dir.join("metrics.json"))
        .map_err(|e| PipelineError::MissingInput(e.to_string()))?;
    let metrics: EvaluateReport =
        serde_json::from_str(&text).map_err(|e| PipelineError::Selfcheck(e.to_string()))?;
    let games: BTreeSet<_> = metrics.cells.iter().map(|c| c.game).collect();
    let bound_violations = metrics
        .cells
        .iter()
        .filter(|c| c.nad.abs() > c.ndm + 1e-12)
        .count();
    let route_text = std::fs::read_to_string(dir.join("audit/route.json"))
        .map_err(|e| PipelineError::MissingInput(e.to_string()))?;
    let route: RouteReport =
        serde_json::from_str(&route_text).map_err(|e| PipelineError::Selfcheck(e.to_string()))?;
    let audit_ok =
        matches!((route.ndm_cot_before, route.ndm_cot_after), (Some(b), Some(a)) if a <= b);
    Ok(vec![
        check(
            "all_games_present",
            games.len() == 7,
            format!("{} of 7 games have cells", games.len()),
        ),
        check(
            "nad_bounded_by_ndm",
            bound_violations == 0,
            format!(
                "{bound_violations} of {} cells violate |NAD| <= NDM",
                metrics.cells.len()
            ),
        ),
        check(
            "audit_reduces_ndm",
            audit_ok,
            format!(
                "CoT NDM {:?} -> {:?}, {} flagged",
                route.ndm_cot_before, route.ndm_cot_after, route.n_flagged
            ),
        ),
    ])
}

/// Runs the chain into `run1/` and `run2/` under the context's out dir and
/// writes `selfcheck.json` next to them.
pub fn run_selfcheck(ctx: &StageContext) -> Result<SelfcheckOutcome> {
    let dirs: Vec<PathBuf> = ["run1", "run2"]
        .iter()
        .map(|r| ctx.out_dir.join(r))
        .collect();
    let mut runtime_secs = Vec::new();
    for dir in &dirs {
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| write_io(dir, e))?;
        }
        let t = Instant::now();
        run_once(ctx, dir)?;
        runtime_secs.push(t.elapsed().as_secs_f64());
        log::info!(
            "selfcheck: {} done in {:.1}s",
            dir.display(),
            runtime_secs.last().unwrap()
        );
    }
    let mut checks = vec![planted_check(&dirs[0], ctx)?];
    checks.extend(metric_checks(&dirs[0])?);
    let (a, b) = (collect_tree(&dirs[0])?, collect_tree(&dirs[1])?);
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    checks.push(check(
        "byte_identical_runs",
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files identical", a.len())
        } else {
            format!("differing: {differing:?}")
        },
    ));
    let outcome = SelfcheckOutcome {
        passed: checks.iter().all(|c| c.passed),
        checks,
        runtime_secs,
    };
    let path = ctx.out_dir.join("selfcheck.json");
    let mut text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| write_io(&path, e))?;
    Ok(outcome)
}
