//! The seven game templates: payoff-ordering validators, role sets, numeric
//! response ranges, and desk-scale item synthesis.
//!
//! Binary-action games code the focal behavior as 1 and the alternative as 0,
//! so a positive drift always means "more of the focal behavior".

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{DecisionItem, DecisionOption, DirectionTable, Emotion, Game, SourceTag};

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("item {0:?} has a zero response range")]
    DegenerateRange(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameTemplate {
    pub name: Game,
    pub roles: &'static [&'static str],
    pub focal_behavior: &'static str,
    pub constraint_set: &'static [&'static str],
}

impl GameTemplate {
    pub fn of(game: Game) -> GameTemplate {
        let (roles, focal_behavior, constraint_set): (&[&str], &str, &[&str]) = match game {
            Game::PrisonersDilemma => (
                &["player"],
                "cooperate",
                &["T > R", "R > P", "P > S", "2R > T + S"],
            ),
            Game::StagHunt => (&["player"], "choose stag", &["A > B", "D > C", "A > D"]),
            Game::Escalation => (&["bidder"], "persist", &["increment > 0", "prize > 0"]),
            Game::Trust => (
                &["trustor", "trustee"],
                "send/trust",
                &[
                    "endowment > 0",
                    "multiplier > 1",
                    "sends in [0, endowment]",
                    "returns in [0, sent * multiplier]",
                ],
            ),
            Game::Ultimatum => (
                &["proposer", "responder"],
                "reject",
                &["pie > 0", "offers in [0, pie]"],
            ),
            Game::SealedAuction => (
                &["bidder"],
                "overbid",
                &["valuation > 0", "bids in [0, valuation]"],
            ),
            Game::BeautyContest => (
                &["player"],
                "reasoning depth",
                &["0 < p < 1", "guess_min < guess_max"],
            ),
        };
        GameTemplate {
            name: game,
            roles,
            focal_behavior,
            constraint_set,
        }
    }
}

/// Game-specific payoff parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "game", rename_all = "snake_case")]
pub enum PayoffSpec {
    PrisonersDilemma {
        t: f64,
        r: f64,
        p: f64,
        s: f64,
    },
    /// `a` both stag, `b` hare against stag, `d` both hare, `c` stag against hare.
    StagHunt {
        a: f64,
        b: f64,
        d: f64,
        c: f64,
    },
    Escalation {
        increment: f64,
        prize: f64,
    },
    Trust {
        endowment: f64,
        multiplier: f64,
        sends: Vec<f64>,
        sent: f64,
        returns: Vec<f64>,
    },
    Ultimatum {
        pie: f64,
        offers: Vec<f64>,
    },
    SealedAuction {
        valuation: f64,
        bids: Vec<f64>,
    },
    BeautyContest {
        p: f64,
        guess_min: i64,
        guess_max: i64,
    },
}

impl PayoffSpec {
    pub fn game(&self) -> Game {
        match self {
            PayoffSpec::PrisonersDilemma { .. } => Game::PrisonersDilemma,
            PayoffSpec::StagHunt { .. } => Game::StagHunt,
            PayoffSpec::Escalation { .. } => Game::Escalation,
            PayoffSpec::Trust { .. } => Game::Trust,
            PayoffSpec::Ultimatum { .. } => Game::Ultimatum,
            PayoffSpec::SealedAuction { .. } => Game::SealedAuction,
            PayoffSpec::BeautyContest { .. } => Game::BeautyContest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub game: Game,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn within(grid: &[f64], lo: f64, hi: f64) -> bool {
    grid.iter().all(|v| v.is_finite() && *v >= lo && *v <= hi)
}

pub fn check_template(spec: &PayoffSpec) -> ValidationReport {
    let mut v: Vec<String> = Vec::new();
    let mut require = |ok: bool, what: &str| {
        if !ok {
            v.push(what.to_string());
        }
    };
    match spec {
        PayoffSpec::PrisonersDilemma { t, r, p, s } => {
            require(t > r, "T > R");
            require(r > p, "R > P");
            require(p > s, "P > S");
            require(2.0 * r > t + s, "2R > T + S");
        }
        PayoffSpec::StagHunt { a, b, d, c } => {
            require(a > b, "A > B");
            require(d > c, "D > C");
            require(a > d, "A > D");
        }
        PayoffSpec::Escalation { increment, prize } => {
            require(*increment > 0.0, "increment > 0");
            require(*prize > 0.0, "prize > 0");
        }
        PayoffSpec::Trust {
            endowment,
            multiplier,
            sends,
            sent,
            returns,
        } => {
            require(*endowment > 0.0, "endowment > 0");
            require(*multiplier > 1.0, "multiplier > 1");
            require(within(sends, 0.0, *endowment), "sends in [0, endowment]");
            require(*sent >= 0.0 && sent <= endowment, "sent in [0, endowment]");
            require(
                within(returns, 0.0, sent * multiplier),
                "returns in [0, sent * multiplier]",
            );
        }
        PayoffSpec::Ultimatum { pie, offers } => {
            require(*pie > 0.0, "pie > 0");
            require(within(offers, 0.0, *pie), "offers in [0, pie]");
        }
        PayoffSpec::SealedAuction { valuation, bids } => {
            require(*valuation > 0.0, "valuation > 0");
            require(within(bids, 0.0, *valuation), "bids in [0, valuation]");
        }
        PayoffSpec::BeautyContest {
            p,
            guess_min,
            guess_max,
        } => {
            require(*p > 0.0 && *p < 1.0, "0 < p < 1");
            require(guess_min < guess_max, "guess_min < guess_max");
        }
    }
    ValidationReport {
        game: spec.game(),
        violations: v,
    }
}

/// `R_i = y_max - y_min`; zero ranges cannot be normalized.
pub fn response_range(item: &DecisionItem) -> Result<f64, GameError> {
    let r = item.y_max() - item.y_min();
    if r > 0.0 {
        Ok(r)
    } else {
        Err(GameError::DegenerateRange(item.item_id.clone()))
    }
}

pub fn human_direction(table: &DirectionTable, game: Game, role: &str, emotion: Emotion) -> i8 {
    table.get(game, role, emotion)
}

// ---------------------------------------------------------------------------
// Lexicons
// ---------------------------------------------------------------------------

const BUNDLED_AFFECT_LEXICON: &str = include_str!("../data/affect_lexicon.txt");
const BUNDLED_EMOTION_LEXICON: &str = include_str!("../data/emotion_lexicon.tsv");

/// Lowercase word tokens: runs of alphanumeric characters.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::from_lines(BUNDLED_AFFECT_LEXICON)
    }

    pub fn from_lines(text: &str) -> Self {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

impl<S: AsRef<str>> FromIterator<S> for Lexicon {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Lexicon {
            words: iter
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }
}

/// Per-emotion word lists (`emotion<TAB>word` lines).
pub fn bundled_emotion_lexicons() -> Vec<(Emotion, Lexicon)> {
    Emotion::ALL
        .iter()
        .map(|&e| {
            let lex = BUNDLED_EMOTION_LEXICON
                .lines()
                .filter_map(|l| l.split_once('\t'))
                .filter(|(name, _)| name.parse::<Emotion>().ok() == Some(e))
                .map(|(_, w)| w.trim())
                .collect();
            (e, lex)
        })
        .collect()
}

/// Labels of options that contain any lexicon word.
pub fn lexicon_neutrality_check(item: &DecisionItem, lexicon: &Lexicon) -> Vec<String> {
    item.options
        .iter()
        .filter(|o| words(&o.label).any(|w| lexicon.contains(&w)))
        .map(|o| o.label.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Desk-scale item synthesis
// ---------------------------------------------------------------------------

/// A synthesized item together with the payoffs it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskItem {
    pub item: DecisionItem,
    pub payoffs: PayoffSpec,
}

fn opt(label: impl Into<String>, value: f64) -> DecisionOption {
    DecisionOption {
        label: label.into(),
        value,
    }
}

fn fmt_amount(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x:.2}")
    }
}

fn random_tags(rng: &mut ChaCha8Rng) -> BTreeSet<SourceTag> {
    let mut tags = BTreeSet::new();
    if rng.random_bool(0.5) {
        tags.insert(SourceTag::MultiTurn);
    }
    if rng.random_bool(0.3) {
        tags.insert(SourceTag::MultiAgent);
    }
    tags
}

fn synth_one(game: Game, index: usize, rng: &mut ChaCha8Rng) -> DeskItem {
    let item_id = format!("{}-{index:04}", game.as_str());
    let (role, options, payoffs, text): (&str, Vec<DecisionOption>, PayoffSpec, String) = match game
    {
        Game::PrisonersDilemma => {
            let s = rng.random_range(0..3) as f64;
            let p = s + rng.random_range(1..3) as f64;
            let r = p + rng.random_range(1..4) as f64;
            // T in (R, 2R - S)
            let t = r + rng.random_range(1..(r - s) as i64) as f64;
            (
                "player",
                vec![opt("defect", 0.0), opt("cooperate", 1.0)],
                PayoffSpec::PrisonersDilemma { t, r, p, s },
                format!(
                    "Two partners each decide privately. Both cooperating pays {r} each, both defecting pays {p} each; \
                     defecting against a cooperator pays {t} while the cooperator gets {s}."
                ),
            )
        }
        Game::StagHunt => {
            let c = rng.random_range(0..2) as f64;
            let d = c + rng.random_range(1..3) as f64;
            let a = d + rng.random_range(2..4) as f64;
            let b = d + rng.random_range(0..2) as f64;
            (
                "player",
                vec![opt("hunt hare", 0.0), opt("hunt stag", 1.0)],
                PayoffSpec::StagHunt { a, b, d, c },
                format!(
                    "Joining the joint project pays {a} if the partner joins too and {c} otherwise; \
                     the safe solo task pays {b} when the partner joins and {d} when both stay solo."
                ),
            )
        }
        Game::Escalation => {
            let prize = rng.random_range(5..21) as f64 * 10.0;
            let increment = rng.random_range(1..5) as f64 * 5.0;
            (
                "bidder",
                vec![opt("withdraw", 0.0), opt("raise the bid", 1.0)],
                PayoffSpec::Escalation { increment, prize },
                format!(
                    "A contract worth {prize} goes to the top bidder, but both bidders pay what they bid. \
                     The rival just raised; you may raise by {increment} or withdraw."
                ),
            )
        }
        Game::Trust => {
            let endowment = rng.random_range(2..6) as f64 * 10.0;
            let multiplier = [2.0, 3.0, 4.0][rng.random_range(0..3)];
            let step = endowment / 4.0;
            let sends: Vec<f64> = (0..=4).map(|k| k as f64 * step).collect();
            let sent = sends[rng.random_range(1..5)];
            let returns: Vec<f64> = (0..=4)
                .map(|k| k as f64 * sent * multiplier / 4.0)
                .collect();
            let payoffs = PayoffSpec::Trust {
                endowment,
                multiplier,
                sends: sends.clone(),
                sent,
                returns: returns.clone(),
            };
            if index.is_multiple_of(2) {
                (
                    "trustor",
                    sends
                        .iter()
                        .map(|&v| opt(format!("send {}", fmt_amount(v)), v))
                        .collect(),
                    payoffs,
                    format!(
                        "You hold {endowment}. Whatever you send is multiplied by {multiplier} \
                         and the partner then decides how much to return."
                    ),
                )
            } else {
                (
                    "trustee",
                    returns
                        .iter()
                        .map(|&v| opt(format!("return {}", fmt_amount(v)), v))
                        .collect(),
                    payoffs,
                    format!(
                        "The partner sent {sent}, which became {}. Decide how much to return.",
                        fmt_amount(sent * multiplier)
                    ),
                )
            }
        }
        Game::Ultimatum => {
            let pie = 100.0;
            let offers: Vec<f64> = (0..=10).map(|k| k as f64 * 10.0).collect();
            let payoffs = PayoffSpec::Ultimatum {
                pie,
                offers: offers.clone(),
            };
            if index.is_multiple_of(2) {
                (
                    "proposer",
                    offers.iter().map(|&v| opt(format!("offer {}", fmt_amount(v)), v)).collect(),
                    payoffs,
                    format!("Split {pie} with a partner who can accept or reject; rejection leaves both with nothing."),
                )
            } else {
                let offer = offers[rng.random_range(1..6)];
                (
                    "responder",
                    vec![opt("accept", 0.0), opt("reject", 1.0)],
                    payoffs,
                    format!(
                        "The partner proposes to give you {} of {pie}. Rejecting leaves both with nothing.",
                        fmt_amount(offer)
                    ),
                )
            }
        }
        Game::SealedAuction => {
            let valuation = rng.random_range(4..13) as f64 * 10.0;
            let bids: Vec<f64> = (0..=4).map(|k| k as f64 * valuation / 4.0).collect();
            (
                "bidder",
                bids.iter().map(|&v| opt(format!("bid {}", fmt_amount(v)), v)).collect(),
                PayoffSpec::SealedAuction {
                    valuation,
                    bids: bids.clone(),
                },
                format!(
                    "The lot is worth {valuation} to you. Bids are sealed and no bid is returned, win or lose."
                ),
            )
        }
        Game::BeautyContest => {
            let p: f64 = [0.5, 2.0 / 3.0, 0.75, 0.8][rng.random_range(0..4)];
            let (guess_min, guess_max) = (0i64, 100i64);
            // Option value = reasoning depth; label = the guess that depth implies.
            let options = (0..4)
                .map(|k| {
                    let guess = (50.0 * p.powi(k)).round();
                    opt(format!("guess {}", guess as i64), k as f64)
                })
                .collect();
            (
                "player",
                options,
                PayoffSpec::BeautyContest { p, guess_min, guess_max },
                format!(
                    "Each player names a number from {guess_min} to {guess_max}; the closest to {p:.2} times the average wins."
                ),
            )
        }
    };
    DeskItem {
        item: DecisionItem {
            item_id,
            game,
            role: role.to_string(),
            options,
            source_tags: random_tags(rng),
            scenario_text: text,
        },
        payoffs,
    }
}

/// `n` constraint-satisfying items for `game`, deterministic per seed. Games
/// with two roles alternate roles by index.
pub fn synth_desk_items(game: Game, n: usize, seed: u64) -> Vec<DeskItem> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (game as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..n).map(|i| synth_one(game, i, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pd_checks() {
        let ok = check_template(&PayoffSpec::PrisonersDilemma {
            t: 5.0,
            r: 3.0,
            p: 1.0,
            s: 0.0,
        });
        assert!(ok.is_valid());
        let bad = check_template(&PayoffSpec::PrisonersDilemma {
            t: 3.0,
            r: 5.0,
            p: 1.0,
            s: 0.0,
        });
        assert!(bad.violations.contains(&"T > R".to_string()));
    }

    #[test]
    fn stag_hunt_checks() {
        assert!(check_template(&PayoffSpec::StagHunt {
            a: 4.0,
            b: 3.0,
            d: 2.0,
            c: 0.0
        })
        .is_valid());
        let r = check_template(&PayoffSpec::StagHunt {
            a: 2.0,
            b: 3.0,
            d: 2.0,
            c: 2.0,
        });
        assert_eq!(r.violations, vec!["A > B", "D > C", "A > D"]);
    }

    #[test]
    fn exhaustive_small_grids() {
        for t in 0..=5 {
            for r in 0..=5 {
                for p in 0..=5 {
                    for s in 0..=5 {
                        let (t, r, p, s) = (t as f64, r as f64, p as f64, s as f64);
                        let expect = t > r && r > p && p > s && 2.0 * r > t + s;
                        assert_eq!(
                            check_template(&PayoffSpec::PrisonersDilemma { t, r, p, s }).is_valid(),
                            expect
                        );
                        let (a, b, d, c) = (t, r, p, s);
                        let expect = a > b && d > c && a > d;
                        assert_eq!(
                            check_template(&PayoffSpec::StagHunt { a, b, d, c }).is_valid(),
                            expect
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn other_templates() {
        assert!(!check_template(&PayoffSpec::Ultimatum {
            pie: 10.0,
            offers: vec![0.0, 11.0]
        })
        .is_valid());
        assert!(!check_template(&PayoffSpec::BeautyContest {
            p: 1.0,
            guess_min: 0,
            guess_max: 100
        })
        .is_valid());
        let trust = check_template(&PayoffSpec::Trust {
            endowment: 10.0,
            multiplier: 1.0,
            sends: vec![0.0, 10.0],
            sent: 10.0,
            returns: vec![0.0, 25.0],
        });
        assert_eq!(
            trust.violations,
            vec!["multiplier > 1", "returns in [0, sent * multiplier]"]
        );
        assert!(!check_template(&PayoffSpec::Escalation {
            increment: 0.0,
            prize: 1.0
        })
        .is_valid());
        assert!(!check_template(&PayoffSpec::SealedAuction {
            valuation: 10.0,
            bids: vec![-1.0]
        })
        .is_valid());
    }

    fn item_with(values: &[f64]) -> DecisionItem {
        DecisionItem {
            item_id: "x".into(),
            game: Game::Ultimatum,
            role: "proposer".into(),
            options: values
                .iter()
                .enumerate()
                .map(|(i, &v)| opt(format!("o{i}"), v))
                .collect(),
            source_tags: Default::default(),
            scenario_text: String::new(),
        }
    }

    #[test]
    fn ranges() {
        assert_eq!(response_range(&item_with(&[0.0, 1.0])).unwrap(), 1.0);
        let offers: Vec<f64> = (0..=10).map(|k| k as f64 * 10.0).collect();
        assert_eq!(response_range(&item_with(&offers)).unwrap(), 100.0);
        assert_eq!(
            response_range(&item_with(&[5.0, 5.0, 5.0])),
            Err(GameError::DegenerateRange("x".into()))
        );
    }

    #[test]
    fn directions_from_table() {
        let t = DirectionTable::bundled();
        assert_eq!(
            human_direction(&t, Game::PrisonersDilemma, "any", Emotion::Happiness),
            1
        );
        assert_eq!(
            human_direction(&t, Game::Ultimatum, "responder", Emotion::Anger),
            1
        );
        assert_eq!(
            human_direction(&t, Game::Escalation, "any", Emotion::Happiness),
            0
        );
        assert_eq!(
            human_direction(&t, Game::Trust, "trustee", Emotion::Happiness),
            0
        );
        assert_eq!(
            human_direction(&t, Game::BeautyContest, "player", Emotion::Anger),
            -1
        );
        assert_eq!(
            human_direction(&t, Game::SealedAuction, "bidder", Emotion::Fear),
            -1
        );
    }

    #[test]
    fn neutrality() {
        let lex: Lexicon = ["furious", "joyful"].into_iter().collect();
        let mut item = item_with(&[0.0, 1.0]);
        item.options[0].label = "accept the offer".into();
        assert!(lexicon_neutrality_check(&item, &lex).is_empty());

        let lex: Lexicon = ["angrily"].into_iter().collect();
        item.options[1].label = "refuse Angrily!".into();
        assert_eq!(
            lexicon_neutrality_check(&item, &lex),
            vec!["refuse Angrily!"]
        );

        item.options.clear();
        assert!(lexicon_neutrality_check(&item, &lex).is_empty());
    }

    #[test]
    fn bundled_lexicons_load() {
        let lex = Lexicon::bundled();
        assert!(lex.contains("furious"));
        let per = bundled_emotion_lexicons();
        assert_eq!(per.len(), 6);
        assert!(per.iter().all(|(_, l)| !l.is_empty()));
        for (_, l) in &per {
            assert!(l.iter().all(|w| lex.contains(w)));
        }
    }

    #[test]
    fn synthesized_items_are_valid_and_deterministic() {
        let lex = Lexicon::bundled();
        for game in Game::ALL {
            let a = synth_desk_items(game, 10, 7);
            let b = synth_desk_items(game, 10, 7);
            assert_eq!(a, b);
            for d in &a {
                let report = check_template(&d.payoffs);
                assert!(
                    report.is_valid(),
                    "{:?}: {:?}",
                    d.item.item_id,
                    report.violations
                );
                d.item.validate().unwrap();
                assert!(response_range(&d.item).is_ok());
                assert!(lexicon_neutrality_check(&d.item, &lex).is_empty());
                assert!(GameTemplate::of(game).roles.contains(&d.item.role.as_str()));
                if let PayoffSpec::BeautyContest { p, .. } = d.payoffs {
                    assert!(p > 0.0 && p < 1.0);
                }
            }
        }
    }
}
