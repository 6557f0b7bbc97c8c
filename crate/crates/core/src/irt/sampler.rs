//! Random-walk Metropolis-within-Gibbs over abilities and item parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-item likelihood and prior in the unconstrained sampling space.
pub(crate) trait ItemModel: Sync {
    fn width(&self) -> usize;
    fn log_prior(&self, p: &[f64]) -> f64;
    fn log_lik(&self, p: &[f64], theta: f64, y: u8) -> f64;
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Unconstrained parameters to reported ones (a first).
    fn natural(&self, p: &[f64]) -> Vec<f64>;
    /// Expected category probabilities at `theta`.
    fn category_probs(&self, natural: &[f64], theta: f64) -> Vec<f64>;
}

const LOG_A_SD: f64 = 0.5;

fn normal_lp(x: f64, sd: f64) -> f64 {
    -0.5 * (x / sd).powi(2)
}

pub(crate) struct TwoPl;

impl ItemModel for TwoPl {
    fn width(&self) -> usize {
        2
    }

    fn log_prior(&self, p: &[f64]) -> f64 {
        normal_lp(p[0], LOG_A_SD) + normal_lp(p[1], 1.0)
    }

    fn log_lik(&self, p: &[f64], theta: f64, y: u8) -> f64 {
        let x = p[0].exp() * (theta - p[1]);
        if y == 1 {
            log_sigmoid(x)
        } else {
            log_sigmoid(-x)
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z: f64 = rng.sample(StandardNormal);
        let w: f64 = rng.sample(StandardNormal);
        vec![0.25 * z, w]
    }

    fn natural(&self, p: &[f64]) -> Vec<f64> {
        vec![p[0].exp(), p[1]]
    }

    fn category_probs(&self, n: &[f64], theta: f64) -> Vec<f64> {
        let p1 = sigmoid(n[0] * (theta - n[1]));
        vec![1.0 - p1, p1]
    }
}

/// Cumulative-logit graded model with `levels` categories. Unconstrained
/// layout: log a, b_1, then r_k with b_k = b_{k-1} + softplus(r_k).
pub(crate) struct Graded {
    pub levels: usize,
}

pub(crate) const THRESHOLD_PRIOR_SD: f64 = 2.0;

impl Graded {
    fn thresholds(&self, p: &[f64]) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.levels - 1);
        b.push(p[1]);
        for r in &p[2..] {
            let last = *b.last().unwrap();
            b.push(last + softplus(*r));
        }
        b
    }
}

impl ItemModel for Graded {
    fn width(&self) -> usize {
        self.levels
    }

    fn log_prior(&self, p: &[f64]) -> f64 {
        let b = self.thresholds(p);
        let jacobian: f64 = p[2..].iter().map(|&r| log_sigmoid(r)).sum();
        normal_lp(p[0], LOG_A_SD)
            + b.iter()
                .map(|&x| normal_lp(x, THRESHOLD_PRIOR_SD))
                .sum::<f64>()
            + jacobian
    }

    fn log_lik(&self, p: &[f64], theta: f64, y: u8) -> f64 {
        let a = p[0].exp();
        let k = y as usize;
        let (mut lower, mut upper) = (None, None);
        let mut t = p[1];
        for idx in 0..self.levels - 1 {
            if idx > 0 {
                t += softplus(p[1 + idx]);
            }
            if idx + 1 == k {
                lower = Some(t);
            }
            if idx == k {
                upper = Some(t);
                break;
            }
        }
        match (lower, upper) {
            (None, Some(u)) => log_sigmoid(-a * (theta - u)),
            (Some(l), None) => log_sigmoid(a * (theta - l)),
            (Some(l), Some(u)) => {
                let (hi, lo) = (a * (theta - l), a * (theta - u));
                log_sigmoid(hi) + log_sigmoid(-lo) + (-(lo - hi).exp_m1()).max(1e-300).ln()
            }
            (None, None) => f64::NEG_INFINITY,
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.levels);
        let z: f64 = rng.sample(StandardNormal);
        p.push(0.25 * z);
        let start = -1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
        p.push(start);
        for _ in 2..self.levels {
            p.push(0.5 + 0.2 * rng.sample::<f64, _>(StandardNormal));
        }
        p
    }

    fn natural(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![p[0].exp()];
        out.extend(self.thresholds(p));
        out
    }

    fn category_probs(&self, n: &[f64], theta: f64) -> Vec<f64> {
        let a = n[0];
        let mut ge: Vec<f64> = vec![1.0];
        ge.extend(n[1..].iter().map(|&b| sigmoid(a * (theta - b))));
        ge.push(0.0);
        ge.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct RunSpec {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

/// Observations indexed both ways; `None` cells are masked out.
pub(crate) struct Observations {
    pub n_resp: usize,
    pub by_item: Vec<Vec<(usize, u8)>>,
    pub by_resp: Vec<Vec<(usize, u8)>>,
}

impl Observations {
    pub fn new(responses: &[Vec<Option<u8>>], items: &[usize]) -> Self {
        let n_resp = responses.len();
        let mut by_item = vec![Vec::new(); items.len()];
        let mut by_resp = vec![Vec::new(); n_resp];
        for (i, row) in responses.iter().enumerate() {
            for (jj, &j) in items.iter().enumerate() {
                if let Some(y) = row[j] {
                    by_item[jj].push((i, y));
                    by_resp[i].push((jj, y));
                }
            }
        }
        Observations {
            n_resp,
            by_item,
            by_resp,
        }
    }
}

/// Post-burn-in draws of one chain in natural parameters.
pub(crate) struct ChainDraws {
    /// [draw][item * width + k]
    pub items: Vec<Vec<f64>>,
    /// [draw][respondent]
    pub theta: Vec<Vec<f64>>,
}

struct Adapt {
    log_step: f64,
    accepted: u32,
    tried: u32,
}

impl Adapt {
    fn new(step: f64) -> Self {
        Adapt {
            log_step: step.ln(),
            accepted: 0,
            tried: 0,
        }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, ok: bool) {
        self.tried += 1;
        self.accepted += u32::from(ok);
    }

    fn tune(&mut self, batch: usize) {
        let rate = self.accepted as f64 / self.tried.max(1) as f64;
        let delta = (1.0 / (batch as f64).sqrt()).min(0.1);
        self.log_step += if rate > 0.44 { delta } else { -delta };
        self.accepted = 0;
        self.tried = 0;
    }
}

const ADAPT_BATCH: usize = 50;

fn run_chain<M: ItemModel>(model: &M, obs: &Observations, spec: RunSpec, chain: u64) -> ChainDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(chain);
    let n_items = obs.by_item.len();
    let width = model.width();
    let mut theta: Vec<f64> = (0..obs.n_resp)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut params: Vec<Vec<f64>> = (0..n_items).map(|_| model.init(&mut rng)).collect();
    let mut theta_adapt: Vec<Adapt> = (0..obs.n_resp).map(|_| Adapt::new(0.8)).collect();
    let mut item_adapt: Vec<Vec<Adapt>> = (0..n_items)
        .map(|_| (0..width).map(|_| Adapt::new(0.2)).collect())
        .collect();

    let item_ll = |p: &[f64], j: usize, theta: &[f64]| -> f64 {
        obs.by_item[j]
            .iter()
            .map(|&(i, y)| model.log_lik(p, theta[i], y))
            .sum()
    };

    let mut draws = ChainDraws {
        items: Vec::with_capacity(spec.iterations - spec.burn_in),
        theta: Vec::with_capacity(spec.iterations - spec.burn_in),
    };
    for it in 0..spec.iterations {
        for i in 0..obs.n_resp {
            let cur = theta[i];
            let prop = cur + theta_adapt[i].step() * rng.sample::<f64, _>(StandardNormal);
            let ll = |t: f64| -> f64 {
                obs.by_resp[i]
                    .iter()
                    .map(|&(j, y)| model.log_lik(&params[j], t, y))
                    .sum::<f64>()
                    - 0.5 * t * t
            };
            let log_ratio = ll(prop) - ll(cur);
            let ok = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
            if ok {
                theta[i] = prop;
            }
            theta_adapt[i].record(ok);
        }
        for j in 0..n_items {
            let mut cur_lp = item_ll(&params[j], j, &theta) + model.log_prior(&params[j]);
            for k in 0..width {
                let mut prop = params[j].clone();
                prop[k] += item_adapt[j][k].step() * rng.sample::<f64, _>(StandardNormal);
                let prop_lp = item_ll(&prop, j, &theta) + model.log_prior(&prop);
                let log_ratio = prop_lp - cur_lp;
                let ok = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
                if ok {
                    params[j] = prop;
                    cur_lp = prop_lp;
                }
                item_adapt[j][k].record(ok);
            }
        }
        if it < spec.burn_in {
            if (it + 1) % ADAPT_BATCH == 0 {
                let batch = (it + 1) / ADAPT_BATCH;
                theta_adapt.iter_mut().for_each(|a| a.tune(batch));
                item_adapt.iter_mut().flatten().for_each(|a| a.tune(batch));
            }
        } else {
            let mut flat = Vec::with_capacity(n_items * width);
            for p in &params {
                flat.extend(model.natural(p));
            }
            draws.items.push(flat);
            draws.theta.push(theta.clone());
        }
    }
    draws
}

pub(crate) fn run_chains<M: ItemModel>(
    model: &M,
    obs: &Observations,
    spec: RunSpec,
    chains: usize,
) -> Vec<ChainDraws> {
    (0..chains as u64)
        .into_par_iter()
        .map(|c| run_chain(model, obs, spec, c))
        .collect()
}

/// Split-chain potential scale reduction for one scalar.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        if h < 2 {
            return f64::NAN;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let n = halves[0]
        .len()
        .min(halves.iter().map(|h| h.len()).min().unwrap());
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h[..n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let m = halves.len() as f64;
    let b = n as f64 / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn graded_probs_sum_to_one_and_match_likelihood() {
        let g = Graded { levels: 4 };
        let p = [0.3, -0.7, 0.2, -0.4];
        let nat = g.natural(&p);
        assert!(nat[1] < nat[2] && nat[2] < nat[3]);
        for theta in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            let probs = g.category_probs(&nat, theta);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (k, pk) in probs.iter().enumerate() {
                assert!(
                    (g.log_lik(&p, theta, k as u8) - pk.ln()).abs() < 1e-9,
                    "theta {theta} k {k}"
                );
            }
        }
        // theta at b_k gives P(Y >= k) = 1/2
        let probs = g.category_probs(&nat, nat[2]);
        assert!((probs[2..].iter().sum::<f64>() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_pl_at_zero() {
        assert_eq!(TwoPl.category_probs(&[1.0, 0.0], 0.0)[1], 0.5);
    }

    #[test]
    fn rhat_of_identical_chains() {
        let c: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = split_rhat(&[c.clone(), c]);
        assert!(r.is_finite() && r < 1.2);
        let shifted = split_rhat(&[vec![0.0, 0.1, 0.0, 0.1], vec![5.0, 5.1, 5.0, 5.1]]);
        assert!(shifted > 1.1);
    }
}
