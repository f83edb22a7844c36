//! Runtime property suites: exact oracle identities, augmented-MDP lemmas,
//! scalar bounds and numerical-drift checks on randomized inputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::instances::{hard_instance_k, hard_instance_tau, random_mixture_with_gamma};
use crate::mdp::{
    bellman_residual, flow_residual, occupancy_measure, optimal_policy, policy_evaluation, return_of_policy,
    TabularMdp, TabularPolicy,
};
use crate::numerics::{sigmoid, weighted_logsumexp, CovarianceState};
use crate::oamdp::{augment, AscensionFunction};

/// Outcome of one property suite.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    /// Largest violation margin seen (positive means violated).
    pub worst: f64,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), checks: 0, failures: 0, worst: f64::NEG_INFINITY }
    }

    /// Records `value ≤ 0` as a pass.
    fn check(&mut self, value: f64) {
        self.checks += 1;
        if !(value <= 0.0) {
            self.failures += 1;
        }
        if value.is_nan() {
            self.worst = f64::INFINITY;
        } else {
            self.worst = self.worst.max(value);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

/// Random row-stochastic policy.
pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut impl Rng) -> TabularPolicy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let raw: Vec<f64> = (0..n_actions).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / s));
    }
    // renormalize each row once more so sums are within a few ulps
    for row in probs.chunks_mut(n_actions) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("normalized rows")
}

fn random_instance(rng: &mut impl Rng) -> Result<TabularMdp> {
    let n_s = rng.gen_range(1..=10);
    let n_a = rng.gen_range(1..=5);
    let d = rng.gen_range(1..=6);
    let gamma = [0.5, 0.8, 0.9, 0.95, 0.99][rng.gen_range(0..5)];
    Ok(random_mixture_with_gamma(d, n_s, n_a, gamma, rng.gen())?.to_tabular())
}

/// Flow residual, Bellman residual and the return identity on random
/// mixture instances (`|X| ≤ 10`, `|A| ≤ 5`).
pub fn oracle_suite(n_instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = SuiteReport::new("flow residual <= 1e-10");
    let mut bell = SuiteReport::new("bellman residual <= 1e-10");
    let mut ret = SuiteReport::new("return identity within 1e-9");
    for _ in 0..n_instances {
        let tab = random_instance(&mut rng)?;
        let (star, _) = optimal_policy(&tab, 1e-10)?;
        for pi in [random_policy(tab.n_states, tab.n_actions, &mut rng), star] {
            let occ = occupancy_measure(&tab, &pi)?;
            flow.check(flow_residual(&tab, &occ) - 1e-10);
            let (v, _) = policy_evaluation(&tab, &pi)?;
            bell.check(bellman_residual(&tab, &pi, &v) - 1e-10);
            let lhs = return_of_policy(&tab, &pi)?;
            let rhs = occ.dot(&tab.r) / (1.0 - tab.gamma);
            ret.check((lhs - rhs).abs() - 1e-9);
        }
    }
    Ok(vec![flow, bell, ret])
}

/// Augmented-MDP lemmas on random (instance, policy, ascension) triples.
pub fn lemma_suite(n_triples: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mass = SuiteReport::new("mass reduction");
    let mut optimism = SuiteReport::new("value optimism");
    let mut bias_lo = SuiteReport::new("model bias >= 0");
    let mut bias_hi = SuiteReport::new("model bias upper bound");
    let mut reward_bias = SuiteReport::new("reward bias bound");
    let mut ev = SuiteReport::new("<mu,EV> = <mu,Q>");
    for _ in 0..n_triples {
        let tab = random_instance(&mut rng)?;
        let (n_s, n_a) = (tab.n_states, tab.n_actions);
        let pi = random_policy(n_s, n_a, &mut rng);
        let scale = [1.0, 0.3, 0.01][rng.gen_range(0..3)];
        let probs: Vec<f64> = (0..n_s * n_a).map(|_| scale * rng.gen::<f64>()).collect();
        let pp = AscensionFunction::from_table(n_s, n_a, probs)?;
        let aug = augment(&tab, &pp)?;
        let pi_aug = aug.lift_policy(&pi);

        let occ = occupancy_measure(&tab, &pi)?;
        let occ_aug = occupancy_measure(&aug.mdp, &pi_aug)?;
        for i in 0..n_s * n_a {
            mass.check(occ_aug.state_action[i] - occ.state_action[i] - 1e-12);
        }

        let (v, q) = policy_evaluation(&tab, &pi)?;
        let (v_aug, q_aug) = policy_evaluation(&aug.mdp, &pi_aug)?;
        let worst_v = (0..n_s).map(|x| v[x] - v_aug[x]).fold(f64::NEG_INFINITY, f64::max);
        let worst_q = (0..n_s * n_a).map(|i| q[i] - q_aug[i]).fold(f64::NEG_INFINITY, f64::max);
        optimism.check(worst_v.max(worst_q) - TOL);

        let r_plus_real = &aug.mdp.r[..n_s * n_a];
        let bias = occ_aug.dot(&aug.mdp.r) - occ.dot(r_plus_real);
        let mu_p = occ.dot(pp.probs());
        bias_lo.check(-bias - TOL);
        bias_hi.check(bias - tab.r_max / (1.0 - tab.gamma) * mu_p - TOL);

        let comparator = if rng.gen::<bool>() {
            optimal_policy(&tab, 1e-10)?.0
        } else {
            random_policy(n_s, n_a, &mut rng)
        };
        let occ_star = occupancy_measure(&tab, &comparator)?;
        let diff: Vec<f64> = (0..n_s * n_a).map(|i| tab.r[i] - r_plus_real[i]).collect();
        let rb = occ_star.dot(&diff) - occ.dot(&diff);
        reward_bias.check(rb - tab.r_max * mu_p - TOL);

        let qf: Vec<f64> = (0..n_s * n_a).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let vf: Vec<f64> = (0..n_s)
            .map(|x| (0..n_a).map(|a| pi.prob(x, a) * qf[x * n_a + a]).sum())
            .collect();
        let ev_lhs: f64 = (0..n_s * n_a).map(|i| occ.state_action[i] * vf[i / n_a]).sum();
        ev.check((ev_lhs - occ.dot(&qf)).abs() - 1e-10);
    }
    Ok(vec![mass, optimism, bias_lo, bias_hi, reward_bias, ev])
}

/// `σ(z−ω) ≤ 2(z²+e^{−ω})` for `z, ω ≥ 0`, and `z·σ(ω−αz) ≤ ω/α` for
/// `ω ≥ 2`, on regular grids of `side²` points each.
pub fn sigmoid_suite(side: usize) -> Vec<SuiteReport> {
    let mut first = SuiteReport::new("sigmoid(z-w) <= 2(z^2+exp(-w))");
    let mut second = SuiteReport::new("z*sigmoid(w-az) <= w/a");
    for i in 0..side {
        for j in 0..side {
            let z = 5.0 * i as f64 / (side - 1) as f64;
            let w = 20.0 * j as f64 / (side - 1) as f64;
            first.check(sigmoid(z - w) - 2.0 * (z * z + (-w).exp()));
        }
    }
    let alphas = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 40.0];
    let per = (side * side).div_ceil(alphas.len());
    let n_w = (per as f64).sqrt().ceil() as usize;
    for &alpha in &alphas {
        for j in 0..n_w {
            let w = 2.0 + 18.0 * j as f64 / (n_w - 1).max(1) as f64;
            for i in 0..n_w {
                // z spans well past the peak at roughly ω/α
                let z = 3.0 * (w / alpha) * i as f64 / (n_w - 1).max(1) as f64;
                second.check(z * sigmoid(w - alpha * z) - w / alpha);
            }
        }
    }
    vec![first, second]
}

/// Sherman–Morrison drift with periodic refresh, log-det monotonicity and
/// log-sum-exp Lipschitzness.
pub fn numerics_suite(n_updates: usize, n_pairs: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drift = SuiteReport::new("rank-one inverse drift <= 1e-8");
    let mut mono = SuiteReport::new("logdet monotone");
    let d = 8;
    let mut cov = CovarianceState::with_refresh(d, 1000);
    let mut prev = cov.log_det();
    for t in 0..n_updates {
        let mut v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.0 {
            v *= rng.gen::<f64>() / n;
        }
        cov.rank_one_update(&v)?;
        mono.check(prev - cov.log_det());
        prev = cov.log_det();
        if (t + 1) % 500 == 0 || t + 1 == n_updates {
            let direct = cov
                .lambda()
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .unwrap_or_else(|| DMatrix::from_element(d, d, f64::NAN));
            drift.check((direct - cov.lambda_inv()).amax() - 1e-8);
        }
    }
    let mut lip = SuiteReport::new("logsumexp 1-Lipschitz");
    for _ in 0..n_pairs {
        let n = rng.gen_range(1..=6);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let sup = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let gap = (weighted_logsumexp(&w, &x, 1.0)? - weighted_logsumexp(&w, &y, 1.0)?).abs();
        lip.check(gap - sup - 1e-12);
    }
    Ok(vec![drift, mono, lip])
}

/// Hard-instance occupancies against their closed forms over a `(γ, ε)` grid.
pub fn closed_form_suite() -> Result<Vec<SuiteReport>> {
    let mut k_bad = SuiteReport::new("nu(pi_bad, x0) = 2/3");
    let mut k_exp = SuiteReport::new("nu(pi_E, x0) closed form");
    let mut tau1 = SuiteReport::new("nu(pi_E^1, x0) = 1/2");
    let mut tau0 = SuiteReport::new("nu(pi_E^0, x0) closed form");
    for &g in &[0.5, 0.6, 0.75, 0.9, 0.95, 0.99] {
        let delta = (1.0 - g) / g;
        for frac in [0.0, 0.05, 0.25, 0.5, 0.75, 1.0] {
            let eps = frac * delta;
            for n_a in [2, 4] {
                let (lin, expert) = hard_instance_k(n_a, g, eps, n_a - 1)?;
                let tab = lin.to_tabular();
                let bad = TabularPolicy::deterministic(n_a, &[0, 0]);
                k_bad.check((occupancy_measure(&tab, &bad)?.state[0] - 2.0 / 3.0).abs() - 1e-10);
                let closed = (1.0 - g + g * delta) / (1.0 - g + 2.0 * g * delta - g * eps);
                k_exp.check((occupancy_measure(&tab, &expert)?.state[0] - closed).abs() - 1e-10);

                let (l1, e1) = hard_instance_tau(g, eps, 1.0, 1, n_a)?;
                tau1.check((occupancy_measure(&l1.to_tabular(), &e1)?.state[0] - 0.5).abs() - 1e-10);
                let (l0, e0) = hard_instance_tau(g, eps, 1.0, 0, n_a)?;
                let closed0 = (1.0 - g + 2.0 * g * delta) / (2.0 * (1.0 - g - g * eps + 2.0 * g * delta));
                tau0.check((occupancy_measure(&l0.to_tabular(), &e0)?.state[0] - closed0).abs() - 1e-10);
            }
        }
    }
    Ok(vec![k_bad, k_exp, tau1, tau0])
}

/// Every suite with its default sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = oracle_suite(25, seed)?;
    out.extend(lemma_suite(60, seed.wrapping_add(1))?);
    out.extend(sigmoid_suite(100));
    out.extend(numerics_suite(10_000, 10_000, seed.wrapping_add(2))?);
    out.extend(closed_form_suite()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in oracle_suite(3, 1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
        for r in lemma_suite(5, 2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
        for r in sigmoid_suite(20) {
            assert!(r.passed(), "{r:?}");
        }
        for r in numerics_suite(600, 100, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn failing_check_is_counted() {
        let mut r = SuiteReport::new("x");
        r.check(-1.0);
        r.check(0.5);
        r.check(f64::NAN);
        assert_eq!(r.failures, 2);
        assert!(!r.passed());
    }
}
