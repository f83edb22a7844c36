//! Optimistically augmented MDP: an absorbing maximal-reward "heaven" state
//! that every real pair may jump to with probability `p⁺(x, a)`.

use rand::Rng;

use crate::error::{invalid_input, Result};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::numerics::sigmoid;

/// `σ(α·bonus − ω)`.
pub fn ascension_prob(bonus: f64, alpha: f64, omega: f64) -> f64 {
    sigmoid(alpha * bonus - omega)
}

/// Ascension probabilities for every real pair; heaven (state index
/// `n_states`) always maps to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AscensionFunction {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl AscensionFunction {
    pub fn from_table(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return invalid_input("ascension table has wrong size");
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid_input("ascension probabilities must lie in [0, 1]");
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn zero(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn constant(n_states: usize, n_actions: usize, p: f64) -> Self {
        Self { n_states, n_actions, probs: vec![p.clamp(0.0, 1.0); n_states * n_actions] }
    }

    /// Sigmoid rule from per-pair bonuses.
    pub fn sigmoid(n_states: usize, n_actions: usize, bonuses: &[f64], alpha: f64, omega: f64) -> Result<Self> {
        if bonuses.iter().any(|b| !(*b >= 0.0)) {
            return invalid_input("bonuses must be non-negative");
        }
        Self::from_table(
            n_states,
            n_actions,
            bonuses.iter().map(|&b| ascension_prob(b, alpha, omega)).collect(),
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        if x >= self.n_states {
            0.0
        } else {
            self.probs[x * self.n_actions + a]
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Explicit augmented MDP; heaven is the last state.
#[derive(Debug, Clone)]
pub struct AugmentedMdp {
    pub mdp: TabularMdp,
    pub heaven_index: usize,
}

impl AugmentedMdp {
    /// Extends a real-state policy with an arbitrary (uniform) heaven row.
    pub fn lift_policy(&self, pi: &TabularPolicy) -> TabularPolicy {
        let n_a = self.mdp.n_actions;
        let mut probs = pi.probs().to_vec();
        probs.extend(std::iter::repeat_n(1.0 / n_a as f64, n_a));
        TabularPolicy::new(self.heaven_index + 1, n_a, probs).expect("rows stay stochastic")
    }

    /// Real-pair vector padded with heaven entries.
    pub fn lift_pairs(&self, v: &[f64], heaven_value: f64) -> Vec<f64> {
        let mut out = v.to_vec();
        out.extend(std::iter::repeat_n(heaven_value, self.mdp.n_actions));
        out
    }
}

/// Builds `P⁺ = (1−p⁺)P + p⁺δ_{x⁺}` and `r⁺ = (1−p⁺)r + p⁺R_max`, with heaven
/// absorbing at reward `R_max`.
pub fn augment(mdp: &TabularMdp, p_plus: &AscensionFunction) -> Result<AugmentedMdp> {
    let (n_s, n_a) = (mdp.n_states, mdp.n_actions);
    if p_plus.n_states != n_s || p_plus.n_actions != n_a {
        return invalid_input("ascension function shape does not match the MDP");
    }
    let n = n_s + 1;
    let mut p = Vec::with_capacity(n * n_a * n);
    let mut r = Vec::with_capacity(n * n_a);
    for x in 0..n_s {
        for a in 0..n_a {
            let q = p_plus.prob(x, a);
            p.extend(mdp.p_row(x, a).iter().map(|v| (1.0 - q) * v));
            p.push(q);
            r.push((1.0 - q) * mdp.reward(x, a) + q * mdp.r_max);
        }
    }
    for _ in 0..n_a {
        p.extend(std::iter::repeat_n(0.0, n_s));
        p.push(1.0);
        r.push(mdp.r_max);
    }
    let mut nu0 = mdp.nu0.clone();
    nu0.push(0.0);
    let aug = TabularMdp::new(n, n_a, p, r, mdp.gamma, nu0, mdp.r_max)?;
    Ok(AugmentedMdp { mdp: aug, heaven_index: n_s })
}

/// Paired trajectories from the coupling: both chains agree until the first
/// ascension, after which the augmented chain sits in heaven.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRollout {
    pub base: Vec<(usize, usize)>,
    pub augmented: Vec<(usize, usize)>,
    /// First index at which the two paths differ; `None` if they never do
    /// within the horizon.
    pub split_time: Option<usize>,
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Simulates `horizon` steps of the base chain and its coupled augmented
/// chain. An ascension at step `τ` makes the paths differ from index `τ+1`.
pub fn coupled_rollout(
    mdp: &TabularMdp,
    p_plus: &AscensionFunction,
    pi: &TabularPolicy,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<CoupledRollout> {
    if horizon == 0 {
        return invalid_input("horizon must be at least 1");
    }
    let heaven = mdp.n_states;
    let mut base = Vec::with_capacity(horizon);
    let mut aug = Vec::with_capacity(horizon);
    let mut split = None;
    let mut x = sample_index(rng, &mdp.nu0);
    for t in 0..horizon {
        let a = sample_index(rng, pi.row(x));
        base.push((x, a));
        aug.push(if split.is_some() { (heaven, 0) } else { (x, a) });
        let ascend = rng.gen::<f64>() < p_plus.prob(x, a);
        if split.is_none() && ascend {
            split = Some(t + 1);
        }
        x = sample_index(rng, mdp.p_row(x, a));
    }
    if split == Some(horizon) {
        // the disagreement would only show after the recorded window
        split = None;
    }
    Ok(CoupledRollout { base, augmented: aug, split_time: split })
}

/// Exact `P(split time > t)` for `t = 0..=horizon`, computed with a forward
/// sub-stochastic recursion.
pub fn survival_probabilities(
    mdp: &TabularMdp,
    p_plus: &AscensionFunction,
    pi: &TabularPolicy,
    horizon: usize,
) -> Vec<f64> {
    let n = mdp.n_states;
    let mut mass = mdp.nu0.clone();
    let mut out = vec![1.0];
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for (x, &m) in mass.iter().enumerate() {
            for a in 0..mdp.n_actions {
                let w = m * pi.prob(x, a) * (1.0 - p_plus.prob(x, a));
                for (y, p) in mdp.p_row(x, a).iter().enumerate() {
                    next[y] += w * p;
                }
            }
        }
        mass = next;
        out.push(mass.iter().sum());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{hard_instance_k, random_mixture_linear_mdp};
    use crate::mdp::{occupancy_measure, policy_evaluation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ascension_examples() {
        assert!((ascension_prob(0.0, 3.0, 9f64.ln()) - 0.1).abs() < 1e-15);
        assert_eq!(ascension_prob(123.0, 0.0, 0.0), 0.5);
        assert_eq!(ascension_prob(2.0, 1.5, 3.0), 0.5);
    }

    #[test]
    fn sigmoid_rule_bounds() {
        let bonuses = [0.0, 0.1, 0.5, 2.0];
        let (alpha, omega) = (4.0, 3.0);
        let f = AscensionFunction::sigmoid(2, 2, &bonuses, alpha, omega).unwrap();
        for (i, b) in bonuses.iter().enumerate() {
            let p = f.probs()[i];
            assert!(p > 0.0 && p < 1.0);
            assert!(p <= 2.0 * alpha * alpha * b * b + 2.0 * (-omega).exp());
        }
        assert_eq!(f.prob(2, 0), 0.0);
    }

    #[test]
    fn zero_ascension_keeps_kernel() {
        let tab = random_mixture_linear_mdp(3, 4, 2, 1).unwrap().to_tabular();
        let aug = augment(&tab, &AscensionFunction::zero(4, 2)).unwrap();
        for x in 0..4 {
            for a in 0..2 {
                let row = aug.mdp.p_row(x, a);
                assert_eq!(&row[..4], tab.p_row(x, a));
                assert_eq!(row[4], 0.0);
            }
        }
        let occ = occupancy_measure(&aug.mdp, &aug.lift_policy(&TabularPolicy::uniform(4, 2))).unwrap();
        assert_eq!(occ.state[4], 0.0);
    }

    #[test]
    fn full_ascension_goes_to_heaven() {
        let tab = random_mixture_linear_mdp(2, 3, 2, 5).unwrap().to_tabular();
        let aug = augment(&tab, &AscensionFunction::constant(3, 2, 1.0)).unwrap();
        for x in 0..3 {
            for a in 0..2 {
                assert_eq!(aug.mdp.p_row(x, a)[3], 1.0);
                assert_eq!(aug.mdp.reward(x, a), tab.r_max);
            }
        }
        for a in 0..2 {
            assert_eq!(aug.mdp.p_row(3, a)[3], 1.0);
            assert_eq!(aug.mdp.reward(3, a), tab.r_max);
        }
    }

    #[test]
    fn augmented_values_dominate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let tab = random_mixture_linear_mdp(3, 4, 3, seed).unwrap().to_tabular();
            let probs: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
            let pp = AscensionFunction::from_table(4, 3, probs).unwrap();
            let aug = augment(&tab, &pp).unwrap();
            let pi = TabularPolicy::uniform(4, 3);
            let (v, q) = policy_evaluation(&tab, &pi).unwrap();
            let (vp, qp) = policy_evaluation(&aug.mdp, &aug.lift_policy(&pi)).unwrap();
            for x in 0..4 {
                assert!(vp[x] >= v[x] - 1e-12);
            }
            for i in 0..12 {
                assert!(qp[i] >= q[i] - 1e-12);
            }
        }
    }

    #[test]
    fn coupled_trivial_cases() {
        let (lin, expert) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let tab = lin.to_tabular();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = coupled_rollout(&tab, &AscensionFunction::zero(2, 2), &expert, 30, &mut rng).unwrap();
        assert_eq!(r.base, r.augmented);
        assert_eq!(r.split_time, None);
        let r = coupled_rollout(&tab, &AscensionFunction::constant(2, 2, 1.0), &expert, 30, &mut rng).unwrap();
        assert_eq!(r.split_time, Some(1));
        assert!(r.augmented[1..].iter().all(|&(x, _)| x == 2));
        assert!(coupled_rollout(&tab, &AscensionFunction::zero(2, 2), &expert, 0, &mut rng).is_err());
    }

    #[test]
    fn split_time_matches_survival_law() {
        let (lin, _) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let tab = lin.to_tabular();
        let pp = AscensionFunction::from_table(2, 2, vec![0.05, 0.2, 0.3, 0.1]).unwrap();
        let pi = TabularPolicy::uniform(2, 2);
        let horizon = 8;
        let exact = survival_probabilities(&tab, &pp, &pi, horizon);
        let n = 100_000;
        let mut counts = vec![0usize; horizon + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..n {
            let r = coupled_rollout(&tab, &pp, &pi, horizon + 1, &mut rng).unwrap();
            let s = r.split_time.unwrap_or(usize::MAX);
            for (t, c) in counts.iter_mut().enumerate() {
                if s > t {
                    *c += 1;
                }
            }
        }
        for t in 1..=horizon {
            let p = exact[t];
            let emp = counts[t] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((emp - p).abs() <= 3.0 * sigma, "t={t}: {emp} vs {p}");
        }
    }
}
