//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::sync::Arc;

use linmdp::envsim::{problem_size, run_episode};
use linmdp::learner::{AscensionRule, LearnerConfig, Transition};
use linmdp::rng::{stream, Purpose};
use linmdp::{Hyperparams, LearnerState, LinearMdp};
use nalgebra::{DMatrix, DVector};

/// `Q(x,a)` written out from the hyperparameters, independent of the
/// learner's own evaluator.
pub fn explicit_q(
    hp: &Hyperparams,
    rule: AscensionRule,
    anchor_inv: &DMatrix<f64>,
    phi: &DVector<f64>,
    theta: &DVector<f64>,
) -> f64 {
    let cb = hp.beta * phi.dot(&(anchor_inv * phi)).max(0.0).sqrt();
    let heaven = hp.r_max / (1.0 - hp.gamma);
    let lin = phi.dot(theta);
    match rule {
        AscensionRule::Sigmoid => {
            let p = 1.0 / (1.0 + (hp.omega - hp.alpha * cb).exp());
            (1.0 - p) * (lin + cb) + p * heaven
        }
        AscensionRule::Clip => (lin + cb).min(heaven),
        AscensionRule::Zero => lin + cb,
    }
}

pub struct ProductCheck {
    pub max_diff: f64,
    pub epochs: usize,
    pub epoch_bound: f64,
}

/// Plays `episodes` episodes with the learner's reward weights fixed to the
/// instance reward and compares, after every update, the compact policy
/// with the explicit product `π_{k+1} ∝ π_k · exp(η Q_{k+1})`, reset to
/// uniform at each epoch start.
pub fn compact_vs_explicit(mdp: &LinearMdp, cfg: &LearnerConfig, episodes: usize, seed: u64) -> ProductCheck {
    let hp = cfg.hyperparams(&problem_size(mdp, episodes, cfg.delta)).unwrap();
    let fm = Arc::new(mdp.features().clone());
    let mut learner = LearnerState::new(fm.clone(), hp.clone(), cfg.clone(), None).unwrap();
    let tab = mdp.to_tabular();
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let uniform = vec![1.0 / n_a as f64; n_s * n_a];
    let mut explicit = uniform.clone();
    let mut max_diff: f64 = 0.0;
    for k in 1..=episodes {
        let pi = learner.policy().to_tabular(&fm);
        let mut rng = stream(seed, Purpose::Episode, k as u64);
        let steps = run_episode(&tab, &pi, k, &mut rng, None);
        let data: Vec<Transition> = steps
            .iter()
            .filter(|s| !s.terminal)
            .map(|s| Transition { x: s.state, a: s.action, next: s.next_state })
            .collect();
        let report = learner.process_episode(&data, mdp.reward_weights(), None).unwrap();
        if report.epoch_started {
            explicit.clone_from(&uniform);
        }
        let theta = learner.current_theta().unwrap().clone();
        let anchor = learner.policy().anchor_inv().clone();
        for x in 0..n_s {
            let row = &mut explicit[x * n_a..(x + 1) * n_a];
            for (a, p) in row.iter_mut().enumerate() {
                *p *= (hp.eta * explicit_q(&hp, cfg.ascension, &anchor, fm.get(x, a), &theta)).exp();
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            let compact = learner.policy().state_probs(&fm, x);
            for a in 0..n_a {
                max_diff = max_diff.max((compact[a] - row[a]).abs());
            }
        }
    }
    let n = learner.dataset().len().max(1) as f64;
    ProductCheck {
        max_diff,
        epochs: learner.epoch(),
        epoch_bound: linmdp::learner::epoch_bound(hp.d, hp.b, n),
    }
}
