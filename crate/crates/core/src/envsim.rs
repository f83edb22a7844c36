//! Interaction protocol: geometric-length episodes with resets, per-episode
//! reward selection by an adversary, and the end-to-end training loop.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::learner::{EpisodeReport, LearnerConfig, LearnerState, ProblemSize, Transition};
use crate::mdp::{optimal_policy, return_of_policy, Comparator, LinearMdp, TabularMdp, TabularPolicy};
use crate::rng::{stream, Purpose};

/// One environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    pub episode: usize,
    pub step: usize,
    /// The episode reset after this step; its `next_state` is not part of
    /// the learner's data.
    pub terminal: bool,
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Rolls out one episode from `ν₀`: after every step the process resets with
/// probability `1 − γ`, or when `cap` steps have been taken.
pub fn run_episode(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    episode: usize,
    rng: &mut impl Rng,
    cap: Option<usize>,
) -> Vec<TrajectoryStep> {
    let mut steps = Vec::new();
    let mut x = sample_categorical(&mdp.nu0, rng);
    for t in 0.. {
        let a = sample_categorical(policy.row(x), rng);
        let next = sample_categorical(mdp.p_row(x, a), rng);
        let reset = rng.gen::<f64>() >= mdp.gamma;
        let terminal = reset || cap.is_some_and(|c| t + 1 >= c);
        steps.push(TrajectoryStep {
            state: x,
            action: a,
            next_state: next,
            reward: mdp.reward(x, a),
            episode,
            step: t,
            terminal,
        });
        if terminal {
            break;
        }
        x = next;
    }
    steps
}

/// What an adversary may look at when choosing `w_k`.
pub struct AdversaryContext<'a> {
    pub mdp: &'a LinearMdp,
    pub tabular: &'a TabularMdp,
    pub episode: usize,
    /// `π_1, …, π_k`.
    pub policies: &'a [TabularPolicy],
    /// `w_1, …, w_{k−1}`.
    pub rewards: &'a [DVector<f64>],
}

/// Chooses the reward weights of each episode.
pub trait RewardAdversary {
    fn next_reward(&mut self, ctx: &AdversaryContext<'_>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>>;
}

/// Same weights every episode.
pub struct ConstantAdversary(pub DVector<f64>);

impl RewardAdversary for ConstantAdversary {
    fn next_reward(&mut self, _: &AdversaryContext<'_>, _: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

/// Cycles through a list of weight vectors.
pub struct AlternatingAdversary(pub Vec<DVector<f64>>);

impl RewardAdversary for AlternatingAdversary {
    fn next_reward(&mut self, ctx: &AdversaryContext<'_>, _: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        if self.0.is_empty() {
            return invalid_input("alternating adversary needs at least one weight vector");
        }
        Ok(self.0[(ctx.episode - 1) % self.0.len()].clone())
    }
}

/// Picks uniformly at random from a list of weight vectors.
pub struct RandomAdversary(pub Vec<DVector<f64>>);

impl RewardAdversary for RandomAdversary {
    fn next_reward(&mut self, _: &AdversaryContext<'_>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        if self.0.is_empty() {
            return invalid_input("random adversary needs at least one weight vector");
        }
        Ok(self.0[rng.gen_range(0..self.0.len())].clone())
    }
}

/// One row of the per-episode CSV log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRow {
    pub run_id: String,
    pub episode: usize,
    pub epoch: usize,
    pub steps_total: usize,
    pub episode_len: usize,
    pub regret_partial: f64,
    pub gap_k: f64,
    pub bonus_mean: f64,
    pub p_plus_mean: f64,
    pub logdet: f64,
}

pub const LOG_HEADER: &str =
    "run_id,episode,epoch,steps_total,episode_len,regret_partial,gap_k,bonus_mean,p_plus_mean,logdet";

#[derive(Debug, Clone)]
pub struct TrainingOptions {
    pub run_id: String,
    pub seed: u64,
    pub comparator: Comparator,
    /// Compute exact-model diagnostics every episode.
    pub probe: bool,
    /// Keep every `π_k` in the result.
    pub keep_policies: bool,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            comparator: Comparator::PerEpisodeOptimal,
            probe: false,
            keep_policies: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub policies: Vec<TabularPolicy>,
    pub rewards: Vec<DVector<f64>>,
    pub reports: Vec<EpisodeReport>,
    pub gaps: Vec<f64>,
    pub regret: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Index `I` (0-based) of the output policy.
    pub output_index: usize,
    pub learner: LearnerState,
    pub wall_time_s: f64,
}

impl TrainingResult {
    pub fn final_regret(&self) -> f64 {
        self.regret.last().copied().unwrap_or(0.0)
    }

    pub fn steps_total(&self) -> usize {
        self.episode_lengths.iter().sum()
    }

    pub fn output_policy(&self) -> Option<&TabularPolicy> {
        self.policies.get(self.output_index)
    }

    /// Epoch count and the epoch-count bound at the realized sample count.
    pub fn epoch_check(&self) -> (usize, f64) {
        let hp = self.learner.hyperparams();
        let n = self.learner.dataset().len().max(1) as f64;
        (self.learner.epoch(), crate::learner::epoch_bound(hp.d, hp.b, n))
    }
}

/// Problem size of an instance for hyperparameter resolution.
pub fn problem_size(mdp: &LinearMdp, k: usize, delta: f64) -> ProblemSize {
    ProblemSize {
        k,
        gamma: mdp.gamma(),
        d: mdp.dim(),
        b: mdp.features().bound(),
        n_actions: mdp.n_actions(),
        delta,
        w_max: mdp.w_max(),
        r_max: mdp.r_max(),
    }
}

fn check_adversary_weights(mdp: &LinearMdp, w: &DVector<f64>) -> Result<()> {
    if w.norm() > mdp.w_max() + 1e-9 {
        return Err(Error::Invariant(format!(
            "adversary weights have norm {} > W_max = {}",
            w.norm(),
            mdp.w_max()
        )));
    }
    mdp.check_reward_weights(w)
        .map_err(|e| Error::Invariant(format!("adversary weights give invalid rewards: {e}")))
}

/// Adversary, rollout and learner update for `K` episodes, in that order
/// each episode. Optionally streams CSV rows to `log`.
pub fn run_training(
    mdp: &LinearMdp,
    config: &LearnerConfig,
    adversary: &mut dyn RewardAdversary,
    k: usize,
    options: &TrainingOptions,
    mut log: Option<&mut csv::Writer<Box<dyn Write>>>,
) -> Result<TrainingResult> {
    if k == 0 {
        return invalid_input("K must be at least 1");
    }
    let start = Instant::now();
    let hp = config.hyperparams(&problem_size(mdp, k, config.delta))?;
    let features = Arc::new(mdp.features().clone());
    let mut learner = LearnerState::new(features.clone(), hp, config.clone(), Some(mdp.m_factor().clone()))?;
    let base = mdp.to_tabular();
    let cap = learner.episode_cap();

    let mut policies: Vec<TabularPolicy> = Vec::with_capacity(k);
    let mut rewards: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    let mut gaps = Vec::with_capacity(k);
    let mut regret = Vec::with_capacity(k);
    let mut lengths = Vec::with_capacity(k);
    let mut star_cache: Option<(DVector<f64>, f64)> = None;
    let mut total = 0.0;
    let mut steps_total = 0;

    for episode in 1..=k {
        let pi_k = learner.policy().to_tabular(&features);
        policies.push(pi_k);
        let w_k = {
            let ctx = AdversaryContext {
                mdp,
                tabular: &base,
                episode,
                policies: &policies,
                rewards: &rewards,
            };
            let mut arng = stream(options.seed, Purpose::Adversary, episode as u64);
            adversary.next_reward(&ctx, &mut arng)?
        };
        check_adversary_weights(mdp, &w_k)?;
        let tab_k = base.with_rewards(mdp.reward_vector(&w_k));
        let pi_k = policies.last().expect("pushed above");

        let mut erng = stream(options.seed, Purpose::Episode, episode as u64);
        let steps = run_episode(&tab_k, pi_k, episode, &mut erng, cap);
        let transitions: Vec<Transition> = steps
            .iter()
            .filter(|s| !s.terminal)
            .map(|s| Transition { x: s.state, a: s.action, next: s.next_state })
            .collect();
        let report = learner.process_episode(&transitions, &w_k, options.probe.then_some(&tab_k))?;

        let star = match (&options.comparator, &star_cache) {
            (Comparator::PerEpisodeOptimal, Some((cw, v))) if *cw == w_k => *v,
            (Comparator::PerEpisodeOptimal, _) => {
                let (pi_star, _) = optimal_policy(&tab_k, 1e-12)?;
                let v = return_of_policy(&tab_k, &pi_star)?;
                star_cache = Some((w_k.clone(), v));
                v
            }
            (Comparator::Fixed(pi_star), _) => return_of_policy(&tab_k, pi_star)?,
        };
        let gap = star - return_of_policy(&tab_k, pi_k)?;
        total += gap;
        steps_total += steps.len();
        if let Some(w) = log.as_deref_mut() {
            w.serialize(LogRow {
                run_id: options.run_id.clone(),
                episode,
                epoch: report.epoch,
                steps_total,
                episode_len: steps.len(),
                regret_partial: total,
                gap_k: gap,
                bonus_mean: report.bonus_mean,
                p_plus_mean: report.p_plus_mean,
                logdet: report.logdet,
            })?;
        }
        gaps.push(gap);
        regret.push(total);
        lengths.push(steps.len());
        reports.push(report);
        rewards.push(w_k);
        if !options.keep_policies && episode > 1 {
            // the adversary only ever sees the newest policy in that mode
            let last = policies.pop().expect("non-empty");
            policies.clear();
            policies.push(last);
        }
    }
    if let Some(w) = log {
        w.flush()?;
    }
    let mut orng = stream(options.seed, Purpose::Output, 0);
    let output_index = orng.gen_range(0..k);
    Ok(TrainingResult {
        policies,
        rewards,
        reports,
        gaps,
        regret,
        episode_lengths: lengths,
        output_index,
        learner,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Exact `𝔼_I[⟨ν₀, V^{π⋆} − V^{π_I}⟩]` for a fixed reward, `I` uniform.
pub fn evaluate_output(mdp: &TabularMdp, policies: &[TabularPolicy]) -> Result<f64> {
    if policies.is_empty() {
        return invalid_input("no policies to evaluate");
    }
    let (star, _) = optimal_policy(mdp, 1e-12)?;
    let v_star = return_of_policy(mdp, &star)?;
    let mut acc = 0.0;
    for pi in policies {
        acc += v_star - return_of_policy(mdp, pi)?;
    }
    Ok(acc / policies.len() as f64)
}

/// Monte-Carlo estimate of the same quantity: mean and standard error over
/// `n_draws` uniform draws of `I`.
pub fn sample_output_gap(
    mdp: &TabularMdp,
    policies: &[TabularPolicy],
    n_draws: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if policies.is_empty() || n_draws == 0 {
        return invalid_input("need policies and at least one draw");
    }
    let (star, _) = optimal_policy(mdp, 1e-12)?;
    let v_star = return_of_policy(mdp, &star)?;
    let gaps: Vec<f64> = policies
        .iter()
        .map(|pi| return_of_policy(mdp, pi).map(|v| v_star - v))
        .collect::<Result<_>>()?;
    let draws: Vec<f64> = (0..n_draws).map(|_| gaps[rng.gen_range(0..gaps.len())]).collect();
    let n = n_draws as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub k: usize,
    pub final_regret: f64,
    pub epochs: usize,
    pub epoch_bound: f64,
    pub steps_total: usize,
    pub output_index: usize,
    pub output_gap: f64,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn from_result(run_id: &str, seed: u64, res: &TrainingResult) -> Self {
        let hp = res.learner.hyperparams();
        Self {
            run_id: run_id.to_string(),
            seed,
            k: res.gaps.len(),
            final_regret: res.final_regret(),
            epochs: res.learner.epoch(),
            epoch_bound: crate::learner::epoch_bound(hp.d, hp.b, hp.l_max * hp.k as f64),
            steps_total: res.steps_total(),
            output_index: res.output_index,
            output_gap: res.gaps[res.output_index],
            wall_time_s: res.wall_time_s,
        }
    }
}
