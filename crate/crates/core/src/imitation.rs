//! Imitation learning from expert reward features: an online-gradient reward
//! player drives the optimistic learner towards the expert's feature
//! expectation.
//!
//! Reward features are the first `d_r` coordinates of the instance features.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{run_training, sample_categorical, AdversaryContext, RewardAdversary, TrainingOptions};
use crate::error::{invalid_input, Error, Result};
use crate::learner::LearnerConfig;
use crate::mdp::{occupancy_measure, return_of_policy, Comparator, LinearMdp, TabularMdp, TabularPolicy};
use crate::rng::{stream, Purpose};

/// Expert reward-feature samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub samples: Vec<DVector<f64>>,
    pub bound: f64,
}

impl ExpertDataset {
    pub fn new(samples: Vec<DVector<f64>>, bound: f64) -> Result<Self> {
        if let Some(v) = samples.iter().find(|v| v.norm() > bound + 1e-12) {
            return invalid_input(format!("sample norm {} exceeds bound {bound}", v.norm()));
        }
        Ok(Self { samples, bound })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One feature vector per row, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for v in &self.samples {
            w.write_record(v.iter().map(|e| format!("{e:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, bound: f64) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            samples.push(DVector::from_vec(v));
        }
        Self::new(samples, bound)
    }
}

/// First `d_r` coordinates of `φ(x, a)`.
pub fn reward_feature(mdp: &LinearMdp, d_r: usize, x: usize, a: usize) -> DVector<f64> {
    mdp.features().get(x, a).rows(0, d_r).into_owned()
}

/// Exact `λ(π) = Φ_rᵀμ(π)`.
pub fn feature_expectation(mdp: &LinearMdp, tab: &TabularMdp, d_r: usize, pi: &TabularPolicy) -> Result<DVector<f64>> {
    let occ = occupancy_measure(tab, pi)?;
    let mut out = DVector::zeros(d_r);
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            out += reward_feature(mdp, d_r, x, a) * occ.mu(x, a);
        }
    }
    Ok(out)
}

/// `τ_E` i.i.d. draws from the exact occupancy of the expert.
pub fn generate_expert_dataset(
    mdp: &LinearMdp,
    expert: &TabularPolicy,
    d_r: usize,
    tau_e: usize,
    rng: &mut impl Rng,
) -> Result<ExpertDataset> {
    let tab = mdp.to_tabular();
    let occ = occupancy_measure(&tab, expert)?;
    let n_a = mdp.n_actions();
    let probs: Vec<f64> = occ.state_action.iter().map(|m| m.max(0.0)).collect();
    let samples = (0..tau_e)
        .map(|_| {
            let i = sample_categorical(&probs, rng);
            reward_feature(mdp, d_r, i / n_a, i % n_a)
        })
        .collect();
    ExpertDataset::new(samples, mdp.features().bound())
}

/// Elementwise mean of the samples.
pub fn estimate_expert_features(data: &ExpertDataset) -> Result<DVector<f64>> {
    if data.is_empty() {
        return invalid_input("empty expert dataset");
    }
    let mut acc = DVector::zeros(data.samples[0].len());
    for v in &data.samples {
        acc += v;
    }
    Ok(acc / data.len() as f64)
}

/// Euclidean projection onto the ball of the given radius.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= radius {
        v.clone()
    } else {
        v * (radius / n)
    }
}

/// Reward player state.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeightState {
    pub w: DVector<f64>,
    pub w_max: f64,
    pub eta_r: f64,
    pub lambda_hat: DVector<f64>,
}

impl RewardWeightState {
    /// `w_0 = 0` and `η_r = W_max/(B√K)`.
    pub fn new(lambda_hat: DVector<f64>, w_max: f64, b: f64, k: usize) -> Self {
        Self {
            w: DVector::zeros(lambda_hat.len()),
            w_max,
            eta_r: w_max / (b * (k as f64).sqrt()),
            lambda_hat,
        }
    }
}

/// `w ← Π(w + η_r(λ̂ − φ_r))`.
pub fn ogd_reward_step(state: &mut RewardWeightState, sample_feature: &DVector<f64>) {
    let step = &state.w + (&state.lambda_hat - sample_feature) * state.eta_r;
    state.w = project_ball(&step, state.w_max);
}

/// Pair whose law is exactly `μ(π)`: roll from `ν₀` and stop after each step
/// with probability `1 − γ`.
pub fn sample_from_occupancy(mdp: &TabularMdp, pi: &TabularPolicy, rng: &mut impl Rng) -> (usize, usize) {
    let mut x = sample_categorical(&mdp.nu0, rng);
    loop {
        let a = sample_categorical(pi.row(x), rng);
        if rng.gen::<f64>() >= mdp.gamma {
            return (x, a);
        }
        x = sample_categorical(mdp.p_row(x, a), rng);
    }
}

/// Reward player as an adversary. Rewards handed to the learner are the
/// reward weights clipped coordinatewise into `[0, r_max]` and padded with
/// zeros for the transition features.
pub struct OgdAdversary {
    pub state: RewardWeightState,
    pub d_r: usize,
    pub clip_events: u64,
    /// Unclipped `w_k` of every episode.
    pub history: Vec<DVector<f64>>,
    seed: u64,
}

impl OgdAdversary {
    pub fn new(state: RewardWeightState, d_r: usize, seed: u64) -> Self {
        Self { state, d_r, clip_events: 0, history: Vec::new(), seed }
    }
}

impl RewardAdversary for OgdAdversary {
    fn next_reward(&mut self, ctx: &AdversaryContext<'_>, _: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let pi_k = ctx.policies.last().ok_or_else(|| Error::InvalidInput("no policy yet".into()))?;
        let mut rng = stream(self.seed, Purpose::Occupancy, ctx.episode as u64);
        let (x, a) = sample_from_occupancy(ctx.tabular, pi_k, &mut rng);
        ogd_reward_step(&mut self.state, &reward_feature(ctx.mdp, self.d_r, x, a));
        self.history.push(self.state.w.clone());
        let r_max = ctx.mdp.r_max();
        let mut out = DVector::zeros(ctx.mdp.dim());
        for i in 0..self.d_r {
            let v = self.state.w[i];
            let c = v.clamp(0.0, r_max);
            if c != v {
                self.clip_events += 1;
            }
            out[i] = c;
        }
        Ok(out)
    }
}

/// Source of the expert feature expectation.
#[derive(Debug, Clone)]
pub enum ExpertFeatures {
    Dataset(ExpertDataset),
    /// Exact `λ(π_E)`; the `τ_E = ∞` limit.
    Exact(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct ImitationResult {
    /// Exact `𝔼_I ⟨ν₀, V^{π_E} − V^{π_I}⟩` under the true reward.
    pub subopt: f64,
    /// Gap of the drawn output policy.
    pub output_subopt: f64,
    pub output_index: usize,
    pub clip_events: u64,
    pub policies: Vec<TabularPolicy>,
    /// Unclipped reward-player weights `w_1..w_K`.
    pub weights: Vec<DVector<f64>>,
    pub lambda_hat: DVector<f64>,
    /// Epoch count of the learner and its bound, as in `TrainingResult::epoch_check`.
    pub epochs: (usize, f64),
}

/// Runs the imitation loop. The learner sees the environment with its reward
/// weights zeroed; the true reward only enters the final evaluation.
pub fn fra_il_run(
    mdp: &LinearMdp,
    expert_policy: &TabularPolicy,
    expert: &ExpertFeatures,
    d_r: usize,
    k: usize,
    config: &LearnerConfig,
    seed: u64,
) -> Result<ImitationResult> {
    if d_r == 0 || d_r > mdp.dim() {
        return invalid_input("reward-feature dimension out of range");
    }
    let lambda_hat = match expert {
        ExpertFeatures::Dataset(d) => estimate_expert_features(d)?,
        ExpertFeatures::Exact(l) => l.clone(),
    };
    if lambda_hat.len() != d_r {
        return invalid_input("expert features have the wrong dimension");
    }
    let blind = mdp.with_reward_weights(DVector::zeros(mdp.dim()))?.with_w_max(mdp.w_max())?;
    let state = RewardWeightState::new(lambda_hat.clone(), mdp.w_max(), mdp.features().bound(), k);
    let mut adversary = OgdAdversary::new(state, d_r, seed);
    let options = TrainingOptions {
        run_id: format!("imitation-{seed}"),
        seed,
        comparator: Comparator::Fixed(expert_policy.clone()),
        probe: false,
        keep_policies: true,
    };
    let res = run_training(&blind, config, &mut adversary, k, &options, None)?;

    let epochs = res.epoch_check();
    let truth = mdp.to_tabular();
    let v_e = return_of_policy(&truth, expert_policy)?;
    let gaps: Vec<f64> = res
        .policies
        .iter()
        .map(|pi| return_of_policy(&truth, pi).map(|v| v_e - v))
        .collect::<Result<_>>()?;
    Ok(ImitationResult {
        subopt: gaps.iter().sum::<f64>() / gaps.len() as f64,
        output_subopt: gaps[res.output_index],
        output_index: res.output_index,
        clip_events: adversary.clip_events,
        policies: res.policies,
        weights: adversary.history,
        lambda_hat,
        epochs,
    })
}

/// Aggregate over seeds, as written to the JSON summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImitationSummary {
    /// `None` encodes the exact-expert mode.
    #[serde(rename = "tau_E")]
    pub tau_e: Option<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub subopt: f64,
    pub clip_events: u64,
    pub seeds: Vec<u64>,
}
