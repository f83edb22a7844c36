//! Optimistic regularized value iteration for linear MDPs with additive
//! exploration bonuses and ascension to an absorbing maximal-reward state.
//!
//! Within an epoch the bonus and ascension probability of a pair are fixed,
//! so the product of exponentiated Q-functions collapses into a softmax over
//! `S(x,a) = (1−p⁺)(φᵀΘ + m·CB) + m·p⁺·R_max/(1−γ)`.

use std::f64::consts::LN_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::mdp::{FeatureMap, TabularMdp, TabularPolicy};
use crate::numerics::{elliptical_norm, sigmoid, softmax, weighted_logsumexp, CovarianceState, DEFAULT_REFRESH_EVERY};

/// Problem quantities the hyperparameters depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub k: usize,
    pub gamma: f64,
    pub d: usize,
    pub b: f64,
    pub n_actions: usize,
    pub delta: f64,
    pub w_max: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub beta: f64,
    pub omega: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub d: usize,
    pub b: f64,
    pub n_actions: usize,
    pub delta: f64,
    pub k: usize,
    pub q_max: f64,
    pub l_max: f64,
}

/// `(R_max + 2ω/α)/(1−γ)`.
pub fn q_max(r_max: f64, omega: f64, alpha: f64, gamma: f64) -> f64 {
    (r_max + 2.0 * omega / alpha) / (1.0 - gamma)
}

/// `H·log(K/δ)`.
pub fn l_max(gamma: f64, k: usize, delta: f64) -> f64 {
    (k as f64 / delta).ln() / (1.0 - gamma)
}

/// Upper bound `5d·log(1 + B²T/d)` on the number of epochs after `T` steps.
pub fn epoch_bound(d: usize, b: f64, t: f64) -> f64 {
    5.0 * d as f64 * (1.0 + b * b * t / d as f64).ln()
}

/// `√(5d·log(1+B²T/d)·log|A| / (8R²H^{5/2}K))` with `T = L_max·K`; equals 1
/// when there is a single action.
pub fn theory_eta(s: &ProblemSize) -> f64 {
    if s.n_actions < 2 {
        return 1.0;
    }
    let h = 1.0 / (1.0 - s.gamma);
    let t = l_max(s.gamma, s.k.max(2), s.delta) * s.k as f64;
    let d = s.d as f64;
    (5.0 * d * (1.0 + s.b * s.b * t / d).ln() * (s.n_actions as f64).ln()
        / (8.0 * s.r_max * s.r_max * h.powf(2.5) * s.k as f64))
        .sqrt()
}

/// `C·H·R·d·log(B·H·W·R·d·K/δ)`.
pub fn theory_beta(s: &ProblemSize, c: f64) -> f64 {
    let h = 1.0 / (1.0 - s.gamma);
    let d = s.d as f64;
    c * h * s.r_max * d * (s.b * h * s.w_max * s.r_max * d * s.k as f64 / s.delta).ln()
}

/// Parameter settings of the high-probability regret guarantee.
pub fn theoretical_hyperparams(s: &ProblemSize, c: f64) -> Result<Hyperparams> {
    if s.k < 2 {
        return invalid_input("K must be at least 2");
    }
    check_size(s)?;
    let beta = theory_beta(s, c);
    if !(beta > 0.0) || !beta.is_finite() {
        return invalid_input(format!("theory beta is {beta}; the log argument must exceed 1"));
    }
    let omega = (s.k as f64).ln();
    let alpha = 2.0 * omega;
    Ok(assemble(s, theory_eta(s), beta, omega, alpha))
}

fn check_size(s: &ProblemSize) -> Result<()> {
    if !(0.0..1.0).contains(&s.gamma) || s.d == 0 || s.n_actions == 0 || !(s.delta > 0.0 && s.delta < 1.0) {
        return invalid_input("invalid problem size");
    }
    if !(s.r_max > 0.0) || !(s.b > 0.0) {
        return invalid_input("r_max and B must be positive");
    }
    Ok(())
}

fn assemble(s: &ProblemSize, eta: f64, beta: f64, omega: f64, alpha: f64) -> Hyperparams {
    Hyperparams {
        eta,
        beta,
        omega,
        alpha,
        gamma: s.gamma,
        r_max: s.r_max,
        d: s.d,
        b: s.b,
        n_actions: s.n_actions,
        delta: s.delta,
        k: s.k,
        q_max: q_max(s.r_max, omega, alpha, s.gamma),
        l_max: l_max(s.gamma, s.k.max(1), s.delta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BetaMode {
    Theory { c: f64 },
    Practical { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscensionRule {
    /// `σ(α·CB − ω)`.
    Sigmoid,
    /// No ascension.
    Zero,
    /// `𝟙{r + CB + γP̂V ≥ R_max/(1−γ)}`, i.e. Q clipped at `R_max/(1−γ)`.
    Clip,
}

fn default_delta() -> f64 {
    0.1
}

fn default_refresh() -> usize {
    DEFAULT_REFRESH_EVERY
}

fn default_eta_scale() -> f64 {
    1.0
}

fn default_beta() -> BetaMode {
    BetaMode::Practical { value: 1.0 }
}

fn default_rule() -> AscensionRule {
    AscensionRule::Sigmoid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "default_beta")]
    pub beta: BetaMode,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_rule")]
    pub ascension: AscensionRule,
    /// Forces every bonus to zero.
    #[serde(default)]
    pub zero_bonus: bool,
    /// Replaces the ridge estimate by the true transition factor.
    #[serde(default)]
    pub exact_model: bool,
    /// Truncates episodes at `l_max` steps.
    #[serde(default)]
    pub cap_episodes: bool,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    /// Multiplier on the theoretical `η`; ignored when `eta` is set.
    #[serde(default = "default_eta_scale")]
    pub eta_scale: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            eta: None,
            omega: None,
            alpha: None,
            delta: default_delta(),
            ascension: default_rule(),
            zero_bonus: false,
            exact_model: false,
            cap_episodes: false,
            refresh_every: default_refresh(),
            eta_scale: default_eta_scale(),
        }
    }
}

impl LearnerConfig {
    /// Resolves every hyperparameter. Unset values follow the theoretical
    /// schedule; `ω` uses `log max(K, 2)` so that it stays positive.
    pub fn hyperparams(&self, s: &ProblemSize) -> Result<Hyperparams> {
        check_size(s)?;
        let k_eff = s.k.max(2) as f64;
        let omega = self.omega.unwrap_or(k_eff.ln());
        let alpha = self.alpha.unwrap_or(2.0 * k_eff.ln());
        let eta = self.eta.unwrap_or_else(|| self.eta_scale * theory_eta(s));
        let beta = match self.beta {
            BetaMode::Theory { c } => {
                if s.k < 2 {
                    return invalid_input("theory beta needs K >= 2");
                }
                theory_beta(s, c)
            }
            BetaMode::Practical { value } => value,
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return invalid_input(format!("eta must be positive, got {eta}"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return invalid_input(format!("beta must be positive, got {beta}"));
        }
        if !(omega > 0.0) || !(alpha > 0.0) {
            return invalid_input("omega and alpha must be positive");
        }
        Ok(assemble(s, eta, beta, omega, alpha))
    }
}

/// Scalar knobs shared by every policy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimism {
    pub eta: f64,
    pub beta: f64,
    pub alpha: f64,
    pub omega: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub rule: AscensionRule,
    pub zero_bonus: bool,
}

impl Optimism {
    pub fn from_hyperparams(hp: &Hyperparams, cfg: &LearnerConfig) -> Self {
        Self {
            eta: hp.eta,
            beta: hp.beta,
            alpha: hp.alpha,
            omega: hp.omega,
            gamma: hp.gamma,
            r_max: hp.r_max,
            rule: cfg.ascension,
            zero_bonus: cfg.zero_bonus,
        }
    }

    /// `R_max/(1−γ)`, the value of heaven.
    pub fn heaven_value(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn bonus(&self, anchor_inv: &DMatrix<f64>, phi: &DVector<f64>) -> f64 {
        if self.zero_bonus {
            0.0
        } else {
            self.beta * elliptical_norm(anchor_inv, phi)
        }
    }

    /// Ascension probability given the bonus and, for the clip rule, the
    /// linear part `φᵀθ`.
    pub fn p_plus(&self, cb: f64, linear: f64) -> f64 {
        match self.rule {
            AscensionRule::Sigmoid => sigmoid(self.alpha * cb - self.omega),
            AscensionRule::Zero => 0.0,
            AscensionRule::Clip => {
                if linear + cb >= self.heaven_value() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `Q = (1−p⁺)(φᵀθ + CB) + p⁺·R_max/(1−γ)`.
    pub fn q_value(&self, cb: f64, linear: f64) -> f64 {
        let p = self.p_plus(cb, linear);
        (1.0 - p) * (linear + cb) + p * self.heaven_value()
    }
}

/// Per-pair bonus and (rule-independent part of) ascension, fixed for an epoch.
#[derive(Debug)]
struct PairCache {
    bonus: Vec<f64>,
}

/// Softmax policy in compact form: a cumulative parameter, an episode count
/// and the anchor covariance inverse.
#[derive(Debug, Clone)]
pub struct CompactPolicy {
    params: Optimism,
    theta_sum: DVector<f64>,
    count: usize,
    anchor_inv: Arc<DMatrix<f64>>,
    /// Per-episode parameters, kept only for the clip rule whose ascension
    /// depends on `θ_j`.
    history: Vec<DVector<f64>>,
    cache: Option<Arc<PairCache>>,
}

impl CompactPolicy {
    /// Uniform policy at the start of an epoch.
    pub fn uniform(params: Optimism, anchor_inv: Arc<DMatrix<f64>>, features: Option<&FeatureMap>) -> Self {
        let d = anchor_inv.nrows();
        let cache = features.map(|fm| {
            Arc::new(PairCache {
                bonus: fm.rows().iter().map(|phi| params.bonus(&anchor_inv, phi)).collect(),
            })
        });
        Self {
            params,
            theta_sum: DVector::zeros(d),
            count: 0,
            anchor_inv,
            history: Vec::new(),
            cache,
        }
    }

    pub fn params(&self) -> &Optimism {
        &self.params
    }

    pub fn theta_sum(&self) -> &DVector<f64> {
        &self.theta_sum
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn anchor_inv(&self) -> &Arc<DMatrix<f64>> {
        &self.anchor_inv
    }

    pub fn bonus(&self, phi: &DVector<f64>) -> f64 {
        self.params.bonus(&self.anchor_inv, phi)
    }

    fn cached_bonus(&self, pair: Option<usize>, phi: &DVector<f64>) -> f64 {
        match (pair, &self.cache) {
            (Some(i), Some(c)) => c.bonus[i],
            _ => self.bonus(phi),
        }
    }

    fn score_with(&self, cb: f64, phi: &DVector<f64>) -> f64 {
        let m = self.count as f64;
        match self.params.rule {
            AscensionRule::Clip => self.history.iter().map(|th| self.params.q_value(cb, phi.dot(th))).sum(),
            _ => {
                let p = self.params.p_plus(cb, 0.0);
                (1.0 - p) * (phi.dot(&self.theta_sum) + m * cb) + m * p * self.params.heaven_value()
            }
        }
    }

    /// Accumulated `Σ_j Q_j(x,a)` over the epoch.
    pub fn score(&self, phi: &DVector<f64>) -> f64 {
        self.score_with(self.bonus(phi), phi)
    }

    /// `π(·|x)` from the features of each action at `x`.
    pub fn action_probs(&self, feats: &[DVector<f64>]) -> Vec<f64> {
        let s: Vec<f64> = feats.iter().map(|phi| self.score(phi)).collect();
        softmax(&s, self.params.eta)
    }

    fn state_scores(&self, fm: &FeatureMap, x: usize) -> Vec<f64> {
        let n_a = fm.n_actions();
        (0..n_a)
            .map(|a| {
                let phi = fm.get(x, a);
                self.score_with(self.cached_bonus(Some(x * n_a + a), phi), phi)
            })
            .collect()
    }

    /// `π(·|x)` for a state of the known feature map.
    pub fn state_probs(&self, fm: &FeatureMap, x: usize) -> Vec<f64> {
        softmax(&self.state_scores(fm, x), self.params.eta)
    }

    /// Samples an action.
    pub fn act(&self, feats: &[DVector<f64>], rng: &mut impl Rng) -> usize {
        sample_from(&self.action_probs(feats), rng)
    }

    /// Argmax of the accumulated score, lowest index on ties.
    pub fn greedy(&self, fm: &FeatureMap, x: usize) -> usize {
        crate::mdp::argmax(&self.state_scores(fm, x), 0.0)
    }

    /// Full table `π(a|x)`.
    pub fn to_tabular(&self, fm: &FeatureMap) -> TabularPolicy {
        let mut probs = Vec::with_capacity(fm.n_states() * fm.n_actions());
        for x in 0..fm.n_states() {
            probs.extend(self.state_probs(fm, x));
        }
        TabularPolicy::new(fm.n_states(), fm.n_actions(), probs).expect("softmax rows are normalized")
    }

    /// `π ← π ⊙ exp(η(Q − EV))` with `Q` given by `θ`, in compact form.
    pub fn update(&mut self, theta: &DVector<f64>) {
        self.theta_sum += theta;
        self.count += 1;
        if self.params.rule == AscensionRule::Clip {
            self.history.push(theta.clone());
        }
    }

    /// `Q(x,a)` with linear parameter `θ` under this policy's anchor.
    pub fn q_value(&self, pair: Option<usize>, phi: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        self.params.q_value(self.cached_bonus(pair, phi), phi.dot(theta))
    }

    /// `(1/η) log Σ_a π(a|x) exp(η Q(x,a))` with `Q` given by `θ` (or zero).
    pub fn soft_value(&self, fm: &FeatureMap, x: usize, theta: Option<&DVector<f64>>) -> Result<f64> {
        let theta = match theta {
            None => return Ok(0.0),
            Some(t) => t,
        };
        let n_a = fm.n_actions();
        let q: Vec<f64> = (0..n_a)
            .map(|a| self.q_value(Some(x * n_a + a), fm.get(x, a), theta))
            .collect();
        weighted_logsumexp(&self.state_probs(fm, x), &q, self.params.eta)
    }
}

fn sample_from(probs: &[f64], rng: &mut impl Rng) -> usize {
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

/// One observed transition `(x, a, x′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub x: usize,
    pub a: usize,
    pub next: usize,
}

/// Exact-model checks computed when the true kernel is supplied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `max (|(P − P̂)V_k| − CB)`; non-positive when bonuses are valid.
    pub validity_excess: f64,
    /// Number of pairs with `|(P − P̂)V_k| > CB`.
    pub validity_violations: usize,
    /// `max (r⁺ + γP⁺V_k − Q_{k+1})`.
    pub lower_sandwich_excess: f64,
    /// `max (Q_{k+1} − r⁺ − 2(1−p⁺)CB − γP⁺V_k)`.
    pub upper_sandwich_excess: f64,
    /// `max (|(P⁺ − P̂⁺)V_k| − (1−p⁺)CB)`.
    pub augmented_validity_excess: f64,
    pub max_abs_q: f64,
    pub max_abs_v: f64,
}

/// Summary of one learner update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub episode: usize,
    pub epoch: usize,
    pub epoch_started: bool,
    pub bonus_mean: f64,
    pub p_plus_mean: f64,
    pub logdet: f64,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnerCheckpoint {
    pub hyperparams: Hyperparams,
    pub theta_sum: Vec<f64>,
    pub episode_count: usize,
    pub current_theta: Option<Vec<f64>>,
    pub anchor_inv: Vec<f64>,
    pub epoch: usize,
    pub epoch_start_episode: usize,
    pub episode: usize,
    pub dataset_len: usize,
}

/// Full learner state.
#[derive(Debug, Clone)]
pub struct LearnerState {
    hp: Hyperparams,
    config: LearnerConfig,
    features: Arc<FeatureMap>,
    true_m: Option<DMatrix<f64>>,
    cov: CovarianceState,
    dataset: Vec<Transition>,
    next_sums: Vec<DVector<f64>>,
    seen_next: Vec<bool>,
    epoch: usize,
    epoch_start_episode: usize,
    current_theta: Option<DVector<f64>>,
    prev_policy: CompactPolicy,
    policy: CompactPolicy,
    episode: usize,
}

impl LearnerState {
    /// `true_m` is required by the exact-model override and ignored otherwise.
    pub fn new(
        features: Arc<FeatureMap>,
        hp: Hyperparams,
        config: LearnerConfig,
        true_m: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if hp.d != features.dim() || hp.n_actions != features.n_actions() {
            return invalid_input("hyperparameters do not match the feature map");
        }
        if config.exact_model && true_m.is_none() {
            return invalid_input("exact-model override needs the true transition factor");
        }
        let d = features.dim();
        let cov = CovarianceState::with_refresh(d, config.refresh_every);
        let params = Optimism::from_hyperparams(&hp, &config);
        let policy = CompactPolicy::uniform(params, cov.anchor_inv().clone(), Some(&features));
        let n_s = features.n_states();
        Ok(Self {
            hp,
            true_m: if config.exact_model { true_m } else { None },
            config,
            cov,
            dataset: Vec::new(),
            next_sums: vec![DVector::zeros(d); n_s],
            seen_next: vec![false; n_s],
            epoch: 0,
            epoch_start_episode: 0,
            current_theta: None,
            prev_policy: policy.clone(),
            policy,
            episode: 1,
            features,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn covariance(&self) -> &CovarianceState {
        &self.cov
    }

    pub fn dataset(&self) -> &[Transition] {
        &self.dataset
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn epoch_start_episode(&self) -> usize {
        self.epoch_start_episode
    }

    /// Index `k` of the next episode to be played.
    pub fn episode(&self) -> usize {
        self.episode
    }

    /// `π_k`, the policy to play next.
    pub fn policy(&self) -> &CompactPolicy {
        &self.policy
    }

    pub fn prev_policy(&self) -> &CompactPolicy {
        &self.prev_policy
    }

    /// `θ_k`, the linear part of `Q_k`; `None` encodes `Q_1 = 0`.
    pub fn current_theta(&self) -> Option<&DVector<f64>> {
        self.current_theta.as_ref()
    }

    /// Episode cap in steps, if enabled.
    pub fn episode_cap(&self) -> Option<usize> {
        self.config.cap_episodes.then(|| self.hp.l_max.ceil().max(1.0) as usize)
    }

    /// `V_k(x)` from `π_{k−1}` and `Q_k`.
    pub fn value_k(&self, x: usize) -> Result<f64> {
        self.prev_policy.soft_value(&self.features, x, self.current_theta.as_ref())
    }

    /// Epoch trigger: first episode, or `det Λ ≥ 2 det Λ_anchor`.
    fn epoch_due(&self) -> bool {
        self.epoch == 0 || self.cov.log_det_growth() >= LN_2 - 1e-12
    }

    /// `Λ⁻¹ Σ_{(x,a,x′)∈D} φ(x,a)V(x′)`; the exact-model override returns
    /// `Σ_{x′} m(x′)V(x′)` instead.
    pub fn ridge_regress_value(&self, values: &[f64]) -> Result<DVector<f64>> {
        if values.iter().any(|v| !v.is_finite()) {
            return invalid_input("non-finite value target");
        }
        let d = self.features.dim();
        if let Some(m) = &self.true_m {
            return Ok(m.transpose() * DVector::from_column_slice(values));
        }
        let mut acc = DVector::zeros(d);
        for (y, sum) in self.next_sums.iter().enumerate() {
            if self.seen_next[y] && values[y] != 0.0 {
                acc.axpy(values[y], sum, 1.0);
            }
        }
        Ok(self.cov.lambda_inv() * acc)
    }

    /// Values `V_k` on the states the ridge target needs (all states when
    /// the exact model is used); zero elsewhere.
    fn value_targets(&self) -> Result<Vec<f64>> {
        let n_s = self.features.n_states();
        let mut v = vec![0.0; n_s];
        if self.current_theta.is_none() {
            return Ok(v);
        }
        for (y, slot) in v.iter_mut().enumerate() {
            if self.true_m.is_some() || self.seen_next[y] {
                *slot = self.value_k(y)?;
            }
        }
        Ok(v)
    }

    /// Consumes one finished episode (its non-terminal transitions) and the
    /// reward weights `w_k` it was played under. With `probe` (the true
    /// tabular model carrying reward `r_k`) the exact-model diagnostics are
    /// filled in.
    pub fn process_episode(
        &mut self,
        transitions: &[Transition],
        w_k: &DVector<f64>,
        probe: Option<&TabularMdp>,
    ) -> Result<EpisodeReport> {
        if w_k.len() != self.features.dim() {
            return invalid_input("reward weights have wrong dimension");
        }
        let n_s = self.features.n_states();
        for t in transitions {
            if t.x >= n_s || t.next >= n_s || t.a >= self.features.n_actions() {
                return invalid_input("transition index out of range");
            }
            let phi = self.features.get(t.x, t.a);
            self.cov.rank_one_update(phi)?;
            self.next_sums[t.next] += phi;
            self.seen_next[t.next] = true;
            self.dataset.push(*t);
        }

        let epoch_started = self.epoch_due();
        if epoch_started {
            self.epoch += 1;
            self.epoch_start_episode = self.episode;
            self.cov.refresh_inverse()?;
            self.cov.freeze_anchor();
            self.policy = CompactPolicy::uniform(
                *self.policy.params(),
                self.cov.anchor_inv().clone(),
                Some(&self.features),
            );
        }

        let v_k = self.value_targets()?;
        let m_hat_v = self.ridge_regress_value(&v_k)?;
        let theta_next = w_k + &m_hat_v * self.hp.gamma;

        let diagnostics = match probe {
            Some(tab) => Some(self.diagnose(tab, &m_hat_v, &theta_next)?),
            None => None,
        };
        let (bonus_mean, p_plus_mean) = self.bonus_summary(&theta_next);

        self.prev_policy = self.policy.clone();
        self.policy.update(&theta_next);
        self.current_theta = Some(theta_next);
        let report = EpisodeReport {
            episode: self.episode,
            epoch: self.epoch,
            epoch_started,
            bonus_mean,
            p_plus_mean,
            logdet: self.cov.log_det(),
            diagnostics,
        };
        self.episode += 1;
        Ok(report)
    }

    fn bonus_summary(&self, theta_next: &DVector<f64>) -> (f64, f64) {
        let fm = &self.features;
        let n = fm.rows().len() as f64;
        let params = self.policy.params();
        let mut cb_sum = 0.0;
        let mut p_sum = 0.0;
        for (i, phi) in fm.rows().iter().enumerate() {
            let cb = self.policy.cached_bonus(Some(i), phi);
            cb_sum += cb;
            p_sum += params.p_plus(cb, phi.dot(theta_next));
        }
        (cb_sum / n, p_sum / n)
    }

    fn diagnose(&self, tab: &TabularMdp, m_hat_v: &DVector<f64>, theta_next: &DVector<f64>) -> Result<Diagnostics> {
        let fm = &self.features;
        let n_s = fm.n_states();
        let n_a = fm.n_actions();
        if tab.n_states != n_s || tab.n_actions != n_a {
            return invalid_input("probe model shape mismatch");
        }
        let mut v_all = vec![0.0; n_s];
        if self.current_theta.is_some() {
            for (x, v) in v_all.iter_mut().enumerate() {
                *v = self.value_k(x)?;
            }
        }
        let pv = tab.apply_kernel(&v_all);
        let params = self.policy.params();
        let heaven = params.heaven_value();
        let gamma = self.hp.gamma;
        let mut out = Diagnostics {
            validity_excess: f64::NEG_INFINITY,
            lower_sandwich_excess: f64::NEG_INFINITY,
            upper_sandwich_excess: f64::NEG_INFINITY,
            augmented_validity_excess: f64::NEG_INFINITY,
            max_abs_v: v_all.iter().fold(0.0, |m, v| m.max(v.abs())),
            ..Default::default()
        };
        for x in 0..n_s {
            for a in 0..n_a {
                let i = x * n_a + a;
                let phi = fm.get(x, a);
                let cb = self.policy.cached_bonus(Some(i), phi);
                let p_hat_v = phi.dot(m_hat_v);
                let err = (pv[i] - p_hat_v).abs();
                out.validity_excess = out.validity_excess.max(err - cb);
                if err > cb {
                    out.validity_violations += 1;
                }
                let p = params.p_plus(cb, phi.dot(theta_next));
                let q_next = self.policy.q_value(Some(i), phi, theta_next);
                let r_plus = (1.0 - p) * tab.reward(x, a) + p * tab.r_max;
                let p_plus_v = (1.0 - p) * pv[i] + p * heaven;
                let p_hat_plus_v = (1.0 - p) * p_hat_v + p * heaven;
                let lower = r_plus + gamma * p_plus_v;
                let upper = lower + 2.0 * (1.0 - p) * cb;
                out.lower_sandwich_excess = out.lower_sandwich_excess.max(lower - q_next);
                out.upper_sandwich_excess = out.upper_sandwich_excess.max(q_next - upper);
                out.augmented_validity_excess =
                    out.augmented_validity_excess.max((p_plus_v - p_hat_plus_v).abs() - (1.0 - p) * cb);
                out.max_abs_q = out.max_abs_q.max(q_next.abs());
                if let Some(theta_k) = &self.current_theta {
                    out.max_abs_q = out.max_abs_q.max(self.prev_policy.q_value(Some(i), phi, theta_k).abs());
                }
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> LearnerCheckpoint {
        let anchor = self.policy.anchor_inv();
        let d = anchor.nrows();
        let mut row_major = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                row_major.push(anchor[(i, j)]);
            }
        }
        LearnerCheckpoint {
            hyperparams: self.hp.clone(),
            theta_sum: self.policy.theta_sum().iter().cloned().collect(),
            episode_count: self.policy.count(),
            current_theta: self.current_theta.as_ref().map(|t| t.iter().cloned().collect()),
            anchor_inv: row_major,
            epoch: self.epoch,
            epoch_start_episode: self.epoch_start_episode,
            episode: self.episode,
            dataset_len: self.dataset.len(),
        }
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.checkpoint()).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{hard_instance_k, random_mixture_linear_mdp};
    use crate::mdp::LinearMdp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn size(k: usize) -> ProblemSize {
        ProblemSize { k, gamma: 0.9, d: 4, b: 1.0, n_actions: 3, delta: 0.1, w_max: 1.0, r_max: 1.0 }
    }

    fn params(beta: f64, rule: AscensionRule) -> Optimism {
        Optimism { eta: 0.7, beta, alpha: 2.0, omega: 1.0, gamma: 0.9, r_max: 1.0, rule, zero_bonus: false }
    }

    fn learner_for(mdp: &LinearMdp, cfg: LearnerConfig, k: usize) -> LearnerState {
        let s = ProblemSize {
            k,
            gamma: mdp.gamma(),
            d: mdp.dim(),
            b: mdp.features().bound(),
            n_actions: mdp.n_actions(),
            delta: cfg.delta,
            w_max: mdp.w_max(),
            r_max: mdp.r_max(),
        };
        let hp = cfg.hyperparams(&s).unwrap();
        LearnerState::new(Arc::new(mdp.features().clone()), hp, cfg, Some(mdp.m_factor().clone())).unwrap()
    }

    #[test]
    fn theory_parameters() {
        let hp = theoretical_hyperparams(&size(8), 1.0).unwrap();
        assert!((hp.omega - 8f64.ln()).abs() < 1e-15);
        assert!((hp.alpha - 2.0 * 8f64.ln()).abs() < 1e-15);
        assert!((hp.q_max - (1.0 + 2.0 * hp.omega / hp.alpha) / 0.1).abs() < 1e-12);
        assert!((hp.q_max - 20.0).abs() < 1e-9);
        let hp = theoretical_hyperparams(&size(100), 1.0).unwrap();
        assert!((hp.l_max - 10.0 * 1000f64.ln()).abs() < 1e-9);
        assert!((hp.l_max - 69.08).abs() < 0.01);
        assert!(theoretical_hyperparams(&size(1), 1.0).is_err());
    }

    #[test]
    fn theory_eta_formula() {
        let s = size(1000);
        let h = 10.0f64;
        let lmax = h * (1000.0f64 / 0.1).ln();
        let t = lmax * 1000.0;
        let expected = (5.0 * 4.0 * (1.0 + t / 4.0).ln() * 3f64.ln() / (8.0 * h.powf(2.5) * 1000.0)).sqrt();
        assert!((theory_eta(&s) - expected).abs() < 1e-15);
        let one = ProblemSize { n_actions: 1, ..s };
        assert_eq!(theory_eta(&one), 1.0);
    }

    #[test]
    fn theory_beta_rejects_small_log() {
        let s = ProblemSize { w_max: 1e-9, ..size(2) };
        assert!(theoretical_hyperparams(&s, 1.0).is_err());
    }

    #[test]
    fn bonus_examples() {
        let p = params(2.0, AscensionRule::Sigmoid);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(p.bonus(&eye, &DVector::zeros(2)), 0.0);
        let phi = DVector::from_vec(vec![0.6, 0.8]);
        assert!((p.bonus(&eye, &phi) - 2.0).abs() < 1e-15);
        let inv = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        let got = p.bonus(&inv, &DVector::from_vec(vec![1.0, 1.0]));
        assert!((got - 2.0 * 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn q_value_examples() {
        let p = params(1.0, AscensionRule::Sigmoid);
        let cb = 0.3;
        let pp = sigmoid(p.alpha * cb - p.omega);
        assert!((p.q_value(cb, 0.0) - ((1.0 - pp) * cb + pp * 10.0)).abs() < 1e-14);
        assert!((p.q_value(1e6, 0.0) - 10.0).abs() < 1e-9);
        let clip = params(1.0, AscensionRule::Clip);
        assert_eq!(clip.q_value(0.5, 12.0), 1.0 / (1.0 - 0.9));
        assert_eq!(clip.q_value(0.5, 2.0), 2.5);
    }

    #[test]
    fn uniform_at_epoch_start_and_monotone_update() {
        let p = params(1.0, AscensionRule::Sigmoid);
        let mut pol = CompactPolicy::uniform(p, Arc::new(DMatrix::identity(2, 2)), None);
        let feats = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        assert_eq!(pol.action_probs(&feats), vec![0.5, 0.5]);
        pol.update(&DVector::from_vec(vec![1.0, 0.0]));
        let probs = pol.action_probs(&feats);
        assert!(probs[0] > 0.5);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        pol.update(&DVector::from_vec(vec![1e6, 0.0]));
        assert!(pol.action_probs(&feats)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn zero_theta_without_bonus_keeps_probs() {
        let mut p = params(1.0, AscensionRule::Zero);
        p.zero_bonus = true;
        let mut pol = CompactPolicy::uniform(p, Arc::new(DMatrix::identity(2, 2)), None);
        pol.update(&DVector::from_vec(vec![0.4, -0.2]));
        let feats = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let before = pol.action_probs(&feats);
        pol.update(&DVector::zeros(2));
        let after = pol.action_probs(&feats);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn value_update_examples() {
        let pol = CompactPolicy::uniform(params(0.0, AscensionRule::Zero), Arc::new(DMatrix::identity(2, 2)), None);
        assert!((weighted_logsumexp(&[0.5, 0.5], &[2.0, 2.0], pol.params().eta).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(weighted_logsumexp(&[0.0, 1.0], &[5.0, 3.0], 0.7).unwrap(), 3.0);
    }

    #[test]
    fn act_frequencies_match_softmax() {
        let p = params(0.5, AscensionRule::Sigmoid);
        let mut pol = CompactPolicy::uniform(p, Arc::new(DMatrix::identity(3, 3)), None);
        pol.update(&DVector::from_vec(vec![0.5, -0.3, 1.0]));
        let feats: Vec<_> = (0..3)
            .map(|i| {
                let mut v = DVector::zeros(3);
                v[i] = 1.0;
                v
            })
            .collect();
        let probs = pol.action_probs(&feats);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[pol.act(&feats, &mut rng)] += 1;
        }
        for a in 0..3 {
            let f = counts[a] as f64 / n as f64;
            let sd = (probs[a] * (1.0 - probs[a]) / n as f64).sqrt();
            assert!((f - probs[a]).abs() <= 3.0 * sd, "{a}: {f} vs {}", probs[a]);
        }
    }

    #[test]
    fn ridge_examples() {
        let (mdp, _) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let mut st = learner_for(&mdp, LearnerConfig::default(), 10);
        assert_eq!(st.ridge_regress_value(&[0.0, 0.0]).unwrap(), DVector::zeros(4));
        let w = DVector::zeros(4);
        st.process_episode(&[Transition { x: 0, a: 0, next: 1 }], &w, None).unwrap();
        let got = st.ridge_regress_value(&[0.0, 3.0]).unwrap();
        assert!((got[0] - 1.5).abs() < 1e-15);
        assert!(got.iter().skip(1).all(|&v| v == 0.0));
        assert_eq!(st.ridge_regress_value(&[0.0, 0.0]).unwrap(), DVector::zeros(4));
        assert!(st.ridge_regress_value(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn first_episode_gives_reward_parameter() {
        let (mdp, _) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let mut st = learner_for(&mdp, LearnerConfig::default(), 10);
        let w = mdp.reward_weights().clone();
        let steps = [Transition { x: 0, a: 1, next: 0 }, Transition { x: 0, a: 0, next: 1 }];
        let rep = st.process_episode(&steps, &w, None).unwrap();
        assert!(rep.epoch_started);
        assert_eq!(st.current_theta().unwrap(), &w);
        assert_eq!(st.dataset().len(), 2);
    }

    #[test]
    fn empty_episode_keeps_covariance() {
        let (mdp, _) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let mut st = learner_for(&mdp, LearnerConfig::default(), 10);
        let w = mdp.reward_weights().clone();
        st.process_episode(&[], &w, None).unwrap();
        assert_eq!(st.covariance().log_det(), 0.0);
        assert_eq!(st.current_theta().unwrap(), &w);
        assert_eq!(st.policy().count(), 1);
        st.process_episode(&[], &w, None).unwrap();
        assert_eq!(st.current_theta().unwrap(), &w);
        assert_eq!(st.policy().count(), 2);
    }

    #[test]
    fn epoch_triggers_on_doubling() {
        let fm = FeatureMap::new(1, 1, vec![DVector::from_vec(vec![1.0])], None).unwrap();
        let m = DMatrix::from_element(1, 1, 1.0);
        let mdp = LinearMdp::new(fm, m, DVector::from_vec(vec![0.5]), 0.9, vec![1.0], 1.0).unwrap();
        let mut st = learner_for(&mdp, LearnerConfig::default(), 10);
        let w = mdp.reward_weights().clone();
        assert!(st.process_episode(&[], &w, None).unwrap().epoch_started);
        let step = Transition { x: 0, a: 0, next: 0 };
        let rep = st.process_episode(&[step], &w, None).unwrap();
        assert!(rep.epoch_started, "det went from 1 to 2");
        assert_eq!(st.epoch(), 2);
        let rep = st.process_episode(&[step], &w, None).unwrap();
        assert!(!rep.epoch_started, "3 < 2·2");
    }

    #[test]
    fn exact_model_backup_is_dense_bellman() {
        let mdp = random_mixture_linear_mdp(3, 4, 2, 3).unwrap();
        let cfg = LearnerConfig {
            zero_bonus: true,
            exact_model: true,
            ascension: AscensionRule::Zero,
            eta: Some(1.3),
            ..Default::default()
        };
        let mut st = learner_for(&mdp, cfg, 50);
        let tab = mdp.to_tabular();
        let w = mdp.reward_weights().clone();
        let fm = mdp.features().clone();
        for _ in 0..5 {
            st.process_episode(&[], &w, None).unwrap();
        }
        let v: Vec<f64> = (0..4).map(|x| st.value_k(x).unwrap()).collect();
        st.process_episode(&[], &w, None).unwrap();
        let pv = tab.apply_kernel(&v);
        let theta = st.current_theta().unwrap();
        for x in 0..4 {
            for a in 0..2 {
                let q = fm.get(x, a).dot(theta);
                let dense = tab.reward(x, a) + 0.9 * pv[x * 2 + a];
                assert!((q - dense).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_has_fields() {
        let (mdp, _) = hard_instance_k(2, 0.9, 0.05, 0).unwrap();
        let mut st = learner_for(&mdp, LearnerConfig::default(), 10);
        st.process_episode(&[Transition { x: 0, a: 0, next: 0 }], mdp.reward_weights(), None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&st.checkpoint_json().unwrap()).unwrap();
        for key in ["hyperparams", "theta_sum", "episode_count", "current_theta", "anchor_inv", "epoch", "dataset_len"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["anchor_inv"].as_array().unwrap().len(), 16);
    }
}
