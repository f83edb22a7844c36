//! Linear MDP model and exact finite-state oracles.
//!
//! State-action pairs are flattened as `x * n_actions + a` everywhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_model, Error, Result};

const PROB_NEG_TOL: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-9;
const PROB_HARD_TOL: f64 = 1e-6;
const REWARD_TOL: f64 = 1e-9;

/// Known feature map `φ(x, a) ∈ ℝ^d` with norm bound `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    n_states: usize,
    n_actions: usize,
    table: Vec<DVector<f64>>,
    bound: f64,
}

impl FeatureMap {
    /// `table[x * n_actions + a] = φ(x, a)`. When `bound` is `None` the
    /// largest stored norm is used.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        table: Vec<DVector<f64>>,
        bound: Option<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return invalid_model("need at least one state and one action");
        }
        if table.len() != n_states * n_actions {
            return invalid_model(format!(
                "feature table has {} rows, expected {}",
                table.len(),
                n_states * n_actions
            ));
        }
        let dim = table[0].len();
        if dim == 0 {
            return invalid_model("feature dimension must be positive");
        }
        let mut max_norm: f64 = 0.0;
        for (i, v) in table.iter().enumerate() {
            if v.len() != dim {
                return invalid_model(format!("feature row {i} has wrong dimension"));
            }
            if v.iter().any(|e| !e.is_finite()) {
                return invalid_model(format!("feature row {i} is not finite"));
            }
            max_norm = max_norm.max(v.norm());
        }
        let bound = bound.unwrap_or(max_norm);
        if max_norm > bound + 1e-12 {
            return invalid_model(format!("feature norm {max_norm} exceeds bound {bound}"));
        }
        Ok(Self { dim, n_states, n_actions, table, bound })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn get(&self, x: usize, a: usize) -> &DVector<f64> {
        &self.table[x * self.n_actions + a]
    }

    /// Features of every action at state `x`.
    pub fn state_rows(&self, x: usize) -> &[DVector<f64>] {
        &self.table[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.table
    }

    /// `Φ v` as a flat pair-indexed vector.
    pub fn apply(&self, v: &DVector<f64>) -> Vec<f64> {
        self.table.iter().map(|phi| phi.dot(v)).collect()
    }
}

/// Ground-truth linear MDP: `P(x'|x,a) = ⟨φ(x,a), m(x')⟩`, `r(x,a) = ⟨φ(x,a), w⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdp {
    features: FeatureMap,
    m_factor: DMatrix<f64>,
    w: DVector<f64>,
    gamma: f64,
    nu0: Vec<f64>,
    r_max: f64,
    w_max: f64,
}

impl LinearMdp {
    /// Validates every invariant; `m_factor` is `|X| × d`.
    pub fn new(
        features: FeatureMap,
        m_factor: DMatrix<f64>,
        w: DVector<f64>,
        gamma: f64,
        nu0: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let n_states = features.n_states();
        let d = features.dim();
        if m_factor.nrows() != n_states || m_factor.ncols() != d {
            return invalid_model(format!(
                "m_factor is {}x{}, expected {}x{}",
                m_factor.nrows(),
                m_factor.ncols(),
                n_states,
                d
            ));
        }
        if w.len() != d {
            return invalid_model("reward weights have wrong dimension");
        }
        if !(0.0..1.0).contains(&gamma) {
            return invalid_model(format!("discount {gamma} not in [0, 1)"));
        }
        if !(r_max > 0.0) || !r_max.is_finite() {
            return invalid_model("r_max must be positive");
        }
        validate_distribution(&nu0, n_states, "nu0")?;
        let w_max = w.norm();
        let mdp = Self { features, m_factor, w, gamma, nu0, r_max, w_max };
        for x in 0..n_states {
            for a in 0..mdp.n_actions() {
                let row = &mdp.m_factor * mdp.features.get(x, a);
                let sum: f64 = row.iter().sum();
                let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
                if min < -PROB_NEG_TOL || (sum - 1.0).abs() > PROB_SUM_TOL {
                    return invalid_model(format!(
                        "P(.|{x},{a}) is not a distribution (min {min:e}, sum {sum})"
                    ));
                }
            }
        }
        mdp.check_reward_weights(&mdp.w)?;
        Ok(mdp)
    }

    /// Overrides the norm bound `W_max` on reward weights.
    pub fn with_w_max(mut self, w_max: f64) -> Result<Self> {
        if self.w.norm() > w_max + 1e-12 {
            return invalid_model("reward weights exceed W_max");
        }
        self.w_max = w_max;
        Ok(self)
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn m_factor(&self) -> &DMatrix<f64> {
        &self.m_factor
    }

    pub fn reward_weights(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu0(&self) -> &[f64] {
        &self.nu0
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    /// Checks that `Φw ∈ [0, r_max]` up to tolerance.
    pub fn check_reward_weights(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return invalid_input("reward weights have wrong dimension");
        }
        for (i, phi) in self.features.rows().iter().enumerate() {
            let r = phi.dot(w);
            if !r.is_finite() || r < -REWARD_TOL || r > self.r_max + REWARD_TOL {
                return invalid_model(format!("reward {r} at pair {i} outside [0, {}]", self.r_max));
            }
        }
        Ok(())
    }

    /// Same dynamics with different reward weights.
    pub fn with_reward_weights(&self, w: DVector<f64>) -> Result<Self> {
        self.check_reward_weights(&w)?;
        let mut out = self.clone();
        out.w_max = out.w_max.max(w.norm());
        out.w = w;
        Ok(out)
    }

    /// `m_factor · φ(x, a)`, with tiny negative entries clamped and the row
    /// renormalized.
    pub fn transition_distribution(&self, x: usize, a: usize) -> Result<Vec<f64>> {
        self.check_indices(x, a)?;
        let row = &self.m_factor * self.features.get(x, a);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROB_HARD_TOL || row.iter().any(|&p| p < -PROB_HARD_TOL) {
            return invalid_model(format!("P(.|{x},{a}) sums to {sum}"));
        }
        let mut out: Vec<f64> = row.iter().map(|&p| p.max(0.0)).collect();
        let total: f64 = out.iter().sum();
        for p in &mut out {
            *p /= total;
        }
        Ok(out)
    }

    pub fn mean_reward(&self, x: usize, a: usize) -> Result<f64> {
        self.check_indices(x, a)?;
        let r = self.features.get(x, a).dot(&self.w);
        if r < -REWARD_TOL || r > self.r_max + REWARD_TOL {
            return invalid_model(format!("reward {r} out of range at ({x},{a})"));
        }
        Ok(r.clamp(0.0, self.r_max))
    }

    /// Flat reward vector `Φ w` clamped into `[0, r_max]`.
    pub fn reward_vector(&self, w: &DVector<f64>) -> Vec<f64> {
        self.features
            .apply(w)
            .into_iter()
            .map(|r| r.clamp(0.0, self.r_max))
            .collect()
    }

    fn check_indices(&self, x: usize, a: usize) -> Result<()> {
        if x >= self.n_states() || a >= self.n_actions() {
            return invalid_input(format!("pair ({x},{a}) out of range"));
        }
        Ok(())
    }

    /// Explicit tabular form with the current reward weights.
    pub fn to_tabular(&self) -> TabularMdp {
        let n_s = self.n_states();
        let n_a = self.n_actions();
        let mut p = Vec::with_capacity(n_s * n_a * n_s);
        for x in 0..n_s {
            for a in 0..n_a {
                p.extend(
                    self.transition_distribution(x, a)
                        .expect("validated at construction"),
                );
            }
        }
        TabularMdp {
            n_states: n_s,
            n_actions: n_a,
            p,
            r: self.reward_vector(&self.w),
            gamma: self.gamma,
            nu0: self.nu0.clone(),
            r_max: self.r_max,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LinearMdpJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: LinearMdpJson = serde_json::from_str(s)?;
        raw.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearMdpJson {
    d: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    nu0: Vec<f64>,
    features: Vec<Vec<f64>>,
    m_factor: Vec<Vec<f64>>,
    w: Vec<f64>,
}

impl From<&LinearMdp> for LinearMdpJson {
    fn from(m: &LinearMdp) -> Self {
        Self {
            d: m.dim(),
            n_states: m.n_states(),
            n_actions: m.n_actions(),
            gamma: m.gamma,
            r_max: m.r_max,
            nu0: m.nu0.clone(),
            features: m.features.rows().iter().map(|v| v.iter().cloned().collect()).collect(),
            m_factor: (0..m.n_states())
                .map(|i| m.m_factor.row(i).iter().cloned().collect())
                .collect(),
            w: m.w.iter().cloned().collect(),
        }
    }
}

impl TryFrom<LinearMdpJson> for LinearMdp {
    type Error = Error;

    fn try_from(raw: LinearMdpJson) -> Result<Self> {
        if raw.features.iter().any(|r| r.len() != raw.d) || raw.m_factor.iter().any(|r| r.len() != raw.d) {
            return invalid_model("row length does not match d");
        }
        if raw.m_factor.len() != raw.n_states {
            return invalid_model("m_factor must have one row per state");
        }
        let table = raw.features.into_iter().map(DVector::from_vec).collect();
        let features = FeatureMap::new(raw.n_states, raw.n_actions, table, None)?;
        let flat: Vec<f64> = raw.m_factor.into_iter().flatten().collect();
        let m = DMatrix::from_row_slice(raw.n_states, raw.d, &flat);
        LinearMdp::new(features, m, DVector::from_vec(raw.w), raw.gamma, raw.nu0, raw.r_max)
    }
}

fn validate_distribution(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return invalid_model(format!("{what} has length {}, expected {n}", p.len()));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= -PROB_NEG_TOL)) || (sum - 1.0).abs() > PROB_SUM_TOL {
        return invalid_model(format!("{what} is not a distribution (sum {sum})"));
    }
    Ok(())
}

/// Explicit finite MDP with mean rewards. `p[(x*nA + a)*nS + x']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: f64,
    pub nu0: Vec<f64>,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        nu0: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return invalid_model("need at least one state and one action");
        }
        if p.len() != n_states * n_actions * n_states || r.len() != n_states * n_actions {
            return invalid_model("kernel or reward has wrong size");
        }
        if !(0.0..1.0).contains(&gamma) {
            return invalid_model(format!("discount {gamma} not in [0, 1)"));
        }
        for (i, row) in p.chunks(n_states).enumerate() {
            validate_distribution(row, n_states, &format!("kernel row {i}"))?;
        }
        if r.iter().any(|v| !v.is_finite()) {
            return invalid_model("non-finite reward");
        }
        validate_distribution(&nu0, n_states, "nu0")?;
        Ok(Self { n_states, n_actions, p, r, gamma, nu0, r_max })
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn p_row(&self, x: usize, a: usize) -> &[f64] {
        let i = (x * self.n_actions + a) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn reward(&self, x: usize, a: usize) -> f64 {
        self.r[x * self.n_actions + a]
    }

    /// Same kernel, different reward vector.
    pub fn with_rewards(&self, r: Vec<f64>) -> Self {
        assert_eq!(r.len(), self.n_pairs());
        Self { r, ..self.clone() }
    }

    /// `(P v)(x, a)` as a flat pair vector.
    pub fn apply_kernel(&self, v: &[f64]) -> Vec<f64> {
        self.p
            .chunks(self.n_states)
            .map(|row| row.iter().zip(v).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// State-to-state kernel under `pi`.
    pub fn policy_kernel(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for x in 0..n {
            for a in 0..self.n_actions {
                let w = pi.prob(x, a);
                if w == 0.0 {
                    continue;
                }
                for (y, p) in self.p_row(x, a).iter().enumerate() {
                    m[(x, y)] += w * p;
                }
            }
        }
        m
    }

    pub fn policy_reward(&self, pi: &TabularPolicy) -> DVector<f64> {
        DVector::from_fn(self.n_states, |x, _| {
            (0..self.n_actions).map(|a| pi.prob(x, a) * self.reward(x, a)).sum()
        })
    }
}

/// Row-stochastic `π(a|x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return invalid_input("policy table has wrong size");
        }
        for (x, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 * n_actions as f64 {
                return invalid_input(format!("policy row {x} is not a distribution"));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (x, &a) in actions.iter().enumerate() {
            probs[x * n_actions + a] = 1.0;
        }
        Self { n_states: actions.len(), n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[x * self.n_actions + a]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Action with highest probability per state, lowest index on ties.
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|x| argmax(self.row(x), 0.0)).collect()
    }
}

/// Index of the largest entry; any entry within `tol` of the maximum counts
/// as tied and the lowest such index wins.
pub fn argmax(v: &[f64], tol: f64) -> usize {
    let best = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&q| q >= best - tol).unwrap_or(0)
}

/// Discounted normalized occupancy `μ(π)` and its state marginal `ν(π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    pub state_action: Vec<f64>,
    pub state: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn mu(&self, x: usize, a: usize) -> f64 {
        self.state_action[x * self.n_actions + a]
    }

    pub fn dot(&self, f: &[f64]) -> f64 {
        self.state_action.iter().zip(f).map(|(m, f)| m * f).sum()
    }

    /// `Σ_{x,a} μ(x,a) φ(x,a)`.
    pub fn feature_expectation(&self, features: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(features[0].len());
        for (m, phi) in self.state_action.iter().zip(features) {
            out.axpy(*m, phi, 1.0);
        }
        out
    }
}

fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Numeric("singular linear system".into()))
}

/// Exact `V^π` and `Q^π` by a direct solve of `(I − γP_π)V = r_π`.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<(DVector<f64>, Vec<f64>)> {
    check_policy_shape(mdp, pi)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.policy_kernel(pi) * mdp.gamma;
    let v = lu_solve(a, &mdp.policy_reward(pi))?;
    let pv = mdp.apply_kernel(v.as_slice());
    let q = mdp.r.iter().zip(&pv).map(|(r, pv)| r + mdp.gamma * pv).collect();
    Ok((v, q))
}

fn check_policy_shape(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<()> {
    if pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions {
        return invalid_input("policy shape does not match the MDP");
    }
    Ok(())
}

/// Sup-norm residual of `V = r_π + γ P_π V`.
pub fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, v: &DVector<f64>) -> f64 {
    let rhs = mdp.policy_reward(pi) + mdp.policy_kernel(pi) * v * mdp.gamma;
    (rhs - v).amax()
}

/// Value iteration to residual `tol·(1−γ)`, then policy-iteration polish.
/// Ties go to the lowest action index.
pub fn optimal_policy(mdp: &TabularMdp, tol: f64) -> Result<(TabularPolicy, DVector<f64>)> {
    if !(tol > 0.0) {
        return invalid_input("tolerance must be positive");
    }
    let (n_s, n_a) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; n_s];
    let target = tol * (1.0 - mdp.gamma);
    for _ in 0..1_000_000 {
        let pv = mdp.apply_kernel(&v);
        let next: Vec<f64> = (0..n_s)
            .map(|x| {
                (0..n_a)
                    .map(|a| mdp.reward(x, a) + mdp.gamma * pv[x * n_a + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let res = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if res <= target {
            break;
        }
    }
    let pv = mdp.apply_kernel(&v);
    let mut actions: Vec<usize> = (0..n_s)
        .map(|x| {
            let q: Vec<f64> = (0..n_a).map(|a| mdp.reward(x, a) + mdp.gamma * pv[x * n_a + a]).collect();
            argmax(&q, tie_tol(mdp))
        })
        .collect();
    let mut pi = TabularPolicy::deterministic(n_a, &actions);
    let (mut v_pi, mut q_pi) = policy_evaluation(mdp, &pi)?;
    let tol_q = tie_tol(mdp);
    for _ in 0..1000 {
        // switch only on strict improvement so the iteration cannot cycle
        let next: Vec<usize> = (0..n_s)
            .map(|x| {
                let row = &q_pi[x * n_a..(x + 1) * n_a];
                let best = argmax(row, tol_q);
                if row[actions[x]] >= row[best] - tol_q {
                    actions[x]
                } else {
                    best
                }
            })
            .collect();
        if next == actions {
            break;
        }
        actions = next;
        pi = TabularPolicy::deterministic(n_a, &actions);
        (v_pi, q_pi) = policy_evaluation(mdp, &pi)?;
    }
    let lowest: Vec<usize> = (0..n_s)
        .map(|x| argmax(&q_pi[x * n_a..(x + 1) * n_a], tol_q))
        .collect();
    if lowest != actions {
        pi = TabularPolicy::deterministic(n_a, &lowest);
        v_pi = policy_evaluation(mdp, &pi)?.0;
    }
    Ok((pi, v_pi))
}

fn tie_tol(mdp: &TabularMdp) -> f64 {
    let scale = mdp.r.iter().fold(mdp.r_max, |m, r| m.max(r.abs())) / (1.0 - mdp.gamma);
    1e-12 * scale.max(1.0)
}

/// Exact occupancy from `(I − γP_πᵀ)ν = (1−γ)ν₀`.
pub fn occupancy_measure(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<OccupancyMeasure> {
    check_policy_shape(mdp, pi)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.policy_kernel(pi).transpose() * mdp.gamma;
    let b = DVector::from_column_slice(&mdp.nu0) * (1.0 - mdp.gamma);
    let nu = lu_solve(a, &b)?;
    let state: Vec<f64> = nu.iter().cloned().collect();
    let mut state_action = Vec::with_capacity(mdp.n_pairs());
    for (x, &nx) in state.iter().enumerate() {
        for a in 0..mdp.n_actions {
            state_action.push(nx * pi.prob(x, a));
        }
    }
    Ok(OccupancyMeasure { n_states: n, n_actions: mdp.n_actions, state_action, state })
}

/// `‖Eᵀμ − γPᵀμ − (1−γ)ν₀‖_∞`.
pub fn flow_residual(mdp: &TabularMdp, occ: &OccupancyMeasure) -> f64 {
    let n = mdp.n_states;
    let mut lhs = vec![0.0; n];
    for x in 0..n {
        for a in 0..mdp.n_actions {
            let m = occ.mu(x, a);
            lhs[x] += m;
            for (y, p) in mdp.p_row(x, a).iter().enumerate() {
                lhs[y] -= mdp.gamma * p * m;
            }
        }
    }
    lhs.iter()
        .zip(&mdp.nu0)
        .map(|(l, nu)| (l - (1.0 - mdp.gamma) * nu).abs())
        .fold(0.0, f64::max)
}

/// `⟨ν₀, V^π⟩`.
pub fn return_of_policy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let (v, _) = policy_evaluation(mdp, pi)?;
    Ok(mdp.nu0.iter().zip(v.iter()).map(|(n, v)| n * v).sum())
}

/// Comparator used in regret accounting.
#[derive(Debug, Clone)]
pub enum Comparator {
    /// Optimal policy for each episode's reward.
    PerEpisodeOptimal,
    /// One fixed policy for every episode.
    Fixed(TabularPolicy),
}

/// Per-episode gaps `⟨ν₀, V^{π⋆}_{r_k} − V^{π_k}_{r_k}⟩`.
pub fn episode_gaps(
    mdp: &LinearMdp,
    base: &TabularMdp,
    rewards: &[DVector<f64>],
    policies: &[TabularPolicy],
    comparator: &Comparator,
) -> Result<Vec<f64>> {
    if rewards.len() != policies.len() {
        return invalid_input(format!(
            "{} rewards but {} policies",
            rewards.len(),
            policies.len()
        ));
    }
    let mut out = Vec::with_capacity(rewards.len());
    let mut cached: Option<(DVector<f64>, f64)> = None;
    for (w, pi) in rewards.iter().zip(policies) {
        let tab = base.with_rewards(mdp.reward_vector(w));
        let star = match (&cached, comparator) {
            (Some((cw, val)), Comparator::PerEpisodeOptimal) if cw == w => *val,
            (_, Comparator::PerEpisodeOptimal) => {
                let (pi_star, _) = optimal_policy(&tab, 1e-12)?;
                let val = return_of_policy(&tab, &pi_star)?;
                cached = Some((w.clone(), val));
                val
            }
            (_, Comparator::Fixed(pi_star)) => return_of_policy(&tab, pi_star)?,
        };
        out.push(star - return_of_policy(&tab, pi)?);
    }
    Ok(out)
}

/// Partial sums of [`episode_gaps`].
pub fn regret_curve(
    mdp: &LinearMdp,
    rewards: &[DVector<f64>],
    policies: &[TabularPolicy],
    comparator: &Comparator,
) -> Result<Vec<f64>> {
    let base = mdp.to_tabular();
    let gaps = episode_gaps(mdp, &base, rewards, policies, comparator)?;
    Ok(gaps
        .iter()
        .scan(0.0, |acc, g| {
            *acc += g;
            Some(*acc)
        })
        .collect())
}
