//! Generators for valid linear-MDP instances: tabular embeddings, random
//! mixture models and the two-state hard families.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_input, Result};
use crate::mdp::{FeatureMap, LinearMdp, TabularPolicy};

/// Number of reward-feature coordinates in [`hard_instance_tau`].
pub const TAU_REWARD_DIM: usize = 2;

/// One-hot embedding of a tabular MDP (`d = |X|·|A|`, `B = 1`).
/// `p[(x*nA + a)*nS + x']`, `r[x*nA + a]`.
pub fn tabular_to_linear(
    n_states: usize,
    n_actions: usize,
    p: &[f64],
    r: &[f64],
    gamma: f64,
    nu0: Vec<f64>,
) -> Result<LinearMdp> {
    let d = n_states * n_actions;
    if p.len() != d * n_states || r.len() != d {
        return invalid_input("kernel or reward has wrong size");
    }
    if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return invalid_input("rewards must lie in [0, 1]");
    }
    let table = (0..d)
        .map(|i| {
            let mut v = DVector::zeros(d);
            v[i] = 1.0;
            v
        })
        .collect();
    let features = FeatureMap::new(n_states, n_actions, table, Some(1.0))?;
    let m = DMatrix::from_fn(n_states, d, |y, i| p[i * n_states + y]);
    LinearMdp::new(features, m, DVector::from_column_slice(r), gamma, nu0, 1.0)
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    for e in &mut v {
        *e /= s;
    }
    v
}

/// Random mixture linear MDP with `γ = 0.9`.
pub fn random_mixture_linear_mdp(d: usize, n_states: usize, n_actions: usize, seed: u64) -> Result<LinearMdp> {
    random_mixture_with_gamma(d, n_states, n_actions, 0.9, seed)
}

/// Random tabular MDP in its one-hot embedding: Dirichlet(1) kernel rows,
/// uniform rewards in `[0, 1]`, random initial distribution.
pub fn random_tabular_linear_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<LinearMdp> {
    if n_states == 0 || n_actions == 0 {
        return invalid_input("dimensions must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        p.extend(random_simplex(&mut rng, n_states));
    }
    let r: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
    let nu0 = random_simplex(&mut rng, n_states);
    tabular_to_linear(n_states, n_actions, &p, &r, gamma, nu0)
}

/// Features on the probability simplex, columns of `m` are distributions over
/// states, `w ∈ [0,1]^d`. Every kernel row is an exact convex mixture.
pub fn random_mixture_with_gamma(
    d: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
) -> Result<LinearMdp> {
    if d == 0 || n_states == 0 || n_actions == 0 {
        return invalid_input("dimensions must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = (0..n_states * n_actions)
        .map(|_| DVector::from_vec(random_simplex(&mut rng, d)))
        .collect();
    let features = FeatureMap::new(n_states, n_actions, table, Some(1.0))?;
    let mut m = DMatrix::zeros(n_states, d);
    for j in 0..d {
        let col = random_simplex(&mut rng, n_states);
        for (y, p) in col.into_iter().enumerate() {
            m[(y, j)] = p;
        }
    }
    let w = DVector::from_fn(d, |_, _| rng.gen::<f64>());
    let nu0 = random_simplex(&mut rng, n_states);
    LinearMdp::new(features, m, w, gamma, nu0, 1.0)
}

fn check_hard_range(gamma: f64, eps: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&gamma) {
        return invalid_input(format!("gamma {gamma} must lie in [1/2, 1)"));
    }
    let delta = (1.0 - gamma) / gamma;
    if !(0.0..=delta).contains(&eps) {
        return invalid_input(format!("eps {eps} must lie in [0, {delta}]"));
    }
    Ok(delta)
}

/// Two-state family with a single slightly better action `a⋆` at `x₀`.
/// Returns the one-hot embedding and the expert that always plays `a⋆`.
pub fn hard_instance_k(
    n_actions: usize,
    gamma: f64,
    eps: f64,
    star_index: usize,
) -> Result<(LinearMdp, TabularPolicy)> {
    let delta = check_hard_range(gamma, eps)?;
    if star_index >= n_actions {
        return invalid_input("star action out of range");
    }
    let n_s = 2;
    let mut p = vec![0.0; n_s * n_actions * n_s];
    let mut r = vec![0.0; n_s * n_actions];
    r[..n_actions].fill(1.0);
    for a in 0..n_actions {
        let stay = if a == star_index { 1.0 - delta + eps } else { 1.0 - delta };
        let i0 = a * n_s;
        p[i0] = stay;
        p[i0 + 1] = 1.0 - stay;
        let i1 = (n_actions + a) * n_s;
        p[i1] = delta;
        p[i1 + 1] = 1.0 - delta;
    }
    let lin = tabular_to_linear(n_s, n_actions, &p, &r, gamma, vec![1.0, 0.0])?;
    let expert = TabularPolicy::deterministic(n_actions, &[star_index, star_index]);
    Ok((lin, expert))
}

/// Two-state imitation family. Action 0 is `a⋆`; it lowers the chance of
/// leaving `x₀` by `eps`. Features are `[one-hot(x); one-hot(x,a)]`, so the
/// first [`TAU_REWARD_DIM`] coordinates are reward features that hide the
/// action. Variant 0 rewards `x₀` and the expert plays `a⋆`; variant 1
/// rewards `x₁` and the expert plays action 1.
pub fn hard_instance_tau(
    gamma: f64,
    eps: f64,
    w_max: f64,
    variant: u8,
    n_actions: usize,
) -> Result<(LinearMdp, TabularPolicy)> {
    let delta = check_hard_range(gamma, eps)?;
    if n_actions < 2 {
        return invalid_input("need at least two actions");
    }
    if !(w_max > 0.0 && w_max <= 1.0) {
        return invalid_input("w_max must lie in (0, 1]");
    }
    if variant > 1 {
        return invalid_input("variant must be 0 or 1");
    }
    let n_s = 2;
    let d_p = n_s * n_actions;
    let d = TAU_REWARD_DIM + d_p;
    let mut table = Vec::with_capacity(d_p);
    let mut m = DMatrix::zeros(n_s, d);
    for x in 0..n_s {
        for a in 0..n_actions {
            let i = x * n_actions + a;
            let mut v = DVector::zeros(d);
            v[x] = 1.0;
            v[TAU_REWARD_DIM + i] = 1.0;
            table.push(v);
            let leave = match (x, a) {
                (0, 0) => delta - eps,
                _ => delta,
            };
            m[(1 - x, TAU_REWARD_DIM + i)] = leave;
            m[(x, TAU_REWARD_DIM + i)] = 1.0 - leave;
        }
    }
    let features = FeatureMap::new(n_s, n_actions, table, Some(2f64.sqrt()))?;
    let mut w = DVector::zeros(d);
    w[variant as usize] = w_max;
    let lin = LinearMdp::new(features, m, w, gamma, vec![0.5, 0.5], 1.0)?.with_w_max(w_max)?;
    let a = if variant == 0 { 0 } else { 1 };
    Ok((lin, TabularPolicy::deterministic(n_actions, &[a, a])))
}
