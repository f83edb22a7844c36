//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use linmdp::envsim::{run_training, ConstantAdversary, TrainingOptions, TrainingResult};
use linmdp::harness::fit_loglog;
use linmdp::imitation::{
    estimate_expert_features, feature_expectation, fra_il_run, generate_expert_dataset, ExpertFeatures,
};
use linmdp::instances::{hard_instance_k, hard_instance_tau, random_tabular_linear_mdp, TAU_REWARD_DIM};
use linmdp::learner::{AscensionRule, BetaMode, LearnerConfig};
use linmdp::mdp::{occupancy_measure, optimal_policy, TabularPolicy};
use linmdp::rng::{stream, Purpose};
use linmdp::verify::{self, SuiteReport};
use linmdp::LinearMdp;

/// Multiplier on the theoretical `η` for the trend criteria; the raw
/// schedule is too conservative to move the policy within an epoch at
/// these horizons.
const ETA_SCALE: f64 = 30.0;
const SEEDS: std::ops::Range<u64> = 0..10;

/// (run label, epochs, bound) for every learner run made by the suite.
static EPOCHS: Mutex<Vec<(String, usize, f64)>> = Mutex::new(Vec::new());

fn record_epochs(label: &str, epochs: usize, bound: f64) {
    EPOCHS.lock().unwrap().push((label.to_string(), epochs, bound));
}

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn suites_outcome(reports: &[SuiteReport]) -> Outcome {
    let pass = reports.iter().all(|r| r.passed());
    let detail = reports
        .iter()
        .map(|r| format!("{} {}/{}", r.name, r.checks - r.failures, r.checks))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn e1() -> LinearMdp {
    hard_instance_k(4, 0.9, 0.1, 3).unwrap().0
}

fn train(mdp: &LinearMdp, cfg: &LearnerConfig, k: usize, seed: u64, probe: bool, label: &str) -> TrainingResult {
    let mut adv = ConstantAdversary(mdp.reward_weights().clone());
    let opts = TrainingOptions { run_id: label.into(), seed, probe, keep_policies: false, ..Default::default() };
    let res = run_training(mdp, cfg, &mut adv, k, &opts, None).unwrap();
    let (e, b) = res.epoch_check();
    record_epochs(&format!("{label} seed {seed}"), e, b);
    res
}

fn c1_oracles() -> Outcome {
    let t = Instant::now();
    let mut out = suites_outcome(&verify::oracle_suite(25, 1).unwrap());
    let secs = t.elapsed().as_secs_f64();
    out.pass &= secs < 10.0;
    out.detail += &format!("; {secs:.2}s (< 10s)");
    out
}

fn c2_lemmas() -> Outcome {
    let t = Instant::now();
    let mut out = suites_outcome(&verify::lemma_suite(60, 2).unwrap());
    let secs = t.elapsed().as_secs_f64();
    out.pass &= secs < 30.0;
    out.detail += &format!("; {secs:.2}s (< 30s)");
    out
}

fn c3_sigmoid() -> Outcome {
    suites_outcome(&verify::sigmoid_suite(100))
}

fn c4_sandwich() -> Outcome {
    let mdp = e1();
    let seeds = 0..5u64;
    // smallest β on the grid for which the validity event held at every step
    let mut chosen = None;
    for beta in [1.0, 3.0, 10.0, 30.0, 100.0] {
        let cfg = LearnerConfig { beta: BetaMode::Practical { value: beta }, ..Default::default() };
        let runs: Vec<TrainingResult> =
            seeds.clone().map(|s| train(&mdp, &cfg, 2000, s, true, &format!("sandwich beta={beta}"))).collect();
        let violations: usize = runs
            .iter()
            .flat_map(|r| &r.reports)
            .map(|r| r.diagnostics.unwrap().validity_violations)
            .sum();
        if violations == 0 {
            chosen = Some((beta, runs));
            break;
        }
    }
    let Some((beta, runs)) = chosen else {
        return Outcome { pass: false, detail: "validity event failed for every beta on the grid".into() };
    };
    let q_max = runs[0].learner.hyperparams().q_max;
    let diags = || runs.iter().flat_map(|r| &r.reports).map(|r| r.diagnostics.unwrap());
    let max_q = diags().map(|d| d.max_abs_q.max(d.max_abs_v)).fold(0.0, f64::max);
    let lo = diags().map(|d| d.lower_sandwich_excess).fold(f64::NEG_INFINITY, f64::max);
    let hi = diags().map(|d| d.upper_sandwich_excess).fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        pass: max_q <= q_max + 1e-9 && lo <= 1e-9 && hi <= 1e-9,
        detail: format!(
            "beta={beta}, {} episodes: max|Q|,|V| = {max_q:.4} <= {q_max:.4}; sandwich excess lower {lo:.2e}, upper {hi:.2e}",
            runs.len() * 2000
        ),
    }
}

fn c5_compact() -> Outcome {
    let mdp = e1();
    let mut pass = true;
    let mut parts = Vec::new();
    for rule in [AscensionRule::Sigmoid, AscensionRule::Clip] {
        let cfg = LearnerConfig { eta: Some(1.0), ascension: rule, ..Default::default() };
        let chk = common::compact_vs_explicit(&mdp, &cfg, 200, 7);
        record_epochs(&format!("compact {rule:?}"), chk.epochs, chk.epoch_bound);
        pass &= chk.max_diff <= 1e-9 && chk.epochs >= 2;
        parts.push(format!("{rule:?}: max diff {:.2e} over {} epochs", chk.max_diff, chk.epochs));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn c6_epochs() -> Outcome {
    let log = EPOCHS.lock().unwrap();
    let worst = log
        .iter()
        .max_by(|a, b| (a.1 as f64 / a.2).total_cmp(&(b.1 as f64 / b.2)))
        .cloned();
    let violations = log.iter().filter(|(_, e, b)| *e as f64 > *b).count();
    Outcome {
        pass: violations == 0 && !log.is_empty(),
        detail: match worst {
            Some((l, e, b)) => format!("{} runs, {violations} violations; tightest: {l} with {e} epochs <= {b:.1}", log.len()),
            None => "no runs logged".into(),
        },
    }
}

fn mean_regret(mdp: &LinearMdp, beta: f64, k: usize, seeds: impl Iterator<Item = u64>) -> f64 {
    let cfg = LearnerConfig { beta: BetaMode::Practical { value: beta }, eta_scale: ETA_SCALE, ..Default::default() };
    let regs: Vec<f64> = seeds.map(|s| train(mdp, &cfg, k, s, false, &format!("regret K={k}")).final_regret()).collect();
    regs.iter().sum::<f64>() / regs.len() as f64
}

fn c7_regret() -> Outcome {
    let mdp = e1();
    let grid = [0.03, 0.3, 3.0];
    // β is tuned at the smallest K on held-out seeds
    let tuning: Vec<f64> = grid.iter().map(|&b| mean_regret(&mdp, b, 1000, 100..110)).collect();
    let best = (0..grid.len()).min_by(|&i, &j| tuning[i].total_cmp(&tuning[j])).unwrap();
    let beta = grid[best];
    let ks = [1000usize, 4000, 16000];
    let regs: Vec<f64> = ks.iter().map(|&k| mean_regret(&mdp, beta, k, SEEDS)).collect();
    let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let slope = fit_loglog(&xs, &regs).unwrap().slope;
    let per: Vec<f64> = regs.iter().zip(&ks).map(|(r, &k)| r / k as f64).collect();
    let decreasing = per.windows(2).all(|w| w[1] < w[0]);
    Outcome {
        pass: (0.3..=0.85).contains(&slope) && decreasing,
        detail: format!(
            "beta={beta} (tuning means {tuning:.1?}); mean Reg_K {regs:.1?} for K {ks:?}; slope {slope:.3}; Reg_K/K {per:.4?}"
        ),
    }
}

fn c8_known_model() -> Outcome {
    let mut matches = 0;
    let mut parts = Vec::new();
    for i in 0..10u64 {
        let mdp = random_tabular_linear_mdp(5, 3, 0.9, 500 + i).unwrap();
        // regularization bias is at most log|A|/(η(1−γ)), so η must be large
        // next to the theory value for the greedy policy to be exact
        let cfg = LearnerConfig { eta: Some(30.0), zero_bonus: true, exact_model: true, ..Default::default() };
        let res = train(&mdp, &cfg, 500, i, false, "known model");
        let fm = mdp.features();
        let greedy: Vec<usize> = (0..mdp.n_states()).map(|x| res.learner.policy().greedy(fm, x)).collect();
        let (star, _) = optimal_policy(&mdp.to_tabular(), 1e-12).unwrap();
        if greedy == star.argmax_actions() {
            matches += 1;
        } else {
            parts.push(format!("instance {i}: greedy {greedy:?} vs optimal {:?}", star.argmax_actions()));
        }
    }
    Outcome { pass: matches == 10, detail: format!("{matches}/10 greedy policies optimal {}", parts.join("; ")) }
}

fn c9_imitation() -> Outcome {
    let (mdp, expert) = hard_instance_tau(0.9, 0.1, 1.0, 0, 2).unwrap();
    let tab = mdp.to_tabular();
    let exact = feature_expectation(&mdp, &tab, TAU_REWARD_DIM, &expert).unwrap();
    let cfg = LearnerConfig { beta: BetaMode::Practical { value: 0.3 }, eta_scale: ETA_SCALE, ..Default::default() };
    let mean_subopt = |k: usize, tau: Option<usize>| -> f64 {
        let v: Vec<f64> = SEEDS
            .map(|s| {
                let feats = match tau {
                    None => ExpertFeatures::Exact(exact.clone()),
                    Some(n) => {
                        let mut rng = stream(s, Purpose::Expert, 0);
                        ExpertFeatures::Dataset(generate_expert_dataset(&mdp, &expert, TAU_REWARD_DIM, n, &mut rng).unwrap())
                    }
                };
                let r = fra_il_run(&mdp, &expert, &feats, TAU_REWARD_DIM, k, &cfg, s).unwrap();
                record_epochs(&format!("imitation K={k} tau={tau:?} seed {s}"), r.epochs.0, r.epochs.1);
                r.subopt
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ks = [500usize, 2000, 8000];
    let by_k: Vec<f64> = ks.iter().map(|&k| mean_subopt(k, None)).collect();
    let taus = [10usize, 100, 1000, 10000];
    let k_large = 64000;
    let by_tau: Vec<f64> = taus.iter().map(|&t| mean_subopt(k_large, Some(t))).collect();

    let reps = 100u64;
    let err: Vec<f64> = taus
        .iter()
        .map(|&t| {
            (0..reps)
                .map(|r| {
                    let mut rng = stream(r, Purpose::Expert, 1);
                    let d = generate_expert_dataset(&mdp, &expert, TAU_REWARD_DIM, t, &mut rng).unwrap();
                    (estimate_expert_features(&d).unwrap() - &exact).norm()
                })
                .sum::<f64>()
                / reps as f64
        })
        .collect();
    let xs: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
    let slope = fit_loglog(&xs, &err).unwrap().slope;

    let dec = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let (ok_k, ok_tau, ok_slope) = (dec(&by_k), dec(&by_tau), (-0.6..=-0.4).contains(&slope));
    Outcome {
        pass: ok_k && ok_tau && ok_slope,
        detail: format!(
            "exact-expert subopt {by_k:.4?} for K {ks:?} [{}]; subopt {by_tau:.4?} for tau_E {taus:?} at K={k_large} [{}]; lambda-hat error slope {slope:.3} [{}]",
            if ok_k { "decreasing" } else { "NOT decreasing" },
            if ok_tau { "decreasing" } else { "NOT decreasing" },
            if ok_slope { "ok" } else { "out of range" },
        ),
    }
}

fn c10_closed_forms() -> Outcome {
    let (k_mdp, _) = hard_instance_k(4, 0.9, 0.1, 3).unwrap();
    let bad = TabularPolicy::deterministic(4, &[0, 0]);
    let nu_bad = occupancy_measure(&k_mdp.to_tabular(), &bad).unwrap().state[0];
    let (t_mdp, e1) = hard_instance_tau(0.9, 0.1, 1.0, 1, 2).unwrap();
    let nu_e1 = occupancy_measure(&t_mdp.to_tabular(), &e1).unwrap().state[0];
    let mut out = suites_outcome(&verify::closed_form_suite().unwrap());
    let printed = (nu_bad - 2.0 / 3.0).abs() <= 1e-10 && (nu_e1 - 0.5).abs() <= 1e-10;
    out.pass &= printed;
    out.detail = format!("nu(pi_bad, x0) = {nu_bad:.12}, nu(pi_E^1, x0) = {nu_e1:.12}; {}", out.detail);
    out
}

fn c11_numerics() -> Outcome {
    suites_outcome(&verify::numerics_suite(10_000, 10_000, 3).unwrap())
}

fn main() -> ExitCode {
    // cargo passes harness flags (e.g. --list) to custom test mains
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 11] = [
        ("oracle cross-validation", c1_oracles),
        ("augmented-MDP lemmas", c2_lemmas),
        ("sigmoid bounds", c3_sigmoid),
        ("Q bound and optimism sandwich", c4_sandwich),
        ("compact policy equivalence", c5_compact),
        // runs after every criterion that trains a learner
        ("epoch-count bound", c6_epochs),
        ("sublinear regret", c7_regret),
        ("known-model sanity", c8_known_model),
        ("imitation trends", c9_imitation),
        ("hard-instance closed forms", c10_closed_forms),
        ("numerics", c11_numerics),
    ];
    let order = [0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 5];
    let mut results: Vec<Option<(Outcome, f64)>> = (0..11).map(|_| None).collect();
    for &i in &order {
        let t = Instant::now();
        let out = criteria[i].1();
        results[i] = Some((out, t.elapsed().as_secs_f64()));
    }
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (out, secs) = r.expect("every criterion ran");
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {} ({secs:.1}s): {}",
            i + 1,
            if out.pass { "PASS" } else { "FAIL" },
            criteria[i].0,
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
