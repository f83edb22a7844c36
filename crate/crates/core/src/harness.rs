//! Experiment runner: JSON configs, seed fan-out, per-run artifacts and
//! log-log slope fitting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envsim::{
    run_training, AlternatingAdversary, ConstantAdversary, RandomAdversary, RewardAdversary, RunSummary,
    TrainingOptions,
};
use crate::error::{Error, Result};
use crate::imitation::{
    feature_expectation, fra_il_run, generate_expert_dataset, ExpertFeatures, ImitationSummary,
};
use crate::instances::{hard_instance_k, hard_instance_tau, random_mixture_with_gamma, tabular_to_linear, TAU_REWARD_DIM};
use crate::learner::LearnerConfig;
use crate::mdp::{optimal_policy, return_of_policy, Comparator, LinearMdp, TabularPolicy};
use crate::rng::{child_seed, stream, Purpose};
use crate::verify::{self, SuiteReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    RlFixed,
    RlAdversarial,
    Imitation,
    InvariantSuite,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::RlFixed => "rl-fixed",
            Scenario::RlAdversarial => "rl-adversarial",
            Scenario::Imitation => "imitation",
            Scenario::InvariantSuite => "invariant-suite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InstanceSpec {
    HardK {
        n_actions: usize,
        gamma: f64,
        eps: f64,
        #[serde(default)]
        star_index: Option<usize>,
    },
    HardTau {
        gamma: f64,
        eps: f64,
        #[serde(default = "one")]
        w_max: f64,
        #[serde(default)]
        variant: u8,
        #[serde(default = "two")]
        n_actions: usize,
    },
    Mixture {
        d: usize,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
    },
    /// One-hot embedding of an explicit table; `p[(x*nA + a)*nS + x']`.
    Tabular {
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        nu0: Vec<f64>,
    },
    /// A serialized linear MDP.
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

/// A built instance with its reference policy and reward-feature width.
#[derive(Debug, Clone)]
pub struct BuiltInstance {
    pub mdp: LinearMdp,
    pub expert: Option<TabularPolicy>,
    pub reward_dim: usize,
}

impl InstanceSpec {
    pub fn build(&self) -> Result<BuiltInstance> {
        Ok(match self {
            InstanceSpec::HardK { n_actions, gamma, eps, star_index } => {
                let (mdp, e) = hard_instance_k(*n_actions, *gamma, *eps, star_index.unwrap_or(n_actions.saturating_sub(1)))?;
                let reward_dim = mdp.dim();
                BuiltInstance { mdp, expert: Some(e), reward_dim }
            }
            InstanceSpec::HardTau { gamma, eps, w_max, variant, n_actions } => {
                let (mdp, e) = hard_instance_tau(*gamma, *eps, *w_max, *variant, *n_actions)?;
                BuiltInstance { mdp, expert: Some(e), reward_dim: TAU_REWARD_DIM }
            }
            InstanceSpec::Mixture { d, n_states, n_actions, gamma, seed } => {
                let mdp = random_mixture_with_gamma(*d, *n_states, *n_actions, *gamma, *seed)?;
                let reward_dim = mdp.dim();
                BuiltInstance { mdp, expert: None, reward_dim }
            }
            InstanceSpec::Tabular { n_states, n_actions, p, r, gamma, nu0 } => {
                let mdp = tabular_to_linear(*n_states, *n_actions, p, r, *gamma, nu0.clone())?;
                let reward_dim = mdp.dim();
                BuiltInstance { mdp, expert: None, reward_dim }
            }
            InstanceSpec::File { path } => {
                let mdp = LinearMdp::from_json(&fs::read_to_string(path)?)?;
                let reward_dim = mdp.dim();
                BuiltInstance { mdp, expert: None, reward_dim }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AdversarySpec {
    /// The instance's own reward weights every episode.
    #[default]
    Fixed,
    Constant { w: Vec<f64> },
    Alternating { weights: Vec<Vec<f64>> },
    Random { weights: Vec<Vec<f64>> },
    /// Online-gradient reward player; `tau_e = None` uses exact expert features.
    Ogd {
        #[serde(default)]
        tau_e: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    #[serde(default)]
    pub master: u64,
    #[serde(default = "one_usize")]
    pub count: usize,
    /// Explicit run seeds; takes precedence over `master`/`count`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explicit: Vec<u64>,
}

fn one_usize() -> usize {
    1
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        if !self.explicit.is_empty() {
            return self.explicit.clone();
        }
        (0..self.count as u64).map(|i| child_seed(self.master, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Exact-model diagnostics every episode (slow on large instances).
    #[serde(default)]
    pub probe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "one_usize")]
    pub episodes: usize,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub adversary: AdversarySpec,
    pub seeds: SeedSpec,
    pub output: OutputSpec,
}

impl ExperimentConfig {
    /// Parses a config; schema errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    /// Parses, applies `key.path=value` overrides, then `SIM_SEED` if given.
    pub fn load(text: &str, overrides: &[String], sim_seed: Option<u64>) -> Result<Self> {
        let mut cfg = if overrides.is_empty() {
            Self::parse(text)?
        } else {
            let mut v: Value = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
            for o in overrides {
                apply_override(&mut v, o)?;
            }
            serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))?
        };
        if let Some(s) = sim_seed {
            cfg.seeds.master = s;
            cfg.seeds.explicit.clear();
        }
        Ok(cfg)
    }

    /// Stable hash of everything except seeds and output location.
    pub fn config_hash(&self) -> u64 {
        let key = serde_json::json!({
            "scenario": self.scenario,
            "episodes": self.episodes,
            "instance": self.instance,
            "learner": self.learner,
            "adversary": self.adversary,
        });
        fnv1a(key.to_string().as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Result of one (config, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub config_hash: u64,
    pub seed: u64,
    pub dir: PathBuf,
    pub headline: f64,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunRecord>,
    pub suites: Vec<SuiteReport>,
}

impl ExperimentOutcome {
    pub fn all_passed(&self) -> bool {
        self.runs.iter().all(|r| r.passed) && self.suites.iter().all(|s| s.passed())
    }
}

/// Reads a config file and runs it on up to `jobs` threads.
pub fn run_experiment(config_path: &Path, overrides: &[String], sim_seed: Option<u64>, jobs: usize) -> Result<ExperimentOutcome> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let cfg = ExperimentConfig::load(&text, overrides, sim_seed)?;
    run_config(&cfg, jobs)
}

pub fn run_config(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    if cfg.scenario == Scenario::InvariantSuite {
        let suites = verify::run_all(cfg.seeds.master)?;
        let dir = cfg.output.dir.join(format!("invariant-suite-{:016x}", cfg.config_hash()));
        fs::create_dir_all(&dir)?;
        write_snapshot(cfg, &dir, cfg.seeds.master)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&suites)?)?;
        return Ok(ExperimentOutcome { runs: Vec::new(), suites });
    }
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let built = cfg.instance.build()?;
    check_scenario(cfg, &built)?;
    let seeds = cfg.seeds.seeds();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| seeds.par_iter().map(|&s| run_one(cfg, &built, s)).collect());
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by_key(|r| (r.config_hash, r.seed));
    Ok(ExperimentOutcome { runs, suites: Vec::new() })
}

fn check_scenario(cfg: &ExperimentConfig, built: &BuiltInstance) -> Result<()> {
    let d = built.mdp.dim();
    let check_len = |w: &Vec<f64>| {
        if w.len() != d {
            Err(Error::Config(format!("adversary weights have length {}, instance has d = {d}", w.len())))
        } else {
            Ok(())
        }
    };
    match (&cfg.scenario, &cfg.adversary) {
        (Scenario::RlFixed, AdversarySpec::Fixed | AdversarySpec::Constant { .. }) => {}
        (Scenario::RlAdversarial, AdversarySpec::Fixed | AdversarySpec::Constant { .. }) => {}
        (Scenario::RlAdversarial, AdversarySpec::Alternating { weights } | AdversarySpec::Random { weights }) => {
            if weights.is_empty() {
                return Err(Error::Config("adversary needs at least one weight vector".into()));
            }
            weights.iter().try_for_each(check_len)?;
        }
        (Scenario::Imitation, AdversarySpec::Ogd { .. }) => {}
        (s, a) => {
            return Err(Error::Config(format!("scenario {} does not accept adversary {a:?}", s.name())));
        }
    }
    if let AdversarySpec::Constant { w } = &cfg.adversary {
        check_len(w)?;
    }
    Ok(())
}

fn write_snapshot(cfg: &ExperimentConfig, dir: &Path, seed: u64) -> Result<()> {
    let mut snap = cfg.clone();
    snap.seeds = SeedSpec { master: cfg.seeds.master, count: 1, explicit: vec![seed] };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snap)?)?;
    Ok(())
}

fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output.dir.join(format!("{}-{:016x}-seed{seed}", cfg.scenario.name(), cfg.config_hash()))
}

fn make_adversary(spec: &AdversarySpec, mdp: &LinearMdp) -> Box<dyn RewardAdversary> {
    let v = |w: &Vec<f64>| DVector::from_vec(w.clone());
    match spec {
        AdversarySpec::Constant { w } => Box::new(ConstantAdversary(v(w))),
        AdversarySpec::Alternating { weights } => Box::new(AlternatingAdversary(weights.iter().map(v).collect())),
        AdversarySpec::Random { weights } => Box::new(RandomAdversary(weights.iter().map(v).collect())),
        AdversarySpec::Fixed | AdversarySpec::Ogd { .. } => Box::new(ConstantAdversary(mdp.reward_weights().clone())),
    }
}

fn run_one(cfg: &ExperimentConfig, built: &BuiltInstance, seed: u64) -> Result<RunRecord> {
    let dir = run_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    write_snapshot(cfg, &dir, seed)?;
    match cfg.scenario {
        Scenario::Imitation => run_imitation(cfg, built, seed, dir),
        _ => run_rl(cfg, built, seed, dir),
    }
}

fn run_rl(cfg: &ExperimentConfig, built: &BuiltInstance, seed: u64, dir: PathBuf) -> Result<RunRecord> {
    let mdp = &built.mdp;
    let mut adversary = make_adversary(&cfg.adversary, mdp);
    let run_id = format!("{:016x}-{seed}", cfg.config_hash());
    let options = TrainingOptions {
        run_id: run_id.clone(),
        seed,
        comparator: Comparator::PerEpisodeOptimal,
        probe: cfg.output.probe,
        keep_policies: !matches!(cfg.adversary, AdversarySpec::Fixed | AdversarySpec::Constant { .. }),
    };
    let file: Box<dyn Write> = Box::new(fs::File::create(dir.join("log.csv"))?);
    let mut writer = csv::Writer::from_writer(file);
    let res = run_training(mdp, &cfg.learner, adversary.as_mut(), cfg.episodes, &options, Some(&mut writer))?;
    drop(writer);
    let summary = RunSummary::from_result(&run_id, seed, &res);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let (epochs, bound) = res.epoch_check();
    let mut violations = Vec::new();
    // realized sample count, which is tighter than L_max·K
    if epochs as f64 > bound {
        violations.push(format!("epoch count {epochs} exceeds bound {bound}"));
    }
    if cfg.output.probe {
        let v = res
            .reports
            .iter()
            .filter(|r| r.diagnostics.as_ref().is_some_and(|d| d.validity_violations == 0))
            .find(|r| {
                let d = r.diagnostics.as_ref().expect("filtered");
                d.lower_sandwich_excess > 1e-9 || d.upper_sandwich_excess > 1e-9
            });
        if let Some(r) = v {
            violations.push(format!("optimism sandwich violated at episode {}", r.episode));
        }
    }
    Ok(RunRecord {
        config_hash: cfg.config_hash(),
        seed,
        dir,
        headline: summary.final_regret,
        passed: violations.is_empty(),
        message: if violations.is_empty() {
            format!("regret {:.6} after {} episodes, {} epochs", summary.final_regret, summary.k, summary.epochs)
        } else {
            violations.join("; ")
        },
    })
}

fn run_imitation(cfg: &ExperimentConfig, built: &BuiltInstance, seed: u64, dir: PathBuf) -> Result<RunRecord> {
    let mdp = &built.mdp;
    let tab = mdp.to_tabular();
    let expert = match &built.expert {
        Some(e) => e.clone(),
        None => optimal_policy(&tab, 1e-12)?.0,
    };
    let tau_e = match cfg.adversary {
        AdversarySpec::Ogd { tau_e } => tau_e,
        _ => None,
    };
    let features = match tau_e {
        None => ExpertFeatures::Exact(feature_expectation(mdp, &tab, built.reward_dim, &expert)?),
        Some(n) => {
            let mut rng = stream(seed, Purpose::Expert, 0);
            let data = generate_expert_dataset(mdp, &expert, built.reward_dim, n, &mut rng)?;
            data.write_csv(&dir.join("expert.csv"))?;
            ExpertFeatures::Dataset(data)
        }
    };
    let res = fra_il_run(mdp, &expert, &features, built.reward_dim, cfg.episodes, &cfg.learner, seed)?;

    let v_e = return_of_policy(&tab, &expert)?;
    let mut w = csv::Writer::from_path(dir.join("log.csv"))?;
    w.write_record(["episode", "gap_k", "w_norm"])?;
    for (i, (pi, wk)) in res.policies.iter().zip(&res.weights).enumerate() {
        let gap = v_e - return_of_policy(&tab, pi)?;
        w.write_record([(i + 1).to_string(), format!("{gap:?}"), format!("{:?}", wk.norm())])?;
    }
    w.flush()?;
    let summary = ImitationSummary {
        tau_e,
        k: cfg.episodes,
        subopt: res.subopt,
        clip_events: res.clip_events,
        seeds: vec![seed],
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunRecord {
        config_hash: cfg.config_hash(),
        seed,
        dir,
        headline: res.subopt,
        passed: res.epochs.0 as f64 <= res.epochs.1,
        message: format!("mean suboptimality {:.6}, {} epochs (bound {:.1})", res.subopt, res.epochs.0, res.epochs.1),
    })
}

/// Least-squares fit of `log y = slope·log x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("need at least two (x, y) pairs of equal length".into()));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("log-log fit needs positive finite values, got {v}")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("x values are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    Ok(SlopeFit { slope, intercept, residual: (ss / n).sqrt() })
}

/// Fits `column` against the first of `K`, `k`, `episode` found in the
/// header. Needs at least 10 rows.
pub fn slope_fit(csv_path: &Path, column: &str) -> Result<SlopeFit> {
    let mut r = csv::Reader::from_path(csv_path)?;
    let header = r.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let yi = find(column).ok_or_else(|| Error::InvalidInput(format!("no column {column:?}")))?;
    let xi = ["K", "k", "episode"]
        .iter()
        .find_map(|n| find(n))
        .ok_or_else(|| Error::InvalidInput("no K/k/episode column".into()))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {:?}: {e}", &rec[i])))
        };
        xs.push(parse(xi)?);
        ys.push(parse(yi)?);
    }
    if xs.len() < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 rows, got {}", xs.len())));
    }
    fit_loglog(&xs, &ys)
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::InvalidInput(_) | Error::InvalidModel(_) | Error::Io(_) => 2,
        Error::Invariant(_) | Error::Numeric(_) | Error::Csv(_) => 1,
    }
}
