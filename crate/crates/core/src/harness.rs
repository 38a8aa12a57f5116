//! Experiment plans, presets, the tabular oracle battery and plotting.
//!
//! A plan file is TOML with one `[[experiment]]` table per experiment:
//!
//! ```toml
//! [[experiment]]
//! name = "desk_scale"
//! algorithm = "diffdac"        # diffdac | cent_ac | tabular
//! output_dir = "runs"
//! seeds = [0, 1, 2]
//!
//! [experiment.env]
//! family = "cartpole_balance"  # cartpole_balance | pendulum | cartpole_swingup
//! tasks = "single"             # single | grid
//!
//! [experiment.net]
//! topology = "ring"            # preset | geometric | ring | complete | file
//! n_agents = 5
//!
//! [experiment.run]
//! max_episodes = 3000
//! ```
//!
//! Artifacts of seed `s` go to `<output_dir>/<name>/seed<s>/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffdac::{
    cent_ac_run, diffdac_run, read_metrics_csv, write_metrics_csv, CheckpointSink, MetricsRow, RunConfig, TaskSpec,
    AVERAGE_AGENT_ID,
};
use crate::envs::{make_gridworld, FamilyKind, TaskFamily};
use crate::error::{Error, Result};
use crate::net::{
    geometric_topology_with_degree, hastings_weights, random_geometric_topology, CombinationMatrix, NetPreset,
    Topology,
};
use crate::seeded_rng;
use crate::stats::Quartiles;
use crate::tabular::{average_mdps, random_mdp, tabular_actor_critic, value_iteration, StepSchedule, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Diffdac,
    CentAc,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelection {
    /// Every agent gets the family's single default task.
    #[default]
    Single,
    /// Agent `k` gets grid task `k`; requires as many agents as grid tasks.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: FamilyKind,
    #[serde(default)]
    pub tasks: TaskSelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Preset,
    #[default]
    Geometric,
    Ring,
    Complete,
    File,
}

/// Network description. Which fields are required depends on `topology`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub topology: TopologyKind,
    pub preset: Option<NetPreset>,
    pub n_agents: Option<usize>,
    /// Connection radius in the unit square.
    pub radius: Option<f64>,
    /// Alternative to `radius`: grow the radius until this average degree.
    pub target_degree: Option<f64>,
    pub file: Option<PathBuf>,
    pub seed: u64,
}

impl NetConfig {
    pub fn preset(preset: NetPreset) -> Self {
        Self {
            topology: TopologyKind::Preset,
            preset: Some(preset),
            ..Self::default()
        }
    }

    pub fn ring(n_agents: usize) -> Self {
        Self {
            topology: TopologyKind::Ring,
            n_agents: Some(n_agents),
            ..Self::default()
        }
    }

    /// Builds the topology; `prefix` is used for error key paths.
    pub fn build(&self, prefix: &str) -> Result<Topology> {
        let key = |k: &str| format!("{prefix}.{k}");
        let need_n = || {
            self.n_agents
                .filter(|n| *n > 0)
                .ok_or_else(|| Error::config(key("n_agents"), "required and must be > 0"))
        };
        let topo = match self.topology {
            TopologyKind::Preset => self
                .preset
                .ok_or_else(|| Error::config(key("preset"), "required when topology = \"preset\""))?
                .build(self.seed),
            TopologyKind::Ring => Topology::ring(need_n()?),
            TopologyKind::Complete => Topology::complete(need_n()?),
            TopologyKind::Geometric => {
                let n = need_n()?;
                let mut rng = seeded_rng(self.seed, &[0x6e6574, n as u64]);
                match (self.radius, self.target_degree) {
                    (Some(r), None) => random_geometric_topology(n, r, &mut rng)
                        .map_err(|e| Error::config(key("radius"), e.to_string()))?,
                    (None, Some(d)) => geometric_topology_with_degree(n, d, &mut rng)
                        .map_err(|e| Error::config(key("target_degree"), e.to_string()))?,
                    _ => {
                        return Err(Error::config(
                            key("radius"),
                            "exactly one of `radius` and `target_degree` is required",
                        ))
                    }
                }
            }
            TopologyKind::File => {
                let path = self
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::config(key("file"), "required when topology = \"file\""))?;
                Topology::load(path).map_err(|e| Error::config(key("file"), e.to_string()))?
            }
        };
        if !topo.is_connected() {
            return Err(Error::config(key("topology"), "network is not connected"));
        }
        if let Some(n) = self.n_agents {
            if n != topo.n_agents() {
                return Err(Error::config(
                    key("n_agents"),
                    format!("{n} does not match the {}-agent network", topo.n_agents()),
                ));
            }
        }
        Ok(topo)
    }
}

/// A battery of tabular instances for the oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBattery {
    pub instances: Vec<OracleInstance>,
    /// Pass threshold on `||v - v*||_inf`.
    pub tolerance: f64,
    pub max_iters: usize,
    pub schedule: StepSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleInstance {
    pub seed: u64,
    pub discount: f64,
    pub tasks: OracleTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleTasks {
    Random {
        n_tasks: usize,
        n_states: usize,
        n_actions: usize,
    },
    Gridworld {
        n_tasks: usize,
        side: usize,
        noise: f64,
    },
    /// `n_tasks` copies of one random MDP.
    Identical {
        n_tasks: usize,
        n_states: usize,
        n_actions: usize,
    },
}

impl OracleInstance {
    pub fn build(&self) -> Result<Vec<TabularMdp>> {
        let mut rng = seeded_rng(self.seed, &[0x6f7261]);
        match self.tasks {
            OracleTasks::Random {
                n_tasks,
                n_states,
                n_actions,
            } => (0..n_tasks)
                .map(|_| random_mdp(n_states, n_actions, self.discount, &mut rng))
                .collect(),
            OracleTasks::Gridworld { n_tasks, side, noise } => (0..n_tasks)
                .map(|_| make_gridworld(side, noise, self.discount, &mut rng))
                .collect(),
            OracleTasks::Identical {
                n_tasks,
                n_states,
                n_actions,
            } => {
                let m = random_mdp(n_states, n_actions, self.discount, &mut rng)?;
                Ok(vec![m; n_tasks])
            }
        }
    }
}

impl OracleBattery {
    fn with(instances: Vec<OracleInstance>) -> Self {
        Self {
            instances,
            tolerance: 1e-2,
            max_iters: 10_000,
            schedule: StepSchedule::default(),
        }
    }

    /// Ten seeded instances of 2-5 random tasks, 9-25 states, 3-4 actions.
    pub fn standard() -> Self {
        Self::with(
            (0..10u64)
                .map(|i| OracleInstance {
                    seed: i,
                    discount: 0.9,
                    tasks: OracleTasks::Random {
                        n_tasks: 2 + (i as usize % 4),
                        n_states: 9 + (i as usize * 7) % 17,
                        n_actions: 3 + (i as usize % 2),
                    },
                })
                .collect(),
        )
    }

    /// Ten seeded pairs of 3x3 gridworlds.
    pub fn gridworlds() -> Self {
        Self::with(
            (0..10u64)
                .map(|i| OracleInstance {
                    seed: 100 + i,
                    discount: 0.9,
                    tasks: OracleTasks::Gridworld {
                        n_tasks: 2,
                        side: 3,
                        noise: 0.1,
                    },
                })
                .collect(),
        )
    }

    pub fn identical() -> Self {
        Self::with(
            (0..5u64)
                .map(|i| OracleInstance {
                    seed: 200 + i,
                    discount: 0.9,
                    tasks: OracleTasks::Identical {
                        n_tasks: 3,
                        n_states: 12,
                        n_actions: 3,
                    },
                })
                .collect(),
        )
    }

    pub fn empty() -> Self {
        Self::with(Vec::new())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "gridworld" => Ok(Self::gridworlds()),
            "identical" => Ok(Self::identical()),
            "empty" => Ok(Self::empty()),
            other => Err(Error::Argument(format!(
                "unknown battery `{other}` (standard, gridworld, identical, empty)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub seed: u64,
    pub n_tasks: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `||v - v*||_inf` against value iteration on the averaged MDP.
    pub error: f64,
    pub iterations: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn is_vacuous(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn failing_seeds(&self) -> Vec<u64> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.seed).collect()
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().fold(0.0, |m, c| m.max(c.error))
    }
}

/// Runs the tabular dual-ascent actor-critic on every instance and
/// compares its value with value iteration on the averaged MDP.
pub fn oracle_check(battery: &OracleBattery) -> Result<OracleReport> {
    let mut cases = Vec::with_capacity(battery.instances.len());
    for inst in &battery.instances {
        let tasks = inst.build()?;
        let avg = average_mdps(&tasks)?;
        let v_star = value_iteration(&avg, 1e-12, 100_000)?;
        let sol = tabular_actor_critic(&tasks, battery.schedule, battery.max_iters, 1e-9)?;
        let error = (&sol.value - &v_star).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        cases.push(OracleCase {
            seed: inst.seed,
            n_tasks: tasks.len(),
            n_states: avg.n_states(),
            n_actions: avg.n_actions(),
            error,
            iterations: sol.iterations,
            passed: error <= battery.tolerance,
        });
    }
    Ok(OracleReport {
        cases,
        tolerance: battery.tolerance,
    })
}

/// One experiment of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// Battery for `algorithm = "tabular"`; defaults to the standard one.
    #[serde(default)]
    pub oracle: Option<OracleBattery>,
}

/// A validated experiment, ready to launch.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: ExperimentConfig,
    pub topology: Option<Topology>,
    pub combination: Option<CombinationMatrix>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub experiment: Vec<ExperimentConfig>,
}

impl PlanFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: PlanFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if plan.experiment.is_empty() {
            return Err(Error::config("experiment", "plan has no experiments"));
        }
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize plan: {e}")))
    }

    /// Replaces seeds and/or output directory of every experiment.
    pub fn apply_overrides(&mut self, seed: Option<u64>, output_dir: Option<&Path>) {
        for e in &mut self.experiment {
            if let Some(s) = seed {
                e.seeds = vec![s];
            }
            if let Some(d) = output_dir {
                e.output_dir = d.to_path_buf();
            }
        }
    }

    pub fn validate(&self) -> Result<Vec<ExperimentPlan>> {
        let mut names = std::collections::BTreeSet::new();
        let plans = self
            .experiment
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if !names.insert(e.name.clone()) {
                    return Err(Error::config(
                        format!("experiment[{i}].name"),
                        format!("duplicate name `{}`", e.name),
                    ));
                }
                e.validate(&format!("experiment[{i}]"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(plans)
    }
}

impl ExperimentConfig {
    pub fn validate(&self, prefix: &str) -> Result<ExperimentPlan> {
        let key = |k: &str| format!("{prefix}.{k}");
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::config(key("name"), "must be a non-empty plain file name"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(key("seeds"), "at least one seed is required"));
        }
        // TOML integers are signed 64-bit.
        if let Some(s) = self.seeds.iter().find(|s| **s > i64::MAX as u64) {
            return Err(Error::config(key("seeds"), format!("seed {s} exceeds {}", i64::MAX)));
        }
        if self.net.seed > i64::MAX as u64 {
            return Err(Error::config(key("net.seed"), format!("exceeds {}", i64::MAX)));
        }
        if self.algorithm == Algorithm::Tabular {
            let battery = self.oracle.clone().unwrap_or_else(OracleBattery::standard);
            if !(battery.tolerance > 0.0) || battery.max_iters == 0 {
                return Err(Error::config(key("oracle"), "tolerance and max_iters must be positive"));
            }
            for (j, inst) in battery.instances.iter().enumerate() {
                if !(0.0..1.0).contains(&inst.discount) {
                    return Err(Error::config(
                        format!("{prefix}.oracle.instances[{j}].discount"),
                        "must lie in [0, 1)",
                    ));
                }
            }
            return Ok(ExperimentPlan {
                config: self.clone(),
                topology: None,
                combination: None,
                tasks: Vec::new(),
            });
        }
        self.run.validate().map_err(|e| match e {
            Error::Config { key: k, message } => Error::Config {
                key: format!("{prefix}.{k}"),
                message,
            },
            other => other,
        })?;
        let topology = self.net.build(&key("net"))?;
        let combination = hastings_weights(&topology)?;
        let n = topology.n_agents();
        let family = TaskFamily::standard(self.env.family);
        let tasks: Vec<TaskSpec> = match self.env.tasks {
            TaskSelection::Single => vec![
                TaskSpec {
                    kind: family.kind,
                    params: family.single_task,
                };
                n
            ],
            TaskSelection::Grid => {
                if family.grid.len() != n {
                    return Err(Error::config(
                        key("env.tasks"),
                        format!("grid has {} tasks but the network has {n} agents", family.grid.len()),
                    ));
                }
                family
                    .grid
                    .iter()
                    .map(|p| TaskSpec {
                        kind: family.kind,
                        params: *p,
                    })
                    .collect()
            }
        };
        Ok(ExperimentPlan {
            config: self.clone(),
            topology: Some(topology),
            combination: Some(combination),
            tasks,
        })
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// The named plans.
pub const PRESETS: [&str; 6] = [
    "cartpole_balance_single_n25",
    "topology_study",
    "comparison",
    "desk_scale",
    "comparison_long",
    "oracle",
];

fn base(name: &str, algorithm: Algorithm, family: FamilyKind, tasks: TaskSelection, net: NetConfig) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        algorithm,
        output_dir: PathBuf::from("runs"),
        seeds: (0..6).collect(),
        env: EnvConfig { family, tasks },
        net,
        run: RunConfig::default(),
        oracle: None,
    }
}

pub fn preset(name: &str) -> Result<PlanFile> {
    use FamilyKind::CartpoleBalance as Balance;
    let experiment = match name {
        "cartpole_balance_single_n25" => vec![base(
            name,
            Algorithm::Diffdac,
            Balance,
            TaskSelection::Single,
            NetConfig::preset(NetPreset::N25Sparse),
        )],
        "topology_study" => [NetPreset::N25Sparse, NetPreset::N25Dense, NetPreset::N100]
            .into_iter()
            .map(|p| {
                base(
                    &format!("topology_{}", p.name()),
                    Algorithm::Diffdac,
                    Balance,
                    TaskSelection::Single,
                    NetConfig::preset(p),
                )
            })
            .collect(),
        "comparison" | "comparison_long" => {
            let mut out: Vec<ExperimentConfig> = [
                ("diffdac", Algorithm::Diffdac),
                ("cent_ac", Algorithm::CentAc),
            ]
            .into_iter()
            .map(|(label, alg)| {
                base(
                    &format!("{name}_{label}"),
                    alg,
                    Balance,
                    TaskSelection::Grid,
                    NetConfig::preset(NetPreset::N25Sparse),
                )
            })
            .collect();
            if name == "comparison" {
                for e in &mut out {
                    e.seeds = vec![0, 1];
                    e.run.max_episodes = 100;
                    e.run.hidden = vec![64, 64];
                }
            } else {
                for e in &mut out {
                    e.run.max_episodes = 6000;
                }
            }
            out
        }
        "desk_scale" => {
            let mut e = base(name, Algorithm::Diffdac, Balance, TaskSelection::Single, NetConfig::ring(5));
            e.run.target_return = Some(150.0);
            vec![e]
        }
        "oracle" => {
            let mut e = base(name, Algorithm::Tabular, Balance, TaskSelection::Single, NetConfig::default());
            e.seeds = vec![0];
            e.oracle = Some(OracleBattery::standard());
            vec![e]
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown preset `{other}`; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(PlanFile { experiment })
}

/// One line of run output per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub experiment: String,
    pub seed: u64,
    pub episodes_per_agent: usize,
    pub final_median_return: f64,
    pub best_median_return: f64,
    pub reached_target_at: Option<usize>,
    pub metrics_path: Option<PathBuf>,
    /// Oracle cases that exceeded tolerance (tabular runs only).
    pub failing_seeds: Vec<u64>,
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} seed {}: episodes/agent {}, final median return {:.2}, best {:.2}",
            self.experiment, self.seed, self.episodes_per_agent, self.final_median_return, self.best_median_return
        )?;
        if let Some(ep) = self.reached_target_at {
            write!(f, ", target reached at {ep}")?;
        }
        if !self.failing_seeds.is_empty() {
            write!(f, ", FAILED oracle seeds {:?}", self.failing_seeds)?;
        }
        if let Some(p) = &self.metrics_path {
            write!(f, " -> {}", p.display())?;
        }
        Ok(())
    }
}

/// Runs one validated experiment for every seed, writing artifacts.
pub fn run_experiment(plan: &ExperimentPlan, mut on_seed: impl FnMut(&SeedSummary)) -> Result<Vec<SeedSummary>> {
    let cfg = &plan.config;
    let dir = cfg.experiment_dir();
    std::fs::create_dir_all(&dir)?;
    let single = PlanFile {
        experiment: vec![cfg.clone()],
    };
    std::fs::write(dir.join("config.toml"), single.to_toml_string()?)?;
    if let Some(topo) = &plan.topology {
        topo.save(dir.join("topology.txt"))?;
    }
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let summary = match cfg.algorithm {
            Algorithm::Tabular => {
                let battery = cfg.oracle.clone().unwrap_or_else(OracleBattery::standard);
                let report = oracle_check(&battery)?;
                let path = seed_dir.join("oracle.csv");
                write_oracle_csv(&path, &report)?;
                SeedSummary {
                    experiment: cfg.name.clone(),
                    seed,
                    episodes_per_agent: 0,
                    final_median_return: f64::NAN,
                    best_median_return: f64::NAN,
                    reached_target_at: None,
                    metrics_path: Some(path),
                    failing_seeds: report.failing_seeds(),
                }
            }
            Algorithm::Diffdac | Algorithm::CentAc => {
                let run = RunConfig {
                    seed,
                    ..cfg.run.clone()
                };
                let sink = CheckpointSink::at(&seed_dir);
                let art = if cfg.algorithm == Algorithm::Diffdac {
                    let c = plan.combination.as_ref().expect("validated plan has a network");
                    diffdac_run(&run, c, &plan.tasks, &sink)?
                } else {
                    cent_ac_run(&run, &plan.tasks, &sink)?
                };
                let path = seed_dir.join("metrics.csv");
                write_metrics_csv(&path, &art.metrics)?;
                let medians: Vec<f64> = art.evals.iter().map(|e| e.median_agent_return()).collect();
                SeedSummary {
                    experiment: cfg.name.clone(),
                    seed,
                    episodes_per_agent: art.episodes_per_agent,
                    final_median_return: medians.last().copied().unwrap_or(f64::NAN),
                    best_median_return: medians.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    reached_target_at: art.reached_target_at,
                    metrics_path: Some(path),
                    failing_seeds: Vec::new(),
                }
            }
        };
        on_seed(&summary);
        out.push(summary);
    }
    Ok(out)
}

fn write_oracle_csv(path: &Path, report: &OracleReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "n_tasks", "n_states", "n_actions", "error", "iterations", "passed"])?;
    for c in &report.cases {
        w.write_record([
            c.seed.to_string(),
            c.n_tasks.to_string(),
            c.n_states.to_string(),
            c.n_actions.to_string(),
            format!("{:e}", c.error),
            c.iterations.to_string(),
            c.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Learning-curve statistics of one plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub episodes: usize,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

/// Quartiles over seeds x tasks of the per-agent mean returns at each
/// evaluation point. Network-average rows are used only when a file has
/// no per-agent rows.
pub fn curve_from_rows(label: &str, rows: &[MetricsRow]) -> Series {
    let has_agents = rows.iter().any(|r| r.agent_id != AVERAGE_AGENT_ID);
    let mut by_ep: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if (r.agent_id != AVERAGE_AGENT_ID) == has_agents {
            by_ep.entry(r.episodes_per_agent).or_default().push(r.return_mean);
        }
    }
    Series {
        label: label.into(),
        points: by_ep
            .into_iter()
            .map(|(episodes, v)| CurvePoint {
                episodes,
                quartiles: Quartiles::of(&v),
            })
            .collect(),
    }
}

/// Groups `label=path` (or bare `path`) inputs into series. Files sharing a
/// label are pooled, e.g. several seeds of one algorithm.
pub fn load_series(inputs: &[String]) -> Result<Vec<Series>> {
    let mut groups: Vec<(String, Vec<MetricsRow>)> = Vec::new();
    for input in inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) if !l.is_empty() => (l.to_string(), PathBuf::from(p)),
            _ => {
                let p = PathBuf::from(input);
                (default_label(&p), p)
            }
        };
        let rows = read_metrics_csv(&path)?;
        if rows.is_empty() {
            return Err(Error::Parse(format!("{}: no metrics rows", path.display())));
        }
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, all)) => all.extend(rows),
            None => groups.push((label, rows)),
        }
    }
    if groups.is_empty() {
        return Err(Error::Argument("no input CSVs".into()));
    }
    Ok(groups.iter().map(|(l, rows)| curve_from_rows(l, rows)).collect())
}

fn default_label(path: &Path) -> String {
    // runs/<experiment>/seed<s>/metrics.csv -> <experiment>
    let parent = path.parent();
    let is_seed_dir = parent
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("seed"));
    let named = if is_seed_dir { parent.and_then(Path::parent) } else { parent };
    named
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads the CSVs and writes the SVG plot. Nothing is written on error.
pub fn plot(inputs: &[String], output: impl AsRef<Path>, title: &str) -> Result<()> {
    let series = load_series(inputs)?;
    let svg = render_svg(&series, title);
    std::fs::write(output, svg)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Median line and interquartile band per series, as a standalone SVG.
pub fn render_svg(series: &[Series], title: &str) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let points = series.iter().flat_map(|s| s.points.iter());
    let x_max = points.clone().map(|p| p.episodes).max().unwrap_or(1).max(1) as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in points {
        for v in [p.quartiles.q1, p.quartiles.median, p.quartiles.q3] {
            if v.is_finite() {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    let (y_lo, y_hi, y_step) = nice_range(y_min, y_max);
    let (_, x_hi, x_step) = nice_range(0.0, x_max);
    let sx = |x: f64| left + pw * x / x_hi;
    let sy = |y: f64| top + ph * (1.0 - (y - y_lo) / (y_hi - y_lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    // Grid and ticks.
    let mut y = y_lo;
    while y <= y_hi + 1e-9 * y_step {
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0,
            fmt_tick(y)
        );
        y += y_step;
    }
    let mut x = 0.0;
    while x <= x_hi + 1e-9 * x_step {
        let px = sx(x);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{top:.1}" x2="{px:.1}" y2="{:.1}" stroke="#eeeeee"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 18.0,
            fmt_tick(x)
        );
        x += x_step;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Episodes per agent</text>"#,
        left + pw / 2.0,
        h - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">Return</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<&CurvePoint> = ser.points.iter().filter(|p| p.quartiles.median.is_finite()).collect();
        if !pts.is_empty() {
            let mut band = String::new();
            for p in &pts {
                let _ = write!(band, "{:.2},{:.2} ", sx(p.episodes as f64), sy(p.quartiles.q3));
            }
            for p in pts.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", sx(p.episodes as f64), sy(p.quartiles.q1));
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.25" stroke="none"/>"#,
                band.trim_end()
            );
            let line: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.episodes as f64), sy(p.quartiles.median)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let span = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let lo_n = (lo / step).floor() * step;
    let mut hi_n = (hi / step).ceil() * step;
    if hi_n <= lo_n {
        hi_n = lo_n + step;
    }
    (lo_n, hi_n, step)
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let plan = preset(name).unwrap();
            plan.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn preset_shapes() {
        let p = preset("cartpole_balance_single_n25").unwrap().validate().unwrap();
        let topo = p[0].topology.as_ref().unwrap();
        assert_eq!(topo.n_agents(), 25);
        assert!((topo.average_degree() - 4.2).abs() < 0.5);
        let study = preset("topology_study").unwrap().validate().unwrap();
        let sizes: Vec<usize> = study.iter().map(|e| e.tasks.len()).collect();
        assert_eq!(sizes, vec![25, 25, 100]);
    }

    #[test]
    fn config_round_trip() {
        for name in PRESETS {
            let plan = preset(name).unwrap();
            let text = plan.to_toml_string().unwrap();
            let back = PlanFile::from_toml_str(&text).unwrap();
            assert_eq!(back, plan, "{name}");
            assert_eq!(back.to_toml_string().unwrap(), text);
        }
    }

    #[test]
    fn validation_reports_key_paths() {
        let mut plan = preset("desk_scale").unwrap();
        plan.experiment[0].run.discount = 1.5;
        match plan.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "experiment[0].run.discount"),
            other => panic!("{other:?}"),
        }
        let mut plan = preset("desk_scale").unwrap();
        plan.experiment[0].env.tasks = TaskSelection::Grid;
        match plan.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "experiment[0].env.tasks"),
            other => panic!("{other:?}"),
        }
        let mut plan = preset("desk_scale").unwrap();
        plan.experiment[0].run.actor_rate.initial = 0.5;
        assert!(matches!(plan.validate(), Err(Error::Config { .. })));
        assert!(matches!(
            PlanFile::from_toml_str("[[experiment]]\nname = 3"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn overrides() {
        let mut plan = preset("topology_study").unwrap();
        plan.apply_overrides(Some(9), Some(Path::new("/tmp/x")));
        assert!(plan.experiment.iter().all(|e| e.seeds == vec![9] && e.output_dir == Path::new("/tmp/x")));
    }

    #[test]
    fn identical_battery_averages_to_the_task() {
        for inst in OracleBattery::identical().instances {
            let tasks = inst.build().unwrap();
            let avg = average_mdps(&tasks).unwrap();
            for (x, y) in avg.transition().iter().zip(tasks[0].transition()) {
                assert!((x - y).abs() <= 1e-15);
            }
            for (x, y) in avg.reward().iter().zip(tasks[0].reward()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn empty_battery_is_vacuous() {
        let r = oracle_check(&OracleBattery::empty()).unwrap();
        assert!(r.is_vacuous() && r.passed());
    }

    #[test]
    fn nice_ranges() {
        assert_eq!(nice_range(0.0, 200.0), (0.0, 200.0, 50.0));
        let (lo, hi, step) = nice_range(0.0, 0.0);
        assert!(lo == 0.0 && hi > lo && step > 0.0);
    }

    #[test]
    fn curve_uses_agent_rows() {
        let row = |agent: &str, ep, r| MetricsRow {
            epoch: 0,
            episodes_per_agent: ep,
            agent_id: agent.into(),
            task_id: 0,
            return_mean: r,
            return_median: r,
            return_q1: r,
            return_q3: r,
            param_disagreement: 0.0,
        };
        let rows = vec![row("0", 0, 1.0), row("1", 0, 3.0), row("mean", 0, 100.0), row("0", 5, 2.0)];
        let c = curve_from_rows("x", &rows);
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[0].quartiles.median, 2.0);
        let svg = render_svg(&[c], "t");
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
