//! Scenario files, built-in presets, single runs and parameter sweeps.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contention::ModelParams;
use crate::engine::SimTime;
use crate::metrics::{summarize, MetricsError, RunMetrics};
use crate::platform::{validate_partitions, PartitionConfig, PlatformSpec};
use crate::scheduler::{SchedulerConfig, SchedulerMode};
use crate::sim::{simulate, SimError, SimInput, SimOutput};
use crate::throttle::ThrottleConfig;
use crate::workload::{
    build_attacker, build_dnn_gang, build_slam_gang, playback_source, validate_virtual_gangs,
    AccessType, AttackPattern, AttackTarget, AttackerSpec, DnnTaskSpec, GangSpec, PlaybackSpec,
    SlamPipelineSpec, DNN, FRONT_END,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSpec {
    Slam(SlamPipelineSpec),
    Playback(PlaybackSpec),
    Dnn(DnnTaskSpec),
    /// A gang described thread by thread.
    Gang(GangSpec),
    Attacker(AttackerSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default)]
    pub platform: PlatformSpec,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub throttle: ThrottleConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse(json: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = serde_json::from_str(json).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

pub fn emit(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario).expect("scenario serializes") + "\n"
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    parse(&fs::read_to_string(path)?)
}

/// A preset name or a path to a scenario file.
pub fn load_or_preset(arg: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(arg);
    if path.exists() {
        return load(path);
    }
    preset(arg).ok_or_else(|| ScenarioError::UnknownPreset(arg.to_string()))
}

fn invalid(msg: impl ToString) -> ScenarioError {
    ScenarioError::Validation(msg.to_string())
}

impl Scenario {
    pub fn gangs(&self) -> Result<Vec<GangSpec>, ScenarioError> {
        self.tasks
            .iter()
            .filter_map(|t| match t {
                TaskSpec::Slam(s) => Some(build_slam_gang(s).map_err(invalid)),
                TaskSpec::Playback(p) => Some(Ok(playback_source(p))),
                TaskSpec::Dnn(d) => Some(Ok(build_dnn_gang(d))),
                TaskSpec::Gang(g) => Some(Ok(g.clone())),
                TaskSpec::Attacker(_) => None,
            })
            .collect()
    }

    pub fn attackers(&self) -> Vec<AttackerSpec> {
        self.tasks
            .iter()
            .filter_map(|t| match t {
                TaskSpec::Attacker(a) => Some(a.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return Err(invalid("horizon_s must be positive"));
        }
        self.platform.validate().map_err(invalid)?;
        let n = self.platform.num_cores;
        if self.model.epoch_us == 0 || self.throttle.regulation_period_us == 0 {
            return Err(invalid("epoch and regulation period must be positive"));
        }
        if !(self.throttle.llc_threshold_mb_s >= 0.0) {
            return Err(invalid("llc_threshold_mb_s must be non-negative"));
        }
        if self.throttle.gpu_level >= self.platform.gpu.num_throttle_levels {
            return Err(invalid(format!(
                "gpu_level {} outside [0, {}]",
                self.throttle.gpu_level,
                self.platform.gpu.num_throttle_levels - 1
            )));
        }
        let gangs = self.gangs()?;
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for g in &gangs {
            g.validate().map_err(invalid)?;
            if !ids.insert(g.id.as_str()) {
                return Err(invalid(format!("duplicate task id {}", g.id)));
            }
            for t in &g.threads {
                if !names.insert(t.name.as_str()) {
                    return Err(invalid(format!("duplicate thread name {}", t.name)));
                }
            }
            if let Some(&c) = g.cores.iter().find(|&&c| c >= n) {
                return Err(invalid(format!("task {} uses unknown core {c}", g.id)));
            }
        }
        validate_virtual_gangs(&gangs).map_err(invalid)?;
        let mut cfg = PartitionConfig {
            gang_partitions: self.scheduler.partitions.clone(),
            ..Default::default()
        };
        for g in &gangs {
            cfg.color_assignment.insert(g.id.clone(), g.colors.clone());
        }
        for (i, a) in self.attackers().iter().enumerate() {
            build_attacker(a.pattern, a.access_type, a.target, a.target_bank).map_err(invalid)?;
            if let Some(c) = a.core.filter(|&c| c >= n) {
                return Err(invalid(format!("attacker {i} pinned to unknown core {c}")));
            }
            if let Some(b) = a.target_bank.filter(|&b| b >= self.platform.llc.num_banks) {
                return Err(invalid(format!("attacker {i} targets unknown bank {b}")));
            }
            cfg.color_assignment.insert(format!("attacker{i}"), a.colors.clone());
        }
        validate_partitions(&self.platform, &cfg).map_err(invalid)?;
        if self.scheduler.mode == SchedulerMode::RtGangPlusPlus && !cfg.gang_partitions.is_empty() {
            for g in &gangs {
                let part = cfg.gang_partitions.get(g.partition_id).ok_or_else(|| {
                    invalid(format!("task {} refers to unknown partition {}", g.id, g.partition_id))
                })?;
                if !g.cores.is_subset(part) {
                    return Err(invalid(format!(
                        "task {} runs outside partition {}",
                        g.id, g.partition_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sim_input(&self) -> Result<SimInput, ScenarioError> {
        self.validate()?;
        Ok(SimInput {
            seed: self.seed,
            horizon: SimTime::from_secs_f64(self.horizon_s),
            platform: self.platform.clone(),
            model: self.model.clone(),
            scheduler: self.scheduler.clone(),
            throttle: self.throttle.clone(),
            gangs: self.gangs()?,
            attackers: self.attackers(),
            record_schedule: false,
        })
    }

    /// Replaces every attacker's pattern, keeping placement and colours.
    pub fn with_attack(mut self, pattern: AttackPattern, access: AccessType, target: AttackTarget) -> Self {
        for t in &mut self.tasks {
            if let TaskSpec::Attacker(a) = t {
                a.pattern = pattern;
                a.access_type = access;
                a.target = target;
                a.target_bank = (pattern == AttackPattern::BkPll).then_some(a.target_bank.unwrap_or(0));
            }
        }
        self
    }

    /// Keeps the first `count` attackers, cloning the last one (unpinned)
    /// when more are requested than the scenario lists.
    pub fn with_attacker_count(mut self, count: usize) -> Self {
        let existing = self.attackers();
        let template = existing.last().cloned().unwrap_or_else(|| default_attacker(None));
        self.tasks.retain(|t| !matches!(t, TaskSpec::Attacker(_)));
        for i in 0..count {
            let a = existing.get(i).cloned().unwrap_or_else(|| AttackerSpec {
                core: None,
                ..template.clone()
            });
            self.tasks.push(TaskSpec::Attacker(a));
        }
        self
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) => 2,
            RunError::Sim(e) if e.invariant_name().is_some() => 3,
            RunError::Metrics(MetricsError::MalformedTrace { .. }) => 3,
            _ => 1,
        }
    }
}

pub fn run(scenario: &Scenario) -> Result<(SimOutput, RunMetrics), RunError> {
    let out = simulate(scenario.sim_input()?)?;
    let metrics = summarize(&out)?;
    Ok((out, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    GpuLevel,
    LlcThreshold,
    AttackerCount,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gpu_level" => Some(SweepParam::GpuLevel),
            "llc_threshold" => Some(SweepParam::LlcThreshold),
            "attacker_count" => Some(SweepParam::AttackerCount),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::GpuLevel => "gpu_level",
            SweepParam::LlcThreshold => "llc_threshold",
            SweepParam::AttackerCount => "attacker_count",
        }
    }

    pub fn apply(self, base: &Scenario, value: f64) -> Scenario {
        let mut s = base.clone();
        match self {
            SweepParam::GpuLevel => s.throttle.gpu_level = value as u32,
            SweepParam::LlcThreshold => s.throttle.llc_threshold_mb_s = value,
            SweepParam::AttackerCount => s = s.with_attacker_count(value as usize),
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    pub seed: u64,
    pub front_end_median_ms: Option<f64>,
    pub front_end_p99_ms: Option<f64>,
    pub frame_fraction: Option<f64>,
    pub dnn_avg_ms: Option<f64>,
    pub trace_hash: String,
}

/// Runs one simulation per value in parallel; run `i` uses seed
/// `base.seed + i`, so results do not depend on thread scheduling.
pub fn sweep(base: &Scenario, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>, RunError> {
    values
        .par_iter()
        .enumerate()
        .map(|(index, &value)| {
            let mut s = param.apply(base, value);
            s.seed = base.seed.wrapping_add(index as u64);
            let (_, m) = run(&s)?;
            let fe = m.latency(FRONT_END);
            Ok(SweepRow {
                index,
                value,
                seed: s.seed,
                front_end_median_ms: fe.map(|l| l.median_ms),
                front_end_p99_ms: fe.map(|l| l.p99_ms),
                frame_fraction: m.frames.as_ref().map(|f| f.processed_fraction),
                dnn_avg_ms: m.latency(DNN).map(|l| l.mean_ms),
                trace_hash: m.trace_hash,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, param: SweepParam, rows: &[SweepRow]) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    writeln!(
        w,
        "index,{},seed,front_end_median_ms,front_end_p99_ms,frame_fraction,dnn_avg_ms,trace_hash",
        param.as_str()
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.value,
            r.seed,
            opt(r.front_end_median_ms),
            opt(r.front_end_p99_ms),
            opt(r.frame_fraction),
            opt(r.dnn_avg_ms),
            r.trace_hash
        )?;
    }
    w.flush()
}

/// Parses `a..b` (inclusive, step 1), `a..b:step` or a comma list.
pub fn parse_values(spec: &str) -> Option<Vec<f64>> {
    if let Some((a, rest)) = spec.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, s)) => (b, s.parse::<f64>().ok()?),
            None => (rest, 1.0),
        };
        let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
        if !(step > 0.0) || b < a {
            return None;
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        return Some((0..=n).map(|i| a + i as f64 * step).collect());
    }
    spec.split(',').map(|v| v.trim().parse().ok()).collect()
}

pub const PRESETS: &[&str] = &[
    "arhud-solo",
    "arhud-dos",
    "arhud-dnn",
    "arhud-dnn-dos",
    "arhud-default",
];

const ARHUD_GROUP: &str = "arhud";

fn slam() -> TaskSpec {
    TaskSpec::Slam(SlamPipelineSpec {
        virtual_gang_group: Some(ARHUD_GROUP.into()),
        ..Default::default()
    })
}

fn playback() -> TaskSpec {
    TaskSpec::Playback(PlaybackSpec {
        virtual_gang_group: Some(ARHUD_GROUP.into()),
        ..Default::default()
    })
}

fn dnn() -> TaskSpec {
    TaskSpec::Dnn(DnnTaskSpec::default())
}

fn default_attacker(core: Option<usize>) -> AttackerSpec {
    let (mut a, _) = build_attacker(AttackPattern::BkPll, AccessType::Write, AttackTarget::Llc, Some(0))
        .expect("valid attacker");
    a.core = core;
    a.colors = (0..4).collect();
    a
}

fn attackers() -> impl Iterator<Item = TaskSpec> {
    (0..4).map(|c| TaskSpec::Attacker(default_attacker(Some(c))))
}

fn base(name: &str, tasks: Vec<TaskSpec>) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 1,
        horizon_s: 60.0,
        platform: PlatformSpec::default(),
        model: ModelParams::default(),
        scheduler: SchedulerConfig::default(),
        throttle: ThrottleConfig::default(),
        tasks,
        output_dir: None,
    }
}

/// Built-in scenarios. SLAM runs on cores {0, 1}, playback on core 2 and
/// the DNN on core 3 plus the GPU; best-effort attackers are pinned one
/// per core. All use plain fixed-priority scheduling except
/// `arhud-default`, which runs the full partitioned policy with the
/// attackers present.
pub fn preset(name: &str) -> Option<Scenario> {
    let s = match name {
        "arhud-solo" => base(name, vec![slam(), playback()]),
        "arhud-dos" => base(name, [slam(), playback()].into_iter().chain(attackers()).collect()),
        "arhud-dnn" => base(name, vec![slam(), playback(), dnn()]),
        "arhud-dnn-dos" => base(
            name,
            [slam(), playback(), dnn()].into_iter().chain(attackers()).collect(),
        ),
        "arhud-default" => {
            let mut s = base(
                name,
                [slam(), playback(), dnn()].into_iter().chain(attackers()).collect(),
            );
            s.scheduler = rt_gang_pp_partitions();
            s
        }
        _ => return None,
    };
    Some(s)
}

/// Two partitions: the SLAM virtual gang on {0, 1, 2}, the DNN on {3}.
pub fn rt_gang_pp_partitions() -> SchedulerConfig {
    SchedulerConfig {
        mode: SchedulerMode::RtGangPlusPlus,
        partitions: vec![[0, 1, 2].into_iter().collect(), [3].into_iter().collect()],
        ..Default::default()
    }
}

/// Switches the scheduling mode, adding the default two partitions when
/// moving to `rt-gang++` without any.
pub fn set_mode(s: &mut Scenario, mode: SchedulerMode) {
    s.scheduler.mode = mode;
    if mode == SchedulerMode::RtGangPlusPlus && s.scheduler.partitions.is_empty() {
        s.scheduler.partitions = rt_gang_pp_partitions().partitions;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let s = preset(name).unwrap();
            s.validate().unwrap();
            assert_eq!(parse(&emit(&s)).unwrap(), s, "{name}");
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&emit(&preset("arhud-solo").unwrap())).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(parse(&v.to_string()), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut s = preset("arhud-dnn").unwrap();
        s.throttle.gpu_level = 32;
        assert!(matches!(s.validate(), Err(ScenarioError::Validation(_))));
        let mut s = preset("arhud-dos").unwrap();
        if let TaskSpec::Attacker(a) = &mut s.tasks[3] {
            a.target = AttackTarget::Dram;
        }
        assert!(s.validate().is_err());
        let mut s = preset("arhud-default").unwrap();
        s.scheduler.partitions = vec![[0, 1].into_iter().collect(), [2, 3].into_iter().collect()];
        assert!(s.validate().is_err());
    }

    #[test]
    fn value_specs() {
        assert_eq!(parse_values("0..3"), Some(vec![0.0, 1.0, 2.0, 3.0]));
        assert_eq!(parse_values("0..31:10"), Some(vec![0.0, 10.0, 20.0, 30.0]));
        assert_eq!(parse_values("5, 7"), Some(vec![5.0, 7.0]));
        assert_eq!(parse_values("3..1"), None);
        assert_eq!(parse_values("x"), None);
    }

    #[test]
    fn attacker_count_and_kind() {
        let s = preset("arhud-dos").unwrap().with_attacker_count(2);
        assert_eq!(s.attackers().len(), 2);
        let s = s.with_attacker_count(6);
        assert_eq!(s.attackers().len(), 6);
        assert_eq!(s.attackers()[5].core, None);
        let s = s.with_attack(AttackPattern::Bw, AccessType::Read, AttackTarget::Dram);
        assert!(s.attackers().iter().all(|a| a.target_bank.is_none()));
        s.validate().unwrap();
    }
}
