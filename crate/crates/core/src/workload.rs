//! Task generators for the AR-HUD case study: the three-thread SLAM gang,
//! the dataset playback source, the periodic GPU DNN task and the DoS
//! attacker family.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::platform::{BankId, Color, CoreId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessType {
    #[default]
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSpread {
    #[default]
    Uniform,
    SingleBank(BankId),
}

/// Per-job resource demand. Accesses are interleaved uniformly with the
/// compute work; `mlp` is the number of accesses the stream keeps in flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandProfile {
    pub cpu_cycles: u64,
    pub llc_accesses: u64,
    pub dram_accesses: u64,
    pub bank_spread: BankSpread,
    pub access_type: AccessType,
    pub mlp: f64,
}

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile {
            cpu_cycles: 0,
            llc_accesses: 0,
            dram_accesses: 0,
            bank_spread: BankSpread::Uniform,
            access_type: AccessType::Read,
            mlp: 1.0,
        }
    }
}

impl DemandProfile {
    pub fn compute(cpu_cycles: u64) -> Self {
        DemandProfile {
            cpu_cycles,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if matches!(self.bank_spread, BankSpread::SingleBank(_)) && self.llc_accesses == 0 {
            return Err(WorkloadError::SingleBankWithoutLlc);
        }
        if !(self.mlp >= 1.0) {
            return Err(WorkloadError::BadMlp(self.mlp));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    /// Releases at `offset + k * period`.
    Periodic {
        period_ns: u64,
        deadline_ns: u64,
        #[serde(default)]
        offset_ns: u64,
    },
    /// Released when a job of `trigger` (same gang) completes, with the given
    /// probability drawn from the gang's private rng stream.
    EventDriven {
        trigger: String,
        #[serde(default = "one")]
        probability: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// GPU kernel issued after the thread's CPU work; the thread holds its core
/// until the kernel finishes when `hold_core` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuPhase {
    pub compute_ns: u64,
    pub mem_bytes: u64,
    #[serde(default = "yes")]
    pub hold_core: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    pub name: String,
    pub core: CoreId,
    pub activation: Activation,
    pub demand: DemandProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<GpuPhase>,
}

impl ThreadSpec {
    pub fn period(&self) -> Option<u64> {
        match self.activation {
            Activation::Periodic { period_ns, .. } => Some(period_ns),
            Activation::EventDriven { .. } => None,
        }
    }

    pub fn deadline(&self) -> Option<u64> {
        match self.activation {
            Activation::Periodic { deadline_ns, .. } => Some(deadline_ns),
            Activation::EventDriven { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GangSpec {
    pub id: String,
    pub threads: Vec<ThreadSpec>,
    pub cores: BTreeSet<CoreId>,
    /// Higher is more important.
    pub rt_priority: u32,
    #[serde(default)]
    pub partition_id: usize,
    pub colors: BTreeSet<Color>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_gang_group: Option<String>,
    /// Seed of the gang's private rng (event-driven activations).
    #[serde(default)]
    pub seed: u64,
}

impl GangSpec {
    /// Smallest period among periodic threads.
    pub fn period(&self) -> Option<u64> {
        self.threads.iter().filter_map(ThreadSpec::period).min()
    }

    pub fn thread(&self, name: &str) -> Option<&ThreadSpec> {
        self.threads.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut names = BTreeSet::new();
        for t in &self.threads {
            if !names.insert(t.name.as_str()) {
                return Err(WorkloadError::DuplicateThread(t.name.clone()));
            }
            if !self.cores.contains(&t.core) {
                return Err(WorkloadError::ThreadOffGang {
                    thread: t.name.clone(),
                    core: t.core,
                });
            }
            t.demand.validate()?;
            match &t.activation {
                Activation::Periodic {
                    period_ns,
                    deadline_ns,
                    ..
                } => {
                    if *period_ns == 0 || deadline_ns > period_ns {
                        return Err(WorkloadError::BadPeriod(t.name.clone()));
                    }
                }
                Activation::EventDriven {
                    trigger,
                    probability,
                } => {
                    if !(0.0..=1.0).contains(probability) {
                        return Err(WorkloadError::BadProbability(*probability));
                    }
                    if self.thread(trigger).is_none() {
                        return Err(WorkloadError::UnknownTrigger(trigger.clone()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackPattern {
    Bw,
    #[serde(rename = "PLL")]
    Pll,
    #[serde(rename = "BkPLL")]
    BkPll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackTarget {
    #[serde(rename = "LLC")]
    Llc,
    #[serde(rename = "DRAM")]
    Dram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSpec {
    pub pattern: AttackPattern,
    pub access_type: AccessType,
    pub target: AttackTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_bank: Option<BankId>,
    /// Pinned core, or any free core when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core: Option<CoreId>,
    pub colors: BTreeSet<Color>,
}

impl AttackerSpec {
    /// `<pattern><access>(<target>)`, e.g. `BwRead(LLC)`.
    pub fn name(&self) -> String {
        attack_name(self.pattern, self.access_type, self.target)
    }
}

pub fn attack_name(pattern: AttackPattern, access: AccessType, target: AttackTarget) -> String {
    let p = match pattern {
        AttackPattern::Bw => "Bw",
        AttackPattern::Pll => "PLL",
        AttackPattern::BkPll => "BkPLL",
    };
    let a = match access {
        AccessType::Read => "Read",
        AccessType::Write => "Write",
    };
    let t = match target {
        AttackTarget::Llc => "LLC",
        AttackTarget::Dram => "DRAM",
    };
    format!("{p}{a}({t})")
}

/// The ten attacker variants used in the study.
pub fn all_attack_variants() -> Vec<(AttackPattern, AccessType, AttackTarget)> {
    let mut v = Vec::new();
    for pattern in [AttackPattern::Bw, AttackPattern::Pll, AttackPattern::BkPll] {
        for access in [AccessType::Read, AccessType::Write] {
            for target in [AttackTarget::Llc, AttackTarget::Dram] {
                if pattern == AttackPattern::BkPll && target == AttackTarget::Dram {
                    continue;
                }
                v.push((pattern, access, target));
            }
        }
    }
    v
}

/// Outstanding accesses per attacker pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerIntensity {
    pub bw_mlp: f64,
    pub pll_mlp: f64,
    pub bkpll_mlp: f64,
}

impl Default for AttackerIntensity {
    fn default() -> Self {
        AttackerIntensity {
            bw_mlp: 4.0,
            pll_mlp: 6.0,
            bkpll_mlp: 6.0,
        }
    }
}

impl AttackerIntensity {
    pub fn mlp(&self, pattern: AttackPattern) -> f64 {
        match pattern {
            AttackPattern::Bw => self.bw_mlp,
            AttackPattern::Pll => self.pll_mlp,
            AttackPattern::BkPll => self.bkpll_mlp,
        }
    }
}

pub fn build_attacker(
    pattern: AttackPattern,
    access_type: AccessType,
    target: AttackTarget,
    bank: Option<BankId>,
) -> Result<(AttackerSpec, DemandProfile), WorkloadError> {
    build_attacker_with(pattern, access_type, target, bank, &AttackerIntensity::default())
}

/// Attackers never complete; the returned profile describes one unit of
/// their endless access stream.
pub fn build_attacker_with(
    pattern: AttackPattern,
    access_type: AccessType,
    target: AttackTarget,
    bank: Option<BankId>,
    intensity: &AttackerIntensity,
) -> Result<(AttackerSpec, DemandProfile), WorkloadError> {
    if pattern == AttackPattern::BkPll && target == AttackTarget::Dram {
        return Err(WorkloadError::InvalidCombination(attack_name(
            pattern,
            access_type,
            target,
        )));
    }
    let target_bank = match pattern {
        AttackPattern::BkPll => Some(bank.unwrap_or(0)),
        _ => None,
    };
    let spec = AttackerSpec {
        pattern,
        access_type,
        target,
        target_bank,
        core: None,
        colors: BTreeSet::new(),
    };
    let profile = attacker_profile(&spec, intensity);
    Ok((spec, profile))
}

pub fn attacker_profile(spec: &AttackerSpec, intensity: &AttackerIntensity) -> DemandProfile {
    let (llc, dram) = match spec.target {
        AttackTarget::Llc => (1, 0),
        AttackTarget::Dram => (0, 1),
    };
    DemandProfile {
        cpu_cycles: 0,
        llc_accesses: llc,
        dram_accesses: dram,
        bank_spread: match spec.target_bank {
            Some(b) if spec.pattern == AttackPattern::BkPll => BankSpread::SingleBank(b),
            _ => BankSpread::Uniform,
        },
        access_type: spec.access_type,
        mlp: intensity.mlp(spec.pattern),
    }
}

pub const FRONT_END: &str = "FrontEnd";
pub const MAPPING: &str = "Mapping";
pub const STATE_OPT: &str = "StateOpt";
pub const PLAYBACK: &str = "playback";

/// `ms` of pure compute at 1.43 GHz, in cycles.
const fn cycles_for_ms(ms: u64) -> u64 {
    ms * 1_430_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamPipelineSpec {
    pub frame_rate_hz: f64,
    pub keyframe_probability: f64,
    pub front_end: DemandProfile,
    pub mapping: DemandProfile,
    pub state_opt: DemandProfile,
    pub seed: u64,
    pub front_end_core: CoreId,
    pub backend_core: CoreId,
    pub rt_priority: u32,
    pub partition_id: usize,
    pub colors: BTreeSet<Color>,
    pub virtual_gang_group: Option<String>,
}

impl Default for SlamPipelineSpec {
    fn default() -> Self {
        // Solo latencies on the default platform: FrontEnd ~30 ms,
        // Mapping ~40 ms, StateOpt ~60 ms (the most memory-bound thread).
        SlamPipelineSpec {
            frame_rate_hz: 20.0,
            keyframe_probability: 0.3,
            front_end: DemandProfile {
                cpu_cycles: cycles_for_ms(20),
                llc_accesses: 300_000,
                dram_accesses: 33_333,
                ..Default::default()
            },
            mapping: DemandProfile {
                cpu_cycles: cycles_for_ms(26),
                llc_accesses: 400_000,
                dram_accesses: 50_000,
                ..Default::default()
            },
            state_opt: DemandProfile {
                cpu_cycles: cycles_for_ms(24),
                llc_accesses: 1_000_000,
                dram_accesses: 133_333,
                ..Default::default()
            },
            seed: 0,
            front_end_core: 0,
            backend_core: 1,
            rt_priority: 2,
            partition_id: 0,
            colors: [0, 1].into_iter().collect(),
            virtual_gang_group: None,
        }
    }
}

pub fn period_ns_for_rate(rate_hz: f64) -> Option<u64> {
    (rate_hz > 0.0).then(|| (1e9 / rate_hz).round() as u64)
}

pub fn build_slam_gang(spec: &SlamPipelineSpec) -> Result<GangSpec, WorkloadError> {
    if !(0.0..=1.0).contains(&spec.keyframe_probability) {
        return Err(WorkloadError::BadProbability(spec.keyframe_probability));
    }
    let period = period_ns_for_rate(spec.frame_rate_hz)
        .ok_or_else(|| WorkloadError::BadPeriod(FRONT_END.into()))?;
    let gang = GangSpec {
        id: "slam".into(),
        threads: vec![
            ThreadSpec {
                name: FRONT_END.into(),
                core: spec.front_end_core,
                activation: Activation::Periodic {
                    period_ns: period,
                    deadline_ns: period,
                    offset_ns: 0,
                },
                demand: spec.front_end.clone(),
                gpu: None,
            },
            ThreadSpec {
                name: MAPPING.into(),
                core: spec.backend_core,
                activation: Activation::EventDriven {
                    trigger: FRONT_END.into(),
                    probability: spec.keyframe_probability,
                },
                demand: spec.mapping.clone(),
                gpu: None,
            },
            ThreadSpec {
                name: STATE_OPT.into(),
                core: spec.backend_core,
                activation: Activation::EventDriven {
                    trigger: MAPPING.into(),
                    probability: 1.0,
                },
                demand: spec.state_opt.clone(),
                gpu: None,
            },
        ],
        cores: [spec.front_end_core, spec.backend_core].into_iter().collect(),
        rt_priority: spec.rt_priority,
        partition_id: spec.partition_id,
        colors: spec.colors.clone(),
        virtual_gang_group: spec.virtual_gang_group.clone(),
        seed: spec.seed,
    };
    gang.validate()?;
    Ok(gang)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaybackSpec {
    pub rate_hz: f64,
    pub core: CoreId,
    pub rt_priority: u32,
    pub cpu_cycles: u64,
    pub partition_id: usize,
    pub colors: BTreeSet<Color>,
    pub virtual_gang_group: Option<String>,
}

impl Default for PlaybackSpec {
    fn default() -> Self {
        PlaybackSpec {
            rate_hz: 20.0,
            core: 2,
            rt_priority: 2,
            // 3.75 ms per 50 ms frame: 7.5 % of one core.
            cpu_cycles: 5_362_500,
            partition_id: 0,
            colors: [2, 3].into_iter().collect(),
            virtual_gang_group: None,
        }
    }
}

/// Periodic dataset playback task. A zero rate yields a gang with no
/// threads, which never releases.
pub fn playback_source(spec: &PlaybackSpec) -> GangSpec {
    let threads = match period_ns_for_rate(spec.rate_hz) {
        Some(period) => vec![ThreadSpec {
            name: PLAYBACK.into(),
            core: spec.core,
            activation: Activation::Periodic {
                period_ns: period,
                deadline_ns: period,
                offset_ns: 0,
            },
            demand: DemandProfile::compute(spec.cpu_cycles),
            gpu: None,
        }],
        None => Vec::new(),
    };
    GangSpec {
        id: PLAYBACK.into(),
        threads,
        cores: [spec.core].into_iter().collect(),
        rt_priority: spec.rt_priority,
        partition_id: spec.partition_id,
        colors: spec.colors.clone(),
        virtual_gang_group: spec.virtual_gang_group.clone(),
        seed: 0,
    }
}

pub fn utilization(gang: &GangSpec, core_freq_hz: f64) -> f64 {
    gang.threads
        .iter()
        .filter_map(|t| {
            t.period()
                .map(|p| t.demand.cpu_cycles as f64 / core_freq_hz / (p as f64 * 1e-9))
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnTaskSpec {
    pub rate_hz: f64,
    pub cpu_launch_cycles: u64,
    pub gpu_compute_ns: u64,
    pub gpu_mem_bytes: u64,
    pub core: CoreId,
    pub rt_priority: u32,
    pub partition_id: usize,
    pub colors: BTreeSet<Color>,
    pub hold_core: bool,
}

impl Default for DnnTaskSpec {
    fn default() -> Self {
        // 34.2 ms solo at throttle level 0 on the default platform:
        // 0.5 ms launch + 3.5 ms GPU compute + 30.23 ms of DRAM traffic.
        DnnTaskSpec {
            rate_hz: 20.0,
            cpu_launch_cycles: 715_000,
            gpu_compute_ns: 3_500_000,
            gpu_mem_bytes: 657_804_800,
            core: 3,
            rt_priority: 1,
            partition_id: 1,
            colors: [2, 3].into_iter().collect(),
            hold_core: false,
        }
    }
}

pub const DNN: &str = "dnn";

pub fn build_dnn_gang(spec: &DnnTaskSpec) -> GangSpec {
    let threads = match period_ns_for_rate(spec.rate_hz) {
        Some(period) => vec![ThreadSpec {
            name: DNN.into(),
            core: spec.core,
            activation: Activation::Periodic {
                period_ns: period,
                deadline_ns: period,
                offset_ns: 0,
            },
            demand: DemandProfile::compute(spec.cpu_launch_cycles),
            gpu: Some(GpuPhase {
                compute_ns: spec.gpu_compute_ns,
                mem_bytes: spec.gpu_mem_bytes,
                hold_core: spec.hold_core,
            }),
        }],
        None => Vec::new(),
    };
    GangSpec {
        id: DNN.into(),
        threads,
        cores: [spec.core].into_iter().collect(),
        rt_priority: spec.rt_priority,
        partition_id: spec.partition_id,
        colors: spec.colors.clone(),
        virtual_gang_group: None,
        seed: 0,
    }
}

/// Release instants of a periodic activation in `[0, horizon)`.
pub fn periodic_releases(period_ns: u64, offset_ns: u64, horizon: SimTime) -> Vec<SimTime> {
    if period_ns == 0 {
        return Vec::new();
    }
    (0..)
        .map(|k| SimTime(offset_ns + k * period_ns))
        .take_while(|t| *t < horizon)
        .collect()
}

/// Per-gang rng stream used for event-driven activations, independent of
/// scheduling decisions.
#[derive(Clone, Debug)]
pub struct ActivationRng(ChaCha8Rng);

impl ActivationRng {
    pub fn new(scenario_seed: u64, gang_seed: u64, gang_index: usize) -> Self {
        let mixed = scenario_seed
            ^ gang_seed.rotate_left(17)
            ^ (gang_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ActivationRng(ChaCha8Rng::seed_from_u64(mixed))
    }

    /// Always consumes one draw, even for p = 0 or 1, so the stream position
    /// only depends on the number of triggers.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        let u: f64 = self.0.gen();
        u < p
    }
}

/// Checks the virtual-gang constraint: members share period and priority.
pub fn validate_virtual_gangs(gangs: &[GangSpec]) -> Result<(), WorkloadError> {
    for (i, a) in gangs.iter().enumerate() {
        let Some(group) = &a.virtual_gang_group else {
            continue;
        };
        for b in gangs[i + 1..]
            .iter()
            .filter(|b| b.virtual_gang_group.as_ref() == Some(group))
        {
            if a.rt_priority != b.rt_priority {
                return Err(WorkloadError::VirtualGangPriority(group.clone()));
            }
            if a.period() != b.period() {
                return Err(WorkloadError::VirtualGangPeriod(group.clone()));
            }
            if a.partition_id != b.partition_id {
                return Err(WorkloadError::VirtualGangPartition(group.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid attacker combination {0}: bank-aware attacks only target the LLC")]
    InvalidCombination(String),
    #[error("single-bank spread requires llc accesses")]
    SingleBankWithoutLlc,
    #[error("memory-level parallelism must be >= 1 (got {0})")]
    BadMlp(f64),
    #[error("thread {0}: period must be positive and deadline <= period")]
    BadPeriod(String),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("event-driven trigger {0} is not a thread of the gang")]
    UnknownTrigger(String),
    #[error("duplicate thread name {0}")]
    DuplicateThread(String),
    #[error("thread {thread} pinned to core {core} outside its gang's core set")]
    ThreadOffGang { thread: String, core: CoreId },
    #[error("virtual gang {0}: members have different real-time priorities")]
    VirtualGangPriority(String),
    #[error("virtual gang {0}: members have different periods")]
    VirtualGangPeriod(String),
    #[error("virtual gang {0}: members are in different partitions")]
    VirtualGangPartition(String),
}

impl fmt::Display for AttackerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;
    use crate::platform::default_platform;

    #[test]
    fn slam_gang_defaults() {
        let g = build_slam_gang(&SlamPipelineSpec::default()).unwrap();
        assert_eq!(g.threads.len(), 3);
        assert_eq!(g.thread(FRONT_END).unwrap().period(), Some(50 * MS));
        assert_eq!(g.thread(FRONT_END).unwrap().deadline(), Some(50 * MS));
        assert!(g.thread(MAPPING).unwrap().period().is_none());
        assert!(g.thread(STATE_OPT).unwrap().period().is_none());
        assert_eq!(g.cores, [0, 1].into_iter().collect());
        assert_eq!(g.rt_priority, 2);
        assert_eq!(g.colors, [0, 1].into_iter().collect());
    }

    #[test]
    fn attacker_naming_and_profiles() {
        let (spec, prof) =
            build_attacker(AttackPattern::Bw, AccessType::Read, AttackTarget::Llc, None).unwrap();
        assert_eq!(spec.name(), "BwRead(LLC)");
        assert_eq!(prof.bank_spread, BankSpread::Uniform);
        assert_eq!((prof.llc_accesses, prof.dram_accesses), (1, 0));

        let (spec, prof) = build_attacker(
            AttackPattern::BkPll,
            AccessType::Write,
            AttackTarget::Llc,
            Some(3),
        )
        .unwrap();
        assert_eq!(spec.name(), "BkPLLWrite(LLC)");
        assert_eq!(prof.bank_spread, BankSpread::SingleBank(3));
        assert_eq!(prof.access_type, AccessType::Write);

        let (_, prof) =
            build_attacker(AttackPattern::Pll, AccessType::Read, AttackTarget::Dram, None).unwrap();
        assert_eq!((prof.llc_accesses, prof.dram_accesses), (0, 1));

        assert!(matches!(
            build_attacker(AttackPattern::BkPll, AccessType::Read, AttackTarget::Dram, None),
            Err(WorkloadError::InvalidCombination(_))
        ));
        assert_eq!(all_attack_variants().len(), 10);
    }

    #[test]
    fn periodic_release_grid() {
        let r = periodic_releases(50 * MS, 0, SimTime::from_ms(1000));
        assert_eq!(r.len(), 20);
        assert_eq!(r[0], SimTime::ZERO);
        assert_eq!(*r.last().unwrap(), SimTime::from_ms(950));
    }

    #[test]
    fn bernoulli_stream_matches_direct_enumeration() {
        // Oracle: replay the same ChaCha stream by hand.
        let mut rng = ActivationRng::new(42, 7, 0);
        let count = (0..1000).filter(|_| rng.bernoulli(0.25)).count();
        let mut raw = ActivationRng::new(42, 7, 0).0;
        let expected = (0..1000).filter(|_| raw.gen::<f64>() < 0.25).count();
        assert_eq!(count, expected);
        let again = {
            let mut rng = ActivationRng::new(42, 7, 0);
            (0..1000).filter(|_| rng.bernoulli(0.25)).count()
        };
        assert_eq!(count, again);
        assert!((200..300).contains(&count), "{count}");
    }

    #[test]
    fn bernoulli_extremes() {
        let mut rng = ActivationRng::new(1, 2, 3);
        assert!((0..100).all(|_| rng.bernoulli(1.0)));
        assert!((0..100).all(|_| !rng.bernoulli(0.0)));
    }

    #[test]
    fn playback_defaults_and_utilization() {
        let g = playback_source(&PlaybackSpec::default());
        let t = &g.threads[0];
        assert_eq!(t.period(), Some(50 * MS));
        assert_eq!(t.core, 2);
        assert_eq!(g.rt_priority, 2);
        let u = utilization(&g, default_platform().core_freq_hz);
        assert!((0.05..=0.10).contains(&u), "{u}");

        let none = playback_source(&PlaybackSpec {
            rate_hz: 0.0,
            ..Default::default()
        });
        assert!(none.threads.is_empty());
    }

    #[test]
    fn virtual_gang_constraints() {
        let mut slam = build_slam_gang(&SlamPipelineSpec::default()).unwrap();
        slam.virtual_gang_group = Some("arhud".into());
        let mut pb = playback_source(&PlaybackSpec::default());
        pb.virtual_gang_group = Some("arhud".into());
        assert_eq!(validate_virtual_gangs(&[slam.clone(), pb.clone()]), Ok(()));

        let mut low = pb.clone();
        low.rt_priority = 1;
        assert!(matches!(
            validate_virtual_gangs(&[slam.clone(), low]),
            Err(WorkloadError::VirtualGangPriority(_))
        ));

        let mut slow = playback_source(&PlaybackSpec {
            rate_hz: 10.0,
            ..Default::default()
        });
        slow.virtual_gang_group = Some("arhud".into());
        assert!(matches!(
            validate_virtual_gangs(&[slam, slow]),
            Err(WorkloadError::VirtualGangPeriod(_))
        ));
    }

    #[test]
    fn gang_validation_errors() {
        let mut g = build_slam_gang(&SlamPipelineSpec::default()).unwrap();
        g.threads[1].core = 3;
        assert!(matches!(g.validate(), Err(WorkloadError::ThreadOffGang { .. })));
        let bad = DemandProfile {
            bank_spread: BankSpread::SingleBank(1),
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(WorkloadError::SingleBankWithoutLlc));
    }
}
