//! Scheduling policy: fixed-priority real-time class with partitioned
//! one-gang-at-a-time semantics, virtual gangs, best-effort backfill,
//! frame admission and throttle scoping.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::CoreId;
use crate::workload::GangSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerMode {
    /// Plain fixed-priority real-time scheduling, no gangs, no throttling.
    #[default]
    #[serde(rename = "fifo")]
    Fifo,
    /// One gang at a time across all cores, LLC regulation of best-effort.
    #[serde(rename = "rt-gang")]
    RtGang,
    /// Per-partition gangs, LLC regulation and iGPU throttling.
    #[serde(rename = "rt-gang++")]
    RtGangPlusPlus,
}

impl SchedulerMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fifo" => Some(SchedulerMode::Fifo),
            "rt-gang" => Some(SchedulerMode::RtGang),
            "rt-gang++" => Some(SchedulerMode::RtGangPlusPlus),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerMode::Fifo => "fifo",
            SchedulerMode::RtGang => "rt-gang",
            SchedulerMode::RtGangPlusPlus => "rt-gang++",
        }
    }

    pub fn gang_scheduling(self) -> bool {
        self != SchedulerMode::Fifo
    }

    pub fn llc_regulation(self) -> bool {
        self != SchedulerMode::Fifo
    }

    pub fn gpu_throttling(self) -> bool {
        self == SchedulerMode::RtGangPlusPlus
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThrottleScope {
    #[default]
    Global,
    Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub throttle_scope: ThrottleScope,
    /// Frames buffered while the periodic thread is busy; 0 drops them.
    pub frame_queue_depth: usize,
    /// Gang partitions used in `rt-gang++` mode.
    pub partitions: Vec<BTreeSet<CoreId>>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            mode: SchedulerMode::Fifo,
            throttle_scope: ThrottleScope::Global,
            frame_queue_depth: 0,
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("gang {0} is not registered")]
    UnregisteredGang(usize),
    #[error("gang {gang} uses core {core} outside partition {partition}")]
    GangOutsidePartition {
        gang: String,
        core: CoreId,
        partition: usize,
    },
    #[error("gang {gang} refers to unknown partition {partition}")]
    UnknownPartition { gang: String, partition: usize },
}

/// A schedulable gang: one task, or a virtual gang merging several tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedGang {
    pub name: String,
    /// Indices of the member tasks in the scenario's gang list.
    pub members: Vec<usize>,
    pub priority: u32,
    pub partition: usize,
    pub cores: BTreeSet<CoreId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionState {
    pub partition_id: usize,
    pub cores: BTreeSet<CoreId>,
    pub current_gang: Option<usize>,
    /// Highest priority first, FIFO among equals.
    pub ready_gangs: VecDeque<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReleaseOutcome {
    /// Became the partition's current gang.
    Dispatched,
    /// Became current and pushed the previous gang back to the ready queue.
    Preempted(usize),
    /// Waits behind a gang of higher or equal priority.
    Queued,
    /// Already current or queued.
    AlreadyActive,
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    pub gangs: Vec<SchedGang>,
    pub partitions: Vec<PartitionState>,
    /// Scenario gang index -> scheduling gang index.
    pub gang_of_task: Vec<usize>,
    core_partition: Vec<Option<usize>>,
}

impl Scheduler {
    /// Groups tasks into scheduling gangs (virtual gangs merge in the gang
    /// modes) and builds partitions: one global partition for `rt-gang`,
    /// the configured ones for `rt-gang++`.
    pub fn new(
        config: SchedulerConfig,
        tasks: &[GangSpec],
        num_cores: usize,
    ) -> Result<Self, SchedError> {
        let partition_cores: Vec<BTreeSet<CoreId>> = match config.mode {
            SchedulerMode::RtGangPlusPlus if !config.partitions.is_empty() => {
                config.partitions.clone()
            }
            _ => vec![(0..num_cores).collect()],
        };
        let per_partition = config.mode == SchedulerMode::RtGangPlusPlus
            && !config.partitions.is_empty();

        let mut gangs: Vec<SchedGang> = Vec::new();
        let mut gang_of_task = Vec::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            let group = t
                .virtual_gang_group
                .as_ref()
                .filter(|_| config.mode.gang_scheduling());
            let existing = group.and_then(|g| gangs.iter().position(|sg| &sg.name == g));
            let partition = if per_partition { t.partition_id } else { 0 };
            if partition >= partition_cores.len() {
                return Err(SchedError::UnknownPartition {
                    gang: t.id.clone(),
                    partition,
                });
            }
            if per_partition {
                if let Some(&core) = t.cores.iter().find(|c| !partition_cores[partition].contains(c)) {
                    return Err(SchedError::GangOutsidePartition {
                        gang: t.id.clone(),
                        core,
                        partition,
                    });
                }
            }
            match existing {
                Some(g) => {
                    gangs[g].members.push(i);
                    gangs[g].cores.extend(t.cores.iter().copied());
                    gang_of_task.push(g);
                }
                None => {
                    gangs.push(SchedGang {
                        name: group.cloned().unwrap_or_else(|| t.id.clone()),
                        members: vec![i],
                        priority: t.rt_priority,
                        partition,
                        cores: t.cores.clone(),
                    });
                    gang_of_task.push(gangs.len() - 1);
                }
            }
        }
        let mut core_partition = vec![None; num_cores];
        for (p, cores) in partition_cores.iter().enumerate() {
            for &c in cores {
                if c < num_cores {
                    core_partition[c] = Some(p);
                }
            }
        }
        let partitions = partition_cores
            .into_iter()
            .enumerate()
            .map(|(i, cores)| PartitionState {
                partition_id: i,
                cores,
                current_gang: None,
                ready_gangs: VecDeque::new(),
            })
            .collect();
        Ok(Scheduler {
            config,
            gangs,
            partitions,
            gang_of_task,
            core_partition,
        })
    }

    pub fn mode(&self) -> SchedulerMode {
        self.config.mode
    }

    pub fn partition_of_core(&self, core: CoreId) -> Option<usize> {
        self.core_partition.get(core).copied().flatten()
    }

    pub fn is_current(&self, gang: usize) -> bool {
        let p = self.gangs[gang].partition;
        self.partitions[p].current_gang == Some(gang)
    }

    pub fn any_current(&self) -> bool {
        self.partitions.iter().any(|p| p.current_gang.is_some())
    }

    /// Whether the gang's threads may occupy their cores right now.
    pub fn may_run(&self, gang: usize) -> bool {
        !self.config.mode.gang_scheduling() || self.is_current(gang)
    }

    /// A job of `gang` became ready.
    pub fn on_release(&mut self, gang: usize) -> Result<ReleaseOutcome, SchedError> {
        let g = self.gangs.get(gang).ok_or(SchedError::UnregisteredGang(gang))?;
        if !self.config.mode.gang_scheduling() {
            return Ok(ReleaseOutcome::Dispatched);
        }
        let prio = g.priority;
        let p = g.partition;
        let part = &self.partitions[p];
        if part.current_gang == Some(gang) || part.ready_gangs.contains(&gang) {
            return Ok(ReleaseOutcome::AlreadyActive);
        }
        match part.current_gang {
            None => {
                self.partitions[p].current_gang = Some(gang);
                Ok(ReleaseOutcome::Dispatched)
            }
            Some(cur) if prio > self.gangs[cur].priority => {
                // The preempted gang resumes first among its priority class.
                self.insert_ready(p, cur, true);
                self.partitions[p].current_gang = Some(gang);
                Ok(ReleaseOutcome::Preempted(cur))
            }
            Some(_) => {
                self.insert_ready(p, gang, false);
                Ok(ReleaseOutcome::Queued)
            }
        }
    }

    fn insert_ready(&mut self, p: usize, gang: usize, ahead_of_equals: bool) {
        let prio = self.gangs[gang].priority;
        let gangs = &self.gangs;
        let q = &mut self.partitions[p].ready_gangs;
        let pos = q
            .iter()
            .position(|&o| {
                let op = gangs[o].priority;
                if ahead_of_equals {
                    op <= prio
                } else {
                    op < prio
                }
            })
            .unwrap_or(q.len());
        q.insert(pos, gang);
    }

    /// The gang has no pending work left. Returns the gang dispatched in its
    /// place, if any.
    pub fn on_idle(&mut self, gang: usize) -> Option<usize> {
        if !self.config.mode.gang_scheduling() {
            return None;
        }
        let p = self.gangs[gang].partition;
        let part = &mut self.partitions[p];
        if part.current_gang == Some(gang) {
            part.current_gang = part.ready_gangs.pop_front();
            part.current_gang
        } else {
            part.ready_gangs.retain(|&g| g != gang);
            None
        }
    }

    /// Best-effort regulation applies on `core` right now.
    pub fn throttle_enforced(&self, core: CoreId) -> bool {
        if !self.config.mode.llc_regulation() {
            return false;
        }
        match (self.config.throttle_scope, self.partition_of_core(core)) {
            (ThrottleScope::Partition, Some(p)) => self.partitions[p].current_gang.is_some(),
            _ => self.any_current(),
        }
    }

    /// Invariant: priority of the current gang >= every ready gang.
    pub fn check_invariants(&self) -> Result<(), String> {
        for part in &self.partitions {
            if let Some(cur) = part.current_gang {
                let cp = self.gangs[cur].priority;
                if let Some(&g) = part
                    .ready_gangs
                    .iter()
                    .find(|&&g| self.gangs[g].priority > cp)
                {
                    return Err(format!(
                        "partition {}: ready gang {} outranks current gang {}",
                        part.partition_id, self.gangs[g].name, self.gangs[cur].name
                    ));
                }
                if part.ready_gangs.contains(&cur) {
                    return Err(format!("gang {} both current and ready", self.gangs[cur].name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontEndAdmission {
    pub busy: bool,
    pub dropped_count: u64,
    pub processed_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Process,
    Drop,
}

impl FrontEndAdmission {
    pub fn arrived(&self) -> u64 {
        self.dropped_count + self.processed_count
    }
}

/// A frame arrives while `pending` jobs of the periodic thread are still
/// unfinished: drop it when the buffer of `queue_depth` frames is full.
pub fn frame_admission(
    state: &mut FrontEndAdmission,
    pending: usize,
    queue_depth: usize,
) -> Admission {
    state.busy = pending > 0;
    // The job in service does not occupy a buffer slot.
    if pending > queue_depth {
        state.dropped_count += 1;
        Admission::Drop
    } else {
        state.processed_count += 1;
        Admission::Process
    }
}

/// Assigns best-effort contexts to cores without RT work. `free[c]` tells
/// whether core `c` is free; `pinned[i]` is the core affinity of context `i`.
/// Pinned contexts take their own core; the rest fill remaining free cores
/// in an order rotated by `rotation` so that waiting contexts take turns.
pub fn dispatch_best_effort(
    free: &[bool],
    pinned: &[Option<CoreId>],
    rotation: usize,
) -> Vec<Option<usize>> {
    let mut assignment: Vec<Option<usize>> = vec![None; free.len()];
    for (i, p) in pinned.iter().enumerate() {
        if let Some(c) = *p {
            if free.get(c).copied().unwrap_or(false) && assignment[c].is_none() {
                assignment[c] = Some(i);
            }
        }
    }
    let floating: Vec<usize> = pinned
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(i, _)| i)
        .collect();
    if floating.is_empty() {
        return assignment;
    }
    let n = floating.len();
    let mut next = 0;
    for c in 0..free.len() {
        if next == n {
            break;
        }
        if free[c] && assignment[c].is_none() {
            assignment[c] = Some(floating[(rotation + next) % n]);
            next += 1;
        }
    }
    assignment
}
