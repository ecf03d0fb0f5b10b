//! Simulation driver. Rates are constant between events; the loop jumps to
//! the earliest of the next queued event, the next job (phase) completion
//! and the next budget exhaustion, so completions and throttling land on
//! exact nanoseconds rather than epoch edges.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contention::{
    self, check_conservation, compute_rates, ContentionError, ExecContext, ModelParams, Placement,
    RateSet, SchedClass,
};
use crate::engine::{Engine, EngineError, EventId, EventKind, EventPayload, SimEvent, SimTime, Trace};
use crate::platform::{CoreId, PlatformSpec};
use crate::scheduler::{
    dispatch_best_effort, frame_admission, Admission, FrontEndAdmission, SchedError, Scheduler,
    SchedulerConfig,
};
use crate::throttle::{set_gpu_level, ChargeResult, LlcRegulator, ThrottleConfig, ThrottleError};
use crate::workload::{
    attacker_profile, Activation, ActivationRng, AttackerSpec, GangSpec, WorkloadError,
};

/// Everything a run needs, already resolved from a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SimInput {
    pub seed: u64,
    pub horizon: SimTime,
    pub platform: PlatformSpec,
    pub model: ModelParams,
    pub scheduler: SchedulerConfig,
    pub throttle: ThrottleConfig,
    pub gangs: Vec<GangSpec>,
    pub attackers: Vec<AttackerSpec>,
    /// Keep a snapshot of the core assignment after every event.
    pub record_schedule: bool,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Contention(#[from] ContentionError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Throttle(#[from] ThrottleError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invariant {name} violated at {time}: {detail}")]
    Invariant {
        name: &'static str,
        time: SimTime,
        detail: String,
    },
}

impl SimError {
    pub fn invariant_name(&self) -> Option<&'static str> {
        match self {
            SimError::Invariant { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadInfo {
    pub name: String,
    pub gang: String,
    pub core: CoreId,
    pub period_ns: Option<u64>,
    pub deadline_ns: Option<u64>,
    /// Scheduling gang (after virtual-gang merging) and its partition.
    pub sched_gang: usize,
    pub partition: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Occupant {
    Idle,
    Rt(usize),
    BestEffort(usize),
}

/// Core assignment right after an event was handled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleSnapshot {
    pub time: SimTime,
    pub seq: u64,
    pub cores: Vec<Occupant>,
    pub throttled: Vec<bool>,
    /// Some RT thread pinned to the core wants it and may run now.
    pub rt_ready: Vec<bool>,
    pub current_gangs: Vec<Option<usize>>,
}

/// Traffic of one core over one regulation period.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub start_ns: u64,
    pub core: CoreId,
    /// Bytes reaching the LLC (hits and refills), all classes.
    pub llc_bytes: f64,
    pub dram_bytes: f64,
    /// LLC bytes of best-effort contexts.
    pub be_llc_bytes: f64,
    /// Best-effort bytes charged to the regulator.
    pub regulated_bytes: f64,
    /// Time during which regulation was enforced on the core.
    pub enforced_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub trace: Trace,
    pub threads: Vec<ThreadInfo>,
    pub attackers: Vec<String>,
    pub bandwidth: Vec<BandwidthSample>,
    pub bucket_ns: u64,
    pub gpu_dram_bytes: f64,
    pub admission: Vec<FrontEndAdmission>,
    pub horizon: SimTime,
    pub num_cores: usize,
    pub schedule: Vec<ScheduleSnapshot>,
    /// LLC-level bytes retired by RT jobs, from their remaining demand.
    pub rt_retired_bytes: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Cpu,
    GpuWait,
    Gpu,
}

#[derive(Clone, Debug)]
struct Job {
    id: u64,
    release: SimTime,
    ctx: ExecContext,
    gpu: Option<(f64, f64, bool)>,
    phase: Phase,
    demand_lines: f64,
}

impl Job {
    fn holds_core(&self) -> bool {
        match self.phase {
            Phase::Cpu => true,
            _ => self.gpu.map(|g| g.2).unwrap_or(false),
        }
    }
}

struct ThreadState {
    gang_task: usize,
    sched_gang: usize,
    core: CoreId,
    priority: u32,
    jobs: VecDeque<Job>,
    triggers: Vec<usize>,
    probability: f64,
    periodic: Option<(u64, u64)>,
    next_release: Option<EventId>,
    frame: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Cpu { thread: usize, job: u64 },
    Gpu { thread: usize, job: u64 },
    Be { attacker: usize, core: CoreId },
}

pub struct Simulation {
    input: SimInput,
    engine: Engine,
    sched: Scheduler,
    regulator: Option<LlcRegulator>,
    gpu_fraction: f64,
    threads: Vec<ThreadState>,
    info: Vec<ThreadInfo>,
    rngs: Vec<ActivationRng>,
    attackers: Vec<ExecContext>,
    attacker_pin: Vec<Option<CoreId>>,
    gpu_queue: VecDeque<usize>,
    gpu_running: Option<usize>,
    slots: Vec<Slot>,
    contexts: Vec<ExecContext>,
    rates: RateSet,
    dirty: bool,
    now: SimTime,
    next_job_id: u64,
    rotation: usize,
    admission: Vec<FrontEndAdmission>,
    bucket: Vec<BandwidthSample>,
    bandwidth: Vec<BandwidthSample>,
    gpu_dram_bytes: f64,
    line: f64,
    newly_throttled: Vec<CoreId>,
    throttle_logged: Vec<bool>,
    schedule: Vec<ScheduleSnapshot>,
    rt_retired_lines: f64,
}

const MAX_STALLS: u32 = 10_000;

impl Simulation {
    pub fn new(input: SimInput) -> Result<Self, SimError> {
        let platform = &input.platform;
        let n = platform.num_cores;
        let sched = Scheduler::new(input.scheduler.clone(), &input.gangs, n)?;
        let mode = input.scheduler.mode;
        let regulator = mode
            .llc_regulation()
            .then(|| LlcRegulator::new(n, platform.llc.line_bytes, &input.throttle));
        let gpu_fraction = if mode.gpu_throttling() {
            set_gpu_level(&platform.gpu, input.throttle.gpu_level)?.fraction
        } else {
            1.0
        };

        let mut threads = Vec::new();
        let mut info = Vec::new();
        let mut rngs = Vec::new();
        for (gi, g) in input.gangs.iter().enumerate() {
            g.validate()?;
            rngs.push(ActivationRng::new(input.seed, g.seed, gi));
            let base = threads.len();
            for t in &g.threads {
                let (periodic, probability) = match t.activation {
                    Activation::Periodic {
                        period_ns,
                        offset_ns,
                        ..
                    } => (Some((period_ns, offset_ns)), 1.0),
                    Activation::EventDriven { probability, .. } => (None, probability),
                };
                threads.push(ThreadState {
                    gang_task: gi,
                    sched_gang: sched.gang_of_task[gi],
                    core: t.core,
                    priority: g.rt_priority,
                    jobs: VecDeque::new(),
                    triggers: Vec::new(),
                    probability,
                    periodic,
                    next_release: None,
                    frame: 0,
                });
                info.push(ThreadInfo {
                    name: t.name.clone(),
                    gang: g.id.clone(),
                    core: t.core,
                    period_ns: t.period(),
                    deadline_ns: t.deadline(),
                    sched_gang: sched.gang_of_task[gi],
                    partition: sched.gangs[sched.gang_of_task[gi]].partition,
                });
            }
            for (i, t) in g.threads.iter().enumerate() {
                if let Activation::EventDriven { trigger, .. } = &t.activation {
                    let src = g.threads.iter().position(|x| &x.name == trigger).expect("validated");
                    threads[base + src].triggers.push(base + i);
                }
            }
        }
        if let Some(t) = info.iter().find(|t| t.core >= n) {
            return Err(ContentionError::UnknownCore(t.core).into());
        }

        let attackers: Vec<ExecContext> = input
            .attackers
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let p = attacker_profile(a, &input.model.attackers);
                let mut c = ExecContext::cpu(threads.len() + i, a.core.unwrap_or(0), SchedClass::BestEffort);
                c.task_group = input.gangs.len() + i;
                c.unbounded = true;
                c.cpu_cycles = p.cpu_cycles as f64;
                c.llc_accesses = p.llc_accesses as f64;
                c.dram_accesses = p.dram_accesses as f64;
                c.bank_spread = p.bank_spread;
                c.access_type = p.access_type;
                c.mlp = p.mlp;
                c.colors = a.colors.clone();
                c
            })
            .collect();
        let attacker_pin = input.attackers.iter().map(|a| a.core).collect();

        let mut engine = Engine::new();
        engine.trace_mut().task_names = info
            .iter()
            .map(|t| t.name.clone())
            .chain(input.attackers.iter().enumerate().map(|(i, a)| format!("be{i}:{}", a.name())))
            .collect();

        let line = platform.llc.line_bytes as f64;
        let bucket = (0..n)
            .map(|core| BandwidthSample {
                core,
                ..Default::default()
            })
            .collect();
        let admission = vec![FrontEndAdmission::default(); threads.len()];
        Ok(Simulation {
            input,
            engine,
            sched,
            regulator,
            gpu_fraction,
            threads,
            info,
            rngs,
            attackers,
            attacker_pin,
            gpu_queue: VecDeque::new(),
            gpu_running: None,
            slots: Vec::new(),
            contexts: Vec::new(),
            rates: RateSet::default(),
            dirty: true,
            now: SimTime::ZERO,
            next_job_id: 0,
            rotation: 0,
            admission,
            bucket,
            bandwidth: Vec::new(),
            gpu_dram_bytes: 0.0,
            line,
            newly_throttled: Vec::new(),
            throttle_logged: vec![false; n],
            schedule: Vec::new(),
            rt_retired_lines: 0.0,
        })
    }

    fn invariant(&self, name: &'static str, detail: String) -> SimError {
        SimError::Invariant {
            name,
            time: self.now,
            detail,
        }
    }

    fn epoch(&self) -> SimTime {
        SimTime::from_us(self.input.model.epoch_us.max(1))
    }

    fn regulation_period(&self) -> SimTime {
        SimTime::from_us(self.input.throttle.regulation_period_us.max(1))
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        let horizon = self.input.horizon;
        for t in 0..self.threads.len() {
            if let Some((_, offset)) = self.threads[t].periodic {
                if SimTime(offset) < horizon {
                    let id = self.engine.schedule(
                        SimTime(offset),
                        EventKind::JobRelease,
                        EventPayload::task(t),
                    )?;
                    self.threads[t].next_release = Some(id);
                }
            }
        }
        let epoch = self.epoch();
        if epoch < horizon {
            self.engine
                .schedule(epoch, EventKind::EpochBoundary, EventPayload::default())?;
        }
        let period = self.regulation_period();
        if period < horizon {
            self.engine
                .schedule(period, EventKind::RegulationBoundary, EventPayload::default())?;
        }
        self.dispatch()?;

        let mut stalls = 0u32;
        loop {
            let t_queue = self.engine.peek_time().unwrap_or(horizon).min(horizon);
            let t_internal = self.next_internal();
            let t = t_internal.map_or(t_queue, |ti| ti.min(t_queue));
            if t > self.now {
                self.advance(t)?;
                stalls = 0;
            } else {
                stalls += 1;
                if stalls > MAX_STALLS {
                    return Err(self.invariant("progress", "simulation time stopped advancing".into()));
                }
            }
            if t >= horizon {
                break;
            }
            if t_internal.is_some_and(|ti| ti < t_queue) {
                self.settle()?;
                self.dispatch()?;
                continue;
            }
            let Some(ev) = self.engine.pop_until(t) else {
                continue;
            };
            self.handle(ev)?;
            self.settle()?;
            self.dispatch()?;
            let digest = self.digest();
            self.engine.record(ev, digest);
            if self.input.record_schedule {
                let snap = self.snapshot(ev);
                self.schedule.push(snap);
            }
        }
        self.close_bucket(horizon);
        self.finish()
    }

    fn snapshot(&self, ev: SimEvent) -> ScheduleSnapshot {
        let n = self.input.platform.num_cores;
        let mut cores = vec![Occupant::Idle; n];
        for s in &self.slots {
            match *s {
                Slot::Cpu { thread, .. } => cores[self.threads[thread].core] = Occupant::Rt(thread),
                Slot::Be { attacker, core } => cores[core] = Occupant::BestEffort(attacker),
                Slot::Gpu { .. } => {}
            }
        }
        let mut rt_ready = vec![false; n];
        for t in &self.threads {
            if t.jobs.front().is_some_and(Job::holds_core) && self.sched.may_run(t.sched_gang) {
                rt_ready[t.core] = true;
            }
        }
        ScheduleSnapshot {
            time: ev.time,
            seq: ev.seq,
            cores,
            throttled: (0..n)
                .map(|c| self.regulator.as_ref().is_some_and(|r| r.is_throttled(c)))
                .collect(),
            rt_ready,
            current_gangs: self.sched.partitions.iter().map(|p| p.current_gang).collect(),
        }
    }

    fn finish(self) -> Result<SimOutput, SimError> {
        let in_flight: f64 = self
            .threads
            .iter()
            .filter_map(|t| t.jobs.front())
            .map(|j| match j.phase {
                Phase::Cpu => j.demand_lines - (j.ctx.llc_accesses + j.ctx.dram_accesses),
                _ => j.demand_lines,
            })
            .sum();
        let rt_retired_bytes = (self.rt_retired_lines + in_flight) * self.line;
        let bucket_ns = self.regulation_period().ns();
        let trace = self.engine.into_trace();
        if let Some(i) = trace.first_order_violation() {
            return Err(SimError::Invariant {
                name: "trace-order",
                time: trace.records[i].event.time,
                detail: format!("record {i} out of (time, seq) order"),
            });
        }
        Ok(SimOutput {
            trace,
            threads: self.info,
            attackers: self.input.attackers.iter().map(AttackerSpec::name).collect(),
            bandwidth: self.bandwidth,
            bucket_ns,
            gpu_dram_bytes: self.gpu_dram_bytes,
            admission: self.admission,
            horizon: self.input.horizon,
            num_cores: self.input.platform.num_cores,
            schedule: self.schedule,
            rt_retired_bytes,
        })
    }

    /// Earliest exact instant at which a running job finishes its phase or a
    /// regulated core runs out of budget.
    fn next_internal(&self) -> Option<SimTime> {
        let mut best: Option<u64> = None;
        let mut consider = |dt: f64| {
            let dt = dt.max(0.0).ceil() as u64;
            best = Some(best.map_or(dt, |b| b.min(dt)));
        };
        for (slot, r) in self.slots.iter().zip(&self.rates.contexts) {
            match *slot {
                Slot::Cpu { .. } | Slot::Gpu { .. } => consider(r.time_to_finish_ns),
                Slot::Be { core, .. } => {
                    if let Some(reg) = &self.regulator {
                        let rate = r.refill_bytes_per_ns(self.line);
                        if rate > 0.0 && self.sched.throttle_enforced(core) && !reg.is_throttled(core) {
                            consider(reg.remaining(core) / rate);
                        }
                    }
                }
            }
        }
        best.map(|dt| SimTime(self.now.ns() + dt))
    }

    fn advance(&mut self, t: SimTime) -> Result<(), SimError> {
        let dt = (t.ns() - self.now.ns()) as f64;
        // Regulation boundaries close buckets; an interval never spans one.
        if !self.slots.is_empty() {
            let out = contention::advance(
                &self.contexts,
                &self.rates,
                &self.input.platform,
                &self.input.model,
                dt,
            );
            if let Err(detail) = check_conservation(&out, &self.input.platform, dt) {
                return Err(self.invariant("capacity", detail));
            }
            for core in 0..self.bucket.len() {
                self.bucket[core].llc_bytes += out.core_llc_bytes[core];
                self.bucket[core].dram_bytes += out.core_dram_bytes[core];
            }
            self.gpu_dram_bytes += out.gpu_dram_bytes;
            for (i, slot) in self.slots.iter().enumerate() {
                let p = &out.progress[i];
                match *slot {
                    Slot::Cpu { thread, .. } | Slot::Gpu { thread, .. } => {
                        let job = self.threads[thread].jobs.front_mut().expect("running job");
                        if p.fraction >= 1.0 {
                            job.ctx.retire_fraction(1.0);
                        } else {
                            job.ctx.retire_fraction(p.fraction);
                        }
                        let r = &mut self.rates.contexts[i];
                        r.time_to_finish_ns = (r.time_to_finish_ns - p.busy_ns).max(0.0);
                        if p.fraction >= 1.0 {
                            r.time_to_finish_ns = 0.0;
                        }
                    }
                    Slot::Be { core, .. } => {
                        let bytes = (p.llc_accesses + p.dram_accesses) * self.line;
                        self.bucket[core].be_llc_bytes += bytes;
                        let enforce = self.sched.throttle_enforced(core);
                        if let Some(reg) = &mut self.regulator {
                            if reg.is_throttled(core) {
                                return Err(SimError::Invariant {
                                    name: "throttled-core-idle",
                                    time: self.now,
                                    detail: format!("best-effort context ran on throttled core {core}"),
                                });
                            }
                            if enforce {
                                self.bucket[core].regulated_bytes += bytes;
                            }
                            if reg.charge(core, bytes, enforce) == ChargeResult::Throttled {
                                self.newly_throttled.push(core);
                            }
                        }
                    }
                }
            }
        }
        for core in 0..self.bucket.len() {
            if self.sched.throttle_enforced(core) {
                self.bucket[core].enforced_ns += t.ns() - self.now.ns();
            }
        }
        self.now = t;
        self.engine.advance_to(t)?;
        Ok(())
    }

    /// Applies every state change due at `now`: phase ends, completions and
    /// budget exhaustion. Each change is logged as a trace event at `now`.
    fn settle(&mut self) -> Result<(), SimError> {
        for i in 0..self.slots.len() {
            let thread = match self.slots[i] {
                Slot::Cpu { thread, .. } | Slot::Gpu { thread, .. } => thread,
                Slot::Be { .. } => continue,
            };
            let done = self.threads[thread]
                .jobs
                .front()
                .is_some_and(|j| j.ctx.is_complete());
            if done {
                self.finish_phase(thread)?;
            }
        }
        if let Some(reg) = &mut self.regulator {
            for core in 0..self.input.platform.num_cores {
                if self.sched.throttle_enforced(core)
                    && reg.enforce(core, true) == ChargeResult::Throttled
                    && !self.newly_throttled.contains(&core)
                    && !self.throttle_logged[core]
                {
                    self.newly_throttled.push(core);
                }
            }
        }
        for core in std::mem::take(&mut self.newly_throttled) {
            if self.throttle_logged[core] {
                continue;
            }
            self.throttle_logged[core] = true;
            let task = self.slots.iter().find_map(|s| match *s {
                Slot::Be { attacker, core: c } if c == core => Some(self.threads.len() + attacker),
                _ => None,
            });
            let mut payload = EventPayload::core(core);
            payload.task = task.map(|t| t as u32);
            self.engine.schedule(self.now, EventKind::ThrottleOn, payload)?;
            self.dirty = true;
        }
        Ok(())
    }

    fn finish_phase(&mut self, thread: usize) -> Result<(), SimError> {
        self.dirty = true;
        let ts = &mut self.threads[thread];
        let job = ts.jobs.front_mut().expect("job");
        if job.phase == Phase::Cpu {
            if let Some((compute, mem, _)) = job.gpu {
                let mut ctx = ExecContext::gpu(thread, compute, mem);
                ctx.task_group = ts.gang_task;
                job.ctx = ctx;
                job.phase = Phase::GpuWait;
                if !job.ctx.is_complete() {
                    self.gpu_queue.push_back(thread);
                    return Ok(());
                }
            }
        }
        if job.phase == Phase::Gpu && self.gpu_running == Some(thread) {
            self.gpu_running = None;
        }
        let job = ts.jobs.pop_front().expect("job");
        self.rt_retired_lines += job.demand_lines;
        let latency = self.now.ns() - job.release.ns();
        self.engine.schedule(
            self.now,
            EventKind::JobCompletion,
            EventPayload::task(thread)
                .with_core(ts.core)
                .with_detail(latency),
        )?;
        let gang_task = ts.gang_task;
        let triggers = ts.triggers.clone();
        for succ in triggers {
            let p = self.threads[succ].probability;
            if self.rngs[gang_task].bernoulli(p) {
                self.push_job(succ);
                self.engine
                    .schedule(self.now, EventKind::JobRelease, EventPayload::task(succ))?;
            }
        }
        let gang = self.threads[thread].sched_gang;
        let busy = self
            .threads
            .iter()
            .any(|t| t.sched_gang == gang && !t.jobs.is_empty());
        if !busy {
            self.sched.on_idle(gang);
        }
        Ok(())
    }

    fn push_job(&mut self, thread: usize) {
        let gang_task = self.threads[thread].gang_task;
        let g = &self.input.gangs[gang_task];
        let local = thread - self.threads.iter().position(|t| t.gang_task == gang_task).expect("gang");
        let spec = &g.threads[local];
        let mut ctx = ExecContext::cpu(thread, spec.core, SchedClass::Rt);
        ctx.task_group = gang_task;
        ctx.cpu_cycles = spec.demand.cpu_cycles as f64;
        ctx.llc_accesses = spec.demand.llc_accesses as f64;
        ctx.dram_accesses = spec.demand.dram_accesses as f64;
        ctx.bank_spread = spec.demand.bank_spread;
        ctx.access_type = spec.demand.access_type;
        ctx.mlp = spec.demand.mlp;
        ctx.colors = g.colors.clone();
        let job = Job {
            id: self.next_job_id,
            release: self.now,
            ctx,
            gpu: spec
                .gpu
                .as_ref()
                .map(|p| (p.compute_ns as f64, p.mem_bytes as f64, p.hold_core)),
            phase: Phase::Cpu,
            demand_lines: spec.demand.llc_accesses as f64 + spec.demand.dram_accesses as f64,
        };
        self.next_job_id += 1;
        self.threads[thread].jobs.push_back(job);
        self.dirty = true;
        let gang = self.threads[thread].sched_gang;
        // Registered by construction.
        let _ = self.sched.on_release(gang);
    }

    fn handle(&mut self, ev: SimEvent) -> Result<(), SimError> {
        match ev.kind {
            EventKind::JobRelease => {
                let Some(t) = ev.payload.task.map(|t| t as usize) else {
                    return Ok(());
                };
                if t >= self.threads.len() || self.threads[t].next_release != Some(EventId(ev.seq)) {
                    // Chained release, already applied when it was logged.
                    return Ok(());
                }
                let (period, _) = self.threads[t].periodic.expect("periodic");
                let next = SimTime(ev.time.ns() + period);
                self.threads[t].next_release = if next < self.input.horizon {
                    Some(self.engine.schedule(next, EventKind::JobRelease, EventPayload::task(t))?)
                } else {
                    None
                };
                let frame = self.threads[t].frame;
                self.threads[t].frame += 1;
                let pending = self.threads[t].jobs.len();
                match frame_admission(
                    &mut self.admission[t],
                    pending,
                    self.input.scheduler.frame_queue_depth,
                ) {
                    Admission::Process => self.push_job(t),
                    Admission::Drop => {
                        self.engine.schedule(
                            self.now,
                            EventKind::FrameDrop,
                            EventPayload::task(t).with_detail(frame),
                        )?;
                    }
                }
            }
            EventKind::EpochBoundary => {
                let next = SimTime(ev.time.ns() + self.epoch().ns());
                if next < self.input.horizon {
                    self.engine
                        .schedule(next, EventKind::EpochBoundary, EventPayload::default())?;
                }
                if let Err(detail) = self.sched.check_invariants() {
                    return Err(self.invariant("gang-priority", detail));
                }
            }
            EventKind::RegulationBoundary => {
                let next = SimTime(ev.time.ns() + self.regulation_period().ns());
                if next < self.input.horizon {
                    self.engine
                        .schedule(next, EventKind::RegulationBoundary, EventPayload::default())?;
                }
                self.close_bucket(ev.time);
                self.rotation = self.rotation.wrapping_add(1);
                self.dirty = true;
                if let Some(reg) = &mut self.regulator {
                    for core in reg.replenish() {
                        self.throttle_logged[core] = false;
                        self.engine
                            .schedule(self.now, EventKind::ThrottleOff, EventPayload::core(core))?;
                    }
                }
            }
            EventKind::JobCompletion
            | EventKind::ThrottleOn
            | EventKind::ThrottleOff
            | EventKind::FrameDrop => {}
        }
        Ok(())
    }

    fn close_bucket(&mut self, end: SimTime) {
        let period = self.regulation_period().ns();
        let start = end.ns().saturating_sub(1) / period * period;
        let budget = self.regulator.as_ref().map(|r| r.budget_bytes);
        for s in &mut self.bucket {
            let core = s.core;
            let mut done = std::mem::replace(
                s,
                BandwidthSample {
                    core,
                    ..Default::default()
                },
            );
            done.start_ns = start;
            if let Some(b) = budget {
                debug_assert!(done.regulated_bytes <= b + self.line + 1e-3);
            }
            self.bandwidth.push(done);
        }
    }

    /// Recomputes the core and GPU assignment and, when it changed, the rates.
    fn dispatch(&mut self) -> Result<(), SimError> {
        let n = self.input.platform.num_cores;
        let mut rt_on_core: Vec<Option<usize>> = vec![None; n];
        for (i, t) in self.threads.iter().enumerate() {
            let Some(job) = t.jobs.front() else { continue };
            if !job.holds_core() || !self.sched.may_run(t.sched_gang) {
                continue;
            }
            let better = match rt_on_core[t.core] {
                None => true,
                Some(o) => {
                    let ot = &self.threads[o];
                    let orel = ot.jobs.front().expect("job").release;
                    (t.priority, std::cmp::Reverse(job.release)) > (ot.priority, std::cmp::Reverse(orel))
                }
            };
            if better {
                rt_on_core[t.core] = Some(i);
            }
        }
        if self.gpu_running.is_none() {
            if let Some(t) = self.gpu_queue.pop_front() {
                let job = self.threads[t].jobs.front_mut().expect("gpu job");
                job.phase = Phase::Gpu;
                self.gpu_running = Some(t);
                self.dirty = true;
            }
        }
        let free: Vec<bool> = (0..n)
            .map(|c| {
                rt_on_core[c].is_none()
                    && !self.regulator.as_ref().is_some_and(|r| r.is_throttled(c))
            })
            .collect();
        let be = dispatch_best_effort(&free, &self.attacker_pin, self.rotation);

        let mut slots = Vec::with_capacity(n + 1);
        for c in 0..n {
            if let Some(t) = rt_on_core[c] {
                let job = self.threads[t].jobs.front().expect("job");
                if job.phase == Phase::Cpu {
                    slots.push(Slot::Cpu { thread: t, job: job.id });
                }
            } else if let Some(a) = be[c] {
                slots.push(Slot::Be { attacker: a, core: c });
            }
        }
        if let Some(t) = self.gpu_running {
            let job = self.threads[t].jobs.front().expect("job");
            slots.push(Slot::Gpu { thread: t, job: job.id });
        }
        if !self.dirty && slots == self.slots {
            return Ok(());
        }
        self.dirty = false;
        self.contexts = slots
            .iter()
            .map(|s| match *s {
                Slot::Cpu { thread, .. } | Slot::Gpu { thread, .. } => {
                    self.threads[thread].jobs.front().expect("job").ctx.clone()
                }
                Slot::Be { attacker, core } => {
                    let mut c = self.attackers[attacker].clone();
                    c.placement = Placement::Core(core);
                    c
                }
            })
            .collect();
        self.slots = slots;
        self.rates = compute_rates(
            &self.contexts,
            &self.input.platform,
            &self.input.model,
            self.gpu_fraction,
        )?;
        Ok(())
    }

    fn digest(&self) -> u64 {
        // FNV-1a over the observable scheduling state.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for s in &self.slots {
            match *s {
                Slot::Cpu { thread, job } => {
                    mix(1);
                    mix(thread as u64);
                    mix(job);
                }
                Slot::Gpu { thread, job } => {
                    mix(2);
                    mix(thread as u64);
                    mix(job);
                }
                Slot::Be { attacker, core } => {
                    mix(3);
                    mix(attacker as u64);
                    mix(core as u64);
                }
            }
        }
        for p in &self.sched.partitions {
            mix(p.current_gang.map_or(u64::MAX, |g| g as u64));
        }
        if let Some(r) = &self.regulator {
            for c in r.throttled_cores() {
                mix(100 + c as u64);
            }
        }
        h
    }
}

pub fn simulate(input: SimInput) -> Result<SimOutput, SimError> {
    Simulation::new(input)?.run()
}
