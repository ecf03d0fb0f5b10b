use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use rtgang_sim::contention::{
    advance, check_conservation, compute_rates, ExecContext, ModelParams, Placement, SchedClass,
};
use rtgang_sim::engine::EventKind;
use rtgang_sim::metrics::latency_samples;
use rtgang_sim::platform::{default_platform, PlatformSpec};
use rtgang_sim::scenario::{preset, Scenario, TaskSpec};
use rtgang_sim::scheduler::{SchedulerConfig, SchedulerMode};
use rtgang_sim::sim::{simulate, Occupant, SimInput, SimOutput};
use rtgang_sim::throttle::ThrottleConfig;
use rtgang_sim::workload::{
    all_attack_variants, attacker_profile, build_attacker, validate_virtual_gangs, AccessType, Activation,
    AttackerSpec, BankSpread, DemandProfile, GangSpec, ThreadSpec,
};

type Sink<'a> = &'a mut dyn FnMut(&str, bool, String);

const MS: u64 = 1_000_000;
const CYCLES_PER_MS: f64 = 1.43e6;

#[derive(Clone, Debug)]
struct GangParams {
    period_ms: u64,
    exec_ms: f64,
    llc: u64,
    dram: u64,
    write: bool,
    two_threads: bool,
}

fn gang_params() -> impl Strategy<Value = GangParams> {
    (3u64..30, 0.2f64..4.0, 0u64..150_000, 0u64..40_000, any::<bool>(), any::<bool>()).prop_map(
        |(period_ms, exec_ms, llc, dram, write, two_threads)| GangParams {
            period_ms,
            exec_ms,
            llc,
            dram,
            write,
            two_threads,
        },
    )
}

fn demand(exec_ms: f64, llc: u64, dram: u64, write: bool) -> DemandProfile {
    DemandProfile {
        cpu_cycles: (exec_ms * CYCLES_PER_MS) as u64,
        llc_accesses: llc,
        dram_accesses: dram,
        access_type: if write { AccessType::Write } else { AccessType::Read },
        ..Default::default()
    }
}

/// Gang `i` lives in partition `i % 2`, i.e. on cores {0, 1} or {2, 3}.
fn gang(i: usize, p: &GangParams) -> GangSpec {
    let part = i % 2;
    let n = if p.two_threads { 2 } else { 1 };
    let threads: Vec<ThreadSpec> = (0..n)
        .map(|j| ThreadSpec {
            name: format!("g{i}t{j}"),
            core: 2 * part + j,
            activation: Activation::Periodic {
                period_ns: p.period_ms * MS,
                deadline_ns: p.period_ms * MS,
                offset_ns: i as u64 * MS / 2,
            },
            demand: demand(p.exec_ms, p.llc, p.dram, p.write),
            gpu: None,
        })
        .collect();
    GangSpec {
        id: format!("g{i}"),
        cores: threads.iter().map(|t| t.core).collect(),
        threads,
        rt_priority: 10 + i as u32,
        partition_id: part,
        colors: [i as u32 % 4].into_iter().collect(),
        virtual_gang_group: None,
        seed: i as u64,
    }
}

fn attacker(variant: usize, core: Option<usize>) -> AttackerSpec {
    let (p, a, t) = all_attack_variants()[variant];
    let (mut spec, _) = build_attacker(p, a, t, Some(0)).expect("attacker");
    spec.core = core;
    spec.colors = (0..4).collect();
    spec
}

fn scenario(mode: usize, gangs: &[GangParams], attackers: &[(usize, Option<usize>)], seed: u64) -> Scenario {
    let mode = [SchedulerMode::Fifo, SchedulerMode::RtGang, SchedulerMode::RtGangPlusPlus][mode];
    let partitions = if mode == SchedulerMode::RtGangPlusPlus {
        vec![[0, 1].into_iter().collect(), [2, 3].into_iter().collect()]
    } else {
        Vec::new()
    };
    let mut tasks: Vec<TaskSpec> = gangs.iter().enumerate().map(|(i, p)| TaskSpec::Gang(gang(i, p))).collect();
    tasks.extend(attackers.iter().map(|&(v, c)| TaskSpec::Attacker(attacker(v, c))));
    Scenario {
        name: "prop".into(),
        seed,
        horizon_s: 0.08,
        platform: default_platform(),
        model: ModelParams::default(),
        scheduler: SchedulerConfig {
            mode,
            partitions,
            ..Default::default()
        },
        throttle: ThrottleConfig::default(),
        tasks,
        output_dir: None,
    }
}

fn recorded(s: &Scenario) -> SimInput {
    let mut input = s.sim_input().expect("valid scenario");
    input.record_schedule = true;
    input
}

/// Fixed-seed runner so the acceptance output is reproducible.
fn seeded_runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn check_run(s: &Scenario, out: &SimOutput) -> Result<(), TestCaseError> {
    let gang_mode = s.scheduler.mode.gang_scheduling();
    for snap in &out.schedule {
        let mut running: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (c, occ) in snap.cores.iter().enumerate() {
            if let Occupant::Rt(t) = *occ {
                let info = &out.threads[t];
                running.entry(info.partition).or_default().insert(info.sched_gang);
                if gang_mode {
                    ensure(snap.current_gangs[info.partition] == Some(info.sched_gang), || {
                        format!("t={} core {c} runs a gang that is not current", snap.time.ns())
                    })?;
                }
            }
            ensure(!(snap.rt_ready[c] && !matches!(occ, Occupant::Rt(_))), || {
                format!("t={} core {c}: ready RT thread not running ({occ:?})", snap.time.ns())
            })?;
            ensure(!(snap.throttled[c] && matches!(occ, Occupant::BestEffort(_))), || {
                format!("t={} core {c}: throttled core runs best-effort work", snap.time.ns())
            })?;
        }
        if gang_mode {
            ensure(running.values().all(|g| g.len() <= 1), || {
                format!("t={} two gangs share a partition: {running:?}", snap.time.ns())
            })?;
        }
    }
    let rt_bytes: f64 = out.bandwidth.iter().map(|b| b.llc_bytes - b.be_llc_bytes).sum();
    let tol = 1e-6 * out.rt_retired_bytes.max(1.0);
    ensure((rt_bytes - out.rt_retired_bytes).abs() <= tol, || {
        format!("bandwidth integral {rt_bytes} != retired {}", out.rt_retired_bytes)
    })?;
    let period_s = out.bucket_ns as f64 * 1e-9;
    let cap = s.platform.dram.peak_bw_bytes_per_s * period_s;
    let mut per_period: BTreeMap<u64, f64> = BTreeMap::new();
    for b in &out.bandwidth {
        *per_period.entry(b.start_ns).or_default() += b.dram_bytes;
    }
    ensure(per_period.values().all(|&d| d <= cap * (1.0 + 1e-9)), || "dram capacity exceeded".into())
}

fn random_context(
    owner: usize,
    core: usize,
    exec_ms: f64,
    llc: u64,
    dram: u64,
    write: bool,
    color: u32,
) -> ExecContext {
    let mut c = ExecContext::cpu(owner, core, SchedClass::Rt);
    c.cpu_cycles = exec_ms * CYCLES_PER_MS;
    c.llc_accesses = llc as f64;
    c.dram_accesses = dram as f64;
    c.access_type = if write { AccessType::Write } else { AccessType::Read };
    c.colors = [color].into_iter().collect();
    c
}

fn context_strategy() -> impl Strategy<Value = (f64, u64, u64, bool, u32, bool, usize)> {
    (0.1f64..5.0, 0u64..200_000, 0u64..60_000, any::<bool>(), 0u32..4, any::<bool>(), 0usize..8)
}

fn build_contexts(raw: &[(f64, u64, u64, bool, u32, bool, usize)]) -> Vec<ExecContext> {
    raw.iter()
        .enumerate()
        .map(|(i, &(ms, llc, dram, write, color, single, bank))| {
            let mut c = random_context(i, i % 4, ms, llc, dram, write, color);
            if single {
                c.bank_spread = BankSpread::SingleBank(bank);
            }
            c
        })
        .collect()
}

pub fn invariants(sink: Sink) {
    let mut runner = seeded_runner(200);
    let strategy = (
        0usize..3,
        prop::collection::vec(gang_params(), 1..=3),
        prop::collection::vec((0usize..10, prop::option::of(0usize..4)), 0..=4),
        any::<u64>(),
    );
    let runs = Cell::new(0u32);
    let sched = runner.run(&strategy, |(mode, gangs, attackers, seed)| {
        let s = scenario(mode, &gangs, &attackers, seed);
        let first = simulate(recorded(&s)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check_run(&s, &first)?;
        for _ in 0..2 {
            let again = simulate(recorded(&s)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            ensure(again.trace.hash() == first.trace.hash(), || "trace hash differs between repeats".into())?;
        }
        runs.set(runs.get() + 1);
        Ok(())
    });
    sink(
        "5a",
        sched.is_ok(),
        match &sched {
            Ok(()) => format!(
                "{} random scenarios: gang exclusivity, immediate preemption, RT never throttled, \
                 bandwidth integral = retired bytes, dram capacity, identical hash over 3 repeats",
                runs.get()
            ),
            Err(e) => format!("{e}"),
        },
    );

    let platform = default_platform();
    let params = ModelParams::default();
    let mut runner = seeded_runner(200);
    let strategy = (
        prop::collection::vec(context_strategy(), 1..=3),
        context_strategy(),
        0.05f64..1.0,
    );
    let model = runner.run(&strategy, |(base, extra, gpu_fraction)| {
        let ctxs = build_contexts(&base);
        let before = compute_rates(&ctxs, &platform, &params, gpu_fraction).unwrap();
        let outcome = advance(&ctxs, &before, &platform, &params, 100_000.0);
        check_conservation(&outcome, &platform, 100_000.0).map_err(TestCaseError::fail)?;

        let mut more = ctxs.clone();
        let mut added = build_contexts(&[extra])[0].clone();
        added.owner = 99;
        added.placement = Placement::Core(3);
        // Sharing colours moves a victim's hits to DRAM, which can unload a
        // bank and speed up a third context, so the co-runner gets a colour
        // of its own.
        let used: BTreeSet<u32> = ctxs.iter().flat_map(|c| c.colors.iter().copied()).collect();
        added.colors = [(0..4).find(|c| !used.contains(c)).unwrap()].into_iter().collect();
        added.task_group = 99;
        added.class = SchedClass::BestEffort;
        more.push(added);
        let after = compute_rates(&more, &platform, &params, gpu_fraction).unwrap();
        let outcome = advance(&more, &after, &platform, &params, 100_000.0);
        check_conservation(&outcome, &platform, 100_000.0).map_err(TestCaseError::fail)?;
        for (i, (a, b)) in before.contexts.iter().zip(&after.contexts).enumerate() {
            ensure(b.time_to_finish_ns >= a.time_to_finish_ns * (1.0 - 1e-9), || {
                format!(
                    "context {i} got faster with an extra co-runner: {} -> {}",
                    a.time_to_finish_ns, b.time_to_finish_ns
                )
            })?;
        }
        Ok(())
    });
    sink(
        "5b",
        model.is_ok(),
        match &model {
            Ok(()) => "200 random context sets: bank/dram capacity respected, adding a co-runner never speeds anyone up"
                .into(),
            Err(e) => format!("{e}"),
        },
    );
}

/// Completion times from an independent fixed-step integration: rates are
/// recomputed every `dt` and each job's completed fraction advances by
/// `dt / time_to_finish` of its full demand.
fn fine_step(jobs: &[ExecContext], streams: &[ExecContext], platform: &PlatformSpec, dt: f64) -> Vec<f64> {
    let params = ModelParams::default();
    let mut done = vec![0.0f64; jobs.len()];
    let mut finish = vec![f64::NAN; jobs.len()];
    let mut t = 0.0;
    while finish.iter().any(|f| f.is_nan()) {
        let active: Vec<usize> = (0..jobs.len()).filter(|&i| finish[i].is_nan()).collect();
        let busy: BTreeSet<usize> = active.iter().map(|&i| core_of(&jobs[i])).collect();
        let mut ctxs: Vec<ExecContext> = active.iter().map(|&i| jobs[i].clone()).collect();
        ctxs.extend(streams.iter().filter(|s| !busy.contains(&core_of(s))).cloned());
        let rates = compute_rates(&ctxs, platform, &params, 1.0).unwrap();
        for (k, &i) in active.iter().enumerate() {
            let ttf = rates.contexts[k].time_to_finish_ns;
            let step = dt / ttf;
            if done[i] + step >= 1.0 {
                finish[i] = t + (1.0 - done[i]) * ttf;
            } else {
                done[i] += step;
            }
        }
        t += dt;
        assert!(t < 1e9, "reference did not converge");
    }
    finish
}

fn core_of(c: &ExecContext) -> usize {
    match c.placement {
        Placement::Core(core) => core,
        Placement::Gpu => usize::MAX,
    }
}

pub fn oracle_equivalence(sink: Sink) {
    let mut runner = seeded_runner(20);
    let job = (0.3f64..4.0, 0u64..60_000, 0u64..15_000, any::<bool>(), 0u32..4);
    let strategy = (
        prop::collection::vec(job, 1..=3),
        prop::option::of(0usize..10),
    );
    let worst = Cell::new(0.0f64);
    let count = Cell::new(0u32);
    let res = runner.run(&strategy, |(jobs, attacker_variant)| {
        let specs: Vec<GangParams> = jobs
            .iter()
            .map(|&(exec_ms, llc, dram, write, _)| GangParams {
                period_ms: 50,
                exec_ms,
                llc,
                dram,
                write,
                two_threads: false,
            })
            .collect();
        // One single-thread gang per core, all released at t = 0.
        let mut gangs: Vec<GangSpec> = specs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut g = gang(0, p);
                g.id = format!("m{i}");
                g.threads[0].name = format!("m{i}");
                g.threads[0].core = i;
                g.cores = [i].into_iter().collect();
                g.colors = [jobs[i].4].into_iter().collect();
                g.rt_priority = 10 + i as u32;
                g
            })
            .collect();
        for g in &mut gangs {
            if let Activation::Periodic { offset_ns, .. } = &mut g.threads[0].activation {
                *offset_ns = 0;
            }
        }
        // An attacker fills one more slot when fewer than three jobs exist.
        let attackers: Vec<AttackerSpec> = attacker_variant
            .filter(|_| gangs.len() < 3)
            .map(|v| attacker(v, Some(3)))
            .into_iter()
            .collect();
        let mut s = scenario(0, &[], &[], 7);
        s.horizon_s = 0.02;
        s.tasks = gangs.iter().cloned().map(TaskSpec::Gang).collect();
        s.tasks.extend(attackers.iter().cloned().map(TaskSpec::Attacker));
        let out = simulate(s.sim_input().unwrap()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let samples = latency_samples(&out.trace, out.threads.len()).map_err(|e| TestCaseError::fail(e.to_string()))?;

        let ref_jobs: Vec<ExecContext> = gangs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let t = &g.threads[0];
                let mut c = ExecContext::cpu(i, t.core, SchedClass::Rt);
                c.task_group = i;
                c.cpu_cycles = t.demand.cpu_cycles as f64;
                c.llc_accesses = t.demand.llc_accesses as f64;
                c.dram_accesses = t.demand.dram_accesses as f64;
                c.access_type = t.demand.access_type;
                c.colors = g.colors.clone();
                c
            })
            .collect();
        let streams: Vec<ExecContext> = attackers
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let p = attacker_profile(a, &ModelParams::default().attackers);
                let mut c = ExecContext::cpu(gangs.len() + i, a.core.unwrap(), SchedClass::BestEffort);
                c.task_group = gangs.len() + i;
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
        let reference = fine_step(&ref_jobs, &streams, &s.platform, 1_000.0);
        for (i, r) in reference.iter().enumerate() {
            let sim = samples
                .iter()
                .find(|x| x.thread == i)
                .ok_or_else(|| TestCaseError::fail(format!("job {i} did not finish")))?;
            let err = (sim.completion_ns as f64 - r).abs() / r;
            worst.set(worst.get().max(err));
            ensure(err <= 0.005, || {
                format!("job {i}: simulator {} ns vs reference {r:.0} ns", sim.completion_ns)
            })?;
        }
        count.set(count.get() + 1);
        Ok(())
    });
    sink(
        "6",
        res.is_ok(),
        match &res {
            Ok(()) => format!("{} micro-scenarios with 100 us epochs, worst relative error vs 1 us reference {:.4}%", count.get(), worst.get() * 100.0),
            Err(e) => format!("{e}"),
        },
    );
}

fn compute_gang(id: &str, core: usize, partition: usize, period_ms: u64, exec_ms: f64, prio: u32) -> GangSpec {
    GangSpec {
        id: id.into(),
        threads: vec![ThreadSpec {
            name: id.into(),
            core,
            activation: Activation::Periodic {
                period_ns: period_ms * MS,
                deadline_ns: period_ms * MS,
                offset_ns: 0,
            },
            demand: DemandProfile::compute((exec_ms * CYCLES_PER_MS) as u64),
            gpu: None,
        }],
        cores: [core].into_iter().collect(),
        rt_priority: prio,
        partition_id: partition,
        colors: [partition as u32].into_iter().collect(),
        virtual_gang_group: None,
        seed: 0,
    }
}

/// Trace lines touching task 0 (gang A), with their times.
fn gang_a_events(out: &SimOutput) -> Vec<(u64, EventKind)> {
    out.trace
        .events()
        .filter(|e| e.payload.task == Some(0) && e.kind != EventKind::EpochBoundary)
        .map(|e| (e.time.ns(), e.kind))
        .collect()
}

pub fn partitions(sink: Sink) {
    let mut a = compute_gang("A", 0, 0, 10, 4.0, 10);
    let mut b = a.clone();
    b.id = "B".into();
    b.threads[0].name = "B".into();
    b.rt_priority = 20;
    let mixed_priority = validate_virtual_gangs(&[
        GangSpec { virtual_gang_group: Some("v".into()), ..a.clone() },
        GangSpec { virtual_gang_group: Some("v".into()), ..b.clone() },
    ])
    .is_err();
    b.rt_priority = 10;
    if let Activation::Periodic { period_ns, deadline_ns, .. } = &mut b.threads[0].activation {
        *period_ns = 20 * MS;
        *deadline_ns = 20 * MS;
    }
    let mixed_period = validate_virtual_gangs(&[
        GangSpec { virtual_gang_group: Some("v".into()), ..a.clone() },
        GangSpec { virtual_gang_group: Some("v".into()), ..b.clone() },
    ])
    .is_err();
    a.threads[0].name = "A".into();

    // Both gangs of the default preset run at the same time.
    let mut s = preset("arhud-default").unwrap();
    s.horizon_s = 2.0;
    let out = simulate(recorded(&s)).unwrap();
    let fe = out.threads.iter().position(|t| t.name == rtgang_sim::workload::FRONT_END).unwrap();
    let dnn = out.threads.iter().position(|t| t.name == rtgang_sim::workload::DNN).unwrap();
    let overlap = out.schedule.iter().any(|snap| {
        snap.cores.contains(&Occupant::Rt(fe)) && snap.cores.contains(&Occupant::Rt(dnn))
    });

    // Gang A on core 0 (partition 0); gang B, higher priority, on core 3.
    let b = compute_gang("B", 3, 1, 7, 3.0, 20);
    let run = |mode: SchedulerMode, with_b: bool| {
        let mut gangs = vec![TaskSpec::Gang(a.clone())];
        if with_b {
            gangs.push(TaskSpec::Gang(b.clone()));
        }
        let mut s = scenario(0, &[], &[], 3);
        s.horizon_s = 0.5;
        s.scheduler.mode = mode;
        if mode == SchedulerMode::RtGangPlusPlus {
            s.scheduler.partitions = vec![[0, 1, 2].into_iter().collect(), [3].into_iter().collect()];
        }
        s.tasks = gangs;
        gang_a_events(&simulate(s.sim_input().unwrap()).unwrap())
    };
    let pp_alone = run(SchedulerMode::RtGangPlusPlus, false);
    let pp_with = run(SchedulerMode::RtGangPlusPlus, true);
    let global_with = run(SchedulerMode::RtGang, true);
    let independent = pp_alone == pp_with;
    let global_differs = pp_alone != global_with;
    sink(
        "7",
        mixed_priority && mixed_period && overlap && independent && global_differs,
        format!(
            "mixed-priority rejected: {mixed_priority}; mixed-period rejected: {mixed_period}; \
             arhud-default runs FrontEnd and dnn concurrently: {overlap}; partition-0 trace identical \
             with and without the other partition's gang ({} events): {independent}; \
             differs under one global partition: {global_differs}",
            pp_alone.len()
        ),
    );
}
