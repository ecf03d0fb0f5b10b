//! Shared-resource contention model.
//!
//! Given the contexts active during an interval, computes the rate at which
//! each one progresses. Every context is a closed-loop stream: per unit of
//! work it needs some compute time plus LLC and DRAM accesses issued with
//! `mlp` accesses in flight. Banks and DRAM are processor-sharing servers:
//!
//! * each resource `r` gets a fluid stretch `sigma_r >= 1`, the smallest
//!   value for which the weighted access rate of its users fits in the
//!   resource's capacity (solved per resource with every other stretch at 1,
//!   which keeps the allocation monotone in the context set);
//! * CPU accesses to DRAM additionally see a queueing stretch
//!   `1 / (1 - rho_others)` computed from the offered load of the other
//!   contexts, capped at `dram_queue_cap`. The GPU is bandwidth-bound and
//!   only sees the fluid share.
//!
//! Because every actual stretch is at least the fluid one, per-resource
//! capacity is never exceeded.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{Color, CoreId, PlatformSpec};
use crate::workload::{AccessType, AttackerIntensity, BankSpread};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Bank capacity cost of a write access.
    pub bank_write_weight: f64,
    /// Fraction of LLC accesses that turn into DRAM accesses when colours
    /// are shared with another task's LLC-resident footprint.
    pub miss_inflation: f64,
    /// Upper bound of the DRAM queueing stretch seen by CPU accesses.
    pub dram_queue_cap: f64,
    /// Upper bound of the per-bank queueing stretch seen by CPU accesses.
    pub bank_queue_cap: f64,
    pub epoch_us: u64,
    pub attackers: AttackerIntensity,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            bank_write_weight: 1.2,
            miss_inflation: 0.2,
            dram_queue_cap: 40.0,
            bank_queue_cap: 13.0,
            epoch_us: 100,
            attackers: AttackerIntensity::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedClass {
    Rt,
    BestEffort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Core(CoreId),
    Gpu,
}

/// Remaining work of one running job (or one unit of an endless stream
/// when `unbounded`). All quantities shrink proportionally as it runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecContext {
    pub owner: usize,
    /// Contexts of the same task never inflate each other's misses.
    pub task_group: usize,
    pub placement: Placement,
    pub class: SchedClass,
    pub unbounded: bool,
    pub cpu_cycles: f64,
    pub llc_accesses: f64,
    pub dram_accesses: f64,
    pub gpu_compute_ns: f64,
    pub gpu_mem_bytes: f64,
    pub bank_spread: BankSpread,
    pub access_type: AccessType,
    pub mlp: f64,
    pub colors: BTreeSet<Color>,
}

impl ExecContext {
    pub fn cpu(owner: usize, core: CoreId, class: SchedClass) -> Self {
        ExecContext {
            owner,
            task_group: owner,
            placement: Placement::Core(core),
            class,
            unbounded: false,
            cpu_cycles: 0.0,
            llc_accesses: 0.0,
            dram_accesses: 0.0,
            gpu_compute_ns: 0.0,
            gpu_mem_bytes: 0.0,
            bank_spread: BankSpread::Uniform,
            access_type: AccessType::Read,
            mlp: 1.0,
            colors: BTreeSet::new(),
        }
    }

    pub fn gpu(owner: usize, compute_ns: f64, mem_bytes: f64) -> Self {
        ExecContext {
            placement: Placement::Gpu,
            class: SchedClass::Rt,
            gpu_compute_ns: compute_ns,
            gpu_mem_bytes: mem_bytes,
            ..ExecContext::cpu(owner, 0, SchedClass::Rt)
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.unbounded
            && self.cpu_cycles <= 0.0
            && self.llc_accesses <= 0.0
            && self.dram_accesses <= 0.0
            && self.gpu_compute_ns <= 0.0
            && self.gpu_mem_bytes <= 0.0
    }

    /// Scales remaining work by `1 - fraction`.
    pub fn retire_fraction(&mut self, fraction: f64) {
        if self.unbounded {
            return;
        }
        let keep = (1.0 - fraction).max(0.0);
        self.cpu_cycles *= keep;
        self.llc_accesses *= keep;
        self.dram_accesses *= keep;
        self.gpu_compute_ns *= keep;
        self.gpu_mem_bytes *= keep;
        if keep == 0.0 {
            self.cpu_cycles = 0.0;
            self.llc_accesses = 0.0;
            self.dram_accesses = 0.0;
            self.gpu_compute_ns = 0.0;
            self.gpu_mem_bytes = 0.0;
        }
    }

    fn llc_class(&self) -> bool {
        self.placement != Placement::Gpu && self.llc_accesses > 0.0
    }
}

/// Extra DRAM accesses caused by capacity interference: a fraction `m` of
/// the context's LLC accesses when it shares at least one colour with an
/// LLC-resident context of another task, zero otherwise.
pub fn miss_inflation(context: &ExecContext, cohabitants: &[&ExecContext], m: f64) -> f64 {
    if context.placement == Placement::Gpu || context.llc_accesses <= 0.0 {
        return 0.0;
    }
    let shared = cohabitants.iter().any(|c| {
        c.task_group != context.task_group
            && c.llc_class()
            && !c.colors.is_disjoint(&context.colors)
    });
    if shared {
        m * context.llc_accesses
    } else {
        0.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContentionError {
    #[error("core {0} hosts more than one context")]
    OversubscribedCore(CoreId),
    #[error("more than one GPU context")]
    OversubscribedGpu,
    #[error("context placed on unknown core {0}")]
    UnknownCore(CoreId),
}

/// Constant progress rates of one context between two rate changes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextRate {
    /// Time to finish the remaining work (per unit when unbounded), ns.
    pub time_to_finish_ns: f64,
    pub cycles_per_ns: f64,
    /// LLC-served accesses per ns (hits only).
    pub llc_per_ns: f64,
    pub dram_per_ns: f64,
    pub gpu_bytes_per_ns: f64,
    /// Share of this context's LLC-served accesses that go to each bank.
    pub bank_fractions: Vec<f64>,
    pub access_type: AccessType,
}

impl ContextRate {
    /// Fraction of remaining work retired per ns.
    pub fn progress_per_ns(&self) -> f64 {
        if self.time_to_finish_ns > 0.0 && self.time_to_finish_ns.is_finite() {
            1.0 / self.time_to_finish_ns
        } else if self.time_to_finish_ns == 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }

    /// Bytes reaching the L2 (hits and misses) per ns.
    pub fn refill_bytes_per_ns(&self, line: f64) -> f64 {
        (self.llc_per_ns + self.dram_per_ns) * line
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateSet {
    pub contexts: Vec<ContextRate>,
    pub bank_stretch: Vec<f64>,
    pub dram_fluid_stretch: f64,
    pub dram_offered_load: f64,
}

struct Stream {
    /// Per-unit quantities after miss inflation.
    cycles: f64,
    llc: f64,
    dram: f64,
    gpu_compute_ns: f64,
    gpu_lines: f64,
    bank_frac: Vec<f64>,
    llc_time: f64,
    dram_time: f64,
    gpu_line_time: f64,
    base_time: f64,
    bank_w: f64,
    dram_w: f64,
    is_gpu: bool,
}

fn check_placement(contexts: &[ExecContext], platform: &PlatformSpec) -> Result<(), ContentionError> {
    let mut seen = vec![false; platform.num_cores];
    let mut gpu = false;
    for c in contexts {
        match c.placement {
            Placement::Core(core) => {
                let slot = seen
                    .get_mut(core)
                    .ok_or(ContentionError::UnknownCore(core))?;
                if *slot {
                    return Err(ContentionError::OversubscribedCore(core));
                }
                *slot = true;
            }
            Placement::Gpu => {
                if gpu {
                    return Err(ContentionError::OversubscribedGpu);
                }
                gpu = true;
            }
        }
    }
    Ok(())
}

/// Smallest `s >= 1` with `sum_i w_i a_i / (T_i + a_i t_i (s - 1)) <= cap`.
/// Terms are `(w a, T, a t)`.
fn fluid_stretch(terms: &[(f64, f64, f64)], cap: f64) -> f64 {
    let load = |s: f64| -> f64 {
        terms
            .iter()
            .map(|&(wa, t0, at)| wa / (t0 + at * (s - 1.0)))
            .sum()
    };
    if terms.is_empty() || load(1.0) <= cap {
        return 1.0;
    }
    // Each term is bounded by w / (t (s - 1)).
    let bound: f64 = terms.iter().map(|&(wa, _, at)| wa / at).sum();
    let mut lo = 1.0;
    let mut hi = 1.0 + bound / cap;
    while load(hi) > cap {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if load(mid) > cap {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= hi * 1e-13 {
            break;
        }
    }
    hi
}

/// Progress rates for a fixed set of active contexts. `gpu_fraction` is the
/// iGPU throttle factor `f(level)`.
pub fn compute_rates(
    contexts: &[ExecContext],
    platform: &PlatformSpec,
    params: &ModelParams,
    gpu_fraction: f64,
) -> Result<RateSet, ContentionError> {
    check_placement(contexts, platform)?;
    let nb = platform.llc.num_banks;
    let line = platform.llc.line_bytes as f64;
    let h = platform.llc.hit_latency_ns;
    let dram_lat = platform.dram.access_latency_ns;
    let gpu_bw_per_ns = platform.gpu.mem_share_bytes_per_s * gpu_fraction * 1e-9;

    let refs: Vec<&ExecContext> = contexts.iter().collect();
    let streams: Vec<Stream> = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let others: Vec<&ExecContext> = refs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| *c)
                .collect();
            let extra = miss_inflation(c, &others, params.miss_inflation);
            let llc = c.llc_accesses - extra;
            let dram = c.dram_accesses + extra;
            let mut bank_frac = vec![0.0; nb];
            match c.bank_spread {
                BankSpread::Uniform => bank_frac.iter_mut().for_each(|f| *f = 1.0 / nb as f64),
                BankSpread::SingleBank(b) => bank_frac[b % nb] = 1.0,
            }
            let is_gpu = c.placement == Placement::Gpu;
            let gpu_lines = c.gpu_mem_bytes / line;
            let gpu_line_time = if gpu_lines > 0.0 { line / gpu_bw_per_ns } else { 0.0 };
            let cycles = c.cpu_cycles;
            let llc_time = h / c.mlp;
            let dram_time = dram_lat / c.mlp;
            let base_time = platform.cycles_to_ns(cycles)
                + llc * llc_time
                + dram * dram_time
                + c.gpu_compute_ns
                + gpu_lines * gpu_line_time;
            let write = c.access_type == AccessType::Write;
            Stream {
                cycles,
                llc,
                dram,
                gpu_compute_ns: c.gpu_compute_ns,
                gpu_lines,
                bank_frac,
                llc_time,
                dram_time,
                gpu_line_time,
                base_time,
                bank_w: if write { params.bank_write_weight } else { 1.0 },
                dram_w: if write { platform.dram.write_penalty } else { 1.0 },
                is_gpu,
            }
        })
        .collect();

    let bank_cap = platform.llc.bank_peak_rate * 1e-9;
    let bank_stretch: Vec<f64> = (0..nb)
        .map(|b| {
            let terms: Vec<_> = streams
                .iter()
                .filter(|s| s.llc > 0.0 && s.bank_frac[b] > 0.0 && s.base_time > 0.0)
                .map(|s| {
                    let a = s.llc * s.bank_frac[b];
                    (s.bank_w * a, s.base_time, a * s.llc_time)
                })
                .collect();
            fluid_stretch(&terms, bank_cap)
        })
        .collect();

    // Offered load of each stream on each bank, as a fraction of capacity.
    let bank_offered: Vec<Vec<f64>> = streams
        .iter()
        .map(|s| {
            s.bank_frac
                .iter()
                .map(|f| {
                    if s.base_time > 0.0 && s.llc > 0.0 {
                        s.bank_w * s.llc * f / s.base_time / bank_cap
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let bank_total: Vec<f64> = (0..nb)
        .map(|b| bank_offered.iter().map(|o| o[b]).sum())
        .collect();
    let bank_rho_max = 1.0 - 1.0 / params.bank_queue_cap.max(1.0);

    let dram_cap = platform.dram.peak_bw_bytes_per_s * 1e-9 / line;
    let dram_terms: Vec<(f64, f64, f64)> = streams
        .iter()
        .map(|s| {
            if s.is_gpu {
                (s.gpu_lines, s.base_time, s.gpu_lines * s.gpu_line_time)
            } else {
                (s.dram_w * s.dram, s.base_time, s.dram * s.dram_time)
            }
        })
        .collect();
    let active: Vec<(f64, f64, f64)> = dram_terms
        .iter()
        .copied()
        .filter(|&(wa, t0, _)| wa > 0.0 && t0 > 0.0)
        .collect();
    let dram_fluid = fluid_stretch(&active, dram_cap);
    let offered: Vec<f64> = dram_terms
        .iter()
        .map(|&(wa, t0, _)| if wa > 0.0 && t0 > 0.0 { wa / t0 / dram_cap } else { 0.0 })
        .collect();
    let offered_total: f64 = offered.iter().sum();
    let rho_max = 1.0 - 1.0 / params.dram_queue_cap.max(1.0);

    let rates = streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            // A request queues behind what the other streams keep in
            // flight at its bank, never faster than the fluid share.
            let bank_factor: f64 = s
                .bank_frac
                .iter()
                .enumerate()
                .filter(|(_, f)| **f > 0.0)
                .map(|(b, f)| {
                    let rho = (bank_total[b] - bank_offered[i][b]).clamp(0.0, bank_rho_max);
                    f * bank_stretch[b].max(1.0 / (1.0 - rho))
                })
                .sum();
            let dram_factor = if s.is_gpu {
                dram_fluid
            } else {
                let rho = (offered_total - offered[i]).clamp(0.0, rho_max);
                dram_fluid.max(1.0 / (1.0 - rho))
            };
            let t = platform.cycles_to_ns(s.cycles)
                + s.llc * s.llc_time * bank_factor
                + s.dram * s.dram_time * dram_factor
                + s.gpu_compute_ns
                + s.gpu_lines * s.gpu_line_time * dram_factor;
            let per = |q: f64| if t > 0.0 { q / t } else { 0.0 };
            ContextRate {
                time_to_finish_ns: t,
                cycles_per_ns: per(s.cycles),
                llc_per_ns: per(s.llc),
                dram_per_ns: if s.is_gpu { 0.0 } else { per(s.dram) },
                gpu_bytes_per_ns: per(s.gpu_lines * line),
                bank_fractions: s.bank_frac.clone(),
                access_type: contexts[i].access_type,
            }
        })
        .collect();

    Ok(RateSet {
        contexts: rates,
        bank_stretch,
        dram_fluid_stretch: dram_fluid,
        dram_offered_load: offered_total,
    })
}

/// Work retired by one context over an interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextProgress {
    pub fraction: f64,
    pub cycles: f64,
    pub llc_accesses: f64,
    pub dram_accesses: f64,
    pub gpu_bytes: f64,
    /// Time spent running before completing (== interval when not done).
    pub busy_ns: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochOutcome {
    pub progress: Vec<ContextProgress>,
    /// L2-level bytes (hits and misses) per core.
    pub core_llc_bytes: Vec<f64>,
    pub core_dram_bytes: Vec<f64>,
    pub gpu_dram_bytes: f64,
    pub bank_accesses: Vec<f64>,
    pub bank_weighted_accesses: Vec<f64>,
    pub dram_weighted_bytes: f64,
}

pub fn advance(
    contexts: &[ExecContext],
    rates: &RateSet,
    platform: &PlatformSpec,
    params: &ModelParams,
    interval_ns: f64,
) -> EpochOutcome {
    let line = platform.llc.line_bytes as f64;
    let nb = platform.llc.num_banks;
    let mut out = EpochOutcome {
        progress: Vec::with_capacity(contexts.len()),
        core_llc_bytes: vec![0.0; platform.num_cores],
        core_dram_bytes: vec![0.0; platform.num_cores],
        bank_accesses: vec![0.0; nb],
        bank_weighted_accesses: vec![0.0; nb],
        ..Default::default()
    };
    for (c, r) in contexts.iter().zip(&rates.contexts) {
        let busy = if c.unbounded {
            interval_ns
        } else {
            interval_ns.min(r.time_to_finish_ns)
        };
        let fraction = if c.unbounded {
            0.0
        } else if r.time_to_finish_ns <= busy {
            1.0
        } else {
            busy / r.time_to_finish_ns
        };
        let p = ContextProgress {
            fraction,
            cycles: r.cycles_per_ns * busy,
            llc_accesses: r.llc_per_ns * busy,
            dram_accesses: r.dram_per_ns * busy,
            gpu_bytes: r.gpu_bytes_per_ns * busy,
            busy_ns: busy,
        };
        let write = c.access_type == AccessType::Write;
        for (b, f) in r.bank_fractions.iter().enumerate() {
            let a = p.llc_accesses * f;
            out.bank_accesses[b] += a;
            out.bank_weighted_accesses[b] += a * if write { params.bank_write_weight } else { 1.0 };
        }
        match c.placement {
            Placement::Core(core) => {
                out.core_llc_bytes[core] += (p.llc_accesses + p.dram_accesses) * line;
                out.core_dram_bytes[core] += p.dram_accesses * line;
                out.dram_weighted_bytes += p.dram_accesses
                    * line
                    * if write { platform.dram.write_penalty } else { 1.0 };
            }
            Placement::Gpu => {
                out.gpu_dram_bytes += p.gpu_bytes;
                out.dram_weighted_bytes += p.gpu_bytes;
            }
        }
        out.progress.push(p);
    }
    out
}

/// Progress of every context over one epoch of `epoch_ns` at constant rates.
pub fn epoch_progress(
    contexts: &[ExecContext],
    platform: &PlatformSpec,
    params: &ModelParams,
    gpu_fraction: f64,
    epoch_ns: f64,
) -> Result<EpochOutcome, ContentionError> {
    let rates = compute_rates(contexts, platform, params, gpu_fraction)?;
    Ok(advance(contexts, &rates, platform, params, epoch_ns))
}

/// Capacity check used as a run-time invariant. Returns a description of
/// the violated bound.
pub fn check_conservation(
    outcome: &EpochOutcome,
    platform: &PlatformSpec,
    interval_ns: f64,
) -> Result<(), String> {
    let tol = 1e-9;
    let bank_cap = platform.llc.bank_peak_rate * 1e-9 * interval_ns;
    for (b, &a) in outcome.bank_weighted_accesses.iter().enumerate() {
        if a > bank_cap * (1.0 + tol) + tol {
            return Err(format!("bank {b} retired {a} accesses > capacity {bank_cap}"));
        }
    }
    let dram_cap = platform.dram.peak_bw_bytes_per_s * 1e-9 * interval_ns;
    if outcome.dram_weighted_bytes > dram_cap * (1.0 + tol) + tol {
        return Err(format!(
            "dram moved {} bytes > capacity {dram_cap}",
            outcome.dram_weighted_bytes
        ));
    }
    Ok(())
}
