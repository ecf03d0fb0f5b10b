//! Post-processing: per-thread latency statistics rebuilt from the trace,
//! frame accounting, bandwidth series and output files.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventKind, Trace};
use crate::sim::{SimOutput, ThreadInfo};
use crate::workload::{DNN, FRONT_END};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("malformed trace at record {index}: {reason}")]
    MalformedTrace { index: usize, reason: String },
    #[error("runs are not comparable: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub thread: usize,
    pub release_ns: u64,
    pub completion_ns: u64,
}

impl LatencySample {
    pub fn latency_ns(&self) -> u64 {
        self.completion_ns - self.release_ns
    }

    pub fn latency_ms(&self) -> f64 {
        self.latency_ns() as f64 * 1e-6
    }
}

/// Nearest-rank percentile of sorted values: the smallest value with at
/// least `p` percent of the samples at or below it.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub deadline_misses: usize,
}

impl LatencyStats {
    pub fn from_ms(values: &[f64], deadline_ms: Option<f64>) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(LatencyStats {
            count: v.len(),
            min_ms: *v.first()?,
            median_ms: nearest_rank(&v, 50.0)?,
            p99_ms: nearest_rank(&v, 99.0)?,
            max_ms: *v.last()?,
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            deadline_misses: deadline_ms.map_or(0, |d| v.iter().filter(|&&x| x > d).count()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadMetrics {
    pub name: String,
    pub gang: String,
    pub released: u64,
    pub dropped: u64,
    pub completed: u64,
    pub latency: Option<LatencyStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub arrived: u64,
    pub processed: u64,
    pub dropped: u64,
    pub processed_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreBandwidth {
    pub core: usize,
    pub llc_mb_s: f64,
    pub dram_mb_s: f64,
    pub be_llc_mb_s: f64,
    /// Largest best-effort volume charged in one regulation period.
    pub max_regulated_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub horizon_s: f64,
    pub events: usize,
    pub trace_hash: String,
    pub threads: Vec<ThreadMetrics>,
    pub frames: Option<FrameStats>,
    pub dnn_avg_ms: Option<f64>,
    pub bandwidth: Vec<CoreBandwidth>,
    pub gpu_dram_mb_s: f64,
    pub attackers: Vec<String>,
}

impl RunMetrics {
    pub fn thread(&self, name: &str) -> Option<&ThreadMetrics> {
        self.threads.iter().find(|t| t.name == name)
    }

    pub fn latency(&self, name: &str) -> Option<&LatencyStats> {
        self.thread(name)?.latency.as_ref()
    }
}

/// Rebuilds every job's release and completion from the trace. A periodic
/// release immediately followed by a drop of the same task is discarded.
pub fn latency_samples(trace: &Trace, num_threads: usize) -> Result<Vec<LatencySample>, MetricsError> {
    if let Some(index) = trace.first_order_violation() {
        return Err(MetricsError::MalformedTrace {
            index,
            reason: "records out of (time, seq) order".into(),
        });
    }
    let mut open: Vec<VecDeque<u64>> = vec![VecDeque::new(); num_threads];
    let mut samples = Vec::new();
    for (index, rec) in trace.records.iter().enumerate() {
        let ev = &rec.event;
        let task = match ev.kind {
            EventKind::JobRelease | EventKind::JobCompletion | EventKind::FrameDrop => {
                match ev.payload.task.map(|t| t as usize) {
                    Some(t) if t < num_threads => t,
                    other => {
                        return Err(MetricsError::MalformedTrace {
                            index,
                            reason: format!("{} names unknown task {other:?}", ev.kind.as_str()),
                        })
                    }
                }
            }
            _ => continue,
        };
        match ev.kind {
            EventKind::JobRelease => open[task].push_back(ev.time.ns()),
            EventKind::FrameDrop => {
                if open[task].pop_back() != Some(ev.time.ns()) {
                    return Err(MetricsError::MalformedTrace {
                        index,
                        reason: "frame drop without a matching release".into(),
                    });
                }
            }
            EventKind::JobCompletion => {
                let release = open[task].pop_front().ok_or_else(|| MetricsError::MalformedTrace {
                    index,
                    reason: format!("completion of task {task} without a release"),
                })?;
                if ev.time.ns() - release != ev.payload.detail {
                    return Err(MetricsError::MalformedTrace {
                        index,
                        reason: "completion latency does not match its release".into(),
                    });
                }
                samples.push(LatencySample {
                    thread: task,
                    release_ns: release,
                    completion_ns: ev.time.ns(),
                });
            }
            _ => unreachable!(),
        }
    }
    Ok(samples)
}

pub fn summarize(out: &SimOutput) -> Result<RunMetrics, MetricsError> {
    let n = out.threads.len();
    let samples = latency_samples(&out.trace, n)?;
    let mut released = vec![0u64; n];
    let mut dropped = vec![0u64; n];
    for ev in out.trace.events() {
        match (ev.kind, ev.payload.task) {
            (EventKind::JobRelease, Some(t)) if (t as usize) < n => released[t as usize] += 1,
            (EventKind::FrameDrop, Some(t)) if (t as usize) < n => dropped[t as usize] += 1,
            _ => {}
        }
    }
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n];
    for s in &samples {
        per[s.thread].push(s.latency_ms());
    }
    let threads: Vec<ThreadMetrics> = out
        .threads
        .iter()
        .enumerate()
        .map(|(i, t)| ThreadMetrics {
            name: t.name.clone(),
            gang: t.gang.clone(),
            released: released[i] - dropped[i],
            dropped: dropped[i],
            completed: per[i].len() as u64,
            latency: LatencyStats::from_ms(&per[i], t.deadline_ns.map(|d| d as f64 * 1e-6)),
        })
        .collect();
    let frames = threads.iter().find(|t| t.name == FRONT_END).map(|t| {
        let arrived = t.released + t.dropped;
        FrameStats {
            arrived,
            processed: t.released,
            dropped: t.dropped,
            processed_fraction: if arrived == 0 {
                1.0
            } else {
                t.released as f64 / arrived as f64
            },
        }
    });
    let dnn_avg_ms = threads
        .iter()
        .find(|t| t.name == DNN)
        .and_then(|t| t.latency.as_ref())
        .map(|l| l.mean_ms);
    Ok(RunMetrics {
        horizon_s: out.horizon.as_secs_f64(),
        events: out.trace.len(),
        trace_hash: out.trace.hash(),
        threads,
        frames,
        dnn_avg_ms,
        bandwidth: core_bandwidth(out),
        gpu_dram_mb_s: out.gpu_dram_bytes / out.horizon.as_secs_f64().max(1e-12) * 1e-6,
        attackers: out.attackers.clone(),
    })
}

fn core_bandwidth(out: &SimOutput) -> Vec<CoreBandwidth> {
    let secs = out.horizon.as_secs_f64().max(1e-12);
    (0..out.num_cores)
        .map(|core| {
            let mut acc = CoreBandwidth {
                core,
                llc_mb_s: 0.0,
                dram_mb_s: 0.0,
                be_llc_mb_s: 0.0,
                max_regulated_bytes: 0.0,
            };
            for s in out.bandwidth.iter().filter(|s| s.core == core) {
                acc.llc_mb_s += s.llc_bytes;
                acc.dram_mb_s += s.dram_bytes;
                acc.be_llc_mb_s += s.be_llc_bytes;
                acc.max_regulated_bytes = acc.max_regulated_bytes.max(s.regulated_bytes);
            }
            acc.llc_mb_s *= 1e-6 / secs;
            acc.dram_mb_s *= 1e-6 / secs;
            acc.be_llc_mb_s *= 1e-6 / secs;
            acc
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadComparison {
    pub name: String,
    pub median_ratio: f64,
    pub p99_ratio: f64,
}

/// Latency ratios `b / a` for every thread both runs completed jobs of.
pub fn compare(a: &RunMetrics, b: &RunMetrics) -> Result<Vec<ThreadComparison>, MetricsError> {
    let names = |m: &RunMetrics| m.threads.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        return Err(MetricsError::ScenarioMismatch(format!(
            "thread sets differ: {:?} vs {:?}",
            names(a),
            names(b)
        )));
    }
    Ok(a.threads
        .iter()
        .zip(&b.threads)
        .filter_map(|(x, y)| {
            let (lx, ly) = (x.latency.as_ref()?, y.latency.as_ref()?);
            Some(ThreadComparison {
                name: x.name.clone(),
                median_ratio: ly.median_ms / lx.median_ms,
                p99_ratio: ly.p99_ms / lx.p99_ms,
            })
        })
        .collect())
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `summary.json`, `latency_<thread>.csv`, `bandwidth.csv` and
/// `trace.csv` into `dir`.
pub fn write_outputs(dir: &Path, out: &SimOutput, metrics: &RunMetrics) -> Result<(), MetricsError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(metrics)? + "\n")?;

    let samples = latency_samples(&out.trace, out.threads.len())?;
    for (i, t) in out.threads.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("latency_{}.csv", file_safe(&t.name))))?);
        writeln!(w, "release_ns,completion_ns,latency_ms")?;
        for s in samples.iter().filter(|s| s.thread == i) {
            writeln!(w, "{},{},{:.6}", s.release_ns, s.completion_ns, s.latency_ms())?;
        }
        w.flush()?;
    }

    write_bandwidth_csv(BufWriter::new(fs::File::create(dir.join("bandwidth.csv"))?), out)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("trace.csv"))?);
    out.trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_bandwidth_csv<W: Write>(mut w: W, out: &SimOutput) -> io::Result<()> {
    let secs = out.bucket_ns as f64 * 1e-9;
    writeln!(w, "time,core,llc_mb_s,dram_mb_s")?;
    for s in &out.bandwidth {
        writeln!(
            w,
            "{:.6},{},{:.3},{:.3}",
            s.start_ns as f64 * 1e-9,
            s.core,
            s.llc_bytes / secs * 1e-6,
            s.dram_bytes / secs * 1e-6
        )?;
    }
    w.flush()
}

/// Looks up thread info by name.
pub fn thread_index(threads: &[ThreadInfo], name: &str) -> Option<usize> {
    threads.iter().position(|t| t.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EventPayload, SimEvent, SimTime, TraceRecord};

    fn rec(time: u64, seq: u64, kind: EventKind, task: usize, detail: u64) -> TraceRecord {
        TraceRecord {
            event: SimEvent {
                time: SimTime(time),
                seq,
                kind,
                payload: EventPayload::task(task).with_detail(detail),
            },
            digest: 0,
        }
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 50.0), Some(50.0));
        assert_eq!(nearest_rank(&v, 99.0), Some(99.0));
        assert_eq!(nearest_rank(&v, 100.0), Some(100.0));
        assert_eq!(nearest_rank(&[7.0], 99.0), Some(7.0));
        assert_eq!(nearest_rank(&[1.0, 2.0, 3.0], 50.0), Some(2.0));
        assert_eq!(nearest_rank(&[], 50.0), None);
    }

    #[test]
    fn stats_and_deadline_misses() {
        let s = LatencyStats::from_ms(&[30.0, 10.0, 60.0, 20.0], Some(50.0)).unwrap();
        assert_eq!((s.min_ms, s.median_ms, s.max_ms), (10.0, 20.0, 60.0));
        assert_eq!(s.mean_ms, 30.0);
        assert_eq!(s.deadline_misses, 1);
        assert!(LatencyStats::from_ms(&[], None).is_none());
    }

    #[test]
    fn samples_pair_releases_and_skip_drops() {
        let trace = Trace {
            records: vec![
                rec(0, 0, EventKind::JobRelease, 0, 0),
                rec(50, 1, EventKind::JobRelease, 0, 1),
                rec(50, 2, EventKind::FrameDrop, 0, 1),
                rec(70, 3, EventKind::JobCompletion, 0, 70),
                rec(100, 4, EventKind::JobRelease, 0, 2),
                rec(130, 5, EventKind::JobCompletion, 0, 30),
            ],
            task_names: vec!["FrontEnd".into()],
        };
        let s = latency_samples(&trace, 1).unwrap();
        assert_eq!(s.iter().map(|x| x.latency_ns()).collect::<Vec<_>>(), vec![70, 30]);
    }

    #[test]
    fn malformed_traces_rejected() {
        let orphan = Trace {
            records: vec![rec(5, 0, EventKind::JobCompletion, 0, 5)],
            task_names: vec![],
        };
        assert!(matches!(
            latency_samples(&orphan, 1),
            Err(MetricsError::MalformedTrace { index: 0, .. })
        ));
        let unordered = Trace {
            records: vec![
                rec(5, 1, EventKind::JobRelease, 0, 0),
                rec(5, 0, EventKind::JobRelease, 0, 0),
            ],
            task_names: vec![],
        };
        assert!(latency_samples(&unordered, 1).is_err());
        let unknown = Trace {
            records: vec![rec(0, 0, EventKind::JobRelease, 3, 0)],
            task_names: vec![],
        };
        assert!(latency_samples(&unknown, 1).is_err());
    }
}
