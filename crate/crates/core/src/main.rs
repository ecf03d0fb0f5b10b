use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rtgang_sim::metrics::write_outputs;
use rtgang_sim::scenario::{
    self, emit, load_or_preset, parse_values, preset, set_mode, sweep, write_sweep_csv, RunError,
    ScenarioError, SweepParam,
};
use rtgang_sim::scheduler::SchedulerMode;

#[derive(Parser)]
#[command(name = "rtgang-sim", version, about = "Gang scheduling and bandwidth throttling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (file path or preset name).
    Run {
        scenario: String,
        #[arg(long, value_parser = parse_mode)]
        scheduler: Option<SchedulerMode>,
        #[arg(long)]
        gpu_level: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon_s: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario per parameter value, in parallel.
    Sweep {
        scenario: String,
        /// gpu_level, llc_threshold or attacker_count.
        #[arg(long)]
        param: String,
        /// `a..b`, `a..b:step` or `v1,v2,...`.
        #[arg(long)]
        values: String,
        #[arg(long, value_parser = parse_mode)]
        scheduler: Option<SchedulerMode>,
        #[arg(long)]
        horizon_s: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in scenario as JSON.
    EmitPreset { name: String },
    /// Parse and validate a scenario without running it.
    Check { scenario: String },
}

fn parse_mode(s: &str) -> Result<SchedulerMode, String> {
    SchedulerMode::parse(s).ok_or_else(|| format!("unknown scheduler {s} (fifo, rt-gang, rt-gang++)"))
}

fn out_dir(arg: Option<PathBuf>, s: &scenario::Scenario) -> PathBuf {
    arg.or_else(|| s.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&s.name))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<RunError>()
                .map(RunError::exit_code)
                .or_else(|| e.downcast_ref::<ScenarioError>().map(|_| 2))
                .unwrap_or(1);
            if let Some(name) = e.downcast_ref::<RunError>().and_then(|r| match r {
                RunError::Sim(s) => s.invariant_name(),
                _ => None,
            }) {
                eprintln!("invariant violated: {name}");
            }
            ExitCode::from(code as u8)
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            scheduler,
            gpu_level,
            seed,
            horizon_s,
            out,
        } => {
            let mut s = load_or_preset(&scenario)?;
            if let Some(m) = scheduler {
                set_mode(&mut s, m);
            }
            if let Some(l) = gpu_level {
                s.throttle.gpu_level = l;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(h) = horizon_s {
                s.horizon_s = h;
            }
            let (output, metrics) = scenario::run(&s)?;
            let dir = out_dir(out, &s);
            write_outputs(&dir, &output, &metrics).map_err(RunError::from)?;
            for t in &metrics.threads {
                match &t.latency {
                    Some(l) => println!(
                        "{:<10} n={:<5} min={:>8.2} median={:>8.2} p99={:>8.2} max={:>8.2} ms",
                        t.name, l.count, l.min_ms, l.median_ms, l.p99_ms, l.max_ms
                    ),
                    None => println!("{:<10} no completed jobs", t.name),
                }
            }
            if let Some(f) = &metrics.frames {
                println!(
                    "frames: {}/{} processed ({:.3})",
                    f.processed, f.arrived, f.processed_fraction
                );
            }
            println!("trace {} events, sha256 {}", metrics.events, metrics.trace_hash);
            println!("outputs in {}", dir.display());
        }
        Command::Sweep {
            scenario,
            param,
            values,
            scheduler,
            horizon_s,
            out,
        } => {
            let mut s = load_or_preset(&scenario)?;
            if let Some(m) = scheduler {
                set_mode(&mut s, m);
            }
            if let Some(h) = horizon_s {
                s.horizon_s = h;
            }
            let p = SweepParam::parse(&param).ok_or_else(|| {
                ScenarioError::Validation(format!(
                    "unknown sweep parameter {param} (gpu_level, llc_threshold, attacker_count)"
                ))
            })?;
            let vals = parse_values(&values)
                .ok_or_else(|| ScenarioError::Validation(format!("bad value list {values}")))?;
            let rows = sweep(&s, p, &vals)?;
            let dir = out_dir(out, &s);
            fs::create_dir_all(&dir)?;
            let path = dir.join("sweep.csv");
            write_sweep_csv(BufWriter::new(fs::File::create(&path)?), p, &rows)?;
            write_sweep_csv(std::io::stdout().lock(), p, &rows)?;
            println!("wrote {}", path.display());
        }
        Command::EmitPreset { name } => {
            let s = preset(&name).ok_or(ScenarioError::UnknownPreset(name))?;
            print!("{}", emit(&s));
        }
        Command::Check { scenario } => {
            let s = load_or_preset(&scenario).with_context(|| format!("checking {scenario}"))?;
            println!("{}: ok ({} tasks, {} s)", s.name, s.tasks.len(), s.horizon_s);
        }
    }
    Ok(())
}
