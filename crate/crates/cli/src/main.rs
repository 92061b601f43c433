//! Command-line front end: runs scenarios against their baseline, dumps the
//! built-in policy table and presets, and sweeps presets across seeds.

use std::io::Read;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use dpmsim::engine::{compute_metrics, run, run_baseline, Metrics, SimResult};
use dpmsim::lem::RuleTable;
use dpmsim::workload::{preset, Scenario, PRESET_NAMES};

/// Indicative target metrics per preset (energy saving %, temperature
/// reduction %, delay overhead %). They orient the sweep summary only: this
/// implementation's physical constants differ, so absolute values are not
/// expected to match — the relative ordering across presets is.
const REFERENCE_TARGETS: [(&str, f64, f64, f64); 6] = [
    ("a1", 39.0, 31.0, 30.0),
    ("a2", 55.0, 21.0, 339.0),
    ("a3", 39.0, 18.0, 37.0),
    ("a4", 55.0, 18.0, 339.0),
    ("b", 65.0, 19.0, 242.0),
    ("c", 64.0, 18.0, 253.0),
];

#[derive(Parser)]
#[command(name = "dpmsim", version, about = "SoC dynamic power management simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with power management and against the always-on
    /// baseline; write traces and metrics.
    Run(RunArgs),
    /// Print the built-in policy table.
    Table,
    /// List built-in scenarios or print one as JSON.
    #[command(subcommand)]
    Preset(PresetCmd),
    /// Run presets across several seeds and summarize the metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario name (see `preset list`).
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Path to a scenario JSON file; `-` reads standard input.
    #[arg(long)]
    scenario: Option<String>,
    /// Positional form of --scenario.
    #[arg(value_name = "SCENARIO", conflicts_with_all = ["preset", "scenario"])]
    scenario_pos: Option<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for traces and metrics.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Skip writing the trace CSV files.
    #[arg(long)]
    no_trace: bool,
}

#[derive(Subcommand)]
enum PresetCmd {
    /// List the built-in scenario names.
    List,
    /// Print one built-in scenario as JSON.
    Dump { name: String },
}

#[derive(Args)]
struct ReportArgs {
    /// Comma-separated preset names; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    presets: Vec<String>,
    /// Comma-separated master seeds.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
    /// Worker threads for the sweep.
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

/// Prints a line to stdout, quietly stopping the program when the
/// downstream reader has gone away (e.g. piping into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut stdout = std::io::stdout().lock();
        if writeln!(stdout, $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

/// Failures map to exit codes: bad input or configuration exits 2, file
/// system trouble exits 3. Usage errors exit 2 through the parser itself.
enum Failure {
    Config(String),
    Io(String),
}

impl Failure {
    fn io(context: &str, e: std::io::Error) -> Failure {
        Failure::Io(format!("{context}: {e}"))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Table => cmd_table(),
        Command::Preset(PresetCmd::List) => cmd_preset_list(),
        Command::Preset(PresetCmd::Dump { name }) => cmd_preset_dump(&name),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => {}
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(3);
        }
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, Failure> {
    if let Some(name) = &args.preset {
        return preset(name).ok_or_else(|| {
            Failure::Config(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            ))
        });
    }
    let source = args
        .scenario
        .as_deref()
        .or(args.scenario_pos.as_deref())
        .ok_or_else(|| {
            Failure::Config("nothing to run: give --preset, --scenario, or a path".into())
        })?;
    let text = if source == "-" {
        let mut buf = String::new();
        std::io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| Failure::io("reading standard input", e))?;
        buf
    } else {
        std::fs::read_to_string(source)
            .map_err(|e| Failure::io(&format!("reading {source}"), e))?
    };
    Scenario::from_json(&text).map_err(|e| Failure::Config(e.to_string()))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&args)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let cfg = scenario.compile().map_err(|e| Failure::Config(e.to_string()))?;
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    let dpm = run(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let base = run_baseline(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let metrics = compute_metrics(&dpm, &base).map_err(|e| Failure::Config(e.to_string()))?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::io(&format!("creating {}", args.out.display()), e))?;
    let stem = format!("{}-s{}", cfg.name, cfg.seed);
    let mut written = Vec::new();
    if !args.no_trace {
        for (suffix, result) in [("dpm", &dpm), ("baseline", &base)] {
            let path = args.out.join(format!("{stem}.{suffix}.csv"));
            std::fs::write(&path, result.trace_csv())
                .map_err(|e| Failure::io(&format!("writing {}", path.display()), e))?;
            written.push(path);
        }
    }
    let metrics_path = args.out.join(format!("{stem}.metrics.json"));
    std::fs::write(&metrics_path, metrics_json(&cfg.name, cfg.seed, &metrics, &dpm, &base))
        .map_err(|e| Failure::io(&format!("writing {}", metrics_path.display()), e))?;
    written.push(metrics_path);

    out!("scenario {} seed {}: {} s simulated", cfg.name, cfg.seed, cfg.duration);
    out!(
        "  energy      managed {:.4} J   baseline {:.4} J   saving {:+.1}%",
        dpm.total_energy, base.total_energy, metrics.energy_saving_pct
    );
    out!(
        "  excess temp managed {:.2} C   baseline {:.2} C   reduction {:+.1}%",
        dpm.avg_excess_temp, base.avg_excess_temp, metrics.temp_reduction_pct
    );
    out!(
        "  delay       overhead {:+.1}% over {} matched tasks",
        metrics.avg_delay_overhead_pct, metrics.matched_tasks
    );
    for path in written {
        out!("  wrote {}", path.display());
    }
    Ok(())
}

fn metrics_json(
    name: &str,
    seed: u64,
    m: &Metrics,
    dpm: &SimResult,
    base: &SimResult,
) -> String {
    let value = serde_json::json!({
        "scenario": name,
        "seed": seed,
        "energy_saving_pct": m.energy_saving_pct,
        "temp_reduction_pct": m.temp_reduction_pct,
        "avg_delay_overhead_pct": m.avg_delay_overhead_pct,
        "matched_tasks": m.matched_tasks,
        "managed": run_json(dpm),
        "baseline": run_json(base),
    });
    serde_json::to_string_pretty(&value).expect("metrics serialize") + "\n"
}

fn run_json(r: &SimResult) -> serde_json::Value {
    serde_json::json!({
        "total_energy_J": r.total_energy,
        "per_ip_energy_J": r.per_ip_energy,
        "avg_excess_temp_C": r.avg_excess_temp,
        "final_temperature_C": r.final_temperature,
        "final_charge_J": r.final_charge,
        "clamped_energy_J": r.clamped_energy,
        "tasks_completed": r.tasks_completed,
        "events_processed": r.events_processed,
    })
}

fn cmd_table() -> Result<(), Failure> {
    let table = RuleTable::default_table();
    out!("#   priority  battery  temp  state");
    for (i, row) in table.raw_rows().iter().enumerate() {
        out!(
            "{:<3} {:<9} {:<8} {:<5} {}",
            i + 1,
            row.priority,
            row.battery,
            row.temperature,
            row.state
        );
    }
    out!("fallback: {}", table.fallback);
    for i in table.shadowed_rows() {
        out!("note: row {} can never fire; earlier rows cover it", i + 1);
    }
    Ok(())
}

fn cmd_preset_list() -> Result<(), Failure> {
    for name in PRESET_NAMES {
        out!("{name}");
    }
    Ok(())
}

fn cmd_preset_dump(name: &str) -> Result<(), Failure> {
    let scenario = preset(name).ok_or_else(|| {
        Failure::Config(format!(
            "unknown preset {name:?}; available: {}",
            PRESET_NAMES.join(", ")
        ))
    })?;
    out!("{}", scenario.to_json());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let presets: Vec<String> = if args.presets.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        args.presets.clone()
    };
    for name in &presets {
        if preset(name).is_none() {
            return Err(Failure::Config(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            )));
        }
    }
    if args.seeds.is_empty() {
        return Err(Failure::Config("at least one seed is required".into()));
    }

    // One work item per (preset, seed) pair, pulled by a small thread pool.
    let pairs: Vec<(usize, u64)> = (0..presets.len())
        .flat_map(|p| args.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<Metrics, String>>>> =
        Mutex::new(vec![None; pairs.len()]);
    let cursor = AtomicUsize::new(0);
    let workers = args.threads.clamp(1, pairs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= pairs.len() {
                    break;
                }
                let (p, seed) = pairs[i];
                let outcome = sweep_one(&presets[p], seed);
                results.lock().expect("no poisoned result slots")[i] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("sweep finished");
    let mut per_preset: Vec<Vec<Metrics>> = vec![Vec::new(); presets.len()];
    for (slot, (p, seed)) in results.into_iter().zip(&pairs) {
        match slot.expect("every pair was processed") {
            Ok(m) => per_preset[*p].push(m),
            Err(e) => {
                return Err(Failure::Config(format!(
                    "{} seed {seed}: {e}",
                    presets[*p]
                )))
            }
        }
    }

    out!(
        "{} seeds per preset: {:?}",
        args.seeds.len(),
        args.seeds
    );
    out!(
        "{:<8} {:<19} {:<19} {:<20} target E/T/D",
        "preset", "energy saving %", "temp reduction %", "delay overhead %"
    );
    for (name, metrics) in presets.iter().zip(&per_preset) {
        let (e_mean, e_sd) = mean_sd(metrics.iter().map(|m| m.energy_saving_pct));
        let (t_mean, t_sd) = mean_sd(metrics.iter().map(|m| m.temp_reduction_pct));
        let (d_mean, d_sd) = mean_sd(metrics.iter().map(|m| m.avg_delay_overhead_pct));
        let target = REFERENCE_TARGETS
            .iter()
            .find(|(n, _, _, _)| n == name)
            .map(|(_, e, t, d)| format!("{e:.0}/{t:.0}/{d:.0}"))
            .unwrap_or_else(|| "-".into());
        out!(
            "{name:<8} {:<19} {:<19} {:<20} {target}",
            format!("{e_mean:+.1} ± {e_sd:.1}"),
            format!("{t_mean:+.1} ± {t_sd:.1}"),
            format!("{d_mean:+.1} ± {d_sd:.1}"),
        );
    }
    out!("targets are indicative only; this model's constants differ, the ordering holds");
    Ok(())
}

fn sweep_one(name: &str, seed: u64) -> Result<Metrics, String> {
    let mut scenario = preset(name).expect("preset names were validated");
    scenario.seed = seed;
    let cfg = scenario.compile().map_err(|e| e.to_string())?;
    let dpm = run(&cfg).map_err(|e| e.to_string())?;
    let base = run_baseline(&cfg).map_err(|e| e.to_string())?;
    compute_metrics(&dpm, &base).map_err(|e| e.to_string())
}

/// Mean and population standard deviation; a single sample reports 0.
fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
