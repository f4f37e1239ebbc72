//! Command-line surface: `gen`, `train`, `eval`, `gap`, `ablate`, `baseline`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{eval_engine, gap_engine, train_engine, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{EdRecallReport, EvalReport};
use crate::scenario::{generate_scenario, scenario_from_file, scenario_to_file, Scenario, ScenarioSpec};
use crate::tracker::{Engine, EngineKind};
use crate::train::checkpoint::{engine_from_bytes, engine_to_bytes};
use crate::train::trace_to_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "daqtrack", version, about = "Dynamic anchor query tracking on procedural scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration (sections model, daq, eds, train, eval).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario files; defaults to the generated eval suite of the config.
    #[arg(long, num_args = 1..)]
    scenarios: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenario files from a preset.
    Gen {
        #[arg(long, default_value = "dense-ed")]
        preset: String,
        #[arg(long)]
        seed: u64,
        /// Number of scenarios (seeds `seed..seed+count`); >1 writes into the `-o` directory.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train an engine and write its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Training scenario files; defaults to the generated pool of the config.
        #[arg(long, num_args = 1..)]
        scenarios: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Emergence/disappearance recall and subset scores of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        scn: ScenarioArgs,
        /// Seed of the synthetic segmenter noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Per-scenario CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Transition-gap report of a checkpoint.
    Gap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sweep config axes; one trained and evaluated engine per row.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `section.key=v1,v2,...`; several axes form a grid.
        #[arg(long, required = true)]
        axis: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train and evaluate the static-anchor engine with the configured budget.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Output directory for checkpoint, trace and report.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, bytes)?)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => String::from_utf8(read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let overrides = args
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Usage(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    RunConfig::load(&text, &overrides)
}

fn load_scenarios(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Scenario>> {
    if paths.is_empty() {
        return cfg.eval_scenarios();
    }
    paths.iter().map(|p| scenario_from_file(&read(p)?)).collect()
}

fn load_engine(path: &Path) -> Result<Engine> {
    engine_from_bytes(&read(path)?)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Per-scenario recall counts as CSV, with a final pooled row.
pub fn recall_csv(r: &EdRecallReport) -> String {
    let mut s = String::from("scenario,emergence_events,emergence_hits,disappearance_events,disappearance_hits\n");
    for p in &r.per_scenario {
        let c = p.counts;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.seed, c.emergence_events, c.emergence_hits, c.disappearance_events, c.disappearance_hits
        ));
    }
    let c = r.counts;
    s.push_str(&format!(
        "all,{},{},{},{}\n",
        c.emergence_events, c.emergence_hits, c.disappearance_events, c.disappearance_hits
    ));
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn summary_cells(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{}",
        opt(r.recall.emergence_recall),
        opt(r.recall.disappearance_recall),
        opt(r.recall.combined_recall),
        opt(r.subset.all),
        opt(r.subset.ed)
    )
}

fn parse_axis(s: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--axis expects SECTION.KEY=V1,V2,..., got `{s}`")))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Usage(format!("axis `{k}` has no values")));
    }
    Ok((k.trim().to_string(), values))
}

fn grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in axes {
        rows = rows
            .into_iter()
            .flat_map(|r| {
                values.iter().map(move |v| {
                    let mut r = r.clone();
                    r.push(v.clone());
                    r
                })
            })
            .collect();
    }
    rows
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            preset,
            seed,
            count,
            out,
        } => {
            let spec = ScenarioSpec::preset(&preset)?;
            if count == 0 {
                return Err(Error::Usage("--count must be at least 1".into()));
            }
            if count == 1 {
                return write(&out, scenario_to_file(&generate_scenario(&spec, seed)?));
            }
            for i in 0..count as u64 {
                let s = generate_scenario(&spec, seed + i)?;
                write(&out.join(format!("scenario_{}.json", seed + i)), scenario_to_file(&s))?;
            }
            Ok(())
        }
        Command::Train {
            cfg,
            seed,
            scenarios,
            out,
            trace,
        } => {
            let cfg = load_config(&cfg)?;
            let pool = if scenarios.is_empty() {
                cfg.train_scenarios()?
            } else {
                scenarios.iter().map(|p| scenario_from_file(&read(p)?)).collect::<Result<Vec<_>>>()?
            };
            let run = train_engine(&cfg, cfg.model.kind, seed, &pool)?;
            write(&out, engine_to_bytes(&run.engine))?;
            if let Some(t) = trace {
                write(&t, trace_to_csv(&run.trace))?;
            }
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            scn,
            seed,
            out,
            csv,
        } => {
            let cfg = load_config(&cfg)?;
            let engine = load_engine(&checkpoint)?;
            let scenarios = load_scenarios(&scn.scenarios, &cfg)?;
            let report = eval_engine(&cfg, &engine, &scenarios, seed)?;
            write(&out, json(&report))?;
            if let Some(c) = csv {
                write(&c, recall_csv(&report.recall))?;
            }
            Ok(())
        }
        Command::Gap {
            cfg,
            checkpoint,
            scn,
            seed,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let engine = load_engine(&checkpoint)?;
            let scenarios = load_scenarios(&scn.scenarios, &cfg)?;
            write(&out, json(&gap_engine(&cfg, &engine, &scenarios, seed)?))
        }
        Command::Ablate { cfg, axis, seed, out } => {
            let axes = axis.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>>>()?;
            let mut base = cfg;
            let mut table = String::new();
            for (k, _) in &axes {
                table.push_str(&csv_cell(k));
                table.push(',');
            }
            table.push_str("emergence_recall,disappearance_recall,combined_recall,subset_all,subset_ed\n");
            let rows = grid(&axes);
            // validate every configuration before training any of them
            let mut configs = Vec::with_capacity(rows.len());
            for row in &rows {
                let saved = base.set.len();
                for ((k, _), v) in axes.iter().zip(row) {
                    base.set.push(format!("{k}={v}"));
                }
                configs.push(load_config(&base)?);
                base.set.truncate(saved);
            }
            for (row, cfg) in rows.iter().zip(&configs) {
                let pool = cfg.train_scenarios()?;
                let trained = train_engine(cfg, cfg.model.kind, seed, &pool)?;
                let report = eval_engine(cfg, &trained.engine, &cfg.eval_scenarios()?, seed)?;
                for v in row {
                    table.push_str(&csv_cell(v));
                    table.push(',');
                }
                table.push_str(&summary_cells(&report));
                table.push('\n');
            }
            write(&out, table)
        }
        Command::Baseline { cfg, seed, out } => {
            let cfg = load_config(&cfg)?;
            let pool = cfg.train_scenarios()?;
            let run = train_engine(&cfg, EngineKind::Baseline, seed, &pool)?;
            let report = eval_engine(&cfg, &run.engine, &cfg.eval_scenarios()?, seed)?;
            write(&out.join("baseline.ckpt"), engine_to_bytes(&run.engine))?;
            write(&out.join("baseline_trace.csv"), trace_to_csv(&run.trace))?;
            write(&out.join("baseline_report.json"), json(&report))?;
            write(&out.join("baseline_report.csv"), recall_csv(&report.recall))
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() || matches!(e, Error::Usage(_)) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
