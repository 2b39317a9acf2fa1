use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use powergap::report::{write_atomic, write_outputs};
use powergap::scenario::parse_scenario_with_seed;
use powergap::strategy::{evaluate_strategies, ComparisonRow, StrategyKind};
use powergap::suites::run_drop_table;
use powergap::world::{run_scenario, EventKind};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_BROWNOUT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "powergap",
    version,
    about = "Slot-car logging device simulator"
)]
struct Cli {
    /// Worker threads for multi-run commands (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace, event and metric CSVs.
    Run {
        scenario: PathBuf,
        /// Output directory; POWERGAP_OUT takes precedence.
        #[arg(long, default_value = "powergap-out")]
        out: PathBuf,
        /// Exit with status 3 if the device browned out.
        #[arg(long)]
        fail_on_brownout: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one workload under several strategies and print a CSV table.
    Compare {
        scenario: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<StrategyKind>,
        /// Gate radio sends through the energy-budget controller.
        #[arg(long)]
        controller: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check simulated per-state voltage drops against the reference values.
    Table1 {
        /// Allowed deviation in percent.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<powergap::scenario::ScenarioSpec, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_INVALID, format!("{}: {e}", path.display())))?;
    parse_scenario_with_seed(&text, seed).map_err(|e| {
        Failure::new(
            EXIT_INVALID,
            format!("{}:{}: {}", path.display(), e.line, e.message),
        )
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    }
    match cli.command {
        Command::Run {
            scenario,
            out,
            fail_on_brownout,
            seed,
        } => {
            let spec = load(&scenario, seed)?;
            let outcome =
                run_scenario(&spec).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
            let dir = std::env::var_os("POWERGAP_OUT")
                .map(PathBuf::from)
                .unwrap_or(out);
            let files = write_outputs(&dir, &outcome)
                .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
            for f in files {
                println!("wrote {}", f.display());
            }
            let brownouts = outcome.count(EventKind::Brownout);
            println!(
                "{}: delivered {} of {} records, {} brownouts, max drop {:.6} V",
                spec.name,
                outcome.metrics.delivered_records,
                outcome.metrics.appended,
                brownouts,
                outcome.metrics.max_drop_observed
            );
            if fail_on_brownout && brownouts > 0 {
                return Err(Failure::new(
                    EXIT_BROWNOUT,
                    format!("{brownouts} brownout(s)"),
                ));
            }
            Ok(())
        }
        Command::Compare {
            scenario,
            strategies,
            controller,
            seed,
            out,
        } => {
            let spec = load(&scenario, seed)?;
            let rows = evaluate_strategies(&spec, &strategies, controller)
                .map_err(|e| Failure::new(EXIT_INVALID, e.to_string()))?;
            let mut table = format!("{}\n", ComparisonRow::CSV_HEADER);
            for row in &rows {
                table.push_str(&row.csv_line());
                table.push('\n');
            }
            print!("{table}");
            if let Some(path) = out {
                write_atomic(&path, &table)
                    .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Table1 { tolerance } => {
            if !(tolerance >= 0.0 && tolerance.is_finite()) {
                return Err(Failure::new(EXIT_INVALID, "tolerance must be >= 0"));
            }
            let cells = run_drop_table().map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
            println!("clock_mhz,radio,expected_v,measured_v,error_pct,brownouts,result");
            let mut failed = 0;
            for c in &cells {
                let pass = c.passes(tolerance);
                failed += usize::from(!pass);
                let expected = c.expected.map_or("n/a".to_string(), |e| format!("{e:.6}"));
                let error = c.error_pct().map_or("n/a".to_string(), fixed6);
                println!(
                    "{},{},{expected},{:.6},{error},{},{}",
                    c.state.clock.mhz(),
                    c.state.radio,
                    c.measured,
                    c.brownouts,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Failure::new(
                    EXIT_FAILURE,
                    format!("{failed} cell(s) failed"),
                ));
            }
            Ok(())
        }
    }
}

/// Six decimals, without printing a negative zero for tiny negatives.
fn fixed6(x: f64) -> String {
    let s = format!("{x:.6}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
