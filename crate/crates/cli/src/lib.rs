//! The `hetfx` command line: match, split, discover, confirm and report.
//!
//! Every subcommand writes its artifacts plus a `manifest-<name>.json`
//! into `--out-dir`. Errors are printed to stderr as one JSON object and
//! mapped to exit codes 2 (configuration), 3 (data) and 4 (numeric).

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetfx::error::ErrorClass;
use hetfx::{Error, Result};
use serde::Serialize;

pub use manifest::RunManifest;

#[derive(Debug, Clone, Parser, Serialize)]
#[command(name = "hetfx", version, about = "Discover and confirm effect modification in matched pairs")]
pub struct Cli {
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed for every random choice.
    #[arg(long, global = true, env = "HETFX_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CohortArgs {
    /// Cohort CSV, one row per unit.
    #[arg(long)]
    pub input: PathBuf,
    /// Column layout (TOML or JSON); inferred when absent.
    #[arg(long)]
    pub format: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PairArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Pair file with columns pair_id, role, unit_id.
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LevelArgs {
    /// Level of the joint test.
    #[arg(long, default_value_t = 0.04)]
    pub alpha: f64,
    /// Level spent on the interval for the population effect.
    #[arg(long, default_value_t = 0.01)]
    pub gamma_ci: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConfirmArgs {
    #[command(flatten)]
    pub pairs: PairArgs,
    /// Tree JSON written by `discover`.
    #[arg(long)]
    pub tree: PathBuf,
    /// Split plan written by `split`; pairs in its discovery half are refused.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Allow testing without a split plan or on discovery pairs.
    #[arg(long)]
    pub unsafe_full_sample: bool,
    #[command(flatten)]
    pub level: LevelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Cart,
    Ct,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeArg {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Greedy pair matching within exact strata.
    Match {
        #[command(flatten)]
        cohort: CohortArgs,
        /// Covariates that must agree exactly.
        #[arg(long, value_delimiter = ',')]
        exact: Vec<String>,
        /// Covariates entering the scaled distance.
        #[arg(long, value_delimiter = ',')]
        distance: Vec<String>,
        #[arg(long)]
        caliper: Option<f64>,
    },
    /// Covariate balance before and after matching.
    Balance {
        #[command(flatten)]
        pairs: PairArgs,
    },
    /// Random pair-level split into discovery and confirmation halves.
    Split {
        #[command(flatten)]
        pairs: PairArgs,
        /// Discovery share of the pairs.
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
    },
    /// Grow effect-modification trees on discovery pairs.
    Discover {
        #[command(flatten)]
        pairs: PairArgs,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// Growth settings (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Discovery share used for the honesty penalty.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Global test of no effect modification.
    Test {
        #[command(flatten)]
        confirm: ConfirmArgs,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Also write deviates over this effect grid (start:stop:step or a list).
        #[arg(long)]
        delta_grid: Option<String>,
    },
    /// Test of the subgroup null for a set of nodes.
    Subgroup {
        #[command(flatten)]
        confirm: ConfirmArgs,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Node ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<usize>,
    },
    /// Sensitivity sweep over Γ with the breaking point.
    Sensitivity {
        #[command(flatten)]
        confirm: ConfirmArgs,
        /// Γ grid, start:stop:step or a comma list starting at 1.
        #[arg(long, default_value = "1:2:0.1")]
        gamma_grid: String,
        /// Δ values for the amplification of the breaking Γ.
        #[arg(long)]
        delta_grid: Option<String>,
        /// Truncation point for combining per-leaf McNemar bounds.
        #[arg(long, default_value_t = hetfx::binary::DEFAULT_TRUNCATION)]
        truncation: f64,
    },
    /// Power and discovery-rate tables by simulation.
    Simulate {
        /// Scenario file (TOML or JSON).
        #[arg(long, conflicts_with = "situation")]
        scenario: Option<PathBuf>,
        /// Standard situation 1..=5.
        #[arg(long)]
        situation: Option<usize>,
        #[arg(long, value_enum, default_value_t = OutcomeArg::Continuous)]
        outcome: OutcomeArg,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        #[arg(long)]
        replications: Option<usize>,
        /// Write replication 0 as a cohort and pair file instead of running.
        #[arg(long)]
        emit_data: bool,
    },
    /// Annotated tree rendering with per-node estimates and tests.
    Report {
        #[command(flatten)]
        confirm: ConfirmArgs,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Match { .. } => "match",
            Command::Balance { .. } => "balance",
            Command::Split { .. } => "split",
            Command::Discover { .. } => "discover",
            Command::Test { .. } => "test",
            Command::Subgroup { .. } => "subgroup",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Simulate { .. } => "simulate",
            Command::Report { .. } => "report",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

/// Machine-readable error line.
pub fn error_json(e: &Error) -> String {
    let class = match e.class() {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numeric => "numeric",
    };
    serde_json::json!({ "error": { "class": class, "exit_code": exit_code(e), "message": e.to_string() } })
        .to_string()
}

/// Runs one parsed invocation on a dedicated thread pool.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| commands::dispatch(cli))
}

/// Parses `args`, runs, reports and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json(&Error::Config(e.to_string().trim().to_string())));
            return 2;
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

/// Parses `start:stop:step` or a comma list into an ascending grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse grid '{text}'"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        if n > 100_000 {
            return Err(Error::Config(format!("grid '{text}' has more than 100000 points")));
        }
        // Round away accumulated binary error so grids print cleanly.
        (0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("grid '{text}' must be strictly ascending")));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse_and_round() {
        let g = parse_grid("1:1.2:0.01").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[7], 1.07);
        assert_eq!(g[20], 1.2);
        assert_eq!(parse_grid("1, 1.5,2").unwrap(), vec![1.0, 1.5, 2.0]);
        for bad in ["1:2", "2:1:0.1", "1:2:0", "1,1", "a"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        let v: serde_json::Value = serde_json::from_str(&error_json(&Error::Data("bad row".into()))).unwrap();
        assert_eq!(v["error"]["class"], "data");
        assert_eq!(v["error"]["exit_code"], 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
