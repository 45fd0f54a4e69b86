mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Shuffled-Gaussian accountant, shuffled DP-SGD trainer and related tools.
#[derive(Parser, Debug)]
#[command(name = "shufdp", version, about)]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "SHUFDP_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Noise multiplier for a total (epsilon, delta) budget.
    Sigma(SigmaCmd),
    /// Shuffled and unshuffled sigma over a list of epsilons (CSV).
    Curve(CurveCmd),
    /// Sigma over a grid of d and epsilon in long format (CSV); d = 1 is unshuffled.
    Heatmap(HeatmapCmd),
    /// Train a model with shuffled DP-SGD.
    Train(TrainCmd),
    /// One-step Dirac-canary audit of the mechanism.
    Audit(AuditCmd),
    /// Fenton-Wilkinson CDF against a Monte-Carlo CDF (CSV).
    LognormalCompare(LognormalCmd),
    /// Grid distance between two plain or shuffled 2-D Gaussians.
    ToyDistance(ToyCmd),
    /// Forward/backward deviation of a model under random weight permutations.
    InvarianceCheck(InvarianceCmd),
    /// Time index-gather row+column shuffles of an n x n matrix.
    ShuffleBench(BenchCmd),
}

/// Budget and mechanism flags shared by the accountant commands. Any of them
/// may come from `--config`; explicit flags win.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechArgs {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long = "c-prime")]
    pub c_prime: Option<f64>,
    /// Number of shuffled coordinates.
    #[arg(long)]
    pub d: Option<u64>,
    /// Sampling rate |B|/N.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SigmaCmd {
    #[command(flatten)]
    pub mech: MechArgs,
    /// Solve for the plain Gaussian mechanism instead.
    #[arg(long)]
    pub unshuffled: bool,
    /// TOML or JSON file with default flag values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the solution as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CurveCmd {
    #[command(flatten)]
    pub mech: MechArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    pub eps_list: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapCmd {
    #[command(flatten)]
    pub mech: MechArgs,
    /// Values of d; scientific notation such as 1e8 is accepted.
    #[arg(long, value_delimiter = ',', default_value = "1,1e2,1e4,1e6,1e8")]
    pub d_list: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    pub eps_list: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    /// Training configuration (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// CSV path (last column is the class) or `synthetic[:key=value,...]`.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Output directory; defaults to `<out-dir>/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Use the plain Gaussian path only.
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditArgs {
    /// Noise multiplier (noise std is sigma * c).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long = "c-prime")]
    pub c_prime: Option<f64>,
    #[arg(long)]
    pub d: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Audit the mechanism without shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args, Debug)]
pub struct AuditCmd {
    #[command(flatten)]
    pub args: AuditArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LognormalCmd {
    /// Number of summands.
    #[arg(long)]
    pub d: usize,
    /// Log-scale standard deviation of each summand.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of evaluation points (evenly spaced Monte-Carlo ranks).
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ToyCmd {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2,0")]
    pub c1: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "2,0")]
    pub c2: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Points per axis.
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InvarianceCmd {
    /// Model configuration (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random permutations tried.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Rows of each random input.
    #[arg(long, default_value_t = 4)]
    pub seq: usize,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = ["f64", "f32"], default_value = "f64")]
    pub precision: String,
    /// Skip the multiset check of the shuffled matrix.
    #[arg(long)]
    pub no_verify: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(shufdp::Error),
}

impl From<shufdp::Error> for CliError {
    fn from(e: shufdp::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Lib(std::io::Error::other(e).into())
    }
}

impl CliError {
    fn kind_and_code(&self) -> (&'static str, u8) {
        use shufdp::Error as E;
        match self {
            CliError::Usage(_) => ("usage", 2),
            CliError::Lib(E::Config(_)) => ("config", 3),
            CliError::Lib(E::Infeasible(_)) => ("infeasible", 4),
            CliError::Lib(E::Domain(_) | E::Shape { .. }) => ("domain", 5),
            CliError::Lib(E::Io(_)) => ("io", 6),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads `path` (TOML, or JSON when it starts with `{`) as defaults for
/// `flags`; values given on the command line win. Unset flags and `false`
/// switches do not override the file.
pub fn merge_config<T: Serialize + DeserializeOwned>(flags: &T, path: Option<&std::path::Path>) -> CliResult<T> {
    let mut base = match path {
        None => serde_json::Map::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| shufdp::Error::Config(format!("{}: {e}", p.display())))?;
            let value: serde_json::Value = if text.trim_start().starts_with('{') {
                serde_json::from_str(&text).map_err(|e| shufdp::Error::Config(format!("{}: {e}", p.display())))?
            } else {
                let t: toml::Value =
                    toml::from_str(&text).map_err(|e| shufdp::Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(t).map_err(|e| shufdp::Error::Config(e.to_string()))?
            };
            match value {
                serde_json::Value::Object(m) => m,
                _ => return Err(shufdp::Error::Config(format!("{}: expected a table", p.display())).into()),
            }
        }
    };
    if let serde_json::Value::Object(over) = serde_json::to_value(flags).expect("flags serialise") {
        for (k, v) in over {
            if !(v.is_null() || v == serde_json::Value::Bool(false)) {
                base.insert(k, v);
            }
        }
    }
    let keys: Vec<String> = base.keys().cloned().collect();
    let merged: T = serde_json::from_value(serde_json::Value::Object(base))
        .map_err(|e| shufdp::Error::Config(format!("config: {e}")))?;
    if let serde_json::Value::Object(known) = serde_json::to_value(&merged).expect("flags serialise") {
        if let Some(k) = keys.iter().find(|k| !known.contains_key(*k)) {
            return Err(shufdp::Error::Config(format!("config: unknown key `{k}`")).into());
        }
    }
    Ok(merged)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sigma(c) => commands::sigma(c, &cli.out_dir),
        Command::Curve(c) => commands::curve(c, &cli.out_dir),
        Command::Heatmap(c) => commands::heatmap(c, &cli.out_dir),
        Command::Train(c) => commands::train(c, &cli.out_dir),
        Command::Audit(c) => commands::audit(c, &cli.out_dir),
        Command::LognormalCompare(c) => commands::lognormal_compare(c, &cli.out_dir),
        Command::ToyDistance(c) => commands::toy_distance(c, &cli.out_dir),
        Command::InvarianceCheck(c) => commands::invariance_check(c),
        Command::ShuffleBench(c) => commands::shuffle_bench(c, &cli.out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind_and_code();
            let line = serde_json::json!({ "error": kind, "code": code, "message": e.message() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
