use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use concurrent_options_cli::commands::DEFAULT_ROLLOUTS;
use concurrent_options_cli::{cmd_learn, cmd_model, cmd_plan, cmd_verify, CliError, ExperimentConfig};

/// Concurrent options on the rooms benchmark.
///
/// Exit codes: 0 ok, 1 internal error, 2 configuration, 3 non-convergence,
/// 4 I/O, 5 verification failure.
#[derive(Parser)]
#[command(name = "copts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value iteration over the (multi-)option SMDP.
    Plan(Common),
    /// SMDP Q-learning; writes the learning-curve CSV to out_path.
    Learn(Common),
    /// Compare the analytic model of a multi-option with Monte-Carlo runs.
    Verify {
        #[command(flatten)]
        common: Common,
        /// `start` or `row,col,doors,key`.
        #[arg(long, default_value = "start")]
        state: String,
        /// Member option names joined by `+`, e.g. `hallway_0+pickup_key`.
        #[arg(long)]
        option: String,
        #[arg(long, default_value_t = DEFAULT_ROLLOUTS)]
        rollouts: usize,
    },
    /// Dump the `s s' k probability` model of a multi-option.
    Model {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        option: String,
        /// Start states to include (repeatable); all initiable states if absent.
        #[arg(long)]
        state: Vec<String>,
        /// Output file; standard output if absent.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

/// Configuration file plus per-key overrides.
#[derive(Args)]
struct Common {
    /// Flat key=value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    framework: Option<String>,
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    k_max: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    layout_path: Option<String>,
    #[arg(long)]
    out_path: Option<String>,
    #[arg(long)]
    episode_cap: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let overrides = [
            ("framework", &self.framework),
            ("rule", &self.rule),
            ("gamma", &self.gamma),
            ("alpha", &self.alpha),
            ("epsilon", &self.epsilon),
            ("episodes", &self.episodes),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("k_max", &self.k_max),
            ("tol", &self.tol),
            ("layout_path", &self.layout_path),
            ("out_path", &self.out_path),
            ("episode_cap", &self.episode_cap),
            ("threads", &self.threads),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Plan(common) => cmd_plan(&common.load()?, &mut out).map(|_| ()),
        Command::Learn(common) => cmd_learn(&common.load()?, &mut out).map(|_| ()),
        Command::Verify {
            common,
            state,
            option,
            rollouts,
        } => cmd_verify(&common.load()?, &state, &option, rollouts, &mut out).map(|_| ()),
        Command::Model {
            common,
            option,
            state,
            dump,
        } => {
            let cfg = common.load()?;
            match dump {
                Some(path) => {
                    let file = std::fs::File::create(&path)
                        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                    let mut w = io::BufWriter::new(file);
                    cmd_model(&cfg, &option, &state, &mut w)?;
                    w.flush().map_err(CliError::from)
                }
                None => cmd_model(&cfg, &option, &state, &mut out),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
