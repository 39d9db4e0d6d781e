//! The `plan`, `learn`, `verify` and `model` subcommands.
//!
//! Each command writes its human-readable report to `out` and returns the
//! numbers behind it so tests can check them directly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::Arc;

use concurrent_options::concurrent::{multi_option_model_with, Framework, MultiOption, TerminationRule};
use concurrent_options::executor::{compare_with_model, monte_carlo_model, RngStream, VerificationReport};
use concurrent_options::learning::{run_training, OptionEnv, TrainingResult};
use concurrent_options::mdp::FlatMdp;
use concurrent_options::model::ModelConfig;
use concurrent_options::option::MarkovOption;
use concurrent_options::planning::{
    bellman_residual, evaluate_policy, greedy_policy, svi, DeterministicPolicy, ModelStats, SmdpModel,
    StochasticPolicy, ValueFunction,
};
use concurrent_options::rooms::RoomsDomain;
use concurrent_options::stats::median;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Cells need this many expected hits before they are tested.
pub const MIN_EXPECTED_HITS: f64 = 20.0;
/// Largest admissible |z| score.
pub const Z_MAX: f64 = 3.0;
pub const DEFAULT_ROLLOUTS: usize = 100_000;
/// Episodes at the end of training summarized by `learn`.
pub const FINAL_WINDOW: usize = 1_000;

/// Resolves `a+b+…` option names into a multi-option under `rule`.
pub fn resolve_multi_option(domain: &RoomsDomain, spec: &str, rule: TerminationRule) -> Result<MultiOption, CliError> {
    let members = spec
        .split('+')
        .map(|name| {
            domain
                .partition()
                .option(name.trim())
                .cloned()
                .ok_or_else(|| CliError::Config(format!("unknown option `{}`", name.trim())))
        })
        .collect::<Result<Vec<Arc<MarkovOption>>, _>>()?;
    MultiOption::new(members, rule).map_err(CliError::from)
}

#[derive(Clone, Debug)]
pub struct PlanReport {
    pub framework: Framework,
    pub values: ValueFunction,
    pub policy: DeterministicPolicy,
    pub v_start: f64,
    pub residual: f64,
    pub iterations: usize,
    pub model_stats: ModelStats,
    pub greedy_start: String,
    /// Expected primitive steps from the start under the greedy policy.
    pub expected_steps: f64,
}

/// Value iteration on the SMDP of `framework`, plus the expected
/// (undiscounted) number of primitive steps of its greedy policy.
pub fn plan(domain: &RoomsDomain, framework: Framework, model_cfg: &ModelConfig) -> Result<PlanReport, CliError> {
    let actions = domain.action_space(framework)?;
    let terminal = domain.terminal_states();
    let (model, model_stats) = SmdpModel::from_action_space(domain.mdp(), &actions, &terminal, model_cfg)?;
    let (values, q, report) = svi(&model, model_cfg.tol)?;
    let residual = bellman_residual(&model, &values.values)?;
    let policy = greedy_policy(&q)?;

    // with discount 1 the model reward is minus the expected duration
    let undiscounted = domain.mdp().with_discount(1.0)?;
    let (steps_model, _) = SmdpModel::from_action_space(&undiscounted, &actions, &terminal, model_cfg)?;
    let (steps, _, _) = evaluate_policy(&steps_model, &StochasticPolicy::deterministic(&policy), model_cfg.tol)?;

    let start = domain.start_state();
    Ok(PlanReport {
        framework,
        v_start: values.get(start),
        residual,
        iterations: report.iterations,
        model_stats,
        greedy_start: actions.get(policy.get(start)).name(),
        expected_steps: -steps.get(start),
        values,
        policy,
    })
}

pub fn cmd_plan(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<PlanReport, CliError> {
    let domain = cfg.domain()?;
    let r = plan(&domain, cfg.framework(), &cfg.model_config())?;
    writeln!(out, "framework {}", r.framework)?;
    writeln!(out, "states {}", domain.mdp().num_states())?;
    writeln!(out, "decision pairs {}", r.model_stats.pairs)?;
    writeln!(out, "max truncation error {:e}", r.model_stats.max_truncation_error)?;
    writeln!(out, "max residual mass {:e}", r.model_stats.max_residual)?;
    writeln!(out, "svi iterations {}", r.iterations)?;
    writeln!(out, "bellman residual {:e}", r.residual)?;
    writeln!(out, "V*(start) {:.9}", r.v_start)?;
    writeln!(out, "greedy at start {}", r.greedy_start)?;
    writeln!(out, "expected steps from start {:.6}", r.expected_steps)?;
    Ok(r)
}

/// Trains on the rooms task under `framework` with the learner settings of `cfg`.
pub fn train(domain: &RoomsDomain, framework: Framework, cfg: &ExperimentConfig) -> Result<TrainingResult, CliError> {
    let actions = domain.action_space(framework)?;
    let env = OptionEnv::new(domain.mdp(), &actions, domain.start_state(), domain.terminal_states())?;
    Ok(run_training(&env, &cfg.learner())?)
}

#[derive(Clone, Debug)]
pub struct LearnReport {
    pub result: TrainingResult,
    /// Last running median, averaged over trials.
    pub final_running_median: f64,
    /// Median over trials of each trial's final-window median.
    pub final_window_median: f64,
}

pub fn cmd_learn(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<LearnReport, CliError> {
    let domain = cfg.domain()?;
    let result = train(&domain, cfg.framework(), cfg)?;
    let file = File::create(&cfg.out_path).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_path.display())))?;
    let mut w = BufWriter::new(file);
    result
        .curve
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_path.display())))?;

    let episodes = result.curve.episodes();
    let final_running_median = *result.curve.mean_running_median().last().expect("at least one episode");
    let window = result.curve.window_medians(episodes.saturating_sub(FINAL_WINDOW)..episodes);
    let final_window_median = median(&window).expect("at least one trial");
    writeln!(out, "framework {}", cfg.framework())?;
    writeln!(out, "wrote {} rows to {}", cfg.trials * episodes, cfg.out_path.display())?;
    if !result.capped.is_empty() {
        writeln!(out, "episodes stopped at the step cap {}", result.capped.len())?;
    }
    writeln!(out, "final running median {final_running_median}")?;
    writeln!(out, "median steps over the last {} episodes {final_window_median}", episodes.min(FINAL_WINDOW))?;
    Ok(LearnReport {
        result,
        final_running_median,
        final_window_median,
    })
}

/// Analytic model of `mo` at `s` against `rollouts` Monte-Carlo runs.
pub fn verify_multi_option(
    mdp: &FlatMdp,
    mo: &MultiOption,
    s: usize,
    rollouts: usize,
    seed: u64,
    model_cfg: &ModelConfig,
) -> Result<VerificationReport, CliError> {
    if !mo.is_available(s) {
        return Err(CliError::Config(format!("{} cannot start at state {s}", mo.name())));
    }
    let cfg = ModelConfig {
        keep_steps: true,
        ..*model_cfg
    };
    let model = multi_option_model_with(mdp, mo, &cfg, Some(&[s]))?;
    let analytic = model.start(s).expect("available start has a model");
    let mut rng = RngStream::new(seed, 0);
    let estimate = monte_carlo_model(mdp, mo, s, rollouts, &mut rng)?;
    Ok(compare_with_model(analytic, &estimate, MIN_EXPECTED_HITS, Z_MAX))
}

pub fn cmd_verify(
    cfg: &ExperimentConfig,
    state: &str,
    option: &str,
    rollouts: usize,
    out: &mut dyn Write,
) -> Result<VerificationReport, CliError> {
    let domain = cfg.domain()?;
    let s = domain.parse_state(state)?;
    let mo = resolve_multi_option(&domain, option, cfg.rule)?;
    let report = verify_multi_option(domain.mdp(), &mo, s, rollouts, cfg.seed, &cfg.model_config())?;
    writeln!(out, "# {} rule {} from {} ({} rollouts)", mo.name(), mo.rule(), domain.describe(s), rollouts)?;
    writeln!(out, "s' k analytic empirical stderr z")?;
    write!(out, "{}", report.table())?;
    writeln!(
        out,
        "reward analytic {:.6} empirical {:.6} stderr {:.6} z {:.3}",
        report.analytic_reward, report.empirical_reward, report.reward_stderr, report.reward_z
    )?;
    if report.pass {
        writeln!(out, "PASS")?;
        Ok(report)
    } else {
        let cells: Vec<String> = report.failures().map(|c| format!("({}, {})", c.next, c.k)).collect();
        writeln!(out, "FAIL")?;
        let mut what = Vec::new();
        if !cells.is_empty() {
            what.push(format!("cells {}", cells.join(" ")));
        }
        if !report.reward_pass {
            what.push("discounted reward".to_string());
        }
        Err(CliError::VerificationFailed(what.join("; ")))
    }
}

/// Writes the `s s' k probability` dump of a multi-option; `states` limits the start states.
pub fn cmd_model(
    cfg: &ExperimentConfig,
    option: &str,
    states: &[String],
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let domain = cfg.domain()?;
    let mo = resolve_multi_option(&domain, option, cfg.rule)?;
    let starts = states
        .iter()
        .map(|s| domain.parse_state(s))
        .collect::<Result<Vec<usize>, _>>()?;
    let model_cfg = ModelConfig {
        keep_steps: true,
        ..cfg.model_config()
    };
    let model = multi_option_model_with(
        domain.mdp(),
        &mo,
        &model_cfg,
        if starts.is_empty() { None } else { Some(&starts) },
    )?;
    model.write_dump(out)?;
    Ok(())
}
