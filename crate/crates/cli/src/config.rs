//! Flat `key=value` experiment configuration.

use std::path::PathBuf;

use concurrent_options::concurrent::{Framework, TerminationRule};
use concurrent_options::learning::{LearnerConfig, StepSize, DEFAULT_EPISODE_CAP};
use concurrent_options::model::ModelConfig;
use concurrent_options::rooms::{RoomsDomain, RoomsLayout, DEFAULT_GOAL};

use crate::error::CliError;

/// Every key the configuration accepts, in documentation order.
pub const KEYS: &[&str] = &[
    "framework",
    "rule",
    "gamma",
    "alpha",
    "epsilon",
    "episodes",
    "trials",
    "seed",
    "k_max",
    "tol",
    "layout_path",
    "out_path",
    "episode_cap",
    "threads",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameworkKind {
    Sequential,
    Concurrent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub framework: FrameworkKind,
    pub rule: TerminationRule,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub episodes: usize,
    pub trials: usize,
    pub seed: u64,
    pub k_max: usize,
    pub tol: f64,
    pub layout_path: Option<PathBuf>,
    pub out_path: PathBuf,
    pub episode_cap: usize,
    /// 0 uses every available core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            framework: FrameworkKind::Concurrent,
            rule: TerminationRule::T2,
            gamma: 0.9,
            alpha: 0.25,
            epsilon: 0.1,
            episodes: 20_000,
            trials: 20,
            seed: 0,
            k_max: 200,
            tol: 1e-9,
            layout_path: None,
            out_path: PathBuf::from("learning.csv"),
            episode_cap: DEFAULT_EPISODE_CAP,
            threads: 0,
        }
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse `{value}`")))
}

impl ExperimentConfig {
    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form. Ranges are checked by [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "framework" => {
                self.framework = match value {
                    "sequential" => FrameworkKind::Sequential,
                    "concurrent" => FrameworkKind::Concurrent,
                    _ => {
                        return Err(CliError::Config(format!(
                            "framework: expected sequential or concurrent, got `{value}`"
                        )))
                    }
                }
            }
            "rule" => {
                self.rule = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("rule: expected t1 or t2, got `{value}`")))?
            }
            "gamma" => self.gamma = number(key, value)?,
            "alpha" => self.alpha = number(key, value)?,
            "epsilon" => self.epsilon = number(key, value)?,
            "episodes" => self.episodes = number(key, value)?,
            "trials" => self.trials = number(key, value)?,
            "seed" => self.seed = number(key, value)?,
            "k_max" => self.k_max = number(key, value)?,
            "tol" => self.tol = number(key, value)?,
            "layout_path" => self.layout_path = Some(PathBuf::from(value)),
            "out_path" => self.out_path = PathBuf::from(value),
            "episode_cap" => self.episode_cap = number(key, value)?,
            "threads" => self.threads = number(key, value)?,
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", "must lie in [0, 1]");
        }
        if self.episodes == 0 {
            return bad("episodes", "must be positive");
        }
        if self.trials == 0 {
            return bad("trials", "must be positive");
        }
        if self.k_max == 0 {
            return bad("k_max", "must be positive");
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad("tol", "must be positive");
        }
        if self.episode_cap == 0 {
            return bad("episode_cap", "must be positive");
        }
        Ok(())
    }

    pub fn framework(&self) -> Framework {
        match self.framework {
            FrameworkKind::Sequential => Framework::Sequential,
            FrameworkKind::Concurrent => Framework::Concurrent(self.rule),
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            step_size: StepSize::Constant(self.alpha),
            epsilon: self.epsilon,
            gamma: self.gamma,
            episodes: self.episodes,
            trials: self.trials,
            seed: self.seed,
            episode_cap: self.episode_cap,
            threads: self.threads,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k_max: self.k_max,
            tol: self.tol,
            ..ModelConfig::default()
        }
    }

    pub fn layout(&self) -> Result<RoomsLayout, CliError> {
        match &self.layout_path {
            None => Ok(RoomsLayout::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("layout_path: {}: {e}", path.display())))?;
                RoomsLayout::parse(&text, DEFAULT_GOAL).map_err(|e| CliError::Config(format!("layout_path: {e}")))
            }
        }
    }

    pub fn domain(&self) -> Result<RoomsDomain, CliError> {
        RoomsDomain::new(self.layout()?, self.gamma).map_err(CliError::from)
    }
}
