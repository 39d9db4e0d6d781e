//! SMDP Q-learning over (multi-)options with ε-greedy exploration, plus the
//! running-median learning-curve statistic.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::io::{self, Write};
use std::thread;

use crate::concurrent::ActionSpace;
use crate::error::{Error, Result};
use crate::executor::{run_multi_option_capped, RngStream};
use crate::mdp::FlatMdp;
use crate::planning::ActionValueTable;

/// Default per-episode cap on primitive steps.
pub const DEFAULT_EPISODE_CAP: usize = 100_000;

/// Result of executing one decision to termination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub next: usize,
    /// Primitive steps taken, at least 1.
    pub duration: usize,
    /// Discounted reward accumulated over the duration.
    pub reward: f64,
}

/// An SMDP seen through sampled decisions.
pub trait SmdpEnv {
    fn num_states(&self) -> usize;
    fn start_state(&self) -> usize;
    fn is_terminal(&self, s: usize) -> bool;
    /// Choice ids available at `s`, ascending.
    fn available(&self, s: usize) -> &[usize];
    fn discount(&self) -> f64;
    /// Runs `choice` from `s`; `step_cap` bounds the primitive steps.
    fn execute(&self, s: usize, choice: usize, step_cap: usize, rng: &mut RngStream) -> Result<Transition>;
}

/// Multi-options of an [`ActionSpace`] executed on a flat MDP.
pub struct OptionEnv<'a> {
    mdp: &'a FlatMdp,
    actions: &'a ActionSpace,
    start: usize,
    terminal: Vec<bool>,
}

impl<'a> OptionEnv<'a> {
    pub fn new(mdp: &'a FlatMdp, actions: &'a ActionSpace, start: usize, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != mdp.num_states() || actions.num_states() != mdp.num_states() {
            return Err(Error::Config("environment parts cover different state counts".into()));
        }
        Ok(Self {
            mdp,
            actions,
            start,
            terminal,
        })
    }

    pub fn actions(&self) -> &ActionSpace {
        self.actions
    }
}

impl SmdpEnv for OptionEnv<'_> {
    fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    fn start_state(&self) -> usize {
        self.start
    }

    fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    fn available(&self, s: usize) -> &[usize] {
        self.actions.available(s)
    }

    fn discount(&self) -> f64 {
        self.mdp.discount()
    }

    fn execute(&self, s: usize, choice: usize, step_cap: usize, rng: &mut RngStream) -> Result<Transition> {
        let run = run_multi_option_capped(self.mdp, self.actions.get(choice), s, rng, step_cap)?;
        Ok(Transition {
            next: run.end,
            duration: run.duration,
            reward: run.discounted_reward,
        })
    }
}

/// An explicit SMDP given as per-choice outcome lists `(next, duration, reward, prob)`.
#[derive(Clone, Debug)]
pub struct TableSmdp {
    /// `choices[s]` holds `(id, outcomes)`, ids ascending.
    choices: Vec<Vec<(usize, Vec<(usize, usize, f64, f64)>)>>,
    ids: Vec<Vec<usize>>,
    terminal: Vec<bool>,
    start: usize,
    discount: f64,
}

impl TableSmdp {
    pub fn new(
        mut choices: Vec<Vec<(usize, Vec<(usize, usize, f64, f64)>)>>,
        terminal: Vec<bool>,
        start: usize,
        discount: f64,
    ) -> Result<Self> {
        for (s, row) in choices.iter_mut().enumerate() {
            row.sort_by_key(|c| c.0);
            for (id, outs) in row.iter() {
                let sum: f64 = outs.iter().map(|o| o.3).sum();
                if (sum - 1.0).abs() > 1e-9 || outs.iter().any(|o| o.1 == 0) {
                    return Err(Error::Config(format!("bad outcomes for choice {id} at state {s}")));
                }
            }
        }
        let ids = choices.iter().map(|r| r.iter().map(|c| c.0).collect()).collect();
        Ok(Self {
            choices,
            ids,
            terminal,
            start,
            discount,
        })
    }

    /// The same SMDP as a planning model, terminal states absorbing.
    pub fn to_model(&self) -> crate::planning::SmdpModel {
        let g = self.discount;
        let choices = self
            .choices
            .iter()
            .map(|row| {
                row.iter()
                    .map(|(id, outs)| {
                        let mut kernel: Vec<(usize, f64)> = outs
                            .iter()
                            .map(|&(y, k, _, p)| (y, p * g.powi(k as i32)))
                            .collect();
                        kernel.sort_by_key(|e| e.0);
                        crate::planning::Choice {
                            id: *id,
                            reward: outs.iter().map(|o| o.2 * o.3).sum(),
                            kernel,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut m = crate::planning::SmdpModel::new(choices, g);
        for (s, &t) in self.terminal.iter().enumerate() {
            if t {
                m.set_terminal(s);
            }
        }
        m
    }
}

impl SmdpEnv for TableSmdp {
    fn num_states(&self) -> usize {
        self.choices.len()
    }

    fn start_state(&self) -> usize {
        self.start
    }

    fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    fn available(&self, s: usize) -> &[usize] {
        &self.ids[s]
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn execute(&self, s: usize, choice: usize, _step_cap: usize, rng: &mut RngStream) -> Result<Transition> {
        let row = &self.choices[s];
        let i = row
            .binary_search_by_key(&choice, |c| c.0)
            .map_err(|_| Error::InvalidState(format!("choice {choice} unavailable at state {s}")))?;
        let outs = &row[i].1;
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = outs.len() - 1;
        for (j, o) in outs.iter().enumerate() {
            acc += o.3;
            if u < acc {
                pick = j;
                break;
            }
        }
        let (next, duration, reward, _) = outs[pick];
        Ok(Transition {
            next,
            duration,
            reward,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// `1 / n(s, o)` after the n-th update of the pair.
    InverseVisits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub step_size: StepSize,
    pub epsilon: f64,
    pub gamma: f64,
    pub episodes: usize,
    pub trials: usize,
    pub seed: u64,
    pub episode_cap: usize,
    /// Worker threads for independent trials; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::Constant(0.25),
            epsilon: 0.1,
            gamma: 0.9,
            episodes: 20_000,
            trials: 20,
            seed: 0,
            episode_cap: DEFAULT_EPISODE_CAP,
            threads: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if let StepSize::Constant(a) = self.step_size {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha must lie in (0, 1], got {a}")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.episodes == 0 || self.trials == 0 || self.episode_cap == 0 {
            return Err(Error::Config("episodes, trials and episode_cap must be positive".into()));
        }
        Ok(())
    }
}

/// `Q(s,o) += α [r + γ^k max_{o'} Q(s',o') − Q(s,o)]`, bootstrapping 0 at a terminal `s'`.
#[allow(clippy::too_many_arguments)]
pub fn smdp_q_update(
    q: &mut ActionValueTable,
    s: usize,
    choice: usize,
    reward: f64,
    next: usize,
    duration: usize,
    next_available: &[usize],
    next_terminal: bool,
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    if duration == 0 {
        return Err(Error::Config("a decision lasts at least one step".into()));
    }
    let old = q
        .get(s, choice)
        .ok_or_else(|| Error::InvalidState(format!("no entry for choice {choice} at state {s}")))?;
    let future = if next_terminal {
        0.0
    } else {
        q.max_over(next, next_available).ok_or(Error::NoActions(next))?
    };
    let target = reward + gamma.powi(duration as i32) * future;
    q.set(s, choice, old + alpha * (target - old))
}

/// With probability ε a uniform pick, otherwise the greedy id (lowest on ties).
pub fn select_epsilon_greedy(
    q: &ActionValueTable,
    s: usize,
    available: &[usize],
    epsilon: f64,
    rng: &mut RngStream,
) -> Result<usize> {
    if available.is_empty() {
        return Err(Error::NoActions(s));
    }
    if available.len() > 1 && rng.uniform() < epsilon {
        let i = ((rng.uniform() * available.len() as f64) as usize).min(available.len() - 1);
        return Ok(available[i]);
    }
    q.argmax_over(s, available).ok_or(Error::NoActions(s))
}

/// Per-episode medians of every prefix; even prefixes average the middle pair.
pub fn running_median(values: &[f64]) -> Vec<f64> {
    // max-heap of the lower half, min-heap of the upper half
    let mut low: BinaryHeap<Total> = BinaryHeap::new();
    let mut high: BinaryHeap<Reverse<Total>> = BinaryHeap::new();
    let mut out = Vec::with_capacity(values.len());
    for &x in values {
        match low.peek() {
            Some(top) if x > top.0 => high.push(Reverse(Total(x))),
            _ => low.push(Total(x)),
        }
        if low.len() > high.len() + 1 {
            let v = low.pop().expect("nonempty");
            high.push(Reverse(v));
        } else if high.len() > low.len() {
            let Reverse(v) = high.pop().expect("nonempty");
            low.push(v);
        }
        let m = if low.len() > high.len() {
            low.peek().expect("nonempty").0
        } else {
            0.5 * (low.peek().expect("nonempty").0 + high.peek().expect("nonempty").0 .0)
        };
        out.push(m);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Total(f64);

impl Eq for Total {}

impl PartialOrd for Total {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Total {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    /// `lengths[trial][episode]` in primitive steps.
    pub lengths: Vec<Vec<u64>>,
    /// Running median per trial.
    pub running_medians: Vec<Vec<f64>>,
}

impl LearningCurve {
    pub fn from_lengths(lengths: Vec<Vec<u64>>) -> Self {
        let running_medians = lengths
            .iter()
            .map(|l| running_median(&l.iter().map(|&x| x as f64).collect::<Vec<_>>()))
            .collect();
        Self {
            lengths,
            running_medians,
        }
    }

    pub fn episodes(&self) -> usize {
        self.lengths.first().map_or(0, Vec::len)
    }

    /// Running medians averaged across trials, one entry per episode.
    pub fn mean_running_median(&self) -> Vec<f64> {
        let t = self.running_medians.len() as f64;
        (0..self.episodes())
            .map(|e| self.running_medians.iter().map(|r| r[e]).sum::<f64>() / t)
            .collect()
    }

    /// Median of each trial's episode lengths over `range`.
    pub fn window_medians(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        self.lengths
            .iter()
            .map(|l| {
                let w: Vec<f64> = l[range.clone()].iter().map(|&x| x as f64).collect();
                crate::stats::median(&w).unwrap_or(f64::NAN)
            })
            .collect()
    }

    /// `trial,episode,steps,running_median`, 1-based indices, LF endings.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "trial,episode,steps,running_median")?;
        for (t, (l, r)) in self.lengths.iter().zip(&self.running_medians).enumerate() {
            for (e, (steps, med)) in l.iter().zip(r).enumerate() {
                writeln!(w, "{},{},{},{}", t + 1, e + 1, steps, med)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingResult {
    pub curve: LearningCurve,
    pub q_tables: Vec<ActionValueTable>,
    /// `(trial, episode)` pairs, 0-based, that hit the episode cap.
    pub capped: Vec<(usize, usize)>,
}

struct TrialResult {
    lengths: Vec<u64>,
    q: ActionValueTable,
    capped: Vec<usize>,
}

fn run_trial<E: SmdpEnv + ?Sized>(env: &E, config: &LearnerConfig, trial: usize) -> Result<TrialResult> {
    let n = env.num_states();
    let mut q = ActionValueTable::new((0..n).map(|s| env.available(s)), 0.0);
    let mut visits: Vec<Vec<u64>> = (0..n).map(|s| vec![0; env.available(s).len()]).collect();
    let mut rng = RngStream::new(config.seed, trial as u64);
    let mut lengths = Vec::with_capacity(config.episodes);
    let mut capped = Vec::new();
    for episode in 0..config.episodes {
        let mut s = env.start_state();
        let mut steps = 0usize;
        while !env.is_terminal(s) {
            let avail = env.available(s);
            let choice = select_epsilon_greedy(&q, s, avail, config.epsilon, &mut rng)?;
            let tr = match env.execute(s, choice, config.episode_cap - steps, &mut rng) {
                Ok(tr) => tr,
                Err(Error::StepCap(_)) => {
                    steps = config.episode_cap;
                    break;
                }
                Err(e) => return Err(e),
            };
            let alpha = match config.step_size {
                StepSize::Constant(a) => a,
                StepSize::InverseVisits => {
                    let i = avail.binary_search(&choice).expect("chosen from available");
                    visits[s][i] += 1;
                    1.0 / visits[s][i] as f64
                }
            };
            let next_terminal = env.is_terminal(tr.next);
            smdp_q_update(
                &mut q,
                s,
                choice,
                tr.reward,
                tr.next,
                tr.duration,
                env.available(tr.next),
                next_terminal,
                alpha,
                config.gamma,
            )?;
            steps += tr.duration;
            s = tr.next;
            if steps >= config.episode_cap && !next_terminal {
                break;
            }
        }
        if steps >= config.episode_cap && !env.is_terminal(s) {
            capped.push(episode);
        }
        lengths.push(steps as u64);
    }
    Ok(TrialResult { lengths, q, capped })
}

/// Independent trials, each from the fixed start state with its own random
/// stream `(seed, trial)`. Results do not depend on the thread count.
pub fn run_training<E: SmdpEnv + Sync + ?Sized>(env: &E, config: &LearnerConfig) -> Result<TrainingResult> {
    config.validate()?;
    if (config.gamma - env.discount()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "learner gamma {} differs from the environment discount {}",
            config.gamma,
            env.discount()
        )));
    }
    let threads = match config.threads {
        0 => thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(config.trials)
    .max(1);
    let mut slots: Vec<Option<Result<TrialResult>>> = (0..config.trials).map(|_| None).collect();
    thread::scope(|scope| {
        let chunks: Vec<_> = slots
            .chunks_mut(config.trials.div_ceil(threads))
            .enumerate()
            .map(|(c, chunk)| {
                let per = config.trials.div_ceil(threads);
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_trial(env, config, c * per + i));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("trial worker panicked");
        }
    });
    let mut lengths = Vec::with_capacity(config.trials);
    let mut q_tables = Vec::with_capacity(config.trials);
    let mut capped = Vec::new();
    for (t, slot) in slots.into_iter().enumerate() {
        let r = slot.expect("every trial ran")?;
        lengths.push(r.lengths);
        q_tables.push(r.q);
        capped.extend(r.capped.into_iter().map(|e| (t, e)));
    }
    Ok(TrainingResult {
        curve: LearningCurve::from_lengths(lengths),
        q_tables,
        capped,
    })
}
