//! Step-level simulation of options and multi-options.
//!
//! The executor samples primitive actions and outcomes straight from the
//! flat MDP, never from the analytic kernels, so it doubles as the
//! Monte-Carlo oracle for [`crate::concurrent`].

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::concurrent::{MultiOption, TerminationRule};
use crate::error::{Error, Result};
use crate::mdp::{FactoredState, FlatMdp};
use crate::model::StartModel;
use crate::option::MarkovOption;

/// Default cap on primitive steps in a single rollout.
pub const DEFAULT_STEP_CAP: usize = 1_000_000;

/// A reproducible random stream keyed by `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Inverse-CDF draw; the last entry absorbs rounding.
#[inline]
fn sample_index<T>(items: &[T], weight: impl Fn(&T) -> f64, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, it) in items.iter().enumerate() {
        acc += weight(it);
        if u < acc {
            return i;
        }
    }
    items.len() - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub end: usize,
    pub duration: usize,
    pub discounted_reward: f64,
    /// Step at which each member terminated; `None` if it was interrupted.
    pub member_end_times: Vec<Option<usize>>,
}

impl RunOutcome {
    pub fn end_state(&self, mdp: &FlatMdp) -> FactoredState {
        mdp.space().state(self.end)
    }
}

/// One joint step: every active member picks a primitive from its policy
/// and the sampled outcome is written onto that member's block. Returns the
/// next state and the step reward (mean over the acting members).
pub fn step_joint(
    mdp: &FlatMdp,
    members: &[&MarkovOption],
    active: u32,
    s: usize,
    rng: &mut RngStream,
) -> Result<(usize, f64)> {
    let mut next = s;
    let mut reward = 0.0;
    let mut count = 0usize;
    for (i, m) in members.iter().enumerate() {
        if active & (1 << i) == 0 {
            continue;
        }
        let pol = m.policy(s);
        if pol.is_empty() {
            return Err(Error::NoPolicy {
                option: m.name().to_string(),
                state: s,
            });
        }
        let a = pol[sample_index(pol, |e| e.1, rng.uniform())].0;
        let row = mdp.row(s, a);
        let o = row[sample_index(row, |e| e.prob, rng.uniform())];
        // the outcome only differs from s on the member's block
        next = next + o.next - s;
        reward += o.reward;
        count += 1;
    }
    Ok((next, reward / count as f64))
}

/// Runs a multi-option from `s` until it terminates under its rule.
///
/// After each joint step every still-active member draws its termination
/// at the new state. T1 stops at the first termination; T2 freezes the
/// terminated members and stops when none is left.
pub fn run_multi_option(
    mdp: &FlatMdp,
    mo: &MultiOption,
    s: usize,
    rng: &mut RngStream,
) -> Result<RunOutcome> {
    run_multi_option_capped(mdp, mo, s, rng, DEFAULT_STEP_CAP)
}

pub fn run_multi_option_capped(
    mdp: &FlatMdp,
    mo: &MultiOption,
    s: usize,
    rng: &mut RngStream,
    step_cap: usize,
) -> Result<RunOutcome> {
    if !mo.is_available(s) {
        return Err(Error::InvalidState(format!(
            "multi-option {} is not available at state {s}",
            mo.name()
        )));
    }
    let members: Vec<&MarkovOption> = mo.members().iter().map(|m| m.as_ref()).collect();
    let gamma = mdp.discount();
    let mut active: u32 = (0..members.len()).fold(0, |acc, i| acc | (1 << i));
    let mut ends = vec![None; members.len()];
    let mut state = s;
    let mut ret = 0.0;
    let mut disc = 1.0;
    for t in 1..=step_cap {
        let (next, r) = step_joint(mdp, &members, active, state, rng)?;
        ret += disc * r;
        disc *= gamma;
        state = next;
        let mut any = false;
        for (i, m) in members.iter().enumerate() {
            if active & (1 << i) == 0 {
                continue;
            }
            if rng.uniform() < m.termination(state) {
                ends[i] = Some(t);
                any = true;
            }
        }
        match mo.rule() {
            TerminationRule::T1 if any => {
                return Ok(RunOutcome {
                    end: state,
                    duration: t,
                    discounted_reward: ret,
                    member_end_times: ends,
                })
            }
            TerminationRule::T2 => {
                for (i, e) in ends.iter().enumerate() {
                    if e.is_some() {
                        active &= !(1 << i);
                    }
                }
                if active == 0 {
                    return Ok(RunOutcome {
                        end: state,
                        duration: t,
                        discounted_reward: ret,
                        member_end_times: ends,
                    });
                }
            }
            _ => {}
        }
    }
    Err(Error::StepCap(step_cap))
}

/// Ordinary execution of one option; every variable outside its block is frozen.
pub fn run_sequential_option(
    mdp: &FlatMdp,
    option: &std::sync::Arc<MarkovOption>,
    s: usize,
    rng: &mut RngStream,
) -> Result<RunOutcome> {
    let mo = MultiOption::new(vec![option.clone()], TerminationRule::T1)?;
    run_multi_option(mdp, &mo, s, rng)
}

/// Empirical duration/next-state distribution and discounted return.
#[derive(Clone, Debug)]
pub struct MonteCarloEstimate {
    pub rollouts: usize,
    /// Hit counts per `(next, k)`.
    pub counts: BTreeMap<(usize, usize), u64>,
    pub mean_return: f64,
    pub return_stderr: f64,
    pub mean_duration: f64,
}

impl MonteCarloEstimate {
    pub fn frequency(&self, next: usize, k: usize) -> f64 {
        self.counts.get(&(next, k)).copied().unwrap_or(0) as f64 / self.rollouts as f64
    }

    /// Binomial standard error of a frequency estimate.
    pub fn frequency_stderr(&self, next: usize, k: usize) -> f64 {
        let p = self.frequency(next, k);
        (p * (1.0 - p) / self.rollouts as f64).sqrt()
    }
}

pub fn monte_carlo_model(
    mdp: &FlatMdp,
    mo: &MultiOption,
    s: usize,
    rollouts: usize,
    rng: &mut RngStream,
) -> Result<MonteCarloEstimate> {
    if rollouts == 0 {
        return Err(Error::Config("need at least one rollout".into()));
    }
    let mut counts = BTreeMap::new();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut dur = 0.0;
    for _ in 0..rollouts {
        let out = run_multi_option(mdp, mo, s, rng)?;
        *counts.entry((out.end, out.duration)).or_insert(0u64) += 1;
        sum += out.discounted_reward;
        sum_sq += out.discounted_reward * out.discounted_reward;
        dur += out.duration as f64;
    }
    let n = rollouts as f64;
    let mean = sum / n;
    let var = if rollouts > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        rollouts,
        counts,
        mean_return: mean,
        return_stderr: (var / n).sqrt(),
        mean_duration: dur / n,
    })
}

/// One `(s', k)` comparison row.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCheck {
    pub next: usize,
    pub k: usize,
    pub analytic: f64,
    pub empirical: f64,
    /// Binomial standard error under the analytic probability.
    pub stderr: f64,
    pub z: f64,
    /// Whether the cell takes part in the verdict.
    pub checked: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub cells: Vec<CellCheck>,
    pub analytic_reward: f64,
    pub empirical_reward: f64,
    pub reward_stderr: f64,
    pub reward_z: f64,
    pub reward_pass: bool,
    pub pass: bool,
}

impl VerificationReport {
    pub fn failures(&self) -> impl Iterator<Item = &CellCheck> {
        self.cells.iter().filter(|c| !c.pass)
    }

    /// `s' k analytic empirical stderr z` per line.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&format!(
                "{} {} {:.6} {:.6} {:.6} {:.3}{}\n",
                c.next,
                c.k,
                c.analytic,
                c.empirical,
                c.stderr,
                c.z,
                if c.pass { "" } else { " FAIL" }
            ));
        }
        out
    }
}

/// Compares an analytic start model with a Monte-Carlo estimate.
///
/// Cells with at least `min_expected` expected hits must lie within
/// `z_max` standard errors. A cell the model assigns zero probability but
/// the simulation hits fails regardless of its count. The mean discounted
/// return must lie within `z_max` standard errors of the analytic reward.
pub fn compare_with_model(
    analytic: &StartModel,
    estimate: &MonteCarloEstimate,
    min_expected: f64,
    z_max: f64,
) -> VerificationReport {
    let n = estimate.rollouts as f64;
    let mut keys: BTreeMap<(usize, usize), f64> = analytic
        .steps
        .iter()
        .map(|e| ((e.next, e.k), e.prob))
        .collect();
    for key in estimate.counts.keys() {
        keys.entry(*key).or_insert(0.0);
    }
    let mut cells = Vec::with_capacity(keys.len());
    let mut pass = true;
    for ((next, k), p) in keys {
        let emp = estimate.frequency(next, k);
        let stderr = (p * (1.0 - p) / n).sqrt();
        let z = if stderr > 0.0 {
            (emp - p) / stderr
        } else if emp == p {
            0.0
        } else {
            f64::INFINITY
        };
        let impossible = p == 0.0 && emp > 0.0;
        let checked = n * p >= min_expected || impossible;
        let ok = !checked || z.abs() <= z_max;
        pass &= ok;
        cells.push(CellCheck {
            next,
            k,
            analytic: p,
            empirical: emp,
            stderr,
            z,
            checked,
            pass: ok,
        });
    }
    let reward_z = if estimate.return_stderr > 0.0 {
        (estimate.mean_return - analytic.reward) / estimate.return_stderr
    } else if (estimate.mean_return - analytic.reward).abs() < 1e-9 {
        0.0
    } else {
        f64::INFINITY
    };
    let reward_pass = reward_z.abs() <= z_max;
    VerificationReport {
        cells,
        analytic_reward: analytic.reward,
        empirical_reward: estimate.mean_return,
        reward_stderr: estimate.return_stderr,
        reward_z,
        reward_pass,
        pass: pass && reward_pass,
    }
}
