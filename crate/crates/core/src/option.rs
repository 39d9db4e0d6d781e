//! Markov options and their analytic single-option models.
//!
//! An option is tabulated against one [`FlatMdp`]: initiation, policy and
//! termination are stored per state ordinal, together with the one-step
//! kernel and expected one-step reward induced by the policy.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::mdp::{FactoredState, FlatMdp, VarSet, ROW_SUM_TOL};
use crate::model::{finish_steps, Accumulator, ModelConfig, StartModel, StepEntry};

#[derive(Clone, Debug)]
pub struct MarkovOption {
    name: String,
    controlled: VarSet,
    observed: VarSet,
    initiation: Vec<bool>,
    policy: Vec<Vec<(usize, f64)>>,
    termination: Vec<f64>,
    kernel: Vec<Vec<(usize, f64)>>,
    step_reward: Vec<f64>,
}

impl MarkovOption {
    /// Tabulates an option over every state of `mdp`.
    ///
    /// `policy` returns `(action index, probability)` pairs; an empty vector
    /// means the policy is undefined there. The policy must be a proper
    /// distribution on the initiation set and on every state reachable
    /// before termination, and may only use actions whose block lies inside
    /// `controlled`.
    pub fn tabulate<I, P, B>(
        mdp: &FlatMdp,
        name: impl Into<String>,
        controlled: VarSet,
        observed: VarSet,
        initiation: I,
        policy: P,
        termination: B,
    ) -> Result<Self>
    where
        I: Fn(&FactoredState) -> bool,
        P: Fn(&FactoredState) -> Vec<(usize, f64)>,
        B: Fn(&FactoredState) -> f64,
    {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidOption {
            name: name.clone(),
            reason,
        };
        if !controlled.is_disjoint(&observed) {
            return Err(invalid("controlled and observed variables overlap".into()));
        }
        let n_vars = mdp.space().num_vars();
        if controlled
            .indices()
            .iter()
            .chain(observed.indices())
            .any(|&v| v >= n_vars)
        {
            return Err(invalid("variable scope names an unknown variable".into()));
        }

        let n = mdp.num_states();
        let mut init = Vec::with_capacity(n);
        let mut pol = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for s in 0..n {
            let st = mdp.space().state(s);
            init.push(initiation(&st));
            let b = termination(&st);
            if !(0.0..=1.0).contains(&b) {
                return Err(invalid(format!("termination {b} out of [0,1] at state {s}")));
            }
            beta.push(b);
            let p = policy(&st);
            let mut sum = 0.0;
            for &(a, w) in &p {
                if a >= mdp.num_actions() {
                    return Err(invalid(format!("unknown action index {a}")));
                }
                if !mdp.actions()[a].block.is_subset(&controlled) {
                    return Err(invalid(format!(
                        "action `{}` changes variables outside the controlled set",
                        mdp.actions()[a].name
                    )));
                }
                if !(0.0..=1.0).contains(&w) {
                    return Err(invalid(format!("policy weight {w} at state {s}")));
                }
                sum += w;
            }
            if !p.is_empty() && (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("policy sums to {sum} at state {s}")));
            }
            pol.push(p);
        }

        let mut kernel = Vec::with_capacity(n);
        let mut step_reward = Vec::with_capacity(n);
        for (s, p) in pol.iter().enumerate() {
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            let mut r = 0.0;
            for &(a, w) in p {
                for o in mdp.row(s, a) {
                    *row.entry(o.next).or_insert(0.0) += w * o.prob;
                    r += w * o.prob * o.reward;
                }
            }
            kernel.push(row.into_iter().filter(|e| e.1 > 0.0).collect::<Vec<_>>());
            step_reward.push(r);
        }

        let option = Self {
            name,
            controlled,
            observed,
            initiation: init,
            policy: pol,
            termination: beta,
            kernel,
            step_reward,
        };
        option.check_policy_coverage()?;
        Ok(option)
    }

    /// Every state where the option may have to act needs a policy.
    fn check_policy_coverage(&self) -> Result<()> {
        let n = self.initiation.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::new();
        for s in 0..n {
            if self.initiation[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            if self.policy[s].is_empty() {
                return Err(Error::NoPolicy {
                    option: self.name.clone(),
                    state: s,
                });
            }
            for &(y, _) in &self.kernel[s] {
                if self.termination[y] < 1.0 && !seen[y] {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn controlled_vars(&self) -> &VarSet {
        &self.controlled
    }

    pub fn observed_vars(&self) -> &VarSet {
        &self.observed
    }

    /// `W_o`, the union of controlled and observed variables.
    pub fn scope(&self) -> VarSet {
        self.controlled.union(&self.observed)
    }

    /// Partially factored options declare a nonempty controlled set.
    pub fn is_partially_factored(&self) -> bool {
        !self.controlled.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.initiation.len()
    }

    #[inline]
    pub fn can_initiate(&self, s: usize) -> bool {
        self.initiation[s]
    }

    #[inline]
    pub fn termination(&self, s: usize) -> f64 {
        self.termination[s]
    }

    #[inline]
    pub fn policy(&self, s: usize) -> &[(usize, f64)] {
        &self.policy[s]
    }

    /// One-step kernel induced by the policy, `Σ_a π(s,a) P(·|s,a)`.
    #[inline]
    pub fn step_kernel(&self, s: usize) -> &[(usize, f64)] {
        &self.kernel[s]
    }

    /// Expected reward of one step under the policy.
    #[inline]
    pub fn step_reward(&self, s: usize) -> f64 {
        self.step_reward[s]
    }

    pub fn initiation_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.initiation.len()).filter(|&s| self.initiation[s])
    }

    /// Copy with a replaced termination function, for fault injection.
    pub fn with_termination(&self, termination: impl Fn(usize) -> f64) -> Result<Self> {
        let mut out = self.clone();
        for (s, b) in out.termination.iter_mut().enumerate() {
            let v = termination(s);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidOption {
                    name: self.name.clone(),
                    reason: format!("termination {v} out of [0,1]"),
                });
            }
            *b = v;
        }
        out.check_policy_coverage()?;
        Ok(out)
    }
}

/// True iff `s` is in the option's initiation set.
pub fn is_available(option: &MarkovOption, s: usize) -> bool {
    option.can_initiate(s)
}

/// Duration/next-state distributions of one option for every start in its
/// initiation set.
#[derive(Clone, Debug)]
pub struct StepDistributions {
    pub option: String,
    pub starts: BTreeMap<usize, StartModel>,
}

#[derive(Clone, Debug)]
pub struct OptionModel {
    pub option: String,
    pub discount: f64,
    pub starts: BTreeMap<usize, StartModel>,
    /// Largest `γ^k · residual` over all starts.
    pub truncation_error: f64,
}

impl OptionModel {
    pub fn start(&self, s: usize) -> Option<&StartModel> {
        self.starts.get(&s)
    }
}

/// `p^o(s, s', k)` for `k ≤ k_max`, exact up to rounding, for every `s` in
/// the initiation set. Mass not terminated by `k_max` is kept as residual.
pub fn option_step_distribution(
    mdp: &FlatMdp,
    option: &MarkovOption,
    k_max: usize,
) -> Result<StepDistributions> {
    if k_max < 1 {
        return Err(Error::ZeroHorizon);
    }
    let cfg = ModelConfig::exact(k_max, f64::INFINITY);
    let starts = sweep_all(mdp, option, &cfg)?;
    Ok(StepDistributions {
        option: option.name.clone(),
        starts,
    })
}

/// Discounted reward and transition model of one option.
pub fn option_discounted_model(
    mdp: &FlatMdp,
    option: &MarkovOption,
    k_max: usize,
    tol: f64,
) -> Result<OptionModel> {
    option_discounted_model_with(mdp, option, &ModelConfig::exact(k_max, tol))
}

pub fn option_discounted_model_with(
    mdp: &FlatMdp,
    option: &MarkovOption,
    cfg: &ModelConfig,
) -> Result<OptionModel> {
    if cfg.k_max < 1 {
        return Err(Error::ZeroHorizon);
    }
    let starts = sweep_all(mdp, option, cfg)?;
    let truncation_error = starts
        .values()
        .map(|m| m.truncation_error(mdp.discount()))
        .fold(0.0, f64::max);
    if truncation_error > cfg.tol {
        return Err(Error::Truncation {
            error: truncation_error,
            tol: cfg.tol,
            k_max: cfg.k_max,
        });
    }
    Ok(OptionModel {
        option: option.name.clone(),
        discount: mdp.discount(),
        starts,
        truncation_error,
    })
}

fn sweep_all(
    mdp: &FlatMdp,
    option: &MarkovOption,
    cfg: &ModelConfig,
) -> Result<BTreeMap<usize, StartModel>> {
    if option.num_states() != mdp.num_states() {
        return Err(Error::InvalidOption {
            name: option.name.clone(),
            reason: "tabulated against a different state space".into(),
        });
    }
    let mut acc = Accumulator::new(mdp.num_states());
    let mut out = BTreeMap::new();
    for s in option.initiation_states() {
        out.insert(s, sweep_from(mdp, option, s, cfg, &mut acc)?);
    }
    Ok(out)
}

/// Forward recurrence from one start: the surviving mass is pushed through
/// the policy kernel, the termination weight is applied at each reached
/// state, and reward is accrued for every executed step.
fn sweep_from(
    mdp: &FlatMdp,
    option: &MarkovOption,
    start: usize,
    cfg: &ModelConfig,
    acc: &mut Accumulator,
) -> Result<StartModel> {
    let gamma = mdp.discount();
    let mut mass = vec![(start, 1.0)];
    let mut raw = Vec::new();
    let mut reward = 0.0;
    let mut discount_pow = 1.0;
    let mut horizon = 0;
    for k in 1..=cfg.k_max {
        horizon = k;
        let mut step_r = 0.0;
        for &(x, m) in &mass {
            let row = option.step_kernel(x);
            if row.is_empty() {
                return Err(Error::NoPolicy {
                    option: option.name.clone(),
                    state: x,
                });
            }
            step_r += m * option.step_reward(x);
            for &(y, p) in row {
                acc.add(y, m * p);
            }
        }
        reward += discount_pow * step_r;
        discount_pow *= gamma;
        mass.clear();
        let mut alive = 0.0;
        for (y, q) in acc.drain_sorted() {
            let b = option.termination(y);
            if b > 0.0 {
                raw.push(StepEntry {
                    next: y,
                    k,
                    prob: q * b,
                });
            }
            if b < 1.0 {
                let m = q * (1.0 - b);
                alive += m;
                mass.push((y, m));
            }
        }
        if mass.is_empty() || alive <= cfg.mass_floor {
            break;
        }
    }
    let residual = mass.iter().map(|e| e.1).sum();
    let (steps, kernel) = finish_steps(raw, gamma, cfg.keep_steps);
    Ok(StartModel {
        steps,
        kernel,
        reward,
        residual,
        horizon,
    })
}
