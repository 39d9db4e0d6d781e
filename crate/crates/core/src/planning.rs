//! Bellman evaluation and synchronous value iteration over an SMDP whose
//! actions are (multi-)options.
//!
//! Every choice carries its expected discounted reward and its discounted
//! kernel `Σ_k P(s, s', k) γ^k`, so durations never appear explicitly here.

use crate::concurrent::{ActionSpace, Sweeper};
use crate::error::{Error, Result};
use crate::mdp::FlatMdp;
use crate::model::ModelConfig;

/// Id of the zero-reward self-loop that stands in for a terminal state.
pub const ABSORBING: usize = usize::MAX;

/// Default iteration cap for the fixed-point loops.
pub const DEFAULT_MAX_ITERATIONS: usize = 100_000;

/// Default sup-norm tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub id: usize,
    pub reward: f64,
    pub kernel: Vec<(usize, f64)>,
}

impl Choice {
    #[inline]
    fn backup(&self, values: &[f64]) -> f64 {
        self.reward + self.kernel.iter().map(|&(y, p)| p * values[y]).sum::<f64>()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelStats {
    /// Number of `(state, choice)` models computed.
    pub pairs: usize,
    pub max_residual: f64,
    pub max_truncation_error: f64,
}

#[derive(Clone, Debug)]
pub struct SmdpModel {
    choices: Vec<Vec<Choice>>,
    discount: f64,
}

impl SmdpModel {
    /// Choices per state are sorted by id.
    pub fn new(mut choices: Vec<Vec<Choice>>, discount: f64) -> Self {
        for c in &mut choices {
            c.sort_by_key(|x| x.id);
        }
        Self { choices, discount }
    }

    /// Builds the model of every available multi-option at every
    /// non-terminal state. Terminal states get the absorbing self-loop.
    pub fn from_action_space(
        mdp: &FlatMdp,
        actions: &ActionSpace,
        terminal: &[bool],
        cfg: &ModelConfig,
    ) -> Result<(Self, ModelStats)> {
        let n = mdp.num_states();
        let gamma = mdp.discount();
        let cfg = ModelConfig {
            keep_steps: false,
            ..*cfg
        };
        let mut choices: Vec<Vec<Choice>> = vec![Vec::new(); n];
        let mut stats = ModelStats::default();
        for (id, mo) in actions.multi_options().iter().enumerate() {
            let mut sweeper = Sweeper::new(n, mo.len());
            for s in 0..n {
                if terminal[s] || !mo.is_available(s) {
                    continue;
                }
                let m = sweeper.sweep(mo, s, gamma, &cfg)?;
                stats.pairs += 1;
                let err = m.truncation_error(gamma);
                if m.residual > stats.max_residual {
                    stats.max_residual = m.residual;
                }
                if err > stats.max_truncation_error {
                    stats.max_truncation_error = err;
                }
                if err > cfg.tol {
                    return Err(Error::Truncation {
                        error: err,
                        tol: cfg.tol,
                        k_max: cfg.k_max,
                    });
                }
                choices[s].push(Choice {
                    id,
                    reward: m.reward,
                    kernel: m.kernel,
                });
            }
        }
        let mut model = Self::new(choices, gamma);
        for (s, &t) in terminal.iter().enumerate() {
            if t {
                model.set_terminal(s);
            }
        }
        Ok((model, stats))
    }

    pub fn set_terminal(&mut self, s: usize) {
        self.choices[s] = vec![Choice {
            id: ABSORBING,
            reward: 0.0,
            kernel: vec![(s, self.discount)],
        }];
    }

    pub fn num_states(&self) -> usize {
        self.choices.len()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn choices(&self, s: usize) -> &[Choice] {
        &self.choices[s]
    }

    pub fn choice(&self, s: usize, id: usize) -> Option<&Choice> {
        self.choices[s]
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.choices[s][i])
    }

    pub fn choices_mut(&mut self, s: usize) -> &mut Vec<Choice> {
        &mut self.choices[s]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }
}

/// Values of `(state, choice id)` pairs, rows sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionValueTable {
    rows: Vec<Vec<(usize, f64)>>,
}

impl ActionValueTable {
    /// A table holding `init` for every id listed per state.
    pub fn new<'a, I>(ids: I, init: f64) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let rows = ids
            .into_iter()
            .map(|row| {
                let mut r: Vec<(usize, f64)> = row.iter().map(|&id| (id, init)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Self { rows }
    }

    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Self { rows }
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, s: usize) -> &[(usize, f64)] {
        &self.rows[s]
    }

    fn position(&self, s: usize, id: usize) -> Option<usize> {
        self.rows[s].binary_search_by_key(&id, |e| e.0).ok()
    }

    pub fn get(&self, s: usize, id: usize) -> Option<f64> {
        self.position(s, id).map(|i| self.rows[s][i].1)
    }

    pub fn set(&mut self, s: usize, id: usize, value: f64) -> Result<()> {
        let i = self.position(s, id).ok_or_else(|| {
            Error::InvalidState(format!("no entry for choice {id} at state {s}"))
        })?;
        self.rows[s][i].1 = value;
        Ok(())
    }

    /// Maximum over the ids in `ids`; `None` if none of them has an entry.
    pub fn max_over(&self, s: usize, ids: &[usize]) -> Option<f64> {
        ids.iter()
            .filter_map(|&id| self.get(s, id))
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    /// Lowest id among the maximizers in `ids`.
    pub fn argmax_over(&self, s: usize, ids: &[usize]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &id in ids {
            if let Some(v) = self.get(s, id) {
                best = match best {
                    Some((bid, bv)) if bv > v || (bv == v && bid < id) => Some((bid, bv)),
                    _ => Some((id, v)),
                };
            }
        }
        best.map(|b| b.0)
    }

    pub fn max_abs_diff(&self, other: &ActionValueTable) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            for (x, y) in a.iter().zip(b) {
                if x.0 != y.0 {
                    return f64::INFINITY;
                }
                d = d.max((x.1 - y.1).abs());
            }
            if a.len() != b.len() {
                return f64::INFINITY;
            }
        }
        d
    }
}

/// `μ(s, ·)`, a distribution over choice ids per state.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticPolicy {
    pub choice: Vec<Vec<(usize, f64)>>,
}

impl StochasticPolicy {
    /// Uniform over every choice of the model.
    pub fn uniform(model: &SmdpModel) -> Self {
        Self {
            choice: (0..model.num_states())
                .map(|s| {
                    let c = model.choices(s);
                    let w = 1.0 / c.len() as f64;
                    c.iter().map(|x| (x.id, w)).collect()
                })
                .collect(),
        }
    }

    pub fn deterministic(policy: &DeterministicPolicy) -> Self {
        Self {
            choice: policy.0.iter().map(|&id| vec![(id, 1.0)]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeterministicPolicy(pub Vec<usize>);

impl DeterministicPolicy {
    pub fn get(&self, s: usize) -> usize {
        self.0[s]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Last sup-norm change.
    pub delta: f64,
}

/// Fixed point of `V(s) = Σ μ(s,o) [R + Σ P V]` and the matching `Q`.
pub fn evaluate_policy(
    model: &SmdpModel,
    policy: &StochasticPolicy,
    tol: f64,
) -> Result<(ValueFunction, ActionValueTable, SolveReport)> {
    evaluate_policy_capped(model, policy, tol, DEFAULT_MAX_ITERATIONS)
}

pub fn evaluate_policy_capped(
    model: &SmdpModel,
    policy: &StochasticPolicy,
    tol: f64,
    max_iterations: usize,
) -> Result<(ValueFunction, ActionValueTable, SolveReport)> {
    let n = model.num_states();
    if policy.choice.len() != n {
        return Err(Error::Config("policy and model cover different state counts".into()));
    }
    // resolve the policy support once
    let mut support: Vec<Vec<(&Choice, f64)>> = Vec::with_capacity(n);
    for s in 0..n {
        let mut row = Vec::new();
        let mut sum = 0.0;
        for &(id, w) in &policy.choice[s] {
            let c = model.choice(s, id).ok_or_else(|| {
                Error::InvalidState(format!("policy picks unknown choice {id} at state {s}"))
            })?;
            sum += w;
            row.push((c, w));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("policy at state {s} sums to {sum}")));
        }
        support.push(row);
    }
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    for it in 1..=max_iterations {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let x: f64 = support[s].iter().map(|(c, w)| w * c.backup(&v)).sum();
            delta = delta.max((x - v[s]).abs());
            next[s] = x;
        }
        std::mem::swap(&mut v, &mut next);
        if delta <= tol {
            let q = q_from_values(model, &v);
            return Ok((
                ValueFunction { values: v },
                q,
                SolveReport {
                    iterations: it,
                    delta,
                },
            ));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iterations,
        delta: f64::NAN,
    })
}

/// `Q(s, o) = R + Σ P V` for every choice.
pub fn q_from_values(model: &SmdpModel, values: &[f64]) -> ActionValueTable {
    ActionValueTable {
        rows: (0..model.num_states())
            .map(|s| {
                model
                    .choices(s)
                    .iter()
                    .map(|c| (c.id, c.backup(values)))
                    .collect()
            })
            .collect(),
    }
}

/// One synchronous optimality sweep: reads only `values`.
pub fn bellman_optimality_sweep(model: &SmdpModel, values: &[f64]) -> Result<Vec<f64>> {
    (0..model.num_states())
        .map(|s| {
            model
                .choices(s)
                .iter()
                .map(|c| c.backup(values))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                .ok_or(Error::NoActions(s))
        })
        .collect()
}

/// `max_s |max_o [R + Σ P V] − V(s)|`.
pub fn bellman_residual(model: &SmdpModel, values: &[f64]) -> Result<f64> {
    let next = bellman_optimality_sweep(model, values)?;
    Ok(next
        .iter()
        .zip(values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Synchronous value iteration from `V ≡ 0`.
pub fn svi(model: &SmdpModel, tol: f64) -> Result<(ValueFunction, ActionValueTable, SolveReport)> {
    svi_from(model, vec![0.0; model.num_states()], tol, DEFAULT_MAX_ITERATIONS)
}

pub fn svi_from(
    model: &SmdpModel,
    init: Vec<f64>,
    tol: f64,
    max_iterations: usize,
) -> Result<(ValueFunction, ActionValueTable, SolveReport)> {
    let mut v = init;
    if v.len() != model.num_states() {
        return Err(Error::Config("initial values have the wrong length".into()));
    }
    let mut delta = f64::INFINITY;
    for it in 1..=max_iterations {
        let next = bellman_optimality_sweep(model, &v)?;
        delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta <= tol {
            let q = q_from_values(model, &v);
            return Ok((
                ValueFunction { values: v },
                q,
                SolveReport {
                    iterations: it,
                    delta,
                },
            ));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iterations,
        delta,
    })
}

/// Argmax per state, ties to the lowest id.
pub fn greedy_policy(q: &ActionValueTable) -> Result<DeterministicPolicy> {
    (0..q.num_states())
        .map(|s| {
            let ids: Vec<usize> = q.row(s).iter().map(|e| e.0).collect();
            q.argmax_over(s, &ids).ok_or(Error::NoActions(s))
        })
        .collect::<Result<Vec<_>>>()
        .map(DeterministicPolicy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choice(id: usize, reward: f64, kernel: Vec<(usize, f64)>) -> Choice {
        Choice { id, reward, kernel }
    }

    #[test]
    fn self_loop_geometric_series() {
        let model = SmdpModel::new(vec![vec![choice(0, -1.0, vec![(0, 0.9)])]], 0.9);
        let (v, _, _) = evaluate_policy(&model, &StochasticPolicy::uniform(&model), 1e-12).unwrap();
        assert!((v.get(0) + 10.0).abs() < 1e-10);
    }

    #[test]
    fn two_step_chain_closed_form() {
        // 0 --(R1, 2 steps)--> 1 --(R2, 3 steps)--> 2 (terminal)
        let g: f64 = 0.9;
        let (r1, r2) = (-1.9, -2.71);
        let mut model = SmdpModel::new(
            vec![
                vec![choice(0, r1, vec![(1, g.powi(2))])],
                vec![choice(0, r2, vec![(2, g.powi(3))])],
                vec![],
            ],
            g,
        );
        model.set_terminal(2);
        let (v, _, _) = evaluate_policy(&model, &StochasticPolicy::uniform(&model), 1e-13).unwrap();
        assert!((v.get(0) - (r1 + g.powi(2) * r2)).abs() < 1e-12);
        assert_eq!(v.get(2), 0.0);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let model = SmdpModel::new(
            vec![
                vec![choice(0, 0.0, vec![(1, 0.9)]), choice(1, 0.0, vec![(0, 0.5)])],
                vec![choice(0, 0.0, vec![(0, 0.81)])],
            ],
            0.9,
        );
        let (v, _, _) = svi(&model, 1e-12).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dominating_choice_is_greedy_everywhere() {
        let model = SmdpModel::new(
            (0..3)
                .map(|s| {
                    vec![
                        choice(0, -2.0, vec![((s + 1) % 3, 0.9)]),
                        choice(1, -1.0, vec![((s + 1) % 3, 0.9)]),
                    ]
                })
                .collect(),
            0.9,
        );
        let (_, q, _) = svi(&model, 1e-12).unwrap();
        assert_eq!(greedy_policy(&q).unwrap().0, vec![1, 1, 1]);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let q = ActionValueTable::from_rows(vec![vec![(3, 1.0), (1, 1.0), (2, 0.5)], vec![(0, -1.0), (5, 2.0)]]);
        assert_eq!(greedy_policy(&q).unwrap().0, vec![1, 5]);
        let empty = ActionValueTable::from_rows(vec![vec![]]);
        assert!(matches!(greedy_policy(&empty), Err(Error::NoActions(0))));
    }

    #[test]
    fn empty_state_is_an_error() {
        let model = SmdpModel::new(vec![vec![], vec![choice(0, -1.0, vec![(1, 0.5)])]], 0.9);
        assert!(matches!(svi(&model, 1e-8), Err(Error::NoActions(0))));
    }

    #[test]
    fn non_convergence_reported() {
        // undiscounted self loop never settles
        let model = SmdpModel::new(vec![vec![choice(0, -1.0, vec![(0, 1.0)])]], 1.0);
        assert!(matches!(
            svi_from(&model, vec![0.0], 1e-8, 100),
            Err(Error::NotConverged { .. })
        ));
        assert!(matches!(
            evaluate_policy_capped(&model, &StochasticPolicy::uniform(&model), 1e-8, 100),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn greedy_evaluation_reproduces_optimum() {
        let model = SmdpModel::new(
            vec![
                vec![choice(0, -1.0, vec![(1, 0.9)]), choice(1, -3.0, vec![(2, 0.81)])],
                vec![choice(0, -1.0, vec![(2, 0.9)]), choice(1, -0.5, vec![(0, 0.45), (1, 0.45)])],
                vec![choice(0, -1.0, vec![(0, 0.5), (2, 0.4)])],
            ],
            0.9,
        );
        let (v, q, _) = svi(&model, 1e-12).unwrap();
        assert!(bellman_residual(&model, &v.values).unwrap() <= 1e-12);
        let pi = greedy_policy(&q).unwrap();
        let (ve, _, _) = evaluate_policy(&model, &StochasticPolicy::deterministic(&pi), 1e-12).unwrap();
        for s in 0..3 {
            assert!((ve.get(s) - v.get(s)).abs() < 1e-10);
        }
        // any other policy is no better
        let (vu, _, _) = evaluate_policy(&model, &StochasticPolicy::uniform(&model), 1e-12).unwrap();
        for s in 0..3 {
            assert!(vu.get(s) <= v.get(s) + 1e-10);
        }
    }
}
