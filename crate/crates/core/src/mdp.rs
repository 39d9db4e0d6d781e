//! Factored flat MDPs.
//!
//! States are assignments to a fixed list of finite-domain variables and are
//! addressed by dense ordinals in lexicographic order (first variable most
//! significant). Every primitive action declares the block of variables it
//! may change; transitions that touch anything outside that block are
//! rejected by [`validate_mdp`]. Joint steps of several actions on disjoint
//! blocks are then well defined as the product of the per-block updates.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Default upper bound on the number of enumerated states.
pub const DEFAULT_STATE_CAP: usize = 10_000_000;

/// Tolerance on transition row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateVariable {
    pub name: String,
    pub domain_size: usize,
}

impl StateVariable {
    pub fn new(name: impl Into<String>, domain_size: usize) -> Self {
        Self {
            name: name.into(),
            domain_size,
        }
    }
}

/// Value indices, one per declared variable, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactoredState(Vec<usize>);

impl FactoredState {
    pub fn new(values: Vec<usize>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, var: usize) -> usize {
        self.0[var]
    }

    pub fn set(&mut self, var: usize, value: usize) {
        self.0[var] = value;
    }
}

impl fmt::Display for FactoredState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// A subset of variables, stored as sorted variable indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarSet(Vec<usize>);

impl VarSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, var: usize) -> bool {
        self.0.binary_search(&var).is_ok()
    }

    pub fn is_subset(&self, other: &VarSet) -> bool {
        self.0.iter().all(|v| other.contains(*v))
    }

    pub fn intersection(&self, other: &VarSet) -> VarSet {
        VarSet(self.0.iter().copied().filter(|v| other.contains(*v)).collect())
    }

    pub fn is_disjoint(&self, other: &VarSet) -> bool {
        self.0.iter().all(|v| !other.contains(*v))
    }

    pub fn union(&self, other: &VarSet) -> VarSet {
        VarSet::from_indices(self.0.iter().chain(other.0.iter()).copied())
    }
}

/// The cross product of the declared variables with its ordinal encoding.
#[derive(Clone, Debug)]
pub struct StateSpace {
    variables: Vec<StateVariable>,
    strides: Vec<usize>,
    size: usize,
}

impl StateSpace {
    pub fn new(variables: Vec<StateVariable>) -> Result<Self> {
        Self::with_cap(variables, DEFAULT_STATE_CAP)
    }

    pub fn with_cap(variables: Vec<StateVariable>, cap: usize) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::InvalidVariable("no variables declared".into()));
        }
        for (i, v) in variables.iter().enumerate() {
            if v.domain_size == 0 {
                return Err(Error::InvalidVariable(format!(
                    "`{}` has an empty domain",
                    v.name
                )));
            }
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::InvalidVariable(format!(
                    "duplicate name `{}`",
                    v.name
                )));
            }
        }
        let size: u128 = variables.iter().map(|v| v.domain_size as u128).product();
        if size > cap as u128 {
            return Err(Error::StateSpaceTooLarge { size, cap });
        }
        let mut strides = vec![1; variables.len()];
        for i in (0..variables.len() - 1).rev() {
            strides[i] = strides[i + 1] * variables[i + 1].domain_size;
        }
        Ok(Self {
            variables,
            strides,
            size: size as usize,
        })
    }

    pub fn variables(&self) -> &[StateVariable] {
        &self.variables
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn var_set(&self, names: &[&str]) -> Result<VarSet> {
        let idx = names
            .iter()
            .map(|n| self.var_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(VarSet::from_indices(idx))
    }

    pub fn all_vars(&self) -> VarSet {
        VarSet::from_indices(0..self.variables.len())
    }

    pub fn check(&self, s: &FactoredState) -> Result<()> {
        if s.0.len() != self.variables.len() {
            return Err(Error::InvalidState(format!(
                "expected {} values, got {}",
                self.variables.len(),
                s.0.len()
            )));
        }
        for (v, var) in s.0.iter().zip(&self.variables) {
            if *v >= var.domain_size {
                return Err(Error::InvalidState(format!(
                    "value {v} out of range for `{}` (size {})",
                    var.name, var.domain_size
                )));
            }
        }
        Ok(())
    }

    /// Ordinal of a state. The state must be valid for this space.
    pub fn ordinal(&self, s: &FactoredState) -> usize {
        s.0.iter().zip(&self.strides).map(|(v, st)| v * st).sum()
    }

    pub fn try_ordinal(&self, s: &FactoredState) -> Result<usize> {
        self.check(s)?;
        Ok(self.ordinal(s))
    }

    pub fn state(&self, ordinal: usize) -> FactoredState {
        debug_assert!(ordinal < self.size);
        FactoredState(
            (0..self.variables.len())
                .map(|i| self.value(ordinal, i))
                .collect(),
        )
    }

    /// Value of one variable in the state with the given ordinal.
    #[inline]
    pub fn value(&self, ordinal: usize, var: usize) -> usize {
        (ordinal / self.strides[var]) % self.variables[var].domain_size
    }

    /// Ordinal of `ordinal` with `var` replaced by `value`.
    #[inline]
    pub fn with_value(&self, ordinal: usize, var: usize, value: usize) -> usize {
        let old = self.value(ordinal, var);
        ordinal - old * self.strides[var] + value * self.strides[var]
    }

    /// True when the two states agree on every variable in `vars`.
    pub fn agree_on(&self, a: usize, b: usize, vars: &VarSet) -> bool {
        vars.indices()
            .iter()
            .all(|&v| self.value(a, v) == self.value(b, v))
    }

    /// True when the two states agree on every variable outside `vars`.
    pub fn agree_outside(&self, a: usize, b: usize, vars: &VarSet) -> bool {
        (0..self.variables.len())
            .filter(|v| !vars.contains(*v))
            .all(|v| self.value(a, v) == self.value(b, v))
    }

    /// All states in ordinal order.
    pub fn enumerate(&self) -> Vec<FactoredState> {
        (0..self.size).map(|i| self.state(i)).collect()
    }

    /// Restriction of `s` to `vars`, in declared variable order.
    pub fn project(&self, s: &FactoredState, vars: &VarSet) -> Result<Vec<usize>> {
        vars.indices()
            .iter()
            .map(|&v| {
                if v >= self.variables.len() || v >= s.0.len() {
                    Err(Error::UnknownVariable(format!("#{v}")))
                } else {
                    Ok(s.0[v])
                }
            })
            .collect()
    }

    /// Inverse of projection over a disjoint cover of the variables.
    pub fn compose(&self, parts: &[(VarSet, Vec<usize>)]) -> Result<FactoredState> {
        let mut values: Vec<Option<usize>> = vec![None; self.variables.len()];
        for (vars, part) in parts {
            if vars.len() != part.len() {
                return Err(Error::Compose(format!(
                    "part has {} values for {} variables",
                    part.len(),
                    vars.len()
                )));
            }
            for (&v, &x) in vars.indices().iter().zip(part) {
                if v >= values.len() {
                    return Err(Error::UnknownVariable(format!("#{v}")));
                }
                if values[v].is_some() {
                    return Err(Error::Compose(format!(
                        "variable `{}` appears in more than one part",
                        self.variables[v].name
                    )));
                }
                values[v] = Some(x);
            }
        }
        let mut out = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            match v {
                Some(x) => out.push(x),
                None => {
                    return Err(Error::Compose(format!(
                        "variable `{}` is not covered",
                        self.variables[i].name
                    )))
                }
            }
        }
        let s = FactoredState(out);
        self.check(&s)?;
        Ok(s)
    }
}

/// One entry of a transition row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrimitiveAction {
    pub name: String,
    /// Variables this action may change.
    pub block: VarSet,
}

impl PrimitiveAction {
    pub fn new(name: impl Into<String>, block: VarSet) -> Self {
        Self {
            name: name.into(),
            block,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlatMdp {
    space: StateSpace,
    actions: Vec<PrimitiveAction>,
    rows: Vec<Vec<Outcome>>,
    discount: f64,
}

impl FlatMdp {
    /// Builds and validates an MDP from row data indexed `state * n_actions + action`.
    pub fn from_rows(
        space: StateSpace,
        actions: Vec<PrimitiveAction>,
        rows: Vec<Vec<Outcome>>,
        discount: f64,
    ) -> Result<Self> {
        let mdp = Self::from_rows_unchecked(space, actions, rows, discount);
        let report = validate_mdp(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(report))
        }
    }

    /// Builds without validation; duplicate next states within a row are merged.
    pub fn from_rows_unchecked(
        space: StateSpace,
        actions: Vec<PrimitiveAction>,
        rows: Vec<Vec<Outcome>>,
        discount: f64,
    ) -> Self {
        let rows = rows.into_iter().map(merge_row).collect();
        Self {
            space,
            actions,
            rows,
            discount,
        }
    }

    /// Builds by querying `f(state, action)` for `(next, prob, reward)` triples.
    pub fn from_fn<F>(
        space: StateSpace,
        actions: Vec<PrimitiveAction>,
        discount: f64,
        mut f: F,
    ) -> Result<Self>
    where
        F: FnMut(&FactoredState, usize) -> Vec<(FactoredState, f64, f64)>,
    {
        let n_actions = actions.len();
        let mut rows = Vec::with_capacity(space.len() * n_actions);
        for s in 0..space.len() {
            let state = space.state(s);
            for a in 0..n_actions {
                let mut row = Vec::new();
                for (next, prob, reward) in f(&state, a) {
                    space.check(&next)?;
                    row.push(Outcome {
                        next: space.ordinal(&next),
                        prob,
                        reward,
                    });
                }
                rows.push(row);
            }
        }
        Self::from_rows(space, actions, rows, discount)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn actions(&self) -> &[PrimitiveAction] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[Outcome] {
        &self.rows[state * self.actions.len() + action]
    }

    /// A copy of this MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::Config(format!("discount {discount} not in (0, 1]")));
        }
        let mut out = self.clone();
        out.discount = discount;
        Ok(out)
    }
}

fn merge_row(row: Vec<Outcome>) -> Vec<Outcome> {
    let mut merged: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for o in row {
        let e = merged.entry(o.next).or_insert((0.0, 0.0));
        // probability-weighted reward so duplicates keep the same expectation
        e.1 += o.prob * o.reward;
        e.0 += o.prob;
    }
    merged
        .into_iter()
        .map(|(next, (prob, wr))| Outcome {
            next,
            prob,
            reward: if prob > 0.0 { wr / prob } else { 0.0 },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowProblem {
    Sum(f64),
    ProbabilityRange(f64),
    OutsideBlock { next: usize },
    NonFiniteReward,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Row {
        state: usize,
        action: usize,
        problem: RowProblem,
    },
    Discount(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            match v {
                Violation::Row {
                    state,
                    action,
                    problem,
                } => writeln!(f, "state {state} action {action}: {problem:?}")?,
                Violation::Discount(g) => writeln!(f, "discount {g} not in (0, 1]")?,
            }
        }
        Ok(())
    }
}

/// Lists every `(state, action)` row that breaks the sum, range or block
/// locality invariants. Empty iff the MDP is valid.
pub fn validate_mdp(mdp: &FlatMdp) -> ValidationReport {
    let mut violations = Vec::new();
    if !(mdp.discount > 0.0 && mdp.discount <= 1.0) {
        violations.push(Violation::Discount(mdp.discount));
    }
    let n_actions = mdp.actions.len();
    for s in 0..mdp.num_states() {
        for a in 0..n_actions {
            let row = mdp.row(s, a);
            let mut push = |problem| {
                violations.push(Violation::Row {
                    state: s,
                    action: a,
                    problem,
                })
            };
            let mut sum = 0.0;
            for o in row {
                if !(0.0..=1.0).contains(&o.prob) {
                    push(RowProblem::ProbabilityRange(o.prob));
                }
                if !o.reward.is_finite() {
                    push(RowProblem::NonFiniteReward);
                }
                if o.prob > 0.0 && !mdp.space.agree_outside(s, o.next, &mdp.actions[a].block) {
                    push(RowProblem::OutsideBlock { next: o.next });
                }
                sum += o.prob;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                push(RowProblem::Sum(sum));
            }
        }
    }
    ValidationReport { violations }
}

/// All states of the MDP in ordinal order.
pub fn enumerate_states(mdp: &FlatMdp) -> Vec<FactoredState> {
    mdp.space().enumerate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> StateSpace {
        StateSpace::new(vec![
            StateVariable::new("a", 2),
            StateVariable::new("b", 3),
            StateVariable::new("c", 2),
        ])
        .unwrap()
    }

    #[test]
    fn ordinals_are_lexicographic() {
        let sp = StateSpace::new(vec![StateVariable::new("a", 2), StateVariable::new("b", 3)])
            .unwrap();
        assert_eq!(sp.len(), 6);
        assert_eq!(sp.ordinal(&FactoredState::new(vec![1, 2])), 5);
        let all = sp.enumerate();
        for (i, s) in all.iter().enumerate() {
            assert_eq!(sp.ordinal(s), i);
        }
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_value_variable_has_one_state() {
        let sp = StateSpace::new(vec![StateVariable::new("x", 1)]).unwrap();
        assert_eq!(sp.enumerate(), vec![FactoredState::new(vec![0])]);
    }

    #[test]
    fn state_cap_is_enforced() {
        let vars = vec![StateVariable::new("a", 1000), StateVariable::new("b", 100_000)];
        assert!(matches!(
            StateSpace::new(vars),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn bad_variables_rejected() {
        assert!(StateSpace::new(vec![StateVariable::new("a", 0)]).is_err());
        assert!(StateSpace::new(vec![
            StateVariable::new("a", 2),
            StateVariable::new("a", 2)
        ])
        .is_err());
    }

    #[test]
    fn project_examples() {
        let sp = abc();
        let s = FactoredState::new(vec![1, 2, 0]);
        assert_eq!(sp.project(&s, &sp.all_vars()).unwrap(), vec![1, 2, 0]);
        assert_eq!(sp.project(&s, &sp.var_set(&["a"]).unwrap()).unwrap(), vec![1]);
        assert!(matches!(
            sp.var_set(&["nope"]),
            Err(Error::UnknownVariable(_))
        ));
        assert!(sp.project(&s, &VarSet::from_indices([7])).is_err());
    }

    #[test]
    fn compose_examples() {
        let sp = abc();
        let a = sp.var_set(&["a"]).unwrap();
        let bc = sp.var_set(&["b", "c"]).unwrap();
        let s = sp
            .compose(&[(a.clone(), vec![1]), (bc.clone(), vec![2, 0])])
            .unwrap();
        assert_eq!(s, FactoredState::new(vec![1, 2, 0]));
        assert_eq!(
            sp.compose(&[(sp.all_vars(), vec![0, 1, 1])]).unwrap(),
            FactoredState::new(vec![0, 1, 1])
        );
        // overlap
        assert!(sp
            .compose(&[(sp.var_set(&["a", "b"]).unwrap(), vec![1, 2]), (bc.clone(), vec![2, 0])])
            .is_err());
        // incomplete
        assert!(sp.compose(&[(bc.clone(), vec![2, 0])]).is_err());
        // length mismatch
        assert!(sp.compose(&[(a, vec![1, 1]), (bc, vec![2, 0])]).is_err());
    }

    #[test]
    fn with_value_matches_decode() {
        let sp = abc();
        for s in 0..sp.len() {
            for var in 0..3 {
                for x in 0..sp.variables()[var].domain_size {
                    let t = sp.with_value(s, var, x);
                    let mut st = sp.state(s);
                    st.set(var, x);
                    assert_eq!(sp.ordinal(&st), t);
                }
            }
        }
    }

    fn chain(p_stay: f64) -> FlatMdp {
        let sp = StateSpace::new(vec![StateVariable::new("x", 2)]).unwrap();
        let block = sp.all_vars();
        let rows = vec![
            vec![
                Outcome { next: 0, prob: p_stay, reward: -1.0 },
                Outcome { next: 1, prob: 0.5, reward: -1.0 },
            ],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0 }],
        ];
        FlatMdp::from_rows_unchecked(sp, vec![PrimitiveAction::new("go", block)], rows, 0.9)
    }

    #[test]
    fn validate_reports_bad_rows() {
        assert!(validate_mdp(&chain(0.5)).is_valid());
        let report = validate_mdp(&chain(0.4));
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::Row { state, action, problem: RowProblem::Sum(s) } => {
                assert_eq!((*state, *action), (0, 0));
                assert!((s - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_block_escape() {
        let sp = StateSpace::new(vec![StateVariable::new("x", 2), StateVariable::new("y", 2)])
            .unwrap();
        let x = sp.var_set(&["x"]).unwrap();
        let mut rows = Vec::new();
        for s in 0..4 {
            // flips y, which is outside the declared block
            rows.push(vec![Outcome { next: s ^ 1, prob: 1.0, reward: 0.0 }]);
        }
        let r = FlatMdp::from_rows(sp, vec![PrimitiveAction::new("bad", x)], rows, 0.9);
        match r {
            Err(Error::InvalidMdp(rep)) => assert_eq!(rep.violations.len(), 4),
            other => panic!("expected invalid mdp, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_outcomes_merge() {
        let sp = StateSpace::new(vec![StateVariable::new("x", 1)]).unwrap();
        let rows = vec![vec![
            Outcome { next: 0, prob: 0.25, reward: -2.0 },
            Outcome { next: 0, prob: 0.75, reward: 2.0 },
        ]];
        let m = FlatMdp::from_rows(sp.clone(), vec![PrimitiveAction::new("a", sp.all_vars())], rows, 1.0)
            .unwrap();
        assert_eq!(m.row(0, 0).len(), 1);
        assert!((m.row(0, 0)[0].reward - 1.0).abs() < 1e-15);
    }
}
