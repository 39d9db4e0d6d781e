//! Multi-options: coherence, class partitions, and the analytic model of
//! concurrently executed options under the two termination rules.
//!
//! Members of a multi-option control disjoint variable blocks, so one joint
//! step is the product of the members' one-step kernels and the next state
//! is assembled block by block. Under [`TerminationRule::T1`] the
//! multi-option ends at the first member termination; under
//! [`TerminationRule::T2`] terminated members are frozen and the
//! multi-option ends once every member has terminated.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mdp::{FlatMdp, VarSet};
use crate::model::{finish_steps, Accumulator, ModelConfig, StartModel, StepEntry};
use crate::option::MarkovOption;

/// Upper bound on the number of members in one multi-option.
pub const MAX_MEMBERS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TerminationRule {
    /// First member termination ends the multi-option.
    T1,
    /// Last member termination ends the multi-option.
    T2,
}

impl fmt::Display for TerminationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminationRule::T1 => write!(f, "t1"),
            TerminationRule::T2 => write!(f, "t2"),
        }
    }
}

impl FromStr for TerminationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(TerminationRule::T1),
            "t2" => Ok(TerminationRule::T2),
            other => Err(Error::Config(format!("unknown termination rule `{other}`"))),
        }
    }
}

/// Two options may run in parallel iff both are partially factored and
/// their controlled variables are disjoint.
pub fn check_coherent(a: &MarkovOption, b: &MarkovOption) -> bool {
    a.is_partially_factored()
        && b.is_partially_factored()
        && a.controlled_vars().is_disjoint(b.controlled_vars())
}

#[derive(Clone, Debug)]
pub struct CoherencePartition {
    options: Vec<Arc<MarkovOption>>,
    classes: Vec<Vec<usize>>,
    /// Coherent pairs that were declared into the same class.
    pub same_class_overrides: Vec<(String, String)>,
}

impl CoherencePartition {
    pub fn options(&self) -> &[Arc<MarkovOption>] {
        &self.options
    }

    /// Option indices per class.
    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn class_options(&self, class: usize) -> impl Iterator<Item = &Arc<MarkovOption>> {
        self.classes[class].iter().map(move |&i| &self.options[i])
    }

    pub fn option_index(&self, name: &str) -> Option<usize> {
        self.options.iter().position(|o| o.name() == name)
    }

    pub fn option(&self, name: &str) -> Option<&Arc<MarkovOption>> {
        self.options.iter().find(|o| o.name() == name)
    }

    pub fn class_of(&self, option: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(&option))
    }
}

/// Validates a declared grouping, or derives one when none is given.
///
/// Derived classes are the connected components of the "shares a controlled
/// variable" relation. A declared grouping may put coherent options in the
/// same class; such pairs are listed in `same_class_overrides`. Options in
/// different classes must be coherent.
pub fn build_partition(
    options: Vec<Arc<MarkovOption>>,
    declared: Option<Vec<Vec<usize>>>,
) -> Result<CoherencePartition> {
    let n = options.len();
    for (i, o) in options.iter().enumerate() {
        if options[..i].iter().any(|p| p.name() == o.name()) {
            return Err(Error::InvalidPartition(format!(
                "duplicate option name `{}`",
                o.name()
            )));
        }
    }
    let classes = match declared {
        Some(classes) => {
            let mut owner = vec![None; n];
            for (c, class) in classes.iter().enumerate() {
                if class.is_empty() {
                    return Err(Error::InvalidPartition(format!("class {c} is empty")));
                }
                for &i in class {
                    if i >= n {
                        return Err(Error::InvalidPartition(format!("unknown option index {i}")));
                    }
                    if owner[i].is_some() {
                        return Err(Error::InvalidPartition(format!(
                            "option `{}` is in more than one class",
                            options[i].name()
                        )));
                    }
                    owner[i] = Some(c);
                }
            }
            if let Some(i) = owner.iter().position(|o| o.is_none()) {
                return Err(Error::InvalidPartition(format!(
                    "option `{}` is not in any class",
                    options[i].name()
                )));
            }
            classes
        }
        None => {
            // union-find over overlapping controlled sets
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                let mut r = x;
                while p[r] != r {
                    r = p[r];
                }
                p[x] = r;
                r
            }
            for i in 0..n {
                for j in i + 1..n {
                    if !options[i]
                        .controlled_vars()
                        .is_disjoint(options[j].controlled_vars())
                    {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..n {
                let r = find(&mut parent, i);
                groups.entry(r).or_default().push(i);
            }
            groups.into_values().collect()
        }
    };

    for (ca, a) in classes.iter().enumerate() {
        for b in &classes[ca + 1..] {
            for &i in a {
                for &j in b {
                    if !check_coherent(&options[i], &options[j]) {
                        let shared = options[i]
                            .controlled_vars()
                            .intersection(options[j].controlled_vars());
                        let var = shared
                            .indices()
                            .first()
                            .map(|v| format!("#{v}"))
                            .unwrap_or_else(|| "<none: not partially factored>".into());
                        return Err(Error::Incoherent(
                            options[i].name().to_string(),
                            options[j].name().to_string(),
                            var,
                        ));
                    }
                }
            }
        }
    }
    let mut overrides = Vec::new();
    for class in &classes {
        for (x, &i) in class.iter().enumerate() {
            for &j in &class[x + 1..] {
                if check_coherent(&options[i], &options[j]) {
                    overrides.push((options[i].name().to_string(), options[j].name().to_string()));
                }
            }
        }
    }
    Ok(CoherencePartition {
        options,
        classes,
        same_class_overrides: overrides,
    })
}

/// A tuple of pairwise coherent options run concurrently under one
/// termination rule.
#[derive(Clone, Debug)]
pub struct MultiOption {
    members: Vec<Arc<MarkovOption>>,
    rule: TerminationRule,
    covered: VarSet,
}

impl MultiOption {
    pub fn new(members: Vec<Arc<MarkovOption>>, rule: TerminationRule) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidPartition("multi-option without members".into()));
        }
        if members.len() > MAX_MEMBERS {
            return Err(Error::InvalidPartition(format!(
                "{} members exceed the limit of {MAX_MEMBERS}",
                members.len()
            )));
        }
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                if !check_coherent(a, b) {
                    let shared = a.controlled_vars().intersection(b.controlled_vars());
                    return Err(Error::Incoherent(
                        a.name().to_string(),
                        b.name().to_string(),
                        format!("{:?}", shared.indices()),
                    ));
                }
            }
        }
        let n = members[0].num_states();
        if members.iter().any(|m| m.num_states() != n) {
            return Err(Error::InvalidPartition(
                "members tabulated over different state spaces".into(),
            ));
        }
        let covered = members
            .iter()
            .fold(VarSet::empty(), |acc, m| acc.union(m.controlled_vars()));
        Ok(Self {
            members,
            rule,
            covered,
        })
    }

    pub fn members(&self) -> &[Arc<MarkovOption>] {
        &self.members
    }

    pub fn rule(&self) -> TerminationRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn with_rule(&self, rule: TerminationRule) -> Self {
        Self {
            rule,
            ..self.clone()
        }
    }

    /// Union of the members' controlled variables.
    pub fn covered_vars(&self) -> &VarSet {
        &self.covered
    }

    pub fn name(&self) -> String {
        self.members
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn is_available(&self, s: usize) -> bool {
        self.members.iter().all(|m| m.can_initiate(s))
    }

    pub(crate) fn full_mask(&self) -> u32 {
        if self.members.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.members.len()) - 1
        }
    }

    /// Joint one-step distribution from `s` with only the members in
    /// `active` acting; frozen members' variables stay put. Entries are
    /// unsorted and may repeat a next state.
    pub(crate) fn joint_step(&self, s: usize, active: u32, out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        out.push((s, 1.0));
        let mut buf = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            if active & (1 << i) == 0 {
                continue;
            }
            let row = m.step_kernel(s);
            if row.is_empty() {
                return Err(Error::NoPolicy {
                    option: m.name().to_string(),
                    state: s,
                });
            }
            buf.clear();
            for &(x, p) in out.iter() {
                for &(y, q) in row {
                    // blocks are disjoint, so the member's change to its
                    // block is an additive offset on the mixed-radix ordinal
                    buf.push((x + y - s, p * q));
                }
            }
            std::mem::swap(out, &mut buf);
        }
        Ok(())
    }

    /// Mean of the active members' expected one-step rewards.
    pub(crate) fn step_reward(&self, s: usize, active: u32) -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for (i, m) in self.members.iter().enumerate() {
            if active & (1 << i) != 0 {
                sum += m.step_reward(s);
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Probability that none of the members in `active` terminates at `s`.
    fn survival(&self, s: usize, active: u32) -> f64 {
        let mut p = 1.0;
        for (i, m) in self.members.iter().enumerate() {
            if active & (1 << i) != 0 {
                p *= 1.0 - m.termination(s);
            }
        }
        p
    }

    /// Probability that exactly the members in `terminating` stop at `s`
    /// among those in `active`.
    fn subset_weight(&self, s: usize, active: u32, terminating: u32) -> f64 {
        let mut p = 1.0;
        for (i, m) in self.members.iter().enumerate() {
            let bit = 1 << i;
            if active & bit == 0 {
                continue;
            }
            let b = m.termination(s);
            p *= if terminating & bit != 0 { b } else { 1.0 - b };
        }
        p
    }
}

/// All tuples drawing one available member from each class.
pub fn enumerate_multi_options(
    partition: &CoherencePartition,
    s: usize,
    rule: TerminationRule,
) -> Vec<MultiOption> {
    let per_class: Vec<Vec<&Arc<MarkovOption>>> = partition
        .classes()
        .iter()
        .map(|c| {
            c.iter()
                .map(|&i| &partition.options()[i])
                .filter(|o| o.can_initiate(s))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; per_class.len()];
    if per_class.iter().any(|c| c.is_empty()) {
        return out;
    }
    loop {
        let members = idx
            .iter()
            .zip(&per_class)
            .map(|(&i, c)| Arc::clone(c[i]))
            .collect();
        out.push(MultiOption::new(members, rule).expect("partition classes are coherent"));
        let mut d = per_class.len();
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < per_class[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Which decision process an agent works in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    /// One option at a time.
    Sequential,
    /// One option per coherence class, joined under a termination rule.
    Concurrent(TerminationRule),
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Framework::Sequential => f.write_str("sequential"),
            Framework::Concurrent(rule) => write!(f, "concurrent-{rule}"),
        }
    }
}

/// The fixed, id-indexed action set of an SMDP over multi-options.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    multi_options: Vec<MultiOption>,
    available: Vec<Vec<usize>>,
}

impl ActionSpace {
    pub fn new(multi_options: Vec<MultiOption>) -> Result<Self> {
        let n = multi_options
            .first()
            .map(|m| m.members()[0].num_states())
            .ok_or_else(|| Error::InvalidPartition("empty action space".into()))?;
        let available = (0..n)
            .map(|s| {
                multi_options
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.is_available(s))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(Self {
            multi_options,
            available,
        })
    }

    /// Every tuple of the class product, ids in lexicographic class order.
    pub fn concurrent(partition: &CoherencePartition, rule: TerminationRule) -> Result<Self> {
        let classes = partition.classes();
        let mut idx = vec![0usize; classes.len()];
        let mut all = Vec::new();
        'outer: loop {
            let members = idx
                .iter()
                .zip(classes)
                .map(|(&i, c)| Arc::clone(&partition.options()[c[i]]))
                .collect();
            all.push(MultiOption::new(members, rule)?);
            let mut d = classes.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < classes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::new(all)
    }

    pub fn for_framework(partition: &CoherencePartition, framework: Framework) -> Result<Self> {
        match framework {
            Framework::Sequential => Self::sequential(partition),
            Framework::Concurrent(rule) => Self::concurrent(partition, rule),
        }
    }

    /// One option at a time, in class order.
    pub fn sequential(partition: &CoherencePartition) -> Result<Self> {
        let all = partition
            .classes()
            .iter()
            .flatten()
            .map(|&i| MultiOption::new(vec![Arc::clone(&partition.options()[i])], TerminationRule::T1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(all)
    }

    pub fn len(&self) -> usize {
        self.multi_options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi_options.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.available.len()
    }

    pub fn get(&self, id: usize) -> &MultiOption {
        &self.multi_options[id]
    }

    pub fn multi_options(&self) -> &[MultiOption] {
        &self.multi_options
    }

    pub fn available(&self, s: usize) -> &[usize] {
        &self.available[s]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.multi_options.iter().position(|m| m.name() == name)
    }
}

/// `ξ(s, s', 1)` as the product of the members' projected one-step kernels,
/// times the indicator that variables outside the members' blocks are
/// unchanged.
pub fn single_step_xi(mdp: &FlatMdp, mo: &MultiOption, s: usize, s_next: usize) -> Result<f64> {
    for (i, a) in mo.members.iter().enumerate() {
        for b in &mo.members[i + 1..] {
            if !a.controlled_vars().is_disjoint(b.controlled_vars()) {
                return Err(Error::Incoherent(
                    a.name().to_string(),
                    b.name().to_string(),
                    "overlap".into(),
                ));
            }
        }
    }
    let space = mdp.space();
    if !space.agree_outside(s, s_next, &mo.covered) {
        return Ok(0.0);
    }
    let mut prod = 1.0;
    for m in &mo.members {
        let row = m.step_kernel(s);
        if row.is_empty() {
            return Err(Error::NoPolicy {
                option: m.name().to_string(),
                state: s,
            });
        }
        let target = m.controlled_vars();
        let marginal: f64 = row
            .iter()
            .filter(|(y, _)| space.agree_on(*y, s_next, target))
            .map(|(_, p)| p)
            .sum();
        prod *= marginal;
    }
    Ok(prod)
}

/// `ξ(s, ·, j)` for `j = 1..=k` over the members in `active`: reach the
/// state at step `j` with no active member terminating at steps `1..j-1`.
fn xi_distributions(
    mo: &MultiOption,
    active: u32,
    s: usize,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = mo.members[0].num_states();
    let mut acc = Accumulator::new(n);
    let mut step = Vec::new();
    let mut out: Vec<Vec<(usize, f64)>> = Vec::with_capacity(k);
    let mut current = vec![(s, 1.0)];
    for j in 1..=k {
        for &(x, m) in &current {
            let w = if j == 1 { m } else { m * mo.survival(x, active) };
            if w == 0.0 {
                continue;
            }
            mo.joint_step(x, active, &mut step)?;
            for &(y, p) in &step {
                acc.add(y, w * p);
            }
        }
        current = acc.drain_sorted();
        out.push(current.clone());
    }
    Ok(out)
}

/// `ξ(s, s', k)`, the k-step survival kernel of the multi-option.
pub fn k_step_xi(mo: &MultiOption, s: usize, s_next: usize, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::ZeroHorizon);
    }
    let xi = xi_distributions(mo, mo.full_mask(), s, k)?;
    Ok(lookup(&xi[k - 1], s_next))
}

/// T1 duration/next-state probability.
pub fn p_multi_t1(mo: &MultiOption, s: usize, s_next: usize, k: usize) -> Result<f64> {
    let xi = k_step_xi(mo, s, s_next, k)?;
    Ok(xi * (1.0 - mo.survival(s_next, mo.full_mask())))
}

/// T2 duration/next-state probability via the subset recurrence: sum over
/// the first termination step, the nonempty subset that terminates there
/// and the intermediate state, followed by the remainder process of the
/// members still running.
pub fn p_multi_t2(mo: &MultiOption, s: usize, s_next: usize, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::ZeroHorizon);
    }
    let mut memo = HashMap::new();
    let dist = t2_recurrence(mo, mo.full_mask(), s, k, &mut memo)?;
    Ok(lookup(&dist[k - 1], s_next))
}

type T2Memo = HashMap<(u32, usize, usize), Vec<Vec<(usize, f64)>>>;

fn t2_recurrence(
    mo: &MultiOption,
    active: u32,
    s: usize,
    horizon: usize,
    memo: &mut T2Memo,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if let Some(d) = memo.get(&(active, s, horizon)) {
        return Ok(d.clone());
    }
    let xi = xi_distributions(mo, active, s, horizon)?;
    let mut out: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); horizon];
    for i in 1..=horizon {
        for &(su, w) in &xi[i - 1] {
            // nonempty subsets of the active set
            let mut sub = active;
            while sub != 0 {
                let f = w * mo.subset_weight(su, active, sub);
                if f != 0.0 {
                    if sub == active {
                        *out[i - 1].entry(su).or_insert(0.0) += f;
                    } else if i < horizon {
                        let rest = t2_recurrence(mo, active & !sub, su, horizon - i, memo)?;
                        for (j, dist) in rest.iter().enumerate() {
                            for &(y, p) in dist {
                                *out[i + j].entry(y).or_insert(0.0) += f * p;
                            }
                        }
                    }
                }
                sub = (sub - 1) & active;
            }
        }
    }
    let out: Vec<Vec<(usize, f64)>> = out.into_iter().map(|m| m.into_iter().collect()).collect();
    memo.insert((active, s, horizon), out.clone());
    Ok(out)
}

fn lookup(dist: &[(usize, f64)], x: usize) -> f64 {
    dist.binary_search_by(|e| e.0.cmp(&x))
        .map(|i| dist[i].1)
        .unwrap_or(0.0)
}

#[derive(Clone, Debug)]
pub struct MultiOptionModel {
    pub name: String,
    pub rule: TerminationRule,
    pub discount: f64,
    /// One entry per initiable start state.
    pub starts: BTreeMap<usize, StartModel>,
    /// Largest `γ^k · residual` over all starts.
    pub truncation_error: f64,
}

impl MultiOptionModel {
    pub fn start(&self, s: usize) -> Option<&StartModel> {
        self.starts.get(&s)
    }

    /// Writes `s s' k probability` lines sorted lexicographically after a
    /// header naming the multi-option and rule.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# multi-option {}", self.name)?;
        writeln!(w, "# rule {}", self.rule)?;
        for (s, m) in &self.starts {
            for e in &m.steps {
                writeln!(w, "{} {} {} {:e}", s, e.next, e.k, e.prob)?;
            }
        }
        Ok(())
    }
}

/// A parsed model dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDump {
    pub name: String,
    pub rule: TerminationRule,
    pub rows: Vec<(usize, usize, usize, f64)>,
}

impl ModelDump {
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut name = None;
        let mut rule = None;
        let mut rows = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(e.to_string()))?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(n) = rest.strip_prefix("multi-option ") {
                    name = Some(n.trim().to_string());
                } else if let Some(r) = rest.strip_prefix("rule ") {
                    rule = Some(r.trim().parse()?);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("malformed dump line {}", lineno + 1));
            let mut it = line.split_whitespace();
            let s = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let y = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let k = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let p = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            if it.next().is_some() {
                return Err(bad());
            }
            rows.push((s, y, k, p));
        }
        Ok(Self {
            name: name.ok_or_else(|| Error::Config("dump has no multi-option header".into()))?,
            rule: rule.ok_or_else(|| Error::Config("dump has no rule header".into()))?,
            rows,
        })
    }

    /// Terminated mass per start state.
    pub fn mass_by_start(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for &(s, _, _, p) in &self.rows {
            *out.entry(s).or_insert(0.0) += p;
        }
        out
    }

    /// `Σ k·p` per start state.
    pub fn expected_duration_by_start(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for &(s, _, k, p) in &self.rows {
            *out.entry(s).or_insert(0.0) += k as f64 * p;
        }
        out
    }
}

/// Analytic model over every start state where the multi-option is available.
pub fn multi_option_model(
    mdp: &FlatMdp,
    mo: &MultiOption,
    k_max: usize,
    tol: f64,
) -> Result<MultiOptionModel> {
    let cfg = ModelConfig {
        k_max,
        tol,
        ..ModelConfig::default()
    };
    multi_option_model_with(mdp, mo, &cfg, None)
}

/// Like [`multi_option_model`] with explicit settings and an optional
/// restriction of the start states.
pub fn multi_option_model_with(
    mdp: &FlatMdp,
    mo: &MultiOption,
    cfg: &ModelConfig,
    starts: Option<&[usize]>,
) -> Result<MultiOptionModel> {
    if cfg.k_max < 1 {
        return Err(Error::ZeroHorizon);
    }
    if mo.members[0].num_states() != mdp.num_states() {
        return Err(Error::InvalidPartition(
            "multi-option tabulated against a different state space".into(),
        ));
    }
    let mut sweeper = Sweeper::new(mdp.num_states(), mo.len());
    let mut out = BTreeMap::new();
    let mut truncation_error: f64 = 0.0;
    let candidates: Vec<usize> = match starts {
        Some(list) => list.iter().copied().filter(|&s| mo.is_available(s)).collect(),
        None => (0..mdp.num_states()).filter(|&s| mo.is_available(s)).collect(),
    };
    for s in candidates {
        let m = sweeper.sweep(mo, s, mdp.discount(), cfg)?;
        truncation_error = truncation_error.max(m.truncation_error(mdp.discount()));
        out.insert(s, m);
    }
    if truncation_error > cfg.tol {
        return Err(Error::Truncation {
            error: truncation_error,
            tol: cfg.tol,
            k_max: cfg.k_max,
        });
    }
    Ok(MultiOptionModel {
        name: mo.name(),
        rule: mo.rule,
        discount: mdp.discount(),
        starts: out,
        truncation_error,
    })
}

/// Forward sweep over `(state, active set)` pairs; reusable across starts.
pub(crate) struct Sweeper {
    acc: Accumulator,
    n_masks: usize,
    step: Vec<(usize, f64)>,
}

impl Sweeper {
    pub(crate) fn new(n_states: usize, n_members: usize) -> Self {
        let n_masks = 1usize << n_members;
        Self {
            acc: Accumulator::new(n_states * n_masks),
            n_masks,
            step: Vec::new(),
        }
    }

    pub(crate) fn sweep(
        &mut self,
        mo: &MultiOption,
        start: usize,
        gamma: f64,
        cfg: &ModelConfig,
    ) -> Result<StartModel> {
        let full = mo.full_mask();
        let n_masks = self.n_masks;
        let mut mass: Vec<(usize, f64)> = vec![(start * n_masks + full as usize, 1.0)];
        let mut raw = Vec::new();
        let mut reward = 0.0;
        let mut discount_pow = 1.0;
        let mut horizon = 0;
        for k in 1..=cfg.k_max {
            horizon = k;
            let mut step_r = 0.0;
            for &(key, m) in &mass {
                let x = key / n_masks;
                let active = (key % n_masks) as u32;
                step_r += m * mo.step_reward(x, active);
                mo.joint_step(x, active, &mut self.step)?;
                for &(y, p) in &self.step {
                    self.acc.add(y * n_masks + active as usize, m * p);
                }
            }
            reward += discount_pow * step_r;
            discount_pow *= gamma;

            let reached = self.acc.drain_sorted();
            let mut alive = 0.0;
            for (key, q) in reached {
                let y = key / n_masks;
                let active = (key % n_masks) as u32;
                match mo.rule {
                    TerminationRule::T1 => {
                        let surv = mo.survival(y, active);
                        let stop = 1.0 - surv;
                        if stop > 0.0 {
                            raw.push(StepEntry { next: y, k, prob: q * stop });
                        }
                        if surv > 0.0 {
                            self.acc.add(key, q * surv);
                            alive += q * surv;
                        }
                    }
                    TerminationRule::T2 => {
                        // every subset of the active set may terminate here,
                        // including the empty one
                        let mut sub = active;
                        loop {
                            let f = q * mo.subset_weight(y, active, sub);
                            if f > 0.0 {
                                let rest = active & !sub;
                                if rest == 0 {
                                    raw.push(StepEntry { next: y, k, prob: f });
                                } else {
                                    self.acc.add(y * n_masks + rest as usize, f);
                                    alive += f;
                                }
                            }
                            if sub == 0 {
                                break;
                            }
                            sub = (sub - 1) & active;
                        }
                    }
                }
            }
            mass = self.acc.drain_sorted();
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{PrimitiveAction, StateSpace, StateVariable};
    use crate::option::{option_discounted_model_with, tests::corridor};

    /// Two independent counters `a` (size na) and `b` (size nb). Action
    /// `inc_a` advances `a` by one (capped), `inc_b` likewise for `b`.
    fn counters(na: usize, nb: usize, slip: f64) -> FlatMdp {
        let sp = StateSpace::new(vec![StateVariable::new("a", na), StateVariable::new("b", nb)])
            .unwrap();
        let a = sp.var_set(&["a"]).unwrap();
        let b = sp.var_set(&["b"]).unwrap();
        FlatMdp::from_fn(
            sp,
            vec![PrimitiveAction::new("inc_a", a), PrimitiveAction::new("inc_b", b)],
            0.9,
            |s, act| {
                let var = act;
                let size = if var == 0 { na } else { nb };
                let mut up = s.clone();
                up.set(var, (s.get(var) + 1).min(size - 1));
                vec![(up, 1.0 - slip, -1.0), (s.clone(), slip, -1.0)]
            },
        )
        .unwrap()
    }

    /// Counter option on variable `var` that stops when it reaches `stop`.
    fn counter_option(mdp: &FlatMdp, var: usize, stop: usize) -> Arc<MarkovOption> {
        let name = if var == 0 { "a" } else { "b" };
        let ctl = VarSet::from_indices([var]);
        let obs = VarSet::from_indices([1 - var]);
        Arc::new(
            MarkovOption::tabulate(
                mdp,
                format!("count_{name}"),
                ctl,
                obs,
                move |s| s.get(var) < stop,
                move |_| vec![(var, 1.0)],
                move |s| if s.get(var) >= stop { 1.0 } else { 0.0 },
            )
            .unwrap(),
        )
    }

    #[test]
    fn coherence_checks() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let b = counter_option(&mdp, 1, 2);
        assert!(check_coherent(&a, &b));
        assert!(!check_coherent(&a, &a));
        assert!(MultiOption::new(vec![a.clone(), a.clone()], TerminationRule::T1).is_err());
    }

    #[test]
    fn derived_partition_groups_overlapping_options() {
        let mdp = counters(3, 3, 0.0);
        let a1 = counter_option(&mdp, 0, 2);
        let a2 = Arc::new(
            MarkovOption::tabulate(
                &mdp,
                "count_a_once",
                VarSet::from_indices([0]),
                VarSet::empty(),
                |_| true,
                |_| vec![(0, 1.0)],
                |_| 1.0,
            )
            .unwrap(),
        );
        let b = counter_option(&mdp, 1, 2);
        let p = build_partition(vec![a1, b, a2], None).unwrap();
        assert_eq!(p.classes(), &[vec![0, 2], vec![1]]);
        assert!(p.same_class_overrides.is_empty());
    }

    #[test]
    fn declared_partition_errors_name_the_pair() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let a2 = Arc::new(
            MarkovOption::tabulate(
                &mdp,
                "count_a_short",
                VarSet::from_indices([0]),
                VarSet::empty(),
                |s| s.get(0) < 1,
                |_| vec![(0, 1.0)],
                |s| if s.get(0) >= 1 { 1.0 } else { 0.0 },
            )
            .unwrap(),
        );
        let err = build_partition(vec![a.clone(), a2], Some(vec![vec![0], vec![1]])).unwrap_err();
        match err {
            Error::Incoherent(x, y, _) => assert_eq!((x.as_str(), y.as_str()), ("count_a", "count_a_short")),
            other => panic!("{other:?}"),
        }
        let single = build_partition(vec![a], None).unwrap();
        assert_eq!(single.classes(), &[vec![0]]);
    }

    #[test]
    fn declared_partition_accepts_coherent_same_class() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let b = counter_option(&mdp, 1, 2);
        let p = build_partition(vec![a, b], Some(vec![vec![0, 1]])).unwrap();
        assert_eq!(p.same_class_overrides.len(), 1);
        // uncovered option
        let mdp2 = counters(2, 2, 0.0);
        let c = counter_option(&mdp2, 0, 1);
        assert!(build_partition(vec![c], Some(vec![])).is_err());
    }

    #[test]
    fn single_class_partition_yields_singletons() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let p = build_partition(vec![a], None).unwrap();
        let mos = enumerate_multi_options(&p, 0, TerminationRule::T1);
        assert_eq!(mos.len(), 1);
        assert_eq!(mos[0].len(), 1);
    }

    #[test]
    fn single_step_xi_factorizes_for_deterministic_pair() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let b = counter_option(&mdp, 1, 2);
        let mo = MultiOption::new(vec![a, b], TerminationRule::T1).unwrap();
        let sp = mdp.space();
        for s in 0..sp.len() {
            if !mo.is_available(s) {
                continue;
            }
            let (x, y) = (sp.value(s, 0), sp.value(s, 1));
            let target = x.saturating_add(1).min(2) * 3 + (y + 1).min(2);
            for t in 0..sp.len() {
                let v = single_step_xi(&mdp, &mo, s, t).unwrap();
                assert_eq!(v, if t == target { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn uncovered_variables_must_stay_put() {
        let mdp = counters(3, 3, 0.2);
        let a = counter_option(&mdp, 0, 2);
        let mo = MultiOption::new(vec![a], TerminationRule::T1).unwrap();
        // s = (0,0); s' changes b, which nobody controls
        assert_eq!(single_step_xi(&mdp, &mo, 0, 1).unwrap(), 0.0);
        assert!((single_step_xi(&mdp, &mo, 0, 3).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn k_step_xi_without_termination_is_a_chain_power() {
        let mdp = counters(4, 4, 0.3);
        let never = |var: usize| {
            Arc::new(
                MarkovOption::tabulate(
                    &mdp,
                    format!("never_{var}"),
                    VarSet::from_indices([var]),
                    VarSet::empty(),
                    |_| true,
                    move |_| vec![(var, 1.0)],
                    |_| 0.0,
                )
                .unwrap(),
            )
        };
        let mo = MultiOption::new(vec![never(0), never(1)], TerminationRule::T1).unwrap();
        let n = mdp.num_states();
        // dense chain power oracle
        let mut one = vec![vec![0.0; n]; n];
        for (s, row) in one.iter_mut().enumerate() {
            for (t, cell) in row.iter_mut().enumerate() {
                *cell = single_step_xi(&mdp, &mo, s, t).unwrap();
            }
        }
        let mut power = one.clone();
        for k in 1..=5 {
            if k > 1 {
                let mut next = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        for l in 0..n {
                            next[i][l] += power[i][j] * one[j][l];
                        }
                    }
                }
                power = next;
            }
            for s in 0..n {
                let mut sum = 0.0;
                for t in 0..n {
                    let v = k_step_xi(&mo, s, t, k).unwrap();
                    assert!((v - power[s][t]).abs() < 1e-14);
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert!(k_step_xi(&mo, 0, 0, 0).is_err());
    }

    #[test]
    fn t1_and_t2_single_step_members() {
        let mdp = counters(3, 3, 0.25);
        let once = |var: usize| {
            Arc::new(
                MarkovOption::tabulate(
                    &mdp,
                    format!("once_{var}"),
                    VarSet::from_indices([var]),
                    VarSet::empty(),
                    |_| true,
                    move |_| vec![(var, 1.0)],
                    |_| 1.0,
                )
                .unwrap(),
            )
        };
        let mo = MultiOption::new(vec![once(0), once(1)], TerminationRule::T1).unwrap();
        for s in 0..9 {
            for t in 0..9 {
                let xi = single_step_xi(&mdp, &mo, s, t).unwrap();
                assert!((p_multi_t1(&mo, s, t, 1).unwrap() - xi).abs() < 1e-15);
                assert!((p_multi_t2(&mo, s, t, 1).unwrap() - xi).abs() < 1e-15);
                for k in 2..4 {
                    assert_eq!(p_multi_t1(&mo, s, t, k).unwrap(), 0.0);
                    assert_eq!(p_multi_t2(&mo, s, t, k).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn staggered_durations_split_t1_and_t2() {
        // a needs 2 increments, b needs 4; both deterministic
        let mdp = counters(5, 5, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let b = counter_option(&mdp, 1, 4);
        let t1 = MultiOption::new(vec![a.clone(), b.clone()], TerminationRule::T1).unwrap();
        let t2 = t1.with_rule(TerminationRule::T2);
        let sp = mdp.space();
        let start = 0;
        let end_t1 = 2 * 5 + 2;
        let end_t2 = 2 * 5 + 4; // a frozen at 2
        for k in 1..=6 {
            for y in 0..sp.len() {
                let e1 = if k == 2 && y == end_t1 { 1.0 } else { 0.0 };
                let e2 = if k == 4 && y == end_t2 { 1.0 } else { 0.0 };
                assert_eq!(p_multi_t1(&t1, start, y, k).unwrap(), e1);
                assert_eq!(p_multi_t2(&t2, start, y, k).unwrap(), e2);
            }
        }
        let cfg = ModelConfig::default();
        let m1 = multi_option_model_with(&mdp, &t1, &cfg, None).unwrap();
        let m2 = multi_option_model_with(&mdp, &t2, &cfg, None).unwrap();
        assert_eq!(m1.starts[&start].steps, vec![StepEntry { next: end_t1, k: 2, prob: 1.0 }]);
        assert_eq!(m2.starts[&start].steps, vec![StepEntry { next: end_t2, k: 4, prob: 1.0 }]);
        assert!((m1.starts[&start].reward - (-1.9)).abs() < 1e-15);
    }

    fn stochastic_pair() -> (FlatMdp, MultiOption) {
        let mdp = counters(4, 4, 0.3);
        let leaky = |var: usize, stop: usize, b: f64| {
            Arc::new(
                MarkovOption::tabulate(
                    &mdp,
                    format!("leaky_{var}"),
                    VarSet::from_indices([var]),
                    VarSet::from_indices([1 - var]),
                    move |s| s.get(var) < stop,
                    move |_| vec![(var, 1.0)],
                    move |s| if s.get(var) >= stop { 1.0 } else { b },
                )
                .unwrap(),
            )
        };
        let a = leaky(0, 2, 0.1);
        let b = leaky(1, 3, 0.2);
        let mo = MultiOption::new(vec![a, b], TerminationRule::T1).unwrap();
        (mdp, mo)
    }

    #[test]
    fn model_builder_matches_pointwise_recurrences() {
        let (mdp, mo) = stochastic_pair();
        let k_max = 12;
        for rule in [TerminationRule::T1, TerminationRule::T2] {
            let mo = mo.with_rule(rule);
            let cfg = ModelConfig::exact(k_max, f64::INFINITY);
            let model = multi_option_model_with(&mdp, &mo, &cfg, None).unwrap();
            for (&s, sm) in &model.starts {
                let mut memo = HashMap::new();
                let t2 = t2_recurrence(&mo, mo.full_mask(), s, k_max, &mut memo).unwrap();
                for k in 1..=k_max {
                    for y in 0..mdp.num_states() {
                        let pointwise = match rule {
                            TerminationRule::T1 => p_multi_t1(&mo, s, y, k).unwrap(),
                            TerminationRule::T2 => lookup(&t2[k - 1], y),
                        };
                        assert!(
                            (sm.prob(y, k) - pointwise).abs() < 1e-13,
                            "{rule} s={s} y={y} k={k}: {} vs {pointwise}",
                            sm.prob(y, k)
                        );
                    }
                }
                assert!((sm.terminated_mass() + sm.residual - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_member_matches_single_option_model() {
        let mdp = corridor(6, 0.9);
        let o = Arc::new(
            MarkovOption::tabulate(
                &mdp,
                "mixed",
                mdp.space().all_vars(),
                VarSet::empty(),
                |_| true,
                |_| vec![(0, 1.0)],
                |s| [0.0, 0.25, 0.0, 0.5, 0.0, 1.0][s.get(0)],
            )
            .unwrap(),
        );
        let cfg = ModelConfig::default();
        let single = option_discounted_model_with(&mdp, &o, &cfg).unwrap();
        for rule in [TerminationRule::T1, TerminationRule::T2] {
            let mo = MultiOption::new(vec![o.clone()], rule).unwrap();
            let multi = multi_option_model_with(&mdp, &mo, &cfg, None).unwrap();
            assert_eq!(single.starts.len(), multi.starts.len());
            for (s, a) in &single.starts {
                let b = &multi.starts[s];
                assert!((a.reward - b.reward).abs() < 1e-12);
                assert!((a.residual - b.residual).abs() < 1e-12);
                assert_eq!(a.steps.len(), b.steps.len());
                for (x, y) in a.steps.iter().zip(&b.steps) {
                    assert_eq!((x.next, x.k), (y.next, y.k));
                    assert!((x.prob - y.prob).abs() < 1e-12);
                }
                for (x, y) in a.kernel.iter().zip(&b.kernel) {
                    assert_eq!(x.0, y.0);
                    assert!((x.1 - y.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dump_round_trip_conserves_mass() {
        let (mdp, mo) = stochastic_pair();
        let model = multi_option_model(&mdp, &mo.with_rule(TerminationRule::T2), 200, 1e-9).unwrap();
        let mut buf = Vec::new();
        model.write_dump(&mut buf).unwrap();
        let dump = ModelDump::read(&buf[..]).unwrap();
        assert_eq!(dump.rule, TerminationRule::T2);
        assert_eq!(dump.name, "leaky_0+leaky_1");
        let mut sorted = dump.rows.clone();
        sorted.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        assert_eq!(sorted, dump.rows);
        for (s, mass) in dump.mass_by_start() {
            assert!((mass + model.starts[&s].residual - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn expected_duration_t1_not_above_t2() {
        let (mdp, mo) = stochastic_pair();
        let m1 = multi_option_model(&mdp, &mo, 200, 1e-9).unwrap();
        let m2 = multi_option_model(&mdp, &mo.with_rule(TerminationRule::T2), 200, 1e-9).unwrap();
        for (s, a) in &m1.starts {
            assert!(a.expected_duration() <= m2.starts[s].expected_duration() + 1e-12);
        }
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("T2".parse::<TerminationRule>().unwrap(), TerminationRule::T2);
        assert!("t3".parse::<TerminationRule>().is_err());
    }

    #[test]
    fn action_space_ids_follow_class_product() {
        let mdp = counters(3, 3, 0.0);
        let a = counter_option(&mdp, 0, 2);
        let a1 = Arc::new(
            MarkovOption::tabulate(
                &mdp,
                "count_a1",
                VarSet::from_indices([0]),
                VarSet::empty(),
                |s| s.get(0) < 1,
                |_| vec![(0, 1.0)],
                |s| if s.get(0) >= 1 { 1.0 } else { 0.0 },
            )
            .unwrap(),
        );
        let b = counter_option(&mdp, 1, 2);
        let p = build_partition(vec![a, a1, b], Some(vec![vec![0, 1], vec![2]])).unwrap();
        let space = ActionSpace::concurrent(&p, TerminationRule::T2).unwrap();
        assert_eq!(space.len(), 2);
        assert_eq!(space.get(0).name(), "count_a+count_b");
        assert_eq!(space.get(1).name(), "count_a1+count_b");
        assert_eq!(space.available(0), &[0, 1]);
        // a = 1: only count_a is still available
        assert_eq!(space.available(3), &[0]);
        let seq = ActionSpace::sequential(&p).unwrap();
        assert_eq!(seq.len(), 3);
    }
}
