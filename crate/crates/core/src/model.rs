//! Shared pieces of the analytic option models: truncation settings,
//! per-start-state results and a sparse accumulator used by the forward sweeps.

/// Truncation settings for the infinite sums over option durations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Largest duration propagated.
    pub k_max: usize,
    /// Largest admissible truncation error `γ^k · residual`.
    pub tol: f64,
    /// The sweep stops once the surviving mass drops to this level. The
    /// remaining mass is kept in `residual`, never renormalized away.
    pub mass_floor: f64,
    /// Keep the full `(s', k)` duration distributions, not just the
    /// discounted kernel.
    pub keep_steps: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_max: 200,
            tol: 1e-9,
            mass_floor: 1e-15,
            keep_steps: true,
        }
    }
}

impl ModelConfig {
    /// Sweeps the full horizon with no early stop.
    pub fn exact(k_max: usize, tol: f64) -> Self {
        Self {
            k_max,
            tol,
            mass_floor: 0.0,
            keep_steps: true,
        }
    }
}

/// Probability of terminating in `next` after exactly `k` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepEntry {
    pub next: usize,
    pub k: usize,
    pub prob: f64,
}

/// The model of one (multi-)option started from one state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StartModel {
    /// Sorted by `(next, k)`. Empty unless steps were kept.
    pub steps: Vec<StepEntry>,
    /// `Σ_k P(s, s', k) γ^k`, sorted by next state.
    pub kernel: Vec<(usize, f64)>,
    /// Expected discounted reward accrued until termination.
    pub reward: f64,
    /// Mass not yet terminated when the sweep stopped.
    pub residual: f64,
    /// Number of steps swept.
    pub horizon: usize,
}

impl StartModel {
    /// Total terminated probability, `Σ_{s',k} P(s, s', k)`.
    pub fn terminated_mass(&self) -> f64 {
        self.steps.iter().map(|e| e.prob).sum()
    }

    pub fn prob(&self, next: usize, k: usize) -> f64 {
        self.steps
            .binary_search_by(|e| (e.next, e.k).cmp(&(next, k)))
            .map(|i| self.steps[i].prob)
            .unwrap_or(0.0)
    }

    pub fn kernel_prob(&self, next: usize) -> f64 {
        self.kernel
            .binary_search_by(|e| e.0.cmp(&next))
            .map(|i| self.kernel[i].1)
            .unwrap_or(0.0)
    }

    /// `E[k]` over the terminated mass.
    pub fn expected_duration(&self) -> f64 {
        self.steps.iter().map(|e| e.k as f64 * e.prob).sum()
    }

    /// Upper bound on the discounted mass lost to truncation.
    pub fn truncation_error(&self, discount: f64) -> f64 {
        discount.powi(self.horizon as i32) * self.residual
    }
}

/// Dense scratch vector with a touched list; drains in index order so that
/// floating sums are reproducible.
#[derive(Debug)]
pub(crate) struct Accumulator {
    values: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<usize>,
}

impl Accumulator {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            seen: vec![false; len],
            touched: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, index: usize, value: f64) {
        if !self.seen[index] {
            self.seen[index] = true;
            self.touched.push(index);
        }
        self.values[index] += value;
    }

    pub(crate) fn drain_sorted(&mut self) -> Vec<(usize, f64)> {
        self.touched.sort_unstable();
        let mut out = Vec::with_capacity(self.touched.len());
        for &i in &self.touched {
            out.push((i, self.values[i]));
            self.values[i] = 0.0;
            self.seen[i] = false;
        }
        self.touched.clear();
        out
    }
}

/// Folds `(next, k, p)` records into sorted step entries and the discounted kernel.
pub(crate) fn finish_steps(
    mut raw: Vec<StepEntry>,
    discount: f64,
    keep_steps: bool,
) -> (Vec<StepEntry>, Vec<(usize, f64)>) {
    raw.sort_by(|a, b| (a.next, a.k).cmp(&(b.next, b.k)));
    let mut steps: Vec<StepEntry> = Vec::with_capacity(raw.len());
    for e in raw {
        match steps.last_mut() {
            Some(last) if last.next == e.next && last.k == e.k => last.prob += e.prob,
            _ => steps.push(e),
        }
    }
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for e in &steps {
        let w = e.prob * discount.powi(e.k as i32);
        match kernel.last_mut() {
            Some(last) if last.0 == e.next => last.1 += w,
            _ => kernel.push((e.next, w)),
        }
    }
    if !keep_steps {
        steps = Vec::new();
    }
    (steps, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_drains_in_order_and_resets() {
        let mut acc = Accumulator::new(10);
        acc.add(7, 0.5);
        acc.add(2, 0.25);
        acc.add(7, 0.25);
        assert_eq!(acc.drain_sorted(), vec![(2, 0.25), (7, 0.75)]);
        assert!(acc.drain_sorted().is_empty());
        acc.add(7, 1.0);
        assert_eq!(acc.drain_sorted(), vec![(7, 1.0)]);
    }

    #[test]
    fn finish_merges_and_discounts() {
        let raw = vec![
            StepEntry { next: 3, k: 2, prob: 0.25 },
            StepEntry { next: 1, k: 1, prob: 0.5 },
            StepEntry { next: 3, k: 2, prob: 0.25 },
        ];
        let (steps, kernel) = finish_steps(raw, 0.5, true);
        assert_eq!(steps.len(), 2);
        assert_eq!(kernel, vec![(1, 0.25), (3, 0.125)]);
    }
}
