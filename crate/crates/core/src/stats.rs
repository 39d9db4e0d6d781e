//! Small nonparametric helpers used to compare learning curves across trials.

use statrs::distribution::{ContinuousCDF, Normal};

/// Median with the mean of the two middle order statistics for even lengths.
/// `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankTest {
    /// Mann–Whitney `U` of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "first sample tends to be smaller".
    pub p_less: f64,
}

/// Mann–Whitney rank-sum test with midranks for ties and the tie-corrected
/// normal approximation (with continuity correction).
pub fn mann_whitney(a: &[f64], b: &[f64]) -> RankTest {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&x| (x, 0))
        .chain(b.iter().map(|&x| (x, 1)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for e in &all[i..=j] {
            if e.1 == 0 {
                rank_sum_a += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nf = n as f64;
    let var = n1 * n2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return RankTest {
            u,
            z: 0.0,
            p_less: 0.5,
        };
    }
    let z = (u - mean + 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    RankTest {
        u,
        z,
        p_less: normal.cdf(z),
    }
}

/// `P(X ≥ successes)` for `X ~ Binomial(n, 1/2)`: the one-sided sign test.
pub fn sign_test_upper(successes: usize, n: usize) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > n {
        return 0.0;
    }
    // log-space binomial coefficients keep large n stable
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64; // ln C(n, 0)
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= successes {
            total += (ln_choose + ln_half_n).exp();
        }
    }
    total.min(1.0)
}
