//! Small numerical helpers: binomial probabilities, normal tails, ranks.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// ln C(n, k).
fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Full pmf of Bin(n, p) as a vector of length n + 1.
///
/// For n <= 60 the terms are built from exact integer binomial coefficients
/// and direct powers, so dyadic inputs give exact results.
pub fn binom_pmf_vec(n: usize, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    if p <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    if p >= 1.0 {
        out[n] = 1.0;
        return out;
    }
    let q = 1.0 - p;
    if n <= 60 {
        let mut c: u128 = 1;
        for (k, slot) in out.iter_mut().enumerate() {
            if k > 0 {
                c = c * (n - k + 1) as u128 / k as u128;
            }
            *slot = (c as f64) * p.powi(k as i32) * q.powi((n - k) as i32);
        }
    } else {
        let (lp, lq) = (p.ln(), q.ln());
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = (ln_choose(n, k) + k as f64 * lp + (n - k) as f64 * lq).exp();
        }
    }
    out
}

/// P(Bin(n, p) > t).
pub fn binom_sf(n: usize, t: usize, p: f64) -> f64 {
    if t >= n {
        return 0.0;
    }
    let pmf = binom_pmf_vec(n, p);
    pmf[t + 1..].iter().sum()
}

/// P(Bin(n, p) >= c).
pub fn binom_tail_ge(n: usize, c: usize, p: f64) -> f64 {
    if c == 0 {
        return 1.0;
    }
    binom_sf(n, c - 1, p)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Average ranks (1-based, ascending), ties share the mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(x: &[f64], prob: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
