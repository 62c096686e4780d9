//! Sensitivity signed-rank p-values, BH, P-screening masking, p-value
//! combination and the exact mirror-symmetry tables.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::{average_ranks, normal_sf};

/// Largest number of nonzero signs handled exactly.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMode {
    ExactEnumeration,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPValue {
    pub value: f64,
    pub randomized: bool,
    pub mode: PValueMode,
}

/// If every weight is a multiple of 1/2, the doubled integer weights.
fn half_integer_weights(w: &[f64]) -> Option<Vec<usize>> {
    w.iter()
        .map(|&x| {
            let d = 2.0 * x;
            let r = d.round();
            ((d - r).abs() < 1e-9 && r >= 0.0 && r < 1e7).then_some(r as usize)
        })
        .collect()
}

/// Upper tail pieces (P(S* > s), P(S* = s)) of S* = sum w_i B_i, B_i ~ Bern(p).
fn exact_tail(weights: &[f64], s_obs: f64, p: f64) -> (f64, f64) {
    if let Some(iw) = half_integer_weights(weights) {
        let total: usize = iw.iter().sum();
        let mut dist = vec![0.0; total + 1];
        dist[0] = 1.0;
        let mut hi = 0;
        for &w in &iw {
            for s in (0..=hi).rev() {
                let v = dist[s];
                if v != 0.0 {
                    dist[s + w] += v * p;
                    dist[s] = v * (1.0 - p);
                }
            }
            hi += w;
        }
        let target = (2.0 * s_obs).round() as usize;
        let gt: f64 = dist.iter().skip(target + 1).sum();
        let eq = dist.get(target).copied().unwrap_or(0.0);
        (gt, eq)
    } else {
        let m = weights.len();
        let (mut gt, mut eq) = (0.0, 0.0);
        let tol = 1e-9 * (1.0 + weights.iter().sum::<f64>());
        for code in 0u64..(1u64 << m) {
            let mut s = 0.0;
            let mut pr = 1.0;
            for (i, w) in weights.iter().enumerate() {
                if code >> i & 1 == 1 {
                    s += w;
                    pr *= p;
                } else {
                    pr *= 1.0 - p;
                }
            }
            if (s - s_obs).abs() <= tol {
                eq += pr;
            } else if s > s_obs {
                gt += pr;
            }
        }
        (gt, eq)
    }
}

/// Normal approximation of (P(S* > s), P(S* = s)) with continuity correction
/// and a first-order Edgeworth skewness term (S* is skewed when p != 1/2).
fn normal_tail(w: &[f64], s_obs: f64, p: f64) -> (f64, f64) {
    let mu = p * w.iter().sum::<f64>();
    let var = p * (1.0 - p) * w.iter().map(|x| x * x).sum::<f64>();
    let sd = var.sqrt();
    let k3 = p * (1.0 - p) * (1.0 - 2.0 * p) * w.iter().map(|x| x * x * x).sum::<f64>();
    let skew = k3 / (var * sd);
    let tail = |x: f64| {
        let z = (x - mu) / sd;
        let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (normal_sf(z) + skew / 6.0 * (z * z - 1.0) * dens).clamp(0.0, 1.0)
    };
    let c = lattice_half_step(w);
    let ge = tail(s_obs - c);
    let gt = if c > 0.0 { tail(s_obs + c).min(ge) } else { ge };
    (gt, ge - gt)
}

fn lattice_half_step(weights: &[f64]) -> f64 {
    if weights.iter().all(|w| (w - w.round()).abs() < 1e-9) {
        0.5
    } else if half_integer_weights(weights).is_some() {
        0.25
    } else {
        0.0
    }
}

/// p-value with an explicit randomization draw `u` (`None` = deterministic).
pub fn sensitivity_pvalue_with_u(signs: &[i8], weights: &[f64], gamma: f64, u: Option<f64>) -> Result<SensitivityPValue> {
    if signs.len() != weights.len() {
        return invalid("signs and weights differ in length");
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return invalid(format!("gamma must be >= 1, got {gamma}"));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return invalid("weights must be positive");
    }
    let (w, l): (Vec<f64>, Vec<i8>) = weights.iter().zip(signs).filter(|(_, &s)| s != 0).map(|(w, s)| (*w, *s)).unzip();
    let p = gamma / (1.0 + gamma);
    let s_obs: f64 = w.iter().zip(&l).filter(|(_, &s)| s > 0).map(|(w, _)| w).sum();
    let (gt, eq, mode) = if w.len() <= EXACT_LIMIT {
        let (gt, eq) = exact_tail(&w, s_obs, p);
        (gt, eq, PValueMode::ExactEnumeration)
    } else {
        let (gt, eq) = normal_tail(&w, s_obs, p);
        (gt, eq, PValueMode::NormalApprox)
    };
    let value = match u {
        None => gt + eq,
        Some(u) => gt + u * eq,
    };
    Ok(SensitivityPValue { value: value.clamp(0.0, 1.0), randomized: u.is_some(), mode })
}

/// Deterministic p-value from the normal approximation regardless of size.
pub fn normal_approx_pvalue(signs: &[i8], weights: &[f64], gamma: f64) -> Result<f64> {
    if signs.len() != weights.len() || !(gamma >= 1.0) {
        return invalid("normal_approx_pvalue: mismatched inputs or gamma < 1");
    }
    let (w, l): (Vec<f64>, Vec<i8>) = weights.iter().zip(signs).filter(|(_, &s)| s != 0).map(|(w, s)| (*w, *s)).unzip();
    if w.is_empty() {
        return Ok(1.0);
    }
    let s_obs: f64 = w.iter().zip(&l).filter(|(_, &s)| s > 0).map(|(w, _)| w).sum();
    let (gt, eq) = normal_tail(&w, s_obs, gamma / (1.0 + gamma));
    Ok((gt + eq).clamp(0.0, 1.0))
}

/// Sensitivity signed-rank p-value: P(sum w L* >= S_obs) under L* ~ Bern(Γ/(1+Γ)).
pub fn signed_rank_sensitivity_pvalue<R: Rng + ?Sized>(
    signs: &[i8],
    weights: &[f64],
    gamma: f64,
    randomized: bool,
    rng: &mut R,
) -> Result<SensitivityPValue> {
    let u = randomized.then(|| rng.random::<f64>());
    sensitivity_pvalue_with_u(signs, weights, gamma, u)
}

/// Group p-value with weights = average ranks of the unit magnitudes.
pub fn group_pvalue(signs: &[i8], magnitudes: &[f64], gamma: f64, u: Option<f64>) -> Result<SensitivityPValue> {
    // rank only the units that carry a sign, as their weights are what remain
    let keep: Vec<usize> = (0..signs.len()).filter(|&i| signs[i] != 0).collect();
    let w: Vec<f64> = keep.iter().map(|&i| magnitudes[i]).collect();
    let r = average_ranks(&w);
    let s: Vec<i8> = keep.iter().map(|&i| signs[i]).collect();
    sensitivity_pvalue_with_u(&s, &r, gamma, u)
}

/// Benjamini-Hochberg step-up; returns selected indices ascending.
pub fn bh_select(pvalues: &[f64], alpha: f64) -> Vec<usize> {
    let k = pvalues.len();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut cut = None;
    for (r, &i) in idx.iter().enumerate() {
        if pvalues[i] <= (r + 1) as f64 * alpha / k as f64 {
            cut = Some(pvalues[i]);
        }
    }
    match cut {
        None => vec![],
        Some(c) => (0..k).filter(|&i| pvalues[i] <= c).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PScreenParams {
    pub alpha_bar: f64,
    pub lambda: f64,
    pub nu: f64,
    pub epsilon: f64,
}

impl Default for PScreenParams {
    fn default() -> Self {
        Self { alpha_bar: 0.3, lambda: 0.5, nu: 1.0, epsilon: 0.01 }
    }
}

impl PScreenParams {
    /// Skewness constant (nu - lambda)/alpha_bar.
    pub fn kappa(&self) -> f64 {
        (self.nu - self.lambda) / self.alpha_bar
    }
}

/// Coarse sign and masked magnitude of a p-value.
pub fn pscreen_mask(p: f64, alpha_bar: f64, lambda: f64, nu: f64, epsilon: f64) -> Result<(i8, f64)> {
    if !(0.0 < alpha_bar && alpha_bar <= lambda && lambda < nu && nu <= 1.0) {
        return invalid("P-screening thresholds must satisfy 0 < alpha_bar <= lambda < nu <= 1");
    }
    let in_band = p >= lambda && p <= nu;
    let l = if p < alpha_bar {
        1
    } else if in_band {
        -1
    } else {
        0
    };
    let w = if in_band {
        1.0 / (epsilon + alpha_bar * (nu - p) / (nu - lambda))
    } else {
        1.0 / (epsilon + p)
    };
    Ok((l, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMethod {
    Fisher,
    Bonferroni,
}

pub fn combine_pvalues(ps: &[f64], method: CombineMethod) -> Result<f64> {
    if ps.is_empty() {
        return invalid("no p-values to combine");
    }
    if ps.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
        return invalid("p-values must lie in [0,1]");
    }
    let clipped: Vec<f64> = ps
        .iter()
        .map(|&p| {
            if p == 0.0 {
                log::warn!("zero p-value clipped to the smallest positive double");
                f64::MIN_POSITIVE
            } else {
                p
            }
        })
        .collect();
    let m = clipped.len();
    Ok(match method {
        CombineMethod::Bonferroni => (m as f64 * clipped.iter().cloned().fold(f64::INFINITY, f64::min)).min(1.0),
        CombineMethod::Fisher => {
            // chi-square with 2m dof: exp(-x/2) sum_{k<m} (x/2)^k / k!
            let half = -clipped.iter().map(|p| p.ln()).sum::<f64>();
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..m {
                term *= half / k as f64;
                sum += term;
            }
            ((-half).exp() * sum).min(1.0)
        }
    })
}

// ---------------------------------------------------------------------------
// Exact mirror-symmetry tables.

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Distribution of sum w_i B_i with B_i ~ Bern(probs_i), exact.
pub fn exact_weighted_bernoulli(probs: &[BigRational], weights: &[u64]) -> BTreeMap<u64, BigRational> {
    let mut dist = BTreeMap::new();
    dist.insert(0u64, BigRational::one());
    for (p, &w) in probs.iter().zip(weights) {
        let q = BigRational::one() - p;
        let mut next: BTreeMap<u64, BigRational> = BTreeMap::new();
        for (s, m) in &dist {
            *next.entry(*s).or_insert_with(BigRational::zero) += m * &q;
            *next.entry(s + w).or_insert_with(BigRational::zero) += m * p;
        }
        dist = next.into_iter().filter(|(_, m)| !m.is_zero()).collect();
    }
    dist
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorRow {
    /// min(p, 1 - p).
    pub v: BigRational,
    /// Mass (deterministic) or density (randomized) of p = v.
    pub lower: BigRational,
    /// Mass or density of p = 1 - v.
    pub upper: BigRational,
}

impl MirrorRow {
    /// lower / (lower + upper).
    pub fn p_lower(&self) -> BigRational {
        let t = &self.lower + &self.upper;
        if t.is_zero() {
            BigRational::zero()
        } else {
            &self.lower / t
        }
    }

    pub fn p_upper(&self) -> BigRational {
        let t = &self.lower + &self.upper;
        if t.is_zero() {
            BigRational::zero()
        } else {
            &self.upper / t
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorTable {
    /// Deterministic p-values: one row per attainable v, exact masses.
    pub deterministic: Vec<MirrorRow>,
    /// Randomized p-values: one row per constant piece of the density on
    /// (0, 1/2), evaluated at the piece midpoint.
    pub randomized: Vec<MirrorRow>,
    /// Null tail pieces (P(S* > s), P(S* >= s)) and true mass P(S = s).
    pieces: Vec<(BigRational, BigRational, BigRational)>,
}

impl MirrorTable {
    /// Density of the randomized p-value at x.
    pub fn randomized_density(&self, x: &BigRational) -> BigRational {
        for (lo, hi, m) in &self.pieces {
            if lo <= x && x < hi {
                return m / (hi - lo);
            }
        }
        BigRational::zero()
    }

    /// (f(v), f(1 - v)) for the randomized p-value.
    pub fn randomized_at(&self, v: &BigRational) -> (BigRational, BigRational) {
        (self.randomized_density(v), self.randomized_density(&(BigRational::one() - v)))
    }

    pub fn deterministic_at(&self, v: &BigRational) -> Option<&MirrorRow> {
        self.deterministic.iter().find(|r| &r.v == v)
    }
}

/// Exact conditional masses of p < 1/2 and p >= 1/2 given min(p, 1 - p),
/// for the sensitivity signed-rank p-value under independent unit sign
/// probabilities `probs`.
pub fn mirror_symmetry_check(probs: &[BigRational], weights: &[u64], gamma: &BigRational) -> Result<MirrorTable> {
    if probs.len() != weights.len() || probs.is_empty() {
        return invalid("probs and weights must be nonempty and equally long");
    }
    if probs.len() > 12 {
        return invalid("mirror_symmetry_check enumerates at most 12 units");
    }
    if *gamma < BigRational::one() {
        return invalid("gamma must be >= 1");
    }
    let pstar = gamma / (gamma + BigRational::one());
    let null = exact_weighted_bernoulli(&vec![pstar; probs.len()], weights);
    let truth = exact_weighted_bernoulli(probs, weights);
    let half = ratio(1, 2);
    let one = BigRational::one();

    // tails of the null: ge(s) = P(S* >= s), gt(s) = P(S* > s)
    let ge = |s: u64| -> BigRational { null.range(s..).map(|(_, m)| m.clone()).fold(BigRational::zero(), |a, b| a + b) };

    let mut det: BTreeMap<BigRational, (BigRational, BigRational)> = BTreeMap::new();
    let mut pieces = Vec::new();
    for (s, m) in &truth {
        let hi = ge(*s);
        let lo = &hi - null.get(s).cloned().unwrap_or_else(BigRational::zero);
        if hi < half {
            det.entry(hi.clone()).or_insert_with(|| (BigRational::zero(), BigRational::zero())).0 += m;
        } else {
            let v = &one - &hi;
            det.entry(v).or_insert_with(|| (BigRational::zero(), BigRational::zero())).1 += m;
        }
        pieces.push((lo, hi, m.clone()));
    }
    let deterministic = det.into_iter().map(|(v, (lower, upper))| MirrorRow { v, lower, upper }).collect();

    let mut table = MirrorTable { deterministic, randomized: vec![], pieces };
    // breakpoints of f(x) and f(1-x) inside [0, 1/2]
    let mut cuts = vec![BigRational::zero(), half.clone()];
    for (lo, hi, _) in &table.pieces {
        for c in [lo.clone(), hi.clone(), &one - lo, &one - hi] {
            if c > BigRational::zero() && c < half {
                cuts.push(c);
            }
        }
    }
    cuts.sort();
    cuts.dedup();
    for w in cuts.windows(2) {
        let mid = (&w[0] + &w[1]) / BigRational::from_integer(BigInt::from(2));
        let (lower, upper) = table.randomized_at(&mid);
        table.randomized.push(MirrorRow { v: mid, lower, upper });
    }
    Ok(table)
}
