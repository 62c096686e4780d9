//! Group-level aggregation of unit statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{SensitivityModel, UnitStats};
use crate::stats::binom_pmf_vec;
use crate::unit_stats::MagnitudeVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group_id: usize,
    /// Member set ids, ascending.
    pub set_ids: Vec<usize>,
    /// Unit signs aligned with `set_ids`. Hidden from the screening predictor.
    pub unit_signs: Vec<i8>,
    /// Unit magnitudes aligned with `set_ids`.
    pub unit_magnitudes: Vec<f64>,
    /// Positions (into `set_ids`) of the representative set Q_g, ascending.
    pub rep_pos: Vec<usize>,
    /// Number of nonzero signs in Q_g; the binomial count for eta and kappa.
    pub q: usize,
    pub eta: usize,
    pub sign: i8,
    /// Signs outside Q_g in ascending set-id order.
    pub residual_signs: Vec<i8>,
    pub magnitude: f64,
    pub kappa: f64,
    pub pstar: f64,
    /// Largest set size in the group.
    pub max_n: usize,
}

impl GroupStats {
    pub fn size(&self) -> usize {
        self.set_ids.len()
    }

    pub fn rep_size(&self) -> usize {
        self.rep_pos.len()
    }

    pub fn rep_set(&self) -> Vec<usize> {
        self.rep_pos.iter().map(|&p| self.set_ids[p]).collect()
    }

    pub fn rep_signs(&self) -> Vec<i8> {
        self.rep_pos.iter().map(|&p| self.unit_signs[p]).collect()
    }

    /// Fraction of +1 entries among the residual signs (0 when empty).
    pub fn residual_pos_frac(&self) -> f64 {
        if self.residual_signs.is_empty() {
            0.0
        } else {
            self.residual_signs.iter().filter(|&&v| v > 0).count() as f64 / self.residual_signs.len() as f64
        }
    }

    /// Same group with different unit signs; Q_g, W_g and pstar are unchanged,
    /// eta and kappa are recomputed from the new nonzero count.
    pub fn with_unit_signs(&self, signs: &[i8]) -> GroupStats {
        assert_eq!(signs.len(), self.set_ids.len());
        let mut g = self.clone();
        g.unit_signs = signs.to_vec();
        let rep: Vec<i8> = g.rep_signs();
        g.q = rep.iter().filter(|&&s| s != 0).count();
        let (eta, kappa) = eta_kappa_or_zero(g.q, g.pstar);
        g.eta = eta;
        g.kappa = kappa;
        g.sign = group_sign(&rep, eta);
        g.residual_signs = residuals(&g.unit_signs, &g.rep_pos);
        g
    }
}

fn residuals(signs: &[i8], rep_pos: &[usize]) -> Vec<i8> {
    signs
        .iter()
        .enumerate()
        .filter(|(i, _)| !rep_pos.contains(i))
        .map(|(_, &s)| s)
        .collect()
}

/// Positions of the k largest magnitudes; boundary ties go to the lowest id.
///
/// `ids` are the set ids aligned with `magnitudes`.
pub fn representative_set(magnitudes: &[f64], ids: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > magnitudes.len() {
        return invalid(format!("representative size {k} outside [1, {}]", magnitudes.len()));
    }
    let mut idx: Vec<usize> = (0..magnitudes.len()).collect();
    idx.sort_by(|&a, &b| magnitudes[b].total_cmp(&magnitudes[a]).then(ids[a].cmp(&ids[b])));
    let mut out: Vec<usize> = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

fn check_pstar(pstar: f64) -> Result<()> {
    if !(pstar > 0.0 && pstar < 1.0) {
        return invalid(format!("pstar must lie in (0,1), got {pstar}"));
    }
    Ok(())
}

/// Smallest t with P(Bin(q, pstar) > t) <= pstar.
pub fn binomial_eta(q: usize, pstar: f64) -> Result<usize> {
    check_pstar(pstar)?;
    if q == 0 {
        return invalid("binomial count must be at least 1");
    }
    let pmf = binom_pmf_vec(q, pstar);
    // upper tail sums from the top keep small tails accurate
    let mut tail = 0.0;
    let mut eta = q;
    for t in (0..q).rev() {
        tail += pmf[t + 1];
        if tail <= pstar {
            eta = t;
        } else {
            break;
        }
    }
    Ok(eta)
}

/// kappa = P(Bin > eta) / P(Bin <= eta).
pub fn group_kappa(q: usize, pstar: f64) -> Result<f64> {
    let eta = binomial_eta(q, pstar)?;
    let pmf = binom_pmf_vec(q, pstar);
    let upper: f64 = pmf[eta + 1..].iter().sum();
    let lower: f64 = pmf[..=eta].iter().sum();
    Ok(upper / lower)
}

fn eta_kappa_or_zero(q: usize, pstar: f64) -> (usize, f64) {
    if q == 0 {
        return (0, 0.0);
    }
    (
        binomial_eta(q, pstar).expect("pstar validated at aggregation"),
        group_kappa(q, pstar).expect("pstar validated at aggregation"),
    )
}

pub fn unit_marginal_kappa(n: usize, gamma: f64) -> Result<f64> {
    if n < 2 || !(gamma >= 1.0) || !gamma.is_finite() {
        return invalid(format!("unit_marginal_kappa domain: n={n}, gamma={gamma}"));
    }
    let h = (n / 2) as f64;
    Ok(((n - 1) as f64 * (gamma - 1.0) + h) / h)
}

/// Worst-case positive-sign probability for a unit of a set with `n` units.
pub fn unit_pstar(variant: MagnitudeVariant, n: usize, model: SensitivityModel) -> Result<f64> {
    if n == 2 || variant == MagnitudeVariant::NP {
        return Ok(model.pair_pstar());
    }
    let k = unit_marginal_kappa(n, model.gamma())?;
    Ok(k / (1.0 + k))
}

/// L_g = +1 iff the number of positive representative signs exceeds eta.
pub fn group_sign(rep_signs: &[i8], eta: usize) -> i8 {
    let pos = rep_signs.iter().filter(|&&s| s > 0).count();
    if pos > eta {
        1
    } else {
        -1
    }
}

/// min(4, floor(min group size / 2)), at least 1.
pub fn default_rep_size(group_sizes: &[usize]) -> usize {
    let m = group_sizes.iter().copied().min().unwrap_or(2);
    (m / 2).clamp(1, 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggConfig {
    pub variant: MagnitudeVariant,
    /// |Q_g|; clipped to the group size.
    pub rep_size: usize,
    /// Exponent b in W_g * |g|^b.
    pub size_exponent: f64,
}

pub fn aggregate_group(
    group_id: usize,
    units: &[UnitStats],
    model: SensitivityModel,
    cfg: &AggConfig,
) -> Result<GroupStats> {
    if units.is_empty() {
        return invalid(format!("group {group_id} is empty"));
    }
    let mut us: Vec<UnitStats> = units.to_vec();
    us.sort_by_key(|u| u.set_id);
    let set_ids: Vec<usize> = us.iter().map(|u| u.set_id).collect();
    let mags: Vec<f64> = us.iter().map(|u| u.magnitude).collect();
    let signs: Vec<i8> = us.iter().map(|u| u.sign).collect();
    let k = cfg.rep_size.clamp(1, us.len());
    let rep_pos = representative_set(&mags, &set_ids, k)?;
    let max_n = us.iter().map(|u| u.n).max().unwrap();
    let pstar = unit_pstar(cfg.variant, max_n, model)?;
    check_pstar(pstar)?;
    let mean_sq = mags.iter().map(|w| w * w).sum::<f64>() / mags.len() as f64;
    let magnitude = mean_sq.sqrt() * (us.len() as f64).powf(cfg.size_exponent);
    let proto = GroupStats {
        group_id,
        set_ids,
        unit_signs: signs.clone(),
        unit_magnitudes: mags,
        rep_pos,
        q: 0,
        eta: 0,
        sign: -1,
        residual_signs: vec![],
        magnitude,
        kappa: 0.0,
        pstar,
        max_n,
    };
    Ok(proto.with_unit_signs(&signs))
}

/// Aggregates every group of a partition. `units` may be in any order.
pub fn aggregate_partition(
    groups: &[Vec<usize>],
    units: &[UnitStats],
    model: SensitivityModel,
    cfg: &AggConfig,
) -> Result<Vec<GroupStats>> {
    let by_id: std::collections::HashMap<usize, &UnitStats> = units.iter().map(|u| (u.set_id, u)).collect();
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let us: Vec<UnitStats> = g
                .iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .map(|u| **u)
                        .ok_or_else(|| crate::error::Error::Data(format!("set {id} has no unit statistics")))
                })
                .collect::<Result<_>>()?;
            aggregate_group(k, &us, model, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(id: usize, sign: i8, w: f64) -> UnitStats {
        UnitStats { set_id: id, n: 2, rank: if sign > 0 { 1 } else { 2 }, masked_rank: 1, sign, magnitude: w }
    }

    #[test]
    fn rep_set_examples() {
        assert_eq!(representative_set(&[1.0, 5.0, 3.0], &[1, 2, 3], 2).unwrap(), vec![1, 2]);
        assert_eq!(representative_set(&[2.0, 2.0, 2.0], &[1, 2, 3], 1).unwrap(), vec![0]);
        assert_eq!(representative_set(&[7.0], &[1], 1).unwrap(), vec![0]);
        assert!(representative_set(&[7.0], &[1], 2).is_err());
    }

    #[test]
    fn eta_examples() {
        assert_eq!(binomial_eta(1, 0.75).unwrap(), 0);
        assert_eq!(binomial_eta(1, 0.6).unwrap(), 0);
        assert_eq!(binomial_eta(2, 0.5).unwrap(), 1);
        assert_eq!(binomial_eta(4, 0.75).unwrap(), 2);
        assert!(binomial_eta(4, 1.0).is_err());
        assert!(binomial_eta(4, 0.0).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(group_kappa(1, 0.75).unwrap(), 3.0);
        assert_eq!(group_kappa(4, 0.75).unwrap(), 0.73828125 / 0.26171875);
        assert!((group_kappa(4, 0.75).unwrap() - 2.82090).abs() < 1e-5);
        assert_eq!(group_kappa(1, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn marginal_kappa_examples() {
        assert_eq!(unit_marginal_kappa(2, 3.0).unwrap(), 3.0);
        assert_eq!(unit_marginal_kappa(3, 3.0).unwrap(), 5.0);
        assert_eq!(unit_marginal_kappa(5, 3.0).unwrap(), 5.0);
        assert!(unit_marginal_kappa(1, 3.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m1 = SensitivityModel::new(1.0).unwrap();
        let m3 = SensitivityModel::new(3.0).unwrap();
        let cfg = |k| AggConfig { variant: MagnitudeVariant::NP, rep_size: k, size_exponent: 0.0 };
        let g = aggregate_group(0, &[unit(1, 1, 1.0)], m1, &cfg(1)).unwrap();
        assert_eq!((g.eta, g.sign), (0, 1));

        let us = [unit(1, 1, 4.0), unit(2, 1, 3.0), unit(3, 1, 2.0), unit(4, -1, 1.0)];
        let g = aggregate_group(0, &us, m3, &cfg(4)).unwrap();
        assert_eq!((g.eta, g.sign), (2, 1));
        let us = [unit(1, 1, 4.0), unit(2, 1, 3.0), unit(3, -1, 2.0), unit(4, -1, 1.0)];
        let g = aggregate_group(0, &us, m3, &cfg(4)).unwrap();
        assert_eq!((g.eta, g.sign), (2, -1));
    }

    #[test]
    fn aggregate_fields() {
        let m = SensitivityModel::new(2.0).unwrap();
        let us = [unit(5, -1, 1.0), unit(2, 1, 3.0), unit(9, 1, 0.5)];
        let cfg = AggConfig { variant: MagnitudeVariant::NP, rep_size: 1, size_exponent: 0.5 };
        let g = aggregate_group(3, &us, m, &cfg).unwrap();
        assert_eq!(g.set_ids, vec![2, 5, 9]);
        assert_eq!(g.rep_set(), vec![2]);
        assert_eq!(g.residual_signs, vec![-1, 1]);
        assert_eq!(g.sign, 1);
        let expect = ((1.0 + 9.0 + 0.25) / 3.0f64).sqrt() * 3.0f64.sqrt();
        assert!((g.magnitude - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_signs_leave_the_binomial_count() {
        let m = SensitivityModel::new(3.0).unwrap();
        let mk = |id, s| UnitStats { set_id: id, n: 3, rank: 2, masked_rank: 2, sign: s, magnitude: 1.0 };
        let cfg = AggConfig { variant: MagnitudeVariant::NP, rep_size: 2, size_exponent: 0.0 };
        let g = aggregate_group(0, &[mk(1, 0), mk(2, 1)], m, &cfg).unwrap();
        assert_eq!((g.q, g.eta, g.sign), (1, 0, 1));
        let g = aggregate_group(0, &[mk(1, 0), mk(2, 0)], m, &cfg).unwrap();
        assert_eq!((g.q, g.sign, g.kappa), (0, -1, 0.0));
    }

    #[test]
    fn pstar_by_variant() {
        let m = SensitivityModel::new(3.0).unwrap();
        assert_eq!(unit_pstar(MagnitudeVariant::NP, 6, m).unwrap(), 0.75);
        assert_eq!(unit_pstar(MagnitudeVariant::Max, 2, m).unwrap(), 0.75);
        assert_eq!(unit_pstar(MagnitudeVariant::Max, 3, m).unwrap(), 5.0 / 6.0);
    }

    #[test]
    fn default_k_rule() {
        assert_eq!(default_rep_size(&[5, 7]), 2);
        assert_eq!(default_rep_size(&[20, 40]), 4);
        assert_eq!(default_rep_size(&[1, 40]), 1);
    }

    #[test]
    fn kappa_bounded_on_grid() {
        for &gamma in &[1.0, 1.5, 2.0, 3.0, 5.0] {
            let p = gamma / (1.0 + gamma);
            for q in 1..=50 {
                let k = group_kappa(q, p).unwrap();
                assert!(k <= p / (1.0 - p) * (1.0 + 1e-12), "q={q} gamma={gamma} k={k}");
            }
        }
    }

    /// P(L_g = +1) <= kappa P(L_g = -1) by exact enumeration over sign vectors.
    #[test]
    fn bounded_skewness_exhaustive() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        for &gamma in &[1.0, 2.0, 3.0] {
            let pstar: f64 = gamma / (1.0 + gamma);
            for q in 1..=5usize {
                let eta = binomial_eta(q, pstar).unwrap();
                let kappa = group_kappa(q, pstar).unwrap();
                // each unit's probability on a grid inside [1 - pstar, pstar]
                let npts = grid.len().pow(q as u32);
                for code in 0..npts {
                    let mut c = code;
                    let probs: Vec<f64> = (0..q)
                        .map(|_| {
                            let t = grid[c % grid.len()];
                            c /= grid.len();
                            (1.0 - pstar) + t * (2.0 * pstar - 1.0)
                        })
                        .collect();
                    let mut plus = 0.0;
                    for v in 0..(1u32 << q) {
                        let mut pr = 1.0;
                        let mut pos = 0;
                        for (i, p) in probs.iter().enumerate() {
                            if v >> i & 1 == 1 {
                                pr *= p;
                                pos += 1;
                            } else {
                                pr *= 1.0 - p;
                            }
                        }
                        if pos > eta {
                            plus += pr;
                        }
                    }
                    assert!(plus <= kappa * (1.0 - plus) + 1e-12, "gamma={gamma} q={q}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_and_sign_invariance(
            ws in proptest::collection::vec(0.0f64..10.0, 1..12),
            signs in proptest::collection::vec(prop_oneof![Just(-1i8), Just(1i8)], 12),
            k in 1usize..5,
        ) {
            let m = SensitivityModel::new(2.0).unwrap();
            let cfg = AggConfig { variant: MagnitudeVariant::NP, rep_size: k, size_exponent: 0.0 };
            let us: Vec<UnitStats> = ws.iter().enumerate().map(|(i, &w)| unit(i * 3, signs[i], w)).collect();
            let g = aggregate_group(0, &us, m, &cfg).unwrap();
            let mut rev = us.clone();
            rev.reverse();
            let g2 = aggregate_group(0, &rev, m, &cfg).unwrap();
            prop_assert_eq!(&g, &g2);
            let flipped: Vec<UnitStats> = us.iter().map(|u| UnitStats { sign: -u.sign, ..*u }).collect();
            let g3 = aggregate_group(0, &flipped, m, &cfg).unwrap();
            prop_assert_eq!(g.magnitude, g3.magnitude);
            prop_assert_eq!(&g.rep_pos, &g3.rep_pos);
            prop_assert_eq!(g.eta, g3.eta);
        }
    }
}
