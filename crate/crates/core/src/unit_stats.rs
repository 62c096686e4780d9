//! Per-set sign and magnitude statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::glm::{ridge_linear, LinearModel};
use crate::model::{MatchedSet, UnitStats};
use crate::rng::{Substreams, STREAM_TIEBREAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MagnitudeVariant {
    Max,
    TopGap,
    MedSplit,
    #[default]
    NP,
}

impl MagnitudeVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Self::Max),
            "topgap" => Ok(Self::TopGap),
            "medsplit" => Ok(Self::MedSplit),
            "np" => Ok(Self::NP),
            _ => invalid(format!("unknown magnitude variant '{s}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Max => "Max",
            Self::TopGap => "TopGap",
            Self::MedSplit => "MedSplit",
            Self::NP => "NP",
        }
    }
}

/// Baseline outcome model R0(x) for two-sided statistics, one per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub per_outcome: Vec<LinearModel>,
}

impl Baseline {
    /// Ridge fit of control outcomes on covariates over all supplied sets.
    pub fn fit_static(sets: &[MatchedSet], lambda: f64) -> Result<Self> {
        let m = sets.first().map_or(0, |s| s.n_outcomes());
        let mut per_outcome = Vec::with_capacity(m);
        for k in 0..m {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for s in sets {
                for (j, row) in s.outcomes.iter().enumerate() {
                    if j != s.treated_index {
                        x.push(s.covariates.clone());
                        y.push(row[k]);
                    }
                }
            }
            per_outcome.push(ridge_linear(&x, &y, lambda)?);
        }
        Ok(Self { per_outcome })
    }
}

#[derive(Debug, Clone, Default)]
pub enum SidedMode {
    #[default]
    OneSided,
    TwoSided(Baseline),
}

pub fn pair_stats(r1: f64, r2: f64, z1: u8, z2: u8) -> Result<(i8, f64)> {
    if z1 > 1 || z2 > 1 || z1 + z2 != 1 {
        return invalid("pair needs exactly one treated unit");
    }
    let y = (r1 - r2) * (z1 as f64 - z2 as f64);
    Ok((sgn(y), (r1 - r2).abs()))
}

fn sgn(y: f64) -> i8 {
    if y > 0.0 {
        1
    } else if y < 0.0 {
        -1
    } else {
        0
    }
}

/// Descending rank of the treated outcome with random tie-breaking.
///
/// Returns `(rank, sorted_desc, partner_rank)`.
pub fn treated_rank<R: Rng + ?Sized>(
    outcomes: &[f64],
    treated_index: usize,
    rng: &mut R,
) -> Result<(usize, Vec<f64>, usize)> {
    let n = outcomes.len();
    if n < 2 {
        return invalid("treated_rank needs at least 2 units");
    }
    if treated_index >= n {
        return invalid("treated index out of range");
    }
    let keys: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| outcomes[b].total_cmp(&outcomes[a]).then(keys[a].total_cmp(&keys[b])));
    let rank = idx.iter().position(|&j| j == treated_index).unwrap() + 1;
    let sorted = idx.iter().map(|&j| outcomes[j]).collect();
    Ok((rank, sorted, n + 1 - rank))
}

pub fn sign_from_rank(rank: usize, n: usize) -> Result<i8> {
    if rank == 0 || rank > n {
        return invalid(format!("rank {rank} outside [1, {n}]"));
    }
    if rank <= n / 2 {
        Ok(1)
    } else if rank > n.div_ceil(2) {
        Ok(-1)
    } else {
        Ok(0)
    }
}

pub fn masked_rank(rank: usize, n: usize) -> Result<usize> {
    if rank == 0 || rank > n {
        return invalid(format!("rank {rank} outside [1, {n}]"));
    }
    Ok(rank.min(n + 1 - rank))
}

/// Magnitude statistic from the descending outcome vector.
pub fn magnitude(variant: MagnitudeVariant, sorted: &[f64], rank: usize, n: usize) -> Result<f64> {
    if n < 2 || sorted.len() != n {
        return invalid("magnitude needs a sorted vector of length n >= 2");
    }
    // 1-based accessor
    let s = |i: usize| sorted[i - 1];
    Ok(match variant {
        MagnitudeVariant::Max => s(1),
        MagnitudeVariant::TopGap => s(1) - s(2),
        MagnitudeVariant::MedSplit => s(1) - s(n / 2),
        MagnitudeVariant::NP => {
            if rank == 0 || rank > n {
                return invalid("rank out of range");
            }
            let a = rank.min(n + 1 - rank);
            let b = rank.max(n + 1 - rank);
            s(a) - s(b)
        }
    })
}

pub fn two_sided_transform(r1: f64, r2: f64, z1: u8, x: &[f64], baseline: Option<&LinearModel>) -> Result<f64> {
    let b = baseline.ok_or_else(|| Error::InvalidState("two-sided transform needs a baseline model".into()))?;
    if z1 > 1 {
        return invalid("treatment indicator must be 0 or 1");
    }
    let z2 = 1 - z1;
    Ok((r1 - r2) * (r1 + r2 - 2.0 * b.predict(x)) * (z1 as f64 - z2 as f64))
}

/// Keeps the outcome with the largest magnitude; ties go to the lowest index.
pub fn multi_outcome_merge(per_outcome: &[(i8, f64)]) -> Result<(i8, f64)> {
    let mut best: Option<(i8, f64)> = None;
    for &(l, w) in per_outcome {
        match best {
            Some((_, bw)) if w <= bw => {}
            _ => best = Some((l, w)),
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no outcomes to merge".into()))
}

/// Unit statistics for a single set; `rng` drives tie-breaks only.
pub fn set_stats<R: Rng + ?Sized>(
    set: &MatchedSet,
    variant: MagnitudeVariant,
    mode: &SidedMode,
    rng: &mut R,
) -> Result<UnitStats> {
    let n = set.n();
    let mut per: Vec<(usize, usize, i8, f64)> = Vec::with_capacity(set.n_outcomes());
    for m in 0..set.n_outcomes() {
        let col = set.outcome(m);
        match mode {
            SidedMode::OneSided => {
                let (rank, sorted, _) = treated_rank(&col, set.treated_index, rng)?;
                let l = sign_from_rank(rank, n)?;
                let w = magnitude(variant, &sorted, rank, n)?;
                per.push((rank, masked_rank(rank, n)?, l, w));
            }
            SidedMode::TwoSided(base) => {
                if n != 2 {
                    return invalid(format!("two-sided statistics need pairs, set {} has {n} units", set.id));
                }
                let z1 = u8::from(set.treated_index == 0);
                let y = two_sided_transform(col[0], col[1], z1, &set.covariates, base.per_outcome.get(m))?;
                let tie: bool = rng.random();
                let l = match sgn(y) {
                    0 => if tie { 1 } else { -1 },
                    s => s,
                };
                let rank = if l > 0 { 1 } else { 2 };
                per.push((rank, 1, l, y.abs()));
            }
        }
    }
    let merged: Vec<(i8, f64)> = per.iter().map(|p| (p.2, p.3)).collect();
    let (l, w) = multi_outcome_merge(&merged)?;
    let pick = per.iter().position(|p| p.2 == l && p.3 == w).unwrap();
    Ok(UnitStats {
        set_id: set.id,
        n,
        rank: per[pick].0,
        masked_rank: per[pick].1,
        sign: l,
        magnitude: w,
    })
}

/// Unit statistics for every set. Each set draws tie-breaks from its own
/// substream keyed by set id, so results do not depend on set order.
pub fn compute_unit_stats(
    sets: &[MatchedSet],
    variant: MagnitudeVariant,
    mode: &SidedMode,
    subs: &Substreams,
) -> Result<Vec<UnitStats>> {
    sets.iter()
        .map(|s| {
            let mut rng = subs.stream(STREAM_TIEBREAK, s.id as u64);
            set_stats(s, variant, mode, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_examples() {
        assert_eq!(pair_stats(3.0, 1.0, 1, 0).unwrap(), (1, 2.0));
        assert_eq!(pair_stats(3.0, 1.0, 0, 1).unwrap(), (-1, 2.0));
        assert_eq!(pair_stats(2.0, 2.0, 1, 0).unwrap(), (0, 0.0));
        assert!(pair_stats(1.0, 2.0, 1, 1).is_err());
    }

    #[test]
    fn rank_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, _, p) = treated_rank(&[5.0, 3.0, 2.0, 1.0], 0, &mut rng).unwrap();
        assert_eq!((r, p), (1, 4));
        let (r, s, p) = treated_rank(&[4.0, 9.0, 2.0, 7.0, 6.0], 4, &mut rng).unwrap();
        assert_eq!(s, vec![9.0, 7.0, 6.0, 4.0, 2.0]);
        // treated value 6 sits third in (9,7,6,4,2)
        assert_eq!((r, p), (3, 3));
    }

    #[test]
    fn tie_break_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let ones = (0..n)
            .filter(|_| treated_rank(&[1.0, 1.0], 0, &mut rng).unwrap().0 == 1)
            .count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn sign_and_mask_examples() {
        assert_eq!(sign_from_rank(2, 5).unwrap(), 1);
        assert_eq!(sign_from_rank(3, 5).unwrap(), 0);
        assert_eq!(sign_from_rank(3, 4).unwrap(), -1);
        assert!(sign_from_rank(0, 4).is_err());
        assert_eq!(masked_rank(4, 5).unwrap(), 2);
        assert_eq!(masked_rank(1, 2).unwrap(), 1);
        assert_eq!(masked_rank(3, 5).unwrap(), 3);
        assert!(masked_rank(6, 5).is_err());
    }

    #[test]
    fn magnitude_examples() {
        let s = [5.0, 3.0, 2.0, 1.0];
        assert_eq!(magnitude(MagnitudeVariant::NP, &s, 1, 4).unwrap(), 4.0);
        assert_eq!(magnitude(MagnitudeVariant::TopGap, &s, 3, 4).unwrap(), 2.0);
        assert_eq!(magnitude(MagnitudeVariant::Max, &s, 3, 4).unwrap(), 5.0);
        let s5 = [9.0, 7.0, 6.0, 4.0, 2.0];
        assert_eq!(magnitude(MagnitudeVariant::MedSplit, &s5, 1, 5).unwrap(), 2.0);
        assert_eq!(magnitude(MagnitudeVariant::NP, &s5, 3, 5).unwrap(), 0.0);
        assert_eq!(magnitude(MagnitudeVariant::MedSplit, &[2.0, 1.0], 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn two_sided_examples() {
        let b = LinearModel { intercept: 0.0, coef: vec![] };
        assert_eq!(two_sided_transform(2.0, 0.0, 1, &[], Some(&b)).unwrap(), 4.0);
        assert_eq!(two_sided_transform(-2.0, 0.0, 1, &[], Some(&b)).unwrap(), 4.0);
        assert_eq!(two_sided_transform(1.0, 1.0, 0, &[], Some(&b)).unwrap(), 0.0);
        assert!(matches!(two_sided_transform(1.0, 0.0, 1, &[], None), Err(Error::InvalidState(_))));
    }

    #[test]
    fn merge_examples() {
        assert_eq!(multi_outcome_merge(&[(1, 2.0), (-1, 5.0)]).unwrap(), (-1, 5.0));
        assert_eq!(multi_outcome_merge(&[(1, 3.0)]).unwrap(), (1, 3.0));
        for _ in 0..3 {
            assert_eq!(multi_outcome_merge(&[(1, 2.0), (-1, 2.0)]).unwrap(), (1, 2.0));
        }
        assert!(multi_outcome_merge(&[]).is_err());
    }

    #[test]
    fn two_sided_rejects_multi_control() {
        let set = MatchedSet::new(0, vec![0.0], vec![vec![1.0], vec![2.0], vec![3.0]], 0).unwrap();
        let base = Baseline { per_outcome: vec![LinearModel { intercept: 0.0, coef: vec![0.0] }] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(set_stats(&set, MagnitudeVariant::NP, &SidedMode::TwoSided(base), &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn sign_antisymmetry_and_balance(n in 2usize..40) {
            let mut pos = 0;
            let mut neg = 0;
            for r in 1..=n {
                let a = sign_from_rank(r, n).unwrap();
                prop_assert_eq!(a, -sign_from_rank(n + 1 - r, n).unwrap());
                prop_assert_eq!(masked_rank(r, n).unwrap(), masked_rank(n + 1 - r, n).unwrap());
                prop_assert_eq!(a == 0, n % 2 == 1 && r == n / 2 + 1);
                if a > 0 { pos += 1 } else if a < 0 { neg += 1 }
            }
            prop_assert_eq!(pos, n / 2);
            prop_assert_eq!(neg, n / 2);
        }

        #[test]
        fn np_magnitude_masks_sign(mut v in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            v.sort_by(|a, b| b.total_cmp(a));
            let n = v.len();
            for r in 1..=n {
                let a = magnitude(MagnitudeVariant::NP, &v, r, n).unwrap();
                let b = magnitude(MagnitudeVariant::NP, &v, n + 1 - r, n).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a >= 0.0);
            }
        }
    }
}
