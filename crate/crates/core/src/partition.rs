//! Subgroup partitions: random (simulation), a variance-reduction tree on a
//! sign-free response, and OLS-based covariate screening.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::glm::ols;
use crate::model::{Partition, Provenance, TreeNode, UnitStats};

/// Splits important and unimportant sets separately into near-equal groups.
///
/// `labels[i]` is the importance bit of set `ids[i]`.
pub fn random_partition<R: Rng + ?Sized>(
    ids: &[usize],
    labels: &[bool],
    k: usize,
    p_imp: f64,
    rng: &mut R,
) -> Result<Partition> {
    if k < 2 {
        return invalid("random partition needs at least 2 groups");
    }
    if ids.len() != labels.len() {
        return invalid("ids and labels differ in length");
    }
    let k_imp = (k as f64 * p_imp).floor() as usize;
    let mut imp: Vec<usize> = ids.iter().zip(labels).filter(|(_, &l)| l).map(|(&i, _)| i).collect();
    let mut unimp: Vec<usize> = ids.iter().zip(labels).filter(|(_, &l)| !l).map(|(&i, _)| i).collect();
    let k_un = k - k_imp.min(k);
    if k_imp > imp.len() || k_un > unimp.len() {
        return invalid(format!(
            "{k} groups ({k_imp} important) exceed available sets ({} important, {} other)",
            imp.len(),
            unimp.len()
        ));
    }
    if (k_imp == 0 && !imp.is_empty()) || (k_un == 0 && !unimp.is_empty()) {
        return invalid("a label class has sets but no groups");
    }
    imp.shuffle(rng);
    unimp.shuffle(rng);
    let mut groups = chunk(&imp, k_imp);
    groups.extend(chunk(&unimp, k_un));
    Partition::new(groups, Provenance::Random, ids)
}

fn chunk(v: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![];
    }
    let base = v.len() / k;
    let extra = v.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for g in 0..k {
        let len = base + usize::from(g < extra);
        out.push(v[at..at + len].to_vec());
        at += len;
    }
    out
}

/// A per-set response that carries no sign information.
#[derive(Debug, Clone, PartialEq)]
pub struct SignFreeResponse(Vec<f64>);

impl SignFreeResponse {
    pub fn from_magnitudes(units: &[UnitStats]) -> Self {
        Self(units.iter().map(|u| u.magnitude).collect())
    }

    /// Any statistic that is invariant to which unit is treated, e.g. |R1 - R2|.
    pub fn from_treatment_free(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub minsplit: usize,
    pub minbucket: usize,
    pub maxdepth: usize,
    pub median_only: bool,
    pub gain_threshold: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { minsplit: 20, minbucket: 7, maxdepth: 30, median_only: false, gain_threshold: 0.01 }
    }
}

const MAX_CANDIDATES: usize = 256;

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let s: f64 = idx.iter().map(|&i| y[i]).sum();
    let s2: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    (s2 - s * s / n).max(0.0)
}

struct Split {
    variable: usize,
    value: f64,
    child_sse: f64,
}

fn best_split(x: &[Vec<f64>], y: &[f64], idx: &[usize], cfg: &TreeConfig) -> Option<Split> {
    let d = x.first().map_or(0, |r| r.len());
    let mut best: Option<Split> = None;
    for j in 0..d {
        let mut ord: Vec<usize> = idx.to_vec();
        ord.sort_by(|&a, &b| x[a][j].total_cmp(&x[b][j]).then(a.cmp(&b)));
        let n = ord.len();
        let xs: Vec<f64> = ord.iter().map(|&i| x[i][j]).collect();
        // prefix sums of y and y^2 in x order
        let mut ps = vec![0.0; n + 1];
        let mut ps2 = vec![0.0; n + 1];
        for (k, &i) in ord.iter().enumerate() {
            ps[k + 1] = ps[k] + y[i];
            ps2[k + 1] = ps2[k] + y[i] * y[i];
        }
        // candidate cut positions: left = ord[..c]
        let mut cuts: Vec<usize> = Vec::new();
        if cfg.median_only {
            let med = crate::stats::quantile(&xs, 0.5);
            let c = xs.partition_point(|&v| v <= med);
            cuts.push(c);
        } else {
            for c in 1..n {
                if xs[c] > xs[c - 1] {
                    cuts.push(c);
                }
            }
            if cuts.len() > MAX_CANDIDATES {
                let step = cuts.len() as f64 / MAX_CANDIDATES as f64;
                cuts = (0..MAX_CANDIDATES).map(|t| cuts[(t as f64 * step) as usize]).collect();
            }
        }
        for c in cuts {
            if c < cfg.minbucket || n - c < cfg.minbucket || c == 0 || c == n {
                continue;
            }
            let (nl, nr) = (c as f64, (n - c) as f64);
            let sl = ps2[c] - ps[c] * ps[c] / nl;
            let sr = (ps2[n] - ps2[c]) - (ps[n] - ps[c]).powi(2) / nr;
            let child = sl.max(0.0) + sr.max(0.0);
            let value = if cfg.median_only { xs[c - 1] } else { 0.5 * (xs[c - 1] + xs[c]) };
            if best.as_ref().is_none_or(|b| child < b.child_sse - 1e-12 * (1.0 + b.child_sse.abs())) {
                best = Some(Split { variable: j, value, child_sse: child });
            }
        }
    }
    best
}

fn grow(
    x: &[Vec<f64>],
    y: &[f64],
    idx: Vec<usize>,
    depth: usize,
    cfg: &TreeConfig,
    leaves: &mut Vec<Vec<usize>>,
) -> TreeNode {
    let size = idx.len();
    let leaf = |idx: Vec<usize>, leaves: &mut Vec<Vec<usize>>| {
        leaves.push(idx);
        TreeNode::Leaf { group: leaves.len() - 1, size }
    };
    if size < cfg.minsplit || depth >= cfg.maxdepth {
        return leaf(idx, leaves);
    }
    let parent = sse(y, &idx);
    if parent <= 1e-12 * (1.0 + y.iter().map(|v| v * v).sum::<f64>()) {
        return leaf(idx, leaves);
    }
    let Some(sp) = best_split(x, y, &idx, cfg) else {
        return leaf(idx, leaves);
    };
    if (parent - sp.child_sse) / parent < cfg.gain_threshold {
        return leaf(idx, leaves);
    }
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][sp.variable] <= sp.value);
    if l.len() < cfg.minbucket || r.len() < cfg.minbucket {
        return leaf(idx, leaves);
    }
    let left = grow(x, y, l, depth + 1, cfg, leaves);
    let right = grow(x, y, r, depth + 1, cfg, leaves);
    TreeNode::Split { variable: sp.variable, value: sp.value, size, left: Box::new(left), right: Box::new(right) }
}

/// Recursive binary partition maximizing variance reduction of the response.
pub fn tree_partition(
    ids: &[usize],
    covariates: &[Vec<f64>],
    response: &SignFreeResponse,
    cfg: &TreeConfig,
) -> Result<Partition> {
    let y = response.values();
    if ids.len() != covariates.len() || ids.len() != y.len() || ids.is_empty() {
        return invalid("tree_partition: ids, covariates and response must be nonempty and aligned");
    }
    if cfg.minbucket == 0 {
        return invalid("minbucket must be at least 1");
    }
    let mut leaves = Vec::new();
    let root = grow(covariates, y, (0..ids.len()).collect(), 0, cfg, &mut leaves);
    let groups: Vec<Vec<usize>> = leaves.into_iter().map(|g| g.into_iter().map(|i| ids[i]).collect()).collect();
    Partition::new(groups, Provenance::Tree(root), ids)
}

/// Covariates ranked by two-sided OLS p-value; the first `keep` are returned.
/// Collinear columns are dropped by the fit and rank last.
pub fn covariate_screen(covariates: &[Vec<f64>], response: &[f64], keep: usize) -> Result<Vec<usize>> {
    let d = covariates.first().map_or(0, |r| r.len());
    if keep > d {
        return invalid(format!("keep = {keep} exceeds the {d} covariates"));
    }
    let fit = ols(covariates, response)?;
    let mut ranked: Vec<(usize, f64)> = fit.kept.iter().zip(&fit.p_values).map(|(&j, &p)| (j, p)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.into_iter().map(|(j, _)| j).collect();
    for j in 0..d {
        if !out.contains(&j) {
            out.push(j);
        }
    }
    out.truncate(keep);
    if out.len() < keep {
        return Err(Error::Data("covariate screening produced too few columns".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn random_partition_counts() {
        let ids: Vec<usize> = (0..1200).collect();
        let labels: Vec<bool> = (0..1200).map(|i| i < 200).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_partition(&ids, &labels, 40, 0.3, &mut rng).unwrap();
        assert_eq!(p.len(), 40);
        let imp_groups = p.groups.iter().filter(|g| g.iter().all(|&i| i < 200)).count();
        assert_eq!(imp_groups, 12);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(p, random_partition(&ids, &labels, 40, 0.3, &mut rng2).unwrap());
    }

    #[test]
    fn random_partition_equal_sizes() {
        let ids: Vec<usize> = (0..100).collect();
        let labels: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_partition(&ids, &labels, 20, 0.3, &mut rng).unwrap();
        assert!(p.groups.iter().all(|g| g.len() == 5));
        assert!(random_partition(&ids, &labels, 200, 0.3, &mut rng).is_err());
    }

    #[test]
    fn tree_constant_response_is_one_group() {
        let ids: Vec<usize> = (0..50).collect();
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let y = SignFreeResponse::from_treatment_free(vec![1.0; 50]);
        let p = tree_partition(&ids, &x, &y, &TreeConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn tree_finds_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] > 0.0 { 1.0 } else { 0.0 }).collect();
        let ids: Vec<usize> = (0..n).collect();
        let cfg = TreeConfig { minsplit: 20, minbucket: 7, maxdepth: 5, median_only: false, gain_threshold: 0.001 };
        let p = tree_partition(&ids, &x, &SignFreeResponse::from_treatment_free(y), &cfg).unwrap();
        assert_eq!(p.len(), 2);
        match &p.provenance {
            Provenance::Tree(TreeNode::Split { variable, value, .. }) => {
                assert_eq!(*variable, 0);
                assert!(value.abs() < 0.1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tree_minbucket_all_is_single_group() {
        let ids: Vec<usize> = (0..30).collect();
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let cfg = TreeConfig { minsplit: 2, minbucket: 30, ..TreeConfig::default() };
        let p = tree_partition(&ids, &x, &SignFreeResponse::from_treatment_free(y), &cfg).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn tree_leaves_respect_minbucket() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 300;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].abs() + 0.5 * r[1] + 0.3 * { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
        let ids: Vec<usize> = (0..n).collect();
        for median_only in [false, true] {
            let cfg = TreeConfig { minsplit: 10, minbucket: 4, maxdepth: 10, median_only, gain_threshold: 0.001 };
            let p = tree_partition(&ids, &x, &SignFreeResponse::from_treatment_free(y.clone()), &cfg).unwrap();
            assert!(p.len() > 2);
            assert!(p.groups.iter().all(|g| g.len() >= 4));
        }
    }

    #[test]
    fn screen_finds_signal_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[2] + { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
        assert_eq!(covariate_screen(&x, &y, 1).unwrap(), vec![2]);
        let mut all = covariate_screen(&x, &y, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(covariate_screen(&x, &y, 5).is_err());
    }
}
