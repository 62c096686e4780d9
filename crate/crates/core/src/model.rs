//! Domain types and the sensitivity model's probability bounds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Rosenbaum's Γ: within a matched set, treatment odds differ by at most Γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityModel {
    gamma: f64,
}

impl SensitivityModel {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 1.0 {
            return invalid(format!("gamma must be a finite value >= 1, got {gamma}"));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Bounds on the probability that any particular unit of an n-set is the treated one.
    pub fn sign_prob_bounds(&self, n: usize) -> Result<(f64, f64)> {
        sign_prob_bounds(*self, n)
    }

    /// Worst-case probability of a positive pair sign, Γ/(1+Γ).
    pub fn pair_pstar(&self) -> f64 {
        self.gamma / (1.0 + self.gamma)
    }
}

pub fn sign_prob_bounds(model: SensitivityModel, n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return invalid(format!("set size must be at least 2, got {n}"));
    }
    let g = model.gamma;
    let m = (n - 1) as f64;
    Ok((1.0 / (1.0 + m * g), g / (m + g)))
}

/// One matched set: shared covariates, an n x M outcome matrix, one treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub id: usize,
    pub covariates: Vec<f64>,
    /// `outcomes[j][m]` is outcome m of unit j.
    pub outcomes: Vec<Vec<f64>>,
    /// Zero-based index of the treated unit.
    pub treated_index: usize,
}

impl MatchedSet {
    pub fn new(
        id: usize,
        covariates: Vec<f64>,
        outcomes: Vec<Vec<f64>>,
        treated_index: usize,
    ) -> Result<Self> {
        let s = Self { id, covariates, outcomes, treated_index };
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.first().map_or(0, |r| r.len())
    }

    /// Column m of the outcome matrix.
    pub fn outcome(&self, m: usize) -> Vec<f64> {
        self.outcomes.iter().map(|r| r[m]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.outcomes.len();
        if n < 2 {
            return Err(Error::Data(format!("set {}: needs at least 2 units, has {n}", self.id)));
        }
        if self.treated_index >= n {
            return Err(Error::Data(format!(
                "set {}: treated index {} out of range",
                self.id, self.treated_index
            )));
        }
        let m = self.outcomes[0].len();
        if m == 0 {
            return Err(Error::Data(format!("set {}: no outcomes", self.id)));
        }
        for row in &self.outcomes {
            if row.len() != m {
                return Err(Error::Data(format!("set {}: ragged outcome matrix", self.id)));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("set {}: non-finite outcome", self.id)));
            }
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("set {}: non-finite covariate", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        group: usize,
        size: usize,
    },
    Split {
        variable: usize,
        value: f64,
        size: usize,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    /// Indented text rendering; `names` labels covariate columns when available.
    pub fn describe(&self, names: &[String]) -> String {
        let mut out = String::new();
        self.describe_into(names, 0, &mut out);
        out
    }

    fn describe_into(&self, names: &[String], depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match self {
            TreeNode::Leaf { group, size } => {
                out.push_str(&format!("{pad}leaf group={group} n={size}\n"));
            }
            TreeNode::Split { variable, value, size, left, right } => {
                let name = names.get(*variable).cloned().unwrap_or_else(|| format!("x{}", variable + 1));
                out.push_str(&format!("{pad}{name} <= {value:.6} (n={size})\n"));
                left.describe_into(names, depth + 1, out);
                out.push_str(&format!("{pad}{name} > {value:.6}\n"));
                right.describe_into(names, depth + 1, out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Random,
    Tree(TreeNode),
    External,
}

/// Disjoint, covering, nonempty groups of matched-set ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

impl Partition {
    /// Builds a partition and checks it against the declared universe of set ids.
    pub fn new(mut groups: Vec<Vec<usize>>, provenance: Provenance, universe: &[usize]) -> Result<Self> {
        for g in groups.iter_mut() {
            g.sort_unstable();
        }
        let p = Self { groups, provenance };
        p.validate(universe)?;
        Ok(p)
    }

    pub fn validate(&self, universe: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Data(format!("group {k} is empty")));
            }
            for &id in g {
                if !seen.insert(id) {
                    return Err(Error::Data(format!("set {id} appears in more than one group")));
                }
            }
        }
        let uni: BTreeSet<usize> = universe.iter().copied().collect();
        if uni != seen {
            let missing: Vec<_> = uni.difference(&seen).take(5).collect();
            let extra: Vec<_> = seen.difference(&uni).take(5).collect();
            return Err(Error::Data(format!(
                "partition does not cover the set ids exactly (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Map from set id to group index.
    pub fn membership(&self) -> std::collections::HashMap<usize, usize> {
        let mut m = std::collections::HashMap::new();
        for (k, g) in self.groups.iter().enumerate() {
            for &id in g {
                m.insert(id, k);
            }
        }
        m
    }
}

/// Per-set sign/magnitude decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub set_id: usize,
    /// Set size n.
    pub n: usize,
    /// Descending rank of the treated outcome, 1-based.
    pub rank: usize,
    pub masked_rank: usize,
    pub sign: i8,
    pub magnitude: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(g: f64) -> SensitivityModel {
        SensitivityModel::new(g).unwrap()
    }

    #[test]
    fn bound_examples() {
        assert_eq!(sign_prob_bounds(m(1.0), 2).unwrap(), (0.5, 0.5));
        assert_eq!(sign_prob_bounds(m(3.0), 2).unwrap(), (0.25, 0.75));
        assert_eq!(sign_prob_bounds(m(3.0), 4).unwrap(), (0.1, 0.5));
    }

    #[test]
    fn bound_errors() {
        assert!(SensitivityModel::new(0.5).is_err());
        assert!(SensitivityModel::new(f64::INFINITY).is_err());
        assert!(sign_prob_bounds(m(2.0), 1).is_err());
    }

    #[test]
    fn partition_validation() {
        let u = [1, 2, 3];
        assert!(Partition::new(vec![vec![1, 2], vec![3]], Provenance::External, &u).is_ok());
        assert!(Partition::new(vec![vec![1, 2], vec![2, 3]], Provenance::External, &u).is_err());
        assert!(Partition::new(vec![vec![1, 2]], Provenance::External, &u).is_err());
        assert!(Partition::new(vec![vec![1, 2, 3], vec![]], Provenance::External, &u).is_err());
    }

    #[test]
    fn matched_set_checks() {
        assert!(MatchedSet::new(0, vec![], vec![vec![1.0], vec![2.0]], 0).is_ok());
        assert!(MatchedSet::new(0, vec![], vec![vec![1.0]], 0).is_err());
        assert!(MatchedSet::new(0, vec![], vec![vec![1.0], vec![2.0]], 2).is_err());
        assert!(MatchedSet::new(0, vec![], vec![vec![1.0], vec![f64::NAN]], 0).is_err());
    }
}
