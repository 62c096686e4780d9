//! Unit-level observational data: loading, propensity scores, and greedy
//! 1:k nearest-neighbor matching on the logit scale.

use std::io::Read;
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::glm::{logistic_irls, sigmoid, LogisticFit};
use crate::model::MatchedSet;
use crate::stats::{mean, sd};

/// Observational units: one row per unit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnitTable {
    pub unit_ids: Vec<String>,
    pub treatment: Vec<u8>,
    /// `outcomes[i][m]`.
    pub outcomes: Vec<Vec<f64>>,
    pub covariates: Vec<Vec<f64>>,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Data rows (1-based, header excluded) dropped for missing values.
    pub dropped_rows: Vec<usize>,
}

impl UnitTable {
    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn is_outcome_column(name: &str) -> bool {
    name.strip_prefix("y_").is_some_and(|r| !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()))
}

pub fn load_units(path: &Path) -> Result<UnitTable> {
    let f = std::fs::File::open(path)?;
    load_units_from_reader(f)
}

/// Parses the unit CSV: `unit_id`, `treatment`, outcome columns `y_1..y_M`,
/// every other column a numeric covariate. Rows with missing values are
/// dropped and counted; unparsable values are fatal.
pub fn load_units_from_reader<R: Read>(reader: R) -> Result<UnitTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("unit_id").ok_or_else(|| Error::Data("missing column unit_id".into()))?;
    let t_col = col("treatment").ok_or_else(|| Error::Data("missing column treatment".into()))?;
    let mut y_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| is_outcome_column(h))
        .map(|(j, h)| (h[2..].parse::<usize>().unwrap_or(0), j))
        .collect();
    y_cols.sort_unstable();
    if y_cols.is_empty() {
        return Err(Error::Data("no outcome columns (expected y_1, y_2, ...)".into()));
    }
    let y_idx: Vec<usize> = y_cols.iter().map(|&(_, j)| j).collect();
    let x_idx: Vec<usize> = (0..headers.len()).filter(|j| *j != id_col && *j != t_col && !y_idx.contains(j)).collect();
    let mut t = UnitTable {
        outcome_names: y_idx.iter().map(|&j| headers[j].to_string()).collect(),
        covariate_names: x_idx.iter().map(|&j| headers[j].to_string()).collect(),
        ..UnitTable::default()
    };
    let mut problems = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields.iter().any(|s| is_missing(s)) {
            t.dropped_rows.push(row);
            continue;
        }
        let num = |j: usize| -> std::result::Result<f64, String> {
            fields[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("row {row}: column {} has non-numeric value {:?}", &headers[j], fields[j]))
        };
        let treat = match fields[t_col] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                problems.push(format!("row {row}: treatment must be 0 or 1, got {other:?}"));
                continue;
            }
        };
        let ys: std::result::Result<Vec<f64>, String> = y_idx.iter().map(|&j| num(j)).collect();
        let xs: std::result::Result<Vec<f64>, String> = x_idx.iter().map(|&j| num(j)).collect();
        match (ys, xs) {
            (Ok(ys), Ok(xs)) => {
                t.unit_ids.push(fields[id_col].to_string());
                t.treatment.push(treat);
                t.outcomes.push(ys);
                t.covariates.push(xs);
            }
            (Err(e), _) | (_, Err(e)) => problems.push(e),
        }
    }
    if !problems.is_empty() {
        let shown: Vec<_> = problems.iter().take(10).cloned().collect();
        return Err(Error::Data(format!("{} malformed rows:\n{}", problems.len(), shown.join("\n"))));
    }
    if !t.dropped_rows.is_empty() {
        warn!("dropped {} rows with missing values", t.dropped_rows.len());
    }
    if t.is_empty() {
        return Err(Error::Data("no complete rows".into()));
    }
    if t.n_treated() == 0 {
        return Err(Error::Data("no treated units".into()));
    }
    if t.n_treated() == t.len() {
        return Err(Error::Data("no control units".into()));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub fit: LogisticFit,
    /// Standard errors of (intercept, slopes) from the inverse Hessian.
    pub se: Vec<f64>,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub ridge_fallback: bool,
}

const MAX_ITER: usize = 100;
const FALLBACK_RIDGE: f64 = 1e-6;

/// Maximum-likelihood logistic propensity model. Falls back to a 1e-6 ridge
/// penalty when the plain fit fails or the fitted probabilities reach 0 or 1.
pub fn propensity_fit(covariates: &[Vec<f64>], treatment: &[u8]) -> Result<PropensityFit> {
    if covariates.len() != treatment.len() || covariates.is_empty() {
        return invalid("propensity_fit: covariates and treatment must be nonempty and aligned");
    }
    let y: Vec<f64> = treatment.iter().map(|&t| t as f64).collect();
    let n1 = y.iter().filter(|&&v| v == 1.0).count();
    if n1 == 0 || n1 == y.len() {
        return Err(Error::Data("propensity model needs both treated and control units".into()));
    }
    let boundary = |f: &LogisticFit| {
        covariates.iter().any(|x| {
            let p = f.prob(x);
            p < 1e-10 || p > 1.0 - 1e-10
        })
    };
    let (fit, fallback) = match logistic_irls(covariates, &y, 0.0, MAX_ITER) {
        Ok(f) if !boundary(&f) => (f, false),
        first => {
            let reason = match first {
                Ok(_) => "fitted probabilities at the boundary".to_string(),
                Err(e) => e.to_string(),
            };
            warn!("propensity fit: {reason}; retrying with ridge {FALLBACK_RIDGE}");
            let f = logistic_irls(covariates, &y, FALLBACK_RIDGE, MAX_ITER)
                .map_err(|e| Error::Convergence(format!("propensity fit failed after ridge fallback: {e}")))?;
            (f, true)
        }
    };
    let logits: Vec<f64> = covariates.iter().map(|x| fit.logit(x)).collect();
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let p = fit.coef.len();
    let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
    for (x, &pr) in covariates.iter().zip(&probs) {
        let w = pr * (1.0 - pr);
        let row: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
        for a in 0..=p {
            for b in 0..=p {
                h[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for j in 1..=p {
        h[(j, j)] += fit.penalty;
    }
    let se = match h.try_inverse() {
        Some(inv) => (0..=p).map(|j| inv[(j, j)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p + 1],
    };
    Ok(PropensityFit { fit, se, probs, logits, ridge_fallback: fallback })
}

/// How set-level covariates are formed from the matched units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SetCovariates {
    #[default]
    Treated,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Sets with the treated unit at index 0 and controls by increasing distance.
    pub sets: Vec<MatchedSet>,
    /// Table row indices of the units in each set, aligned with `sets`.
    pub members: Vec<Vec<usize>>,
    /// Table rows of treated units left unmatched.
    pub unmatched_treated: Vec<usize>,
}

/// Greedy nearest-neighbor matching without replacement.
///
/// Treated units are processed in descending logit order (ties in random
/// order); each takes its `k` nearest unused controls, all within
/// `caliper * sd(logit)`, or is dropped.
pub fn nn_match<R: Rng + ?Sized>(
    table: &UnitTable,
    logits: &[f64],
    k: usize,
    caliper: f64,
    set_covariates: SetCovariates,
    rng: &mut R,
) -> Result<MatchResult> {
    if k == 0 {
        return invalid("matching ratio k must be at least 1");
    }
    if !(caliper >= 0.0) {
        return invalid("caliper must be nonnegative");
    }
    if logits.len() != table.len() {
        return invalid("logits and table differ in length");
    }
    let width = caliper * sd(logits);
    let mut treated: Vec<usize> = (0..table.len()).filter(|&i| table.treatment[i] == 1).collect();
    treated.shuffle(rng);
    treated.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut controls: Vec<usize> = (0..table.len()).filter(|&i| table.treatment[i] == 0).collect();
    controls.sort_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(a.cmp(&b)));
    let cl: Vec<f64> = controls.iter().map(|&i| logits[i]).collect();
    let mut used = vec![false; controls.len()];

    let mut res = MatchResult { sets: vec![], members: vec![], unmatched_treated: vec![] };
    for &t in &treated {
        let lt = logits[t];
        let mut right = cl.partition_point(|&v| v < lt);
        let mut left = right; // candidates left of `left` are at positions < left
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        while picked.len() < k {
            while left > 0 && used[left - 1] {
                left -= 1;
            }
            while right < cl.len() && used[right] {
                right += 1;
            }
            let dl = if left > 0 { lt - cl[left - 1] } else { f64::INFINITY };
            let dr = if right < cl.len() { cl[right] - lt } else { f64::INFINITY };
            let (pos, dist) = if dl <= dr { (left.wrapping_sub(1), dl) } else { (right, dr) };
            if !(dist <= width) {
                break;
            }
            picked.push(pos);
            used[pos] = true;
        }
        if picked.len() < k {
            for &p in &picked {
                used[p] = false;
            }
            res.unmatched_treated.push(t);
            continue;
        }
        let mut rows = vec![t];
        rows.extend(picked.iter().map(|&p| controls[p]));
        let cov = match set_covariates {
            SetCovariates::Treated => table.covariates[t].clone(),
            SetCovariates::Average => {
                let d = table.covariates[t].len();
                (0..d).map(|j| mean(&rows.iter().map(|&r| table.covariates[r][j]).collect::<Vec<_>>())).collect()
            }
        };
        let outcomes = rows.iter().map(|&r| table.outcomes[r].clone()).collect();
        res.sets.push(MatchedSet::new(res.sets.len() + 1, cov, outcomes, 0)?);
        res.members.push(rows);
    }
    if res.sets.is_empty() {
        return Err(Error::Data("no treated unit could be matched within the caliper".into()));
    }
    if !res.unmatched_treated.is_empty() {
        info!("{} treated units dropped for lack of in-caliper controls", res.unmatched_treated.len());
    }
    Ok(res)
}

/// Absolute standardized mean difference per covariate, before and after matching.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Balance {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
}

/// Both differences are scaled by the pre-matching pooled standard deviation
/// so the comparison reflects the change in means only.
pub fn balance(table: &UnitTable, matched: &MatchResult) -> Vec<Balance> {
    let d = table.covariate_names.len();
    let col = |rows: &[usize], j: usize| -> Vec<f64> { rows.iter().map(|&r| table.covariates[r][j]).collect() };
    let all_t: Vec<usize> = (0..table.len()).filter(|&i| table.treatment[i] == 1).collect();
    let all_c: Vec<usize> = (0..table.len()).filter(|&i| table.treatment[i] == 0).collect();
    let m_t: Vec<usize> = matched.members.iter().map(|m| m[0]).collect();
    let m_c: Vec<usize> = matched.members.iter().flat_map(|m| m[1..].iter().copied()).collect();
    (0..d)
        .map(|j| {
            let (xt, xc) = (col(&all_t, j), col(&all_c, j));
            let pooled = ((sd(&xt).powi(2) + sd(&xc).powi(2)) / 2.0).sqrt();
            let scale = if pooled > 0.0 { pooled } else { 1.0 };
            Balance {
                covariate: table.covariate_names[j].clone(),
                smd_before: (mean(&xt) - mean(&xc)).abs() / scale,
                smd_after: (mean(&col(&m_t, j)) - mean(&col(&m_c, j))).abs() / scale,
            }
        })
        .collect()
}
