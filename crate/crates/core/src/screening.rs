//! Sequential masked screening.
//!
//! Groups with the weakest predicted evidence are removed one at a time while
//! the FDP estimate (kappa/gamma)(1+N)/max(1,P) is monitored. The predictor
//! only ever sees mask-safe features plus the signs of groups already removed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::glm::logistic_irls;
use crate::group_agg::GroupStats;
use crate::rng::{Substreams, STREAM_SPLIT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub alpha: f64,
    pub gamma_split: f64,
    /// Refit the predictor after this many removals; `None` means max(1, ceil(K/50)).
    pub refit_every: Option<usize>,
    /// Keep removing groups after the stopping time (diagnostics only; the
    /// selection is still taken at the stopping time).
    pub run_to_exhaustion: bool,
    /// Stop as soon as P_t < kappa/(gamma alpha); the selection is then empty.
    pub stop_when_hopeless: bool,
}

impl ScreeningConfig {
    pub fn new(alpha: f64, gamma_split: f64) -> Result<Self> {
        let c = Self { alpha, gamma_split, refit_every: None, run_to_exhaustion: false, stop_when_hopeless: false };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.gamma_split > 0.0 && self.gamma_split <= 1.0) {
            return invalid(format!("gamma_split must lie in (0,1], got {}", self.gamma_split));
        }
        if self.refit_every == Some(0) {
            return invalid("refit_every must be at least 1");
        }
        Ok(())
    }

    pub fn refit_interval(&self, k: usize) -> usize {
        self.refit_every.unwrap_or_else(|| k.div_ceil(50).max(1))
    }
}

/// Mask-safe inputs to the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFeatures {
    pub covariate_means: Vec<f64>,
    pub w: f64,
    pub size: f64,
    pub rep_size: f64,
    pub v_pos_frac: f64,
}

impl GroupFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.covariate_means.clone();
        v.extend([self.w, self.size, self.rep_size, self.v_pos_frac]);
        v
    }

    pub fn from_group(g: &GroupStats, covariate_means: Vec<f64>) -> Self {
        Self {
            covariate_means,
            w: g.magnitude,
            size: g.size() as f64,
            rep_size: g.rep_size() as f64,
            v_pos_frac: g.residual_pos_frac(),
        }
    }
}

/// One group as seen by the screening loop. `sign` is hidden until removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenGroup {
    pub id: usize,
    pub sign: i8,
    pub features: GroupFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PredictorKind {
    /// Ridge logistic regression on revealed labels; initial score until both
    /// label classes have been revealed.
    Logistic { penalty: f64 },
    /// Fixed order by W_g.
    Magnitude,
}

impl Default for PredictorKind {
    fn default() -> Self {
        PredictorKind::Logistic { penalty: 1.0 }
    }
}

/// Scores groups from mask-safe features and revealed labels.
pub struct Predictor {
    kind: PredictorKind,
    /// Standardized feature rows (constant columns removed).
    z: Vec<Vec<f64>>,
    init: Vec<f64>,
    /// Number of fits that fell back to the initial score.
    pub fallbacks: usize,
}

fn standardize_column(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return None;
    }
    let s = var.sqrt();
    Some(col.iter().map(|v| (v - m) / s).collect())
}

impl Predictor {
    pub fn new(kind: PredictorKind, feats: &[GroupFeatures]) -> Self {
        let k = feats.len();
        let rows: Vec<Vec<f64>> = feats.iter().map(|f| f.to_vec()).collect();
        let p = rows.first().map_or(0, |r| r.len());
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..p {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if let Some(c) = standardize_column(&col) {
                cols.push(c);
            }
        }
        let z: Vec<Vec<f64>> = (0..k).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let w: Vec<f64> = feats.iter().map(|f| f.w).collect();
        let v: Vec<f64> = feats.iter().map(|f| f.v_pos_frac).collect();
        let zw = standardize_column(&w).unwrap_or_else(|| vec![0.0; k]);
        let zv = standardize_column(&v).unwrap_or_else(|| vec![0.0; k]);
        let init = match kind {
            PredictorKind::Magnitude => w,
            PredictorKind::Logistic { .. } => zw.iter().zip(&zv).map(|(a, b)| a + b).collect(),
        };
        Self { kind, z, init, fallbacks: 0 }
    }

    /// Scores for every group given the labels revealed so far.
    pub fn scores(&mut self, revealed: &[Option<i8>]) -> Vec<f64> {
        let PredictorKind::Logistic { penalty } = self.kind else {
            return self.init.clone();
        };
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, r) in revealed.iter().enumerate() {
            match r {
                Some(1) => {
                    x.push(self.z[i].clone());
                    y.push(1.0);
                }
                Some(-1) => {
                    x.push(self.z[i].clone());
                    y.push(0.0);
                }
                _ => {}
            }
        }
        let pos = y.iter().filter(|&&v| v > 0.5).count();
        if pos == 0 || pos == y.len() {
            return self.init.clone();
        }
        match logistic_irls(&x, &y, penalty, 100) {
            Ok(fit) => self.z.iter().map(|r| fit.logit(r)).collect(),
            Err(e) => {
                log::debug!("predictor fit failed ({e}); using initial score");
                self.fallbacks += 1;
                self.init.clone()
            }
        }
    }
}

pub fn fdp_estimate(p: usize, n: usize, kappa: f64, gamma_split: f64) -> f64 {
    (kappa / gamma_split) * (1.0 + n as f64) / (p.max(1) as f64)
}

/// Split bits: xi_g ~ Bernoulli(gamma), drawn in input order.
pub fn draw_split<R: Rng + ?Sized>(k: usize, gamma_split: f64, rng: &mut R) -> Vec<bool> {
    (0..k).map(|_| rng.random::<f64>() < gamma_split).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSets {
    pub i1_minus: Vec<usize>,
    pub i2_minus: Vec<usize>,
    pub i_plus: Vec<usize>,
    pub xi: Vec<bool>,
}

/// Positions of I1-, I2- and I+ for the given signs.
pub fn init_split<R: Rng + ?Sized>(signs: &[i8], gamma_split: f64, rng: &mut R) -> SplitSets {
    let xi = draw_split(signs.len(), gamma_split, rng);
    split_sets(signs, xi)
}

pub fn split_sets(signs: &[i8], xi: Vec<bool>) -> SplitSets {
    let mut s = SplitSets { xi, ..Default::default() };
    for (i, &l) in signs.iter().enumerate() {
        if l > 0 {
            s.i_plus.push(i);
        } else if l < 0 {
            if s.xi[i] {
                s.i2_minus.push(i);
            } else {
                s.i1_minus.push(i);
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Group removed to reach this step (`None` at t = 0).
    pub removed: Option<usize>,
    pub p: usize,
    pub n: usize,
    pub fdp_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningTrace {
    pub xi: Vec<bool>,
    /// Group ids in O_0 (removed before the loop starts).
    pub initial_out: Vec<usize>,
    /// Group ids in removal order.
    pub order: Vec<usize>,
    pub steps: Vec<TraceStep>,
    /// Stopping step; `None` if the estimate never reached alpha.
    pub tau: Option<usize>,
    pub kappa: f64,
    pub gamma_split: f64,
    pub alpha: f64,
}

impl ScreeningTrace {
    /// First t with fdp_hat <= alpha or P_t < kappa/(gamma alpha).
    pub fn early_stop_time(&self) -> usize {
        early_stop_time(self, self.kappa, self.gamma_split, self.alpha)
    }

    /// Group ids in O_t.
    pub fn screened_out_at(&self, t: usize) -> Vec<usize> {
        let mut v = self.initial_out.clone();
        v.extend_from_slice(&self.order[..t.min(self.order.len())]);
        v
    }
}

pub fn early_stop_time(trace: &ScreeningTrace, kappa: f64, gamma_split: f64, alpha: f64) -> usize {
    let thr = kappa / (gamma_split * alpha);
    for s in &trace.steps {
        if s.fdp_hat <= alpha || (s.p as f64) < thr {
            return s.t;
        }
    }
    trace.steps.last().map_or(0, |s| s.t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningResult {
    /// Selected group ids, ascending.
    pub selection: Vec<usize>,
    pub trace: ScreeningTrace,
}

/// The shared kappa: the maximum over groups.
pub fn shared_kappa(groups: &[GroupStats]) -> f64 {
    groups.iter().map(|g| g.kappa).fold(0.0, f64::max)
}

/// Runs the screening loop with fixed split bits `xi` (aligned with `groups`).
pub fn screen_with_split(
    groups: &[ScreenGroup],
    xi: &[bool],
    kappa: f64,
    cfg: &ScreeningConfig,
    predictor: PredictorKind,
) -> Result<ScreeningResult> {
    cfg.validate()?;
    let k = groups.len();
    if k == 0 {
        return invalid("screening needs at least one group");
    }
    if xi.len() != k {
        return invalid("split bits do not match the number of groups");
    }
    let feats: Vec<GroupFeatures> = groups.iter().map(|g| g.features.clone()).collect();
    let mut pred = Predictor::new(predictor, &feats);
    let signs: Vec<i8> = groups.iter().map(|g| g.sign).collect();
    let split = split_sets(&signs, xi.to_vec());

    let mut removed = vec![false; k];
    let mut revealed: Vec<Option<i8>> = vec![None; k];
    for &i in &split.i1_minus {
        removed[i] = true;
        revealed[i] = Some(signs[i]);
    }
    let mut p = signs.iter().zip(&removed).filter(|(s, r)| **s > 0 && !**r).count();
    let mut n = signs.iter().zip(&removed).filter(|(s, r)| **s < 0 && !**r).count();

    let refit_every = cfg.refit_interval(k);
    let mut scores = pred.scores(&revealed);
    let mut since_refit = 0;
    let mut steps = Vec::new();
    let mut order = Vec::new();
    let mut tau = None;
    let mut selection = Vec::new();
    let hopeless = kappa / (cfg.gamma_split * cfg.alpha);
    let mut last_removed = None;
    let mut t = 0;
    loop {
        let fdp_hat = fdp_estimate(p, n, kappa, cfg.gamma_split);
        steps.push(TraceStep { t, removed: last_removed, p, n, fdp_hat });
        if tau.is_none() && fdp_hat <= cfg.alpha {
            tau = Some(t);
            selection = (0..k).filter(|&i| !removed[i] && signs[i] > 0).map(|i| groups[i].id).collect();
            if !cfg.run_to_exhaustion {
                break;
            }
        }
        if tau.is_none() && cfg.stop_when_hopeless && (p as f64) < hopeless {
            break;
        }
        // argmin over remaining groups; ties go to the lowest id
        let mut best: Option<usize> = None;
        for i in 0..k {
            if removed[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let ord = scores[i].total_cmp(&scores[b]).then(groups[i].id.cmp(&groups[b].id));
                    if ord.is_lt() { Some(i) } else { Some(b) }
                }
            };
        }
        let Some(g) = best else { break };
        removed[g] = true;
        revealed[g] = Some(signs[g]);
        match signs[g] {
            s if s > 0 => p -= 1,
            s if s < 0 => n -= 1,
            _ => {}
        }
        order.push(groups[g].id);
        last_removed = Some(groups[g].id);
        since_refit += 1;
        if since_refit == refit_every {
            scores = pred.scores(&revealed);
            since_refit = 0;
        }
        t += 1;
    }
    selection.sort_unstable();
    let mut initial_out: Vec<usize> = split.i1_minus.iter().map(|&i| groups[i].id).collect();
    initial_out.sort_unstable();
    Ok(ScreeningResult {
        selection,
        trace: ScreeningTrace {
            xi: split.xi,
            initial_out,
            order,
            steps,
            tau,
            kappa,
            gamma_split: cfg.gamma_split,
            alpha: cfg.alpha,
        },
    })
}

/// Draws split bits from the run's split substream, then screens.
pub fn screen(
    groups: &[ScreenGroup],
    kappa: f64,
    cfg: &ScreeningConfig,
    predictor: PredictorKind,
    subs: &Substreams,
) -> Result<ScreeningResult> {
    let mut rng = subs.stream(STREAM_SPLIT, 0);
    let xi = draw_split(groups.len(), cfg.gamma_split, &mut rng);
    screen_with_split(groups, &xi, kappa, cfg, predictor)
}

/// Screening inputs for aggregated groups; `covariate_means[k]` belongs to group k.
pub fn screen_groups(groups: &[GroupStats], covariate_means: &[Vec<f64>]) -> Vec<ScreenGroup> {
    groups
        .iter()
        .zip(covariate_means)
        .map(|(g, c)| ScreenGroup { id: g.group_id, sign: g.sign, features: GroupFeatures::from_group(g, c.clone()) })
        .collect()
}
