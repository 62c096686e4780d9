//! Conditional calibration: post hoc augmentation of a screening selection.
//!
//! For each unselected group g, screening is replayed with g's hidden sign
//! forced to each value. From those replays we get the budget function zeta,
//! and g is added when its worst-case expectation over null-compatible sign
//! probabilities is nonpositive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_agg::GroupStats;
use crate::screening::{
    screen_groups, screen_with_split, PredictorKind, ScreenGroup, ScreeningConfig, ScreeningResult,
};
use crate::stats::{binom_sf, binom_tail_ge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CalibrationVariant {
    #[default]
    Light,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub variant: CalibrationVariant,
    /// Largest group size handled by the Full variant; larger groups use Light.
    pub full_group_limit: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { variant: CalibrationVariant::Light, full_group_limit: 10 }
    }
}

/// A_g = -log P(Bin(N', pstar) >= C).
pub fn evidence_score(sign: i8, residual: &[i8], eta: usize, pstar: f64) -> f64 {
    let nonzero = residual.iter().filter(|&&v| v != 0).count();
    let pos = residual.iter().filter(|&&v| v > 0).count();
    let n = nonzero + eta + 1;
    let c = pos + if sign > 0 { eta + 1 } else { 0 };
    -binom_tail_ge(n, c, pstar).ln()
}

/// (P(L_g = +1) at the lowest and highest null-compatible unit probabilities.
pub fn group_sign_bounds(q: usize, eta: usize, pstar: f64) -> (f64, f64) {
    if q == 0 {
        return (0.0, 0.0);
    }
    (binom_sf(q, eta, 1.0 - pstar), binom_sf(q, eta, pstar))
}

/// Everything needed to replay screening deterministically.
pub struct Replayer<'a> {
    pub groups: &'a [GroupStats],
    pub covariate_means: &'a [Vec<f64>],
    pub xi: &'a [bool],
    pub kappa: f64,
    pub config: ScreeningConfig,
    pub predictor: PredictorKind,
}

impl Replayer<'_> {
    fn base(&self) -> Vec<ScreenGroup> {
        screen_groups(self.groups, self.covariate_means)
    }

    fn cfg(&self) -> ScreeningConfig {
        ScreeningConfig { run_to_exhaustion: false, stop_when_hopeless: true, ..self.config }
    }

    /// Replays with group at position `pos` replaced by `g`.
    pub fn replay_with(&self, pos: usize, g: &GroupStats) -> Result<ScreeningResult> {
        let mut sg = self.base();
        sg[pos] = screen_groups(std::slice::from_ref(g), std::slice::from_ref(&self.covariate_means[pos]))
            .pop()
            .unwrap();
        screen_with_split(&sg, self.xi, self.kappa, &self.cfg(), self.predictor)
    }

    pub fn replay_unchanged(&self) -> Result<ScreeningResult> {
        screen_with_split(&self.base(), self.xi, self.kappa, &self.cfg(), self.predictor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub group_id: usize,
    /// Worst-case expectation of the budget function; added iff <= 0.
    pub objective: f64,
    pub replays: usize,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Base selection plus added groups, ascending.
    pub selection: Vec<usize>,
    pub added: Vec<usize>,
    pub details: Vec<GroupCalibration>,
}

/// Summary of one screening run needed for zeta.
struct RunView {
    selected_g: bool,
    size_with_g: usize,
    budget_active: bool,
    n_early: usize,
}

fn view(res: &ScreeningResult, gid: usize) -> RunView {
    let tr = &res.trace;
    let te = tr.early_stop_time();
    let out = tr.screened_out_at(te);
    let selected_g = res.selection.contains(&gid);
    RunView {
        selected_g,
        size_with_g: res.selection.len() + usize::from(!selected_g),
        budget_active: !out.contains(&gid),
        n_early: tr.steps[te.min(tr.steps.len() - 1)].n,
    }
}

fn zeta(v: &RunView, sign: i8, evidence_hit: bool, gamma_alpha_over_kappa: f64) -> f64 {
    let ind = if v.selected_g || evidence_hit { 1.0 } else { 0.0 };
    let b = if sign > 0 && v.budget_active { gamma_alpha_over_kappa / (1.0 + v.n_early as f64) } else { 0.0 };
    ind / v.size_with_g as f64 - b
}

fn same_run(a: &ScreeningResult, b: &ScreeningResult) -> bool {
    if a.selection != b.selection || a.trace.xi != b.trace.xi {
        return false;
    }
    let n = a.trace.steps.len().min(b.trace.steps.len());
    a.trace.steps[..n] == b.trace.steps[..n]
}

/// Augments `original.selection`. `original` must come from screening the
/// replayer's groups with the same split bits, kappa, config and predictor.
pub fn calibrate(
    original: &ScreeningResult,
    replayer: &Replayer<'_>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    let groups = replayer.groups;
    let k = groups.len();
    let sc = &replayer.config;
    let gak = if replayer.kappa > 0.0 { sc.gamma_split * sc.alpha / replayer.kappa } else { f64::INFINITY };
    let base = &original.selection;
    let mut verified = false;
    let mut details = Vec::new();
    let mut added = Vec::new();
    let orig_view = |gid| view(original, gid);

    for (pos, g) in groups.iter().enumerate() {
        if base.contains(&g.group_id) {
            continue;
        }
        let use_full = cfg.variant == CalibrationVariant::Full && g.size() <= cfg.full_group_limit;
        let a_g = evidence_score(g.sign, &g.residual_signs, g.eta, g.pstar);
        let mut replays = 0;
        let mut check = || -> Result<()> {
            if !verified {
                let again = replayer.replay_unchanged()?;
                if !same_run(&again, original) {
                    return Err(Error::ReplayMismatch(
                        "replaying screening with unchanged inputs gave a different run".into(),
                    ));
                }
                verified = true;
            }
            Ok(())
        };

        let objective;
        let mut pruned = false;
        if !use_full {
            let (l, u) = group_sign_bounds(g.q, g.eta, g.pstar);
            let zeta_for = |sign: i8, res_view: &RunView| {
                let hit = evidence_score(sign, &g.residual_signs, g.eta, g.pstar) >= a_g;
                zeta(res_view, sign, hit, gak)
            };
            let (zp, zm);
            if g.sign > 0 {
                zp = zeta_for(1, &orig_view(g.group_id));
                // forcing -1 can neither select g nor reach the observed
                // evidence, and carries no budget term
                zm = 0.0;
            } else {
                zm = zeta_for(-1, &orig_view(g.group_id));
                let lower = 1.0 / k as f64 - gak;
                if l * lower + (1.0 - l) * zm > 0.0 || u * lower + (1.0 - u) * zm > 0.0 || g.q == 0 {
                    pruned = true;
                    zp = f64::NAN;
                } else {
                    let forced = g.with_forced_sign(1);
                    let res = replayer.replay_with(pos, &forced)?;
                    replays += 1;
                    check()?;
                    zp = zeta_for(1, &view(&res, g.group_id));
                }
            }
            objective = if pruned {
                f64::INFINITY
            } else {
                [l, u].iter().map(|p| p * zp + (1.0 - p) * zm).fold(f64::NEG_INFINITY, f64::max)
            };
        } else {
            let nz: Vec<usize> = (0..g.size()).filter(|&i| g.unit_signs[i] != 0).collect();
            let m = nz.len();
            let mut zetas = vec![0.0; 1 << m];
            for (code, z) in zetas.iter_mut().enumerate() {
                let mut signs = g.unit_signs.clone();
                for (b, &i) in nz.iter().enumerate() {
                    signs[i] = if code >> b & 1 == 1 { 1 } else { -1 };
                }
                let gv = g.with_unit_signs(&signs);
                let res = if signs == g.unit_signs {
                    original.clone()
                } else {
                    let r = replayer.replay_with(pos, &gv)?;
                    replays += 1;
                    check()?;
                    r
                };
                let hit = evidence_score(gv.sign, &gv.residual_signs, gv.eta, gv.pstar) >= a_g;
                *z = zeta(&view(&res, g.group_id), gv.sign, hit, gak);
            }
            // multilinear in the unit probabilities: the maximum sits at a vertex
            let (lo, hi) = (1.0 - g.pstar, g.pstar);
            let mut best = f64::NEG_INFINITY;
            for vert in 0..(1usize << m) {
                let mut e = 0.0;
                for (code, z) in zetas.iter().enumerate() {
                    let mut pr = 1.0;
                    for b in 0..m {
                        let p = if vert >> b & 1 == 1 { hi } else { lo };
                        pr *= if code >> b & 1 == 1 { p } else { 1.0 - p };
                    }
                    e += pr * z;
                }
                best = best.max(e);
            }
            objective = best;
        }
        if objective <= 0.0 {
            added.push(g.group_id);
        }
        details.push(GroupCalibration { group_id: g.group_id, objective, replays, pruned });
    }
    let mut selection = base.clone();
    selection.extend_from_slice(&added);
    selection.sort_unstable();
    Ok(CalibrationResult { selection, added, details })
}

impl GroupStats {
    /// Copy with L_g replaced (unit signs untouched).
    pub fn with_forced_sign(&self, sign: i8) -> GroupStats {
        GroupStats { sign, ..self.clone() }
    }
}
