//! End-to-end selection on matched sets and a partition: our screening
//! procedure with optional calibration, the BH baseline, and P-screening.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationConfig, CalibrationVariant, Replayer};
use crate::error::{invalid, Error, Result};
use crate::group_agg::{aggregate_partition, default_rep_size, AggConfig, GroupStats};
use crate::model::{MatchedSet, Partition, SensitivityModel, UnitStats};
use crate::pvalues::{bh_select, group_pvalue, pscreen_mask, PScreenParams};
use crate::rng::{Substreams, STREAM_PVALUE, STREAM_SPLIT};
use crate::screening::{
    draw_split, screen_groups, screen_with_split, GroupFeatures, PredictorKind, ScreenGroup, ScreeningConfig,
    ScreeningTrace,
};
use crate::unit_stats::{compute_unit_stats, Baseline, MagnitudeVariant, SidedMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ours(MagnitudeVariant),
    Bh,
    PScreen,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bh" => Ok(Method::Bh),
            "pscreen" | "p-screening" => Ok(Method::PScreen),
            other => MagnitudeVariant::parse(other).map(Method::Ours),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Ours(v) => format!("Ours-{}", v.name()),
            Method::Bh => "BH-baseline".into(),
            Method::PScreen => "P-screening".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CcMode {
    #[default]
    Off,
    Light,
    Full,
}

impl CcMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(CcMode::Off),
            "light" => Ok(CcMode::Light),
            "full" => Ok(CcMode::Full),
            _ => invalid(format!("unknown calibration mode {s:?} (off, light, full)")),
        }
    }
}

/// Split rate used when none is given.
pub const DEFAULT_GAMMA_SPLIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub method: Method,
    /// Sensitivity parameter Gamma.
    pub gamma: f64,
    pub alpha: f64,
    pub gamma_split: f64,
    pub cc: CcMode,
    pub two_sided: bool,
    /// |Q_g|; `None` means min(4, floor(min |g| / 2)).
    pub rep_size: Option<usize>,
    pub size_exponent: f64,
    pub predictor: PredictorKind,
    pub refit_every: Option<usize>,
    pub pscreen: PScreenParams,
    /// Randomized group p-values for BH and P-screening.
    pub randomized_pvalues: bool,
    /// Ridge penalty of the two-sided baseline outcome model.
    pub baseline_ridge: f64,
    pub full_group_limit: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours(MagnitudeVariant::NP),
            gamma: 1.0,
            alpha: 0.1,
            gamma_split: DEFAULT_GAMMA_SPLIT,
            cc: CcMode::Off,
            two_sided: false,
            rep_size: None,
            size_exponent: 0.0,
            predictor: PredictorKind::default(),
            refit_every: None,
            pscreen: PScreenParams::default(),
            randomized_pvalues: false,
            baseline_ridge: 1.0,
            full_group_limit: 10,
        }
    }
}

impl SelectConfig {
    fn screening(&self) -> Result<ScreeningConfig> {
        let mut c = ScreeningConfig::new(self.alpha, self.gamma_split)?;
        c.refit_every = self.refit_every;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: usize,
    pub selected: bool,
    pub via_cc: bool,
    /// L_g (or the P-screening sign); 0 for BH.
    pub sign: i8,
    pub magnitude: f64,
    pub kappa: f64,
    pub eta: Option<usize>,
    pub size: usize,
    pub pvalue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: String,
    /// Final selection (including calibration additions), ascending group ids.
    pub selection: Vec<usize>,
    pub base_selection: Vec<usize>,
    pub added: Vec<usize>,
    pub groups: Vec<GroupReport>,
    pub trace: Option<ScreeningTrace>,
    pub config: SelectConfig,
}

/// Mean covariate vector of each group.
pub fn group_covariate_means(sets: &[MatchedSet], partition: &Partition) -> Result<Vec<Vec<f64>>> {
    let by_id: HashMap<usize, &MatchedSet> = sets.iter().map(|s| (s.id, s)).collect();
    partition
        .groups
        .iter()
        .map(|g| {
            let d = by_id.get(&g[0]).map_or(0, |s| s.covariates.len());
            let mut m = vec![0.0; d];
            for id in g {
                let s = by_id.get(id).ok_or_else(|| Error::Data(format!("partition references unknown set {id}")))?;
                if s.covariates.len() != d {
                    return Err(Error::Data(format!("set {id}: covariate dimension differs")));
                }
                for (a, b) in m.iter_mut().zip(&s.covariates) {
                    *a += b / g.len() as f64;
                }
            }
            Ok(m)
        })
        .collect()
}

/// Unit statistics under the configured sidedness.
pub fn unit_stats_for(
    sets: &[MatchedSet],
    variant: MagnitudeVariant,
    two_sided: bool,
    baseline_ridge: f64,
    subs: &Substreams,
) -> Result<Vec<UnitStats>> {
    let mode = if two_sided {
        SidedMode::TwoSided(Baseline::fit_static(sets, baseline_ridge)?)
    } else {
        SidedMode::OneSided
    };
    compute_unit_stats(sets, variant, &mode, subs)
}

fn check_universe(sets: &[MatchedSet], partition: &Partition) -> Result<()> {
    let ids: Vec<usize> = sets.iter().map(|s| s.id).collect();
    partition.validate(&ids)
}

/// Runs the configured method from raw matched sets.
pub fn run_selection(
    sets: &[MatchedSet],
    partition: &Partition,
    cfg: &SelectConfig,
    subs: &Substreams,
) -> Result<SelectionReport> {
    check_universe(sets, partition)?;
    let variant = match cfg.method {
        Method::Ours(v) => v,
        _ => MagnitudeVariant::NP,
    };
    let units = unit_stats_for(sets, variant, cfg.two_sided, cfg.baseline_ridge, subs)?;
    let cov = group_covariate_means(sets, partition)?;
    match cfg.method {
        Method::Ours(_) => run_ours(&units, partition, &cov, cfg, subs),
        Method::Bh => run_bh(&units, partition, cfg, subs),
        Method::PScreen => run_pscreen(&units, partition, &cov, cfg, subs),
    }
}

fn split_bits(k: usize, gamma_split: f64, subs: &Substreams) -> Vec<bool> {
    let mut rng = subs.stream(STREAM_SPLIT, 0);
    draw_split(k, gamma_split, &mut rng)
}

/// Our procedure on precomputed unit statistics.
pub fn run_ours(
    units: &[UnitStats],
    partition: &Partition,
    covariate_means: &[Vec<f64>],
    cfg: &SelectConfig,
    subs: &Substreams,
) -> Result<SelectionReport> {
    let Method::Ours(variant) = cfg.method else {
        return invalid("run_ours called with a baseline method");
    };
    let model = SensitivityModel::new(cfg.gamma)?;
    let sizes: Vec<usize> = partition.groups.iter().map(|g| g.len()).collect();
    let agg = AggConfig {
        variant,
        rep_size: cfg.rep_size.unwrap_or_else(|| default_rep_size(&sizes)),
        size_exponent: cfg.size_exponent,
    };
    let groups = aggregate_partition(&partition.groups, units, model, &agg)?;
    let kappa = crate::screening::shared_kappa(&groups);
    let sc = cfg.screening()?;
    let xi = split_bits(groups.len(), cfg.gamma_split, subs);
    let sg = screen_groups(&groups, covariate_means);
    let res = screen_with_split(&sg, &xi, kappa, &sc, cfg.predictor)?;
    let base = res.selection.clone();
    let (selection, added) = match cfg.cc {
        CcMode::Off => (base.clone(), vec![]),
        mode => {
            let rep = Replayer {
                groups: &groups,
                covariate_means,
                xi: &xi,
                kappa,
                config: sc,
                predictor: cfg.predictor,
            };
            let cc = CalibrationConfig {
                variant: if mode == CcMode::Full { CalibrationVariant::Full } else { CalibrationVariant::Light },
                full_group_limit: cfg.full_group_limit,
            };
            let out = calibrate(&res, &rep, &cc)?;
            (out.selection, out.added)
        }
    };
    let reports = groups.iter().map(|g| ours_report(g, &selection, &added)).collect();
    Ok(SelectionReport {
        method: format!("{}{}", cfg.method.name(), if cfg.cc == CcMode::Off { "" } else { "-cc" }),
        selection,
        base_selection: base,
        added,
        groups: reports,
        trace: Some(res.trace),
        config: *cfg,
    })
}

fn ours_report(g: &GroupStats, selection: &[usize], added: &[usize]) -> GroupReport {
    GroupReport {
        group_id: g.group_id,
        selected: selection.contains(&g.group_id),
        via_cc: added.contains(&g.group_id),
        sign: g.sign,
        magnitude: g.magnitude,
        kappa: g.kappa,
        eta: Some(g.eta),
        size: g.size(),
        pvalue: None,
    }
}

/// Group sensitivity p-values, in partition order.
pub fn group_pvalues(
    units: &[UnitStats],
    partition: &Partition,
    gamma: f64,
    randomized: bool,
    subs: &Substreams,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let by_id: HashMap<usize, &UnitStats> = units.iter().map(|u| (u.set_id, u)).collect();
    let mut rng = subs.stream(STREAM_PVALUE, 0);
    partition
        .groups
        .iter()
        .map(|g| {
            let us: Vec<&UnitStats> = g
                .iter()
                .map(|id| by_id.get(id).copied().ok_or_else(|| Error::Data(format!("no statistics for set {id}"))))
                .collect::<Result<_>>()?;
            let signs: Vec<i8> = us.iter().map(|u| u.sign).collect();
            let mags: Vec<f64> = us.iter().map(|u| u.magnitude).collect();
            let u = randomized.then(|| rng.random::<f64>());
            if signs.iter().all(|&s| s == 0) {
                return Ok(1.0);
            }
            Ok(group_pvalue(&signs, &mags, gamma, u)?.value)
        })
        .collect()
}

pub fn run_bh(
    units: &[UnitStats],
    partition: &Partition,
    cfg: &SelectConfig,
    subs: &Substreams,
) -> Result<SelectionReport> {
    let p = group_pvalues(units, partition, cfg.gamma, cfg.randomized_pvalues, subs)?;
    let sel_idx = bh_select(&p, cfg.alpha);
    let selection: Vec<usize> = sel_idx.clone();
    let groups = partition
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| GroupReport {
            group_id: k,
            selected: sel_idx.contains(&k),
            via_cc: false,
            sign: 0,
            magnitude: 0.0,
            kappa: 0.0,
            eta: None,
            size: g.len(),
            pvalue: Some(p[k]),
        })
        .collect();
    Ok(SelectionReport {
        method: cfg.method.name(),
        selection: selection.clone(),
        base_selection: selection,
        added: vec![],
        groups,
        trace: None,
        config: *cfg,
    })
}

pub fn run_pscreen(
    units: &[UnitStats],
    partition: &Partition,
    covariate_means: &[Vec<f64>],
    cfg: &SelectConfig,
    subs: &Substreams,
) -> Result<SelectionReport> {
    let pp = cfg.pscreen;
    let p = group_pvalues(units, partition, cfg.gamma, cfg.randomized_pvalues, subs)?;
    let kappa = pp.kappa();
    let mut sg = Vec::with_capacity(p.len());
    let mut masked = Vec::with_capacity(p.len());
    for (k, (&pv, g)) in p.iter().zip(&partition.groups).enumerate() {
        let (l, w) = pscreen_mask(pv, pp.alpha_bar, pp.lambda, pp.nu, pp.epsilon)?;
        masked.push((l, w));
        sg.push(ScreenGroup {
            id: k,
            sign: l,
            features: GroupFeatures {
                covariate_means: covariate_means[k].clone(),
                w,
                size: g.len() as f64,
                rep_size: 0.0,
                v_pos_frac: 0.0,
            },
        });
    }
    // P-screening has no initialization split: every negative group stays in.
    let mut sc = cfg.screening()?;
    sc.gamma_split = 1.0;
    let xi = vec![true; sg.len()];
    let res = screen_with_split(&sg, &xi, kappa, &sc, cfg.predictor)?;
    let groups = partition
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| GroupReport {
            group_id: k,
            selected: res.selection.contains(&k),
            via_cc: false,
            sign: masked[k].0,
            magnitude: masked[k].1,
            kappa,
            eta: None,
            size: g.len(),
            pvalue: Some(p[k]),
        })
        .collect();
    Ok(SelectionReport {
        method: cfg.method.name(),
        selection: res.selection.clone(),
        base_selection: res.selection,
        added: vec![],
        groups,
        trace: Some(res.trace),
        config: *cfg,
    })
}
