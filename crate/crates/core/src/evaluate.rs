//! Monte Carlo comparison of selection methods on simulated data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{MatchedSet, Partition, UnitStats};
use crate::partition::{random_partition, tree_partition, SignFreeResponse, TreeConfig};
use crate::rng::{Substreams, STREAM_FLIP, STREAM_PARTITION};
use crate::select::{
    group_covariate_means, run_bh, run_ours, run_pscreen, unit_stats_for, CcMode, Method, SelectConfig,
};
use crate::simulate::{default_set_count, gen_replicate, two_sided_flip, ExperimentParams, SimConfig};
use crate::stats::{mean, sd};
use crate::unit_stats::MagnitudeVariant;

/// (FDP, power) of one selection.
pub fn fdr_power(selection: &[usize], nonnull: &[bool]) -> Result<(f64, f64)> {
    if let Some(&g) = selection.iter().find(|&&g| g >= nonnull.len()) {
        return invalid(format!("selected group {g} is not in the partition"));
    }
    let sel_null = selection.iter().filter(|&&g| !nonnull[g]).count();
    let sel_nn = selection.len() - sel_null;
    let total_nn = nonnull.iter().filter(|&&b| b).count();
    Ok((sel_null as f64 / selection.len().max(1) as f64, sel_nn as f64 / total_nn.max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionSpec {
    /// Random partition into groups of `group_size` sets.
    Random { group_size: usize },
    /// Variance-reduction tree on the within-set outcome range.
    Tree(TreeConfig),
}

/// One grid cell: a data-generating configuration plus how groups are formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub sim: SimConfig,
    pub partition: PartitionSpec,
}

impl Cell {
    pub fn group_size(&self) -> usize {
        match self.partition {
            PartitionSpec::Random { group_size } => group_size,
            PartitionSpec::Tree(t) => t.minsplit,
        }
    }
}

/// A named method configuration. Gamma and sidedness are taken from the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub config: SelectConfig,
}

/// The seven methods compared in every cell.
pub fn default_methods(alpha: f64) -> Vec<MethodSpec> {
    let base = SelectConfig { alpha, ..SelectConfig::default() };
    let ours = |v: MagnitudeVariant, cc: CcMode| SelectConfig { method: Method::Ours(v), cc, ..base };
    vec![
        MethodSpec { label: "Ours-NP".into(), config: ours(MagnitudeVariant::NP, CcMode::Off) },
        MethodSpec { label: "Ours-Max".into(), config: ours(MagnitudeVariant::Max, CcMode::Off) },
        MethodSpec { label: "Ours-TopGap".into(), config: ours(MagnitudeVariant::TopGap, CcMode::Off) },
        MethodSpec { label: "Ours-MedSplit".into(), config: ours(MagnitudeVariant::MedSplit, CcMode::Off) },
        MethodSpec { label: "Ours-NP-cc".into(), config: ours(MagnitudeVariant::NP, CcMode::Light) },
        MethodSpec { label: "BH-baseline".into(), config: SelectConfig { method: Method::Bh, ..base } },
        MethodSpec { label: "P-screening".into(), config: SelectConfig { method: Method::PScreen, ..base } },
    ]
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub cell: usize,
    pub rep: u64,
    pub method: String,
    pub fdp: f64,
    pub power: f64,
    pub selected: usize,
    pub groups: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Range of the first outcome within each set; invariant to which unit is treated.
pub fn outcome_range(sets: &[MatchedSet]) -> SignFreeResponse {
    SignFreeResponse::from_treatment_free(
        sets.iter()
            .map(|s| {
                let c = s.outcome(0);
                c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min)
            })
            .collect(),
    )
}

/// Draws the replicate data, its partition and the group nonnull bits.
pub fn replicate_data(
    cell: &Cell,
    params: &ExperimentParams,
    subs: &Substreams,
    rep: u64,
) -> Result<(Vec<MatchedSet>, Partition, Vec<bool>)> {
    let mut data = gen_replicate(&cell.sim, params, subs, rep)?;
    let rs = subs.child("replicate", rep);
    let ids = data.ids();
    let mut prng = rs.stream(STREAM_PARTITION, 0);
    let partition = match cell.partition {
        PartitionSpec::Random { group_size } => {
            let k = (ids.len() / group_size.max(1)).max(2);
            random_partition(&ids, &data.important, k, cell.sim.p_imp, &mut prng)?
        }
        PartitionSpec::Tree(t) => tree_partition(&ids, &data.covariates(), &outcome_range(&data.sets), &t)?,
    };
    if cell.sim.two_sided {
        two_sided_flip(&mut data, &partition, &mut rs.stream(STREAM_FLIP, 0));
    }
    let nonnull = data.group_nonnull(&partition);
    Ok((data.sets, partition, nonnull))
}

/// Runs every method on one replicate. All methods see the same data and
/// partition; methods that use NP unit statistics share one computation.
pub fn run_replicate(
    cell_index: usize,
    cell: &Cell,
    methods: &[MethodSpec],
    params: &ExperimentParams,
    subs: &Substreams,
    rep: u64,
) -> Vec<ReplicateOutcome> {
    let fail = |m: &MethodSpec, e: &Error| ReplicateOutcome {
        cell: cell_index,
        rep,
        method: m.label.clone(),
        fdp: f64::NAN,
        power: f64::NAN,
        selected: 0,
        groups: 0,
        seconds: 0.0,
        error: Some(e.to_string()),
    };
    let (sets, partition, nonnull) = match replicate_data(cell, params, subs, rep) {
        Ok(v) => v,
        Err(e) => return methods.iter().map(|m| fail(m, &e)).collect(),
    };
    let rs = subs.child("replicate", rep);
    let cov = match group_covariate_means(&sets, &partition) {
        Ok(c) => c,
        Err(e) => return methods.iter().map(|m| fail(m, &e)).collect(),
    };
    let mut unit_cache: HashMap<MagnitudeVariant, Result<Vec<UnitStats>>> = HashMap::new();
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let cfg = SelectConfig { gamma: cell.sim.gamma, two_sided: cell.sim.two_sided, ..m.config };
        let variant = match cfg.method {
            Method::Ours(v) => v,
            _ => MagnitudeVariant::NP,
        };
        let start = Instant::now();
        let units = unit_cache
            .entry(variant)
            .or_insert_with(|| unit_stats_for(&sets, variant, cfg.two_sided, cfg.baseline_ridge, &rs));
        let report = match units {
            Ok(u) => match cfg.method {
                Method::Ours(_) => run_ours(u, &partition, &cov, &cfg, &rs),
                Method::Bh => run_bh(u, &partition, &cfg, &rs),
                Method::PScreen => run_pscreen(u, &partition, &cov, &cfg, &rs),
            },
            Err(e) => Err(Error::InvalidState(e.to_string())),
        };
        let seconds = start.elapsed().as_secs_f64();
        match report.and_then(|r| fdr_power(&r.selection, &nonnull).map(|fp| (fp, r.selection.len()))) {
            Ok(((fdp, power), selected)) => out.push(ReplicateOutcome {
                cell: cell_index,
                rep,
                method: m.label.clone(),
                fdp,
                power,
                selected,
                groups: partition.len(),
                seconds,
                error: None,
            }),
            Err(e) => {
                warn!("cell {cell_index} rep {rep} {}: {e}", m.label);
                out.push(fail(m, &e));
            }
        }
    }
    out
}

/// One summary row per cell and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: String,
    pub partition: String,
    pub group_size: usize,
    pub controls: usize,
    pub two_sided: bool,
    pub gamma: f64,
    pub sets: usize,
    pub method: String,
    pub reps: usize,
    pub failures: usize,
    pub mean_fdp: f64,
    pub se_fdp: f64,
    pub mean_power: f64,
    pub se_power: f64,
    pub mean_selected: f64,
    pub mean_groups: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub cell: String,
    pub method: String,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub timing: Vec<TimingRow>,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Runs `reps` replicates of every cell. Each cell is its own experiment:
/// its coefficients come from the cell's child stream and are shared by
/// all of that cell's replicates. `workers` = 0 uses the rayon default.
pub fn run_experiment(
    cells: &[Cell],
    methods: &[MethodSpec],
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<ExperimentResult> {
    if cells.is_empty() || methods.is_empty() {
        return invalid("experiment grid and method list must be nonempty");
    }
    if reps == 0 {
        return invalid("reps must be at least 1");
    }
    let root = Substreams::new(seed);
    let exp: Vec<(Substreams, ExperimentParams)> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let s = root.child("cell", c as u64);
            cell.sim.validate().map(|_| (s, ExperimentParams::draw(cell.sim.d, cell.sim.outcomes, &s)))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..reps as u64).map(move |r| (c, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let mut outcomes: Vec<ReplicateOutcome> = pool.install(|| {
        jobs.par_iter()
            .flat_map_iter(|&(c, r)| run_replicate(c, &cells[c], methods, &exp[c].1, &exp[c].0, r))
            .collect()
    });
    outcomes.sort_by(|a, b| (a.cell, a.rep).cmp(&(b.cell, b.rep)));
    Ok(summarize(cells, methods, outcomes))
}

fn summarize(cells: &[Cell], methods: &[MethodSpec], outcomes: Vec<ReplicateOutcome>) -> ExperimentResult {
    let mut by_key: BTreeMap<(usize, usize), Vec<&ReplicateOutcome>> = BTreeMap::new();
    let order: HashMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (m.label.as_str(), i)).collect();
    for o in &outcomes {
        by_key.entry((o.cell, order[o.method.as_str()])).or_default().push(o);
    }
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for ((c, mi), os) in by_key {
        let cell = &cells[c];
        let ok: Vec<&&ReplicateOutcome> = os.iter().filter(|o| o.error.is_none()).collect();
        let fdp: Vec<f64> = ok.iter().map(|o| o.fdp).collect();
        let pw: Vec<f64> = ok.iter().map(|o| o.power).collect();
        let se = |v: &[f64]| if v.len() > 1 { sd(v) / (v.len() as f64).sqrt() } else { 0.0 };
        rows.push(ResultRow {
            cell: cell.label.clone(),
            partition: match cell.partition {
                PartitionSpec::Random { .. } => "random".into(),
                PartitionSpec::Tree(_) => "tree".into(),
            },
            group_size: cell.group_size(),
            controls: cell.sim.n - 1,
            two_sided: cell.sim.two_sided,
            gamma: cell.sim.gamma,
            sets: cell.sim.sets,
            method: methods[mi].label.clone(),
            reps: ok.len(),
            failures: os.len() - ok.len(),
            mean_fdp: mean(&fdp),
            se_fdp: se(&fdp),
            mean_power: mean(&pw),
            se_power: se(&pw),
            mean_selected: mean(&ok.iter().map(|o| o.selected as f64).collect::<Vec<_>>()),
            mean_groups: mean(&ok.iter().map(|o| o.groups as f64).collect::<Vec<_>>()),
        });
        timing.push(TimingRow {
            cell: cell.label.clone(),
            method: methods[mi].label.clone(),
            total_seconds: os.iter().map(|o| o.seconds).sum(),
        });
    }
    ExperimentResult { rows, timing, outcomes }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn random_cell(label: String, group_size: usize, n: usize, two_sided: bool) -> Cell {
    Cell {
        label,
        sim: SimConfig {
            sets: default_set_count(group_size, false),
            n,
            tau_star: 3.0,
            two_sided,
            ..SimConfig::default()
        },
        partition: PartitionSpec::Random { group_size },
    }
}

fn tree_cell(label: String, size: usize, n: usize) -> Cell {
    Cell {
        label,
        sim: SimConfig { sets: default_set_count(size, true), n, tau_star: 4.0, ..SimConfig::default() },
        partition: PartitionSpec::Tree(TreeConfig { minsplit: size, minbucket: size, ..TreeConfig::default() }),
    }
}

pub const FIGURES: [&str; 5] = ["2a", "2b", "3", "4", "5"];

/// Grid presets:
/// - 2a: random partition, one-sided, 3 controls, group sizes 5..20
/// - 2b: as 2a with two-sided effects on pairs
/// - 3: random partition, group sizes 6 and 18, 1..5 controls
/// - 4: tree partition with minsplit = minbucket in {2, 4}, 1..5 controls
/// - 5: tree partition, 3 controls, minsplit = minbucket in 5..20
pub fn figure_grid(figure: &str) -> Result<Vec<Cell>> {
    let sizes = [5, 10, 15, 20];
    let cells = match figure {
        "2a" => sizes.iter().map(|&g| random_cell(format!("2a/size={g}"), g, 4, false)).collect(),
        "2b" => sizes.iter().map(|&g| random_cell(format!("2b/size={g}"), g, 2, true)).collect(),
        "3" => [6, 18]
            .iter()
            .flat_map(|&g| (1..=5).map(move |c| random_cell(format!("3/size={g}/controls={c}"), g, c + 1, false)))
            .collect(),
        "4" => [2, 4]
            .iter()
            .flat_map(|&m| (1..=5).map(move |c| tree_cell(format!("4/minsplit={m}/controls={c}"), m, c + 1)))
            .collect(),
        "5" => sizes.iter().map(|&g| tree_cell(format!("5/minsplit={g}"), g, 4)).collect(),
        other => return invalid(format!("unknown figure {other:?}; expected one of {FIGURES:?}")),
    };
    Ok(cells)
}
