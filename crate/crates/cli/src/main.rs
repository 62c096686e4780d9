use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use subgroup_select::evaluate::{default_methods, figure_grid, outcome_range, run_experiment, write_csv, FIGURES};
use subgroup_select::ingest_match::{balance, load_units, nn_match, propensity_fit, SetCovariates};
use subgroup_select::io::{self, SetTable};
use subgroup_select::model::{Partition, Provenance};
use subgroup_select::partition::{random_partition, tree_partition, TreeConfig};
use subgroup_select::rng::{Substreams, STREAM_MATCH, STREAM_PARTITION};
use subgroup_select::select::{run_selection, CcMode, Method, SelectConfig};
use subgroup_select::simulate::{gen_replicate, ExperimentParams, SimConfig};
use subgroup_select::{Error, Result};

/// Environment variable that overrides `evaluate --workers`.
const WORKERS_ENV: &str = "SUBSEL_WORKERS";

#[derive(Parser)]
#[command(name = "subsel", version, about = "Subgroup selection with FDR control in matched observational studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic matched-set dataset and its ground truth.
    Simulate {
        /// Config file: flat key = value lines or a JSON object with SimConfig keys.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Propensity-score nearest-neighbor matching of a unit-level CSV.
    Match {
        #[arg(long)]
        units: PathBuf,
        /// Controls per treated unit.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Caliper in standard deviations of the logit propensity.
        #[arg(long, default_value_t = 0.4)]
        caliper: f64,
        #[arg(long, value_enum, default_value_t = SetCov::Treated)]
        set_covariates: SetCov,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition matched sets into candidate subgroups.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: PartitionMode,
        /// Target group size for random partitions.
        #[arg(long, conflicts_with = "groups")]
        group_size: Option<usize>,
        /// Number of groups for random partitions.
        #[arg(long)]
        groups: Option<usize>,
        /// Truth CSV; random partitions then keep important sets apart.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Fraction of groups made of important sets (random mode with --truth).
        #[arg(long, default_value_t = 0.3)]
        p_imp: f64,
        #[arg(long, default_value_t = 20)]
        minsplit: usize,
        #[arg(long, default_value_t = 7)]
        minbucket: usize,
        #[arg(long, default_value_t = 30)]
        maxdepth: usize,
        /// Only consider the median of each covariate as a split point.
        #[arg(long)]
        median_only: bool,
        #[arg(long, default_value_t = 0.01)]
        gain_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select subgroups with FDR control.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Np)]
        method: MethodArg,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = CcArg::Off)]
        cc: CcArg,
        #[arg(long)]
        two_sided: bool,
        /// Representative units per group; default min(4, floor(min |g| / 2)).
        #[arg(long)]
        rep_size: Option<usize>,
        /// Probability that a group enters the screening pool at initialization.
        #[arg(long)]
        gamma_split: Option<f64>,
        /// Randomized group p-values for bh and pscreen.
        #[arg(long)]
        randomized_pvalues: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation grid and summarize FDR and power per method.
    Evaluate {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(FIGURES))]
        figure: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; 0 uses all cores. SUBSEL_WORKERS overrides this.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Only run cells whose label starts with this prefix.
        #[arg(long)]
        cells: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SetCov {
    Treated,
    Average,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionMode {
    Random,
    Tree,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Np,
    Max,
    Topgap,
    Medsplit,
    Bh,
    Pscreen,
}

#[derive(Clone, Copy, ValueEnum)]
enum CcArg {
    Off,
    Light,
    Full,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Match { units, k, caliper, set_covariates, seed, out } => {
            let sc = match set_covariates {
                SetCov::Treated => SetCovariates::Treated,
                SetCov::Average => SetCovariates::Average,
            };
            match_units(&units, k, caliper, sc, seed, &out)
        }
        Command::Partition {
            data,
            mode,
            group_size,
            groups,
            truth,
            p_imp,
            minsplit,
            minbucket,
            maxdepth,
            median_only,
            gain_threshold,
            seed,
            out,
        } => {
            let table = read_table(&data)?;
            fs::create_dir_all(&out)?;
            let ids = table.ids();
            let partition = match mode {
                PartitionMode::Random => {
                    let k = match (groups, group_size) {
                        (Some(k), _) => k,
                        (None, Some(s)) if s > 0 => (ids.len() / s).max(2),
                        _ => return Err(Error::InvalidArgument("random mode needs --groups or --group-size".into())),
                    };
                    let (labels, p) = match truth {
                        Some(path) => {
                            let imp = io::read_importance(File::open(&path)?)?;
                            let labels = ids
                                .iter()
                                .map(|id| {
                                    imp.get(id).copied().ok_or_else(|| Error::Data(format!("set {id} missing from truth")))
                                })
                                .collect::<Result<Vec<_>>>()?;
                            (labels, p_imp)
                        }
                        None => (vec![false; ids.len()], 0.0),
                    };
                    let mut rng = Substreams::new(seed).stream(STREAM_PARTITION, 0);
                    random_partition(&ids, &labels, k, p, &mut rng)?
                }
                PartitionMode::Tree => {
                    let cfg = TreeConfig { minsplit, minbucket, maxdepth, median_only, gain_threshold };
                    tree_partition(&ids, &table.covariates(), &outcome_range(&table.sets), &cfg)?
                }
            };
            io::write_partition(BufWriter::new(File::create(out.join("partition.csv"))?), &partition)?;
            if let Provenance::Tree(root) = &partition.provenance {
                fs::write(out.join("tree.txt"), root.describe(&table.covariate_names))?;
            }
            println!("{} groups written to {}", partition.groups.len(), out.display());
            Ok(())
        }
        Command::Select {
            data,
            partition,
            method,
            gamma,
            alpha,
            cc,
            two_sided,
            rep_size,
            gamma_split,
            randomized_pvalues,
            seed,
            out,
        } => {
            let method = Method::parse(match method {
                MethodArg::Np => "np",
                MethodArg::Max => "max",
                MethodArg::Topgap => "topgap",
                MethodArg::Medsplit => "medsplit",
                MethodArg::Bh => "bh",
                MethodArg::Pscreen => "pscreen",
            })?;
            let cc = CcMode::parse(match cc {
                CcArg::Off => "off",
                CcArg::Light => "light",
                CcArg::Full => "full",
            })?;
            let mut cfg = SelectConfig { method, gamma, alpha, cc, two_sided, rep_size, randomized_pvalues, ..Default::default() };
            if let Some(g) = gamma_split {
                cfg.gamma_split = g;
            }
            select(&data, &partition, &cfg, seed, &out)
        }
        Command::Evaluate { figure, reps, seed, workers, alpha, cells, out } => {
            let workers = match std::env::var(WORKERS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV} must be a nonnegative integer, got {v:?}")))?,
                Err(_) => workers,
            };
            evaluate(&figure, reps, seed, workers, alpha, cells.as_deref(), &out)
        }
    }
}

fn read_table(path: &Path) -> Result<SetTable> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    io::read_sets(f)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Parses a config file into a JSON object. JSON input is used as is;
/// otherwise each nonblank, non-`#` line is `key = value` (or `key: value`),
/// and values parse as JSON scalars when possible.
fn parse_config(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return match serde_json::from_str::<Value>(text)? {
            Value::Object(m) => Ok(m),
            _ => Err(Error::Data("config JSON must be an object".into())),
        };
    }
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Data(format!("config line {}: expected key = value", i + 1)))?;
        let v = v.trim();
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().to_string(), value);
    }
    Ok(map)
}

fn resolve_sim_config(map: Map<String, Value>) -> Result<SimConfig> {
    let known = match serde_json::to_value(SimConfig::default())? {
        Value::Object(m) => m,
        _ => unreachable!("SimConfig serializes to an object"),
    };
    let unknown: Vec<&str> = map.keys().filter(|k| !known.contains_key(*k)).map(String::as_str).collect();
    if !unknown.is_empty() {
        let mut valid: Vec<&str> = known.keys().map(String::as_str).collect();
        valid.sort_unstable();
        return Err(Error::InvalidArgument(format!(
            "unknown config keys: {}; valid keys: {}",
            unknown.join(", "),
            valid.join(", ")
        )));
    }
    let cfg: SimConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::InvalidArgument(format!("bad config value: {e}")))?;
    Ok(cfg)
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Data(format!("{}: {e}", config.display())))?;
    let mut cfg = resolve_sim_config(parse_config(&text)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let subs = Substreams::new(cfg.seed);
    let params = ExperimentParams::draw(cfg.d, cfg.outcomes, &subs);
    let data = gen_replicate(&cfg, &params, &subs, 0)?;
    fs::create_dir_all(out)?;
    io::write_sets(BufWriter::new(File::create(out.join("data.csv"))?), &io::sim_table(&data))?;
    io::write_truth(BufWriter::new(File::create(out.join("truth.csv"))?), &data)?;
    write_json(&out.join("config.json"), &json!({ "sim": cfg, "params": params }))?;
    println!("{} sets written to {}", data.sets.len(), out.display());
    Ok(())
}

fn match_units(units: &Path, k: usize, caliper: f64, sc: SetCovariates, seed: u64, out: &Path) -> Result<()> {
    if !(caliper > 0.0) {
        return Err(Error::InvalidArgument("caliper must be positive".into()));
    }
    let table = load_units(units).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", units.display())),
        e => e,
    })?;
    let fit = propensity_fit(&table.covariates, &table.treatment)?;
    let mut rng = Substreams::new(seed).stream(STREAM_MATCH, 0);
    let m = nn_match(&table, &fit.logits, k, caliper, sc, &mut rng)?;
    let sets = SetTable {
        unit_ids: m.members.iter().map(|rows| rows.iter().map(|&r| table.unit_ids[r].clone()).collect()).collect(),
        sets: m.sets.clone(),
        outcome_names: table.outcome_names.clone(),
        covariate_names: table.covariate_names.clone(),
    };
    fs::create_dir_all(out)?;
    io::write_sets(BufWriter::new(File::create(out.join("matched.csv"))?), &sets)?;
    write_csv(&out.join("balance.csv"), &balance(&table, &m))?;
    write_json(
        &out.join("config.json"),
        &json!({
            "units": units, "k": k, "caliper": caliper, "set_covariates": sc, "seed": seed,
            "dropped_rows": table.dropped_rows, "unmatched_treated": m.unmatched_treated.len(),
            "ridge_fallback": fit.ridge_fallback,
        }),
    )?;
    println!(
        "{} matched sets ({} treated unmatched) written to {}",
        m.sets.len(),
        m.unmatched_treated.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    group_id: i64,
    selected: u8,
    via_cc: u8,
    #[serde(rename = "L_g")]
    sign: i8,
    #[serde(rename = "W_g")]
    magnitude: f64,
    kappa: f64,
    eta: Option<usize>,
    size: usize,
    pvalue: Option<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    screened_group: Option<i64>,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "N")]
    n: usize,
    fdp_hat: f64,
}

fn select(data: &Path, partition: &Path, cfg: &SelectConfig, seed: u64, out: &Path) -> Result<()> {
    let table = read_table(data)?;
    let f = File::open(partition).map_err(|e| Error::Data(format!("{}: {e}", partition.display())))?;
    let (part, labels): (Partition, Vec<i64>) = io::read_partition(f, &table.ids())?;
    let report = run_selection(&table.sets, &part, cfg, &Substreams::new(seed))?;
    fs::create_dir_all(out)?;
    let rows: Vec<ReportRow> = report
        .groups
        .iter()
        .map(|g| ReportRow {
            group_id: labels[g.group_id],
            selected: g.selected.into(),
            via_cc: g.via_cc.into(),
            sign: g.sign,
            magnitude: g.magnitude,
            kappa: g.kappa,
            eta: g.eta,
            size: g.size,
            pvalue: g.pvalue,
        })
        .collect();
    write_csv(&out.join("report.csv"), &rows)?;
    let trace_path = out.join("trace.csv");
    if let Some(trace) = &report.trace {
        let steps: Vec<TraceRow> = trace
            .steps
            .iter()
            .map(|s| TraceRow { step: s.t, screened_group: s.removed.map(|g| labels[g]), p: s.p, n: s.n, fdp_hat: s.fdp_hat })
            .collect();
        write_csv(&trace_path, &steps)?;
    } else if trace_path.exists() {
        fs::remove_file(&trace_path)?;
    }
    let sel = |v: &[usize]| v.iter().map(|&g| labels[g]).collect::<Vec<_>>();
    write_json(
        &out.join("config.json"),
        &json!({
            "data": data, "partition": partition, "seed": seed, "method": report.method,
            "config": report.config,
            "selection": sel(&report.selection), "base_selection": sel(&report.base_selection),
            "added": sel(&report.added),
            "stopping_step": report.trace.as_ref().and_then(|t| t.tau),
            "kappa": report.trace.as_ref().map(|t| t.kappa),
        }),
    )?;
    println!("{}: {} of {} groups selected", report.method, report.selection.len(), part.groups.len());
    Ok(())
}

fn evaluate(
    figure: &str,
    reps: usize,
    seed: u64,
    workers: usize,
    alpha: f64,
    prefix: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut cells = figure_grid(figure)?;
    if let Some(p) = prefix {
        cells.retain(|c| c.label.starts_with(p));
        if cells.is_empty() {
            return Err(Error::InvalidArgument(format!("no cell of figure {figure} starts with {p:?}")));
        }
    }
    let methods = default_methods(alpha);
    let res = run_experiment(&cells, &methods, reps, seed, workers)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("results.csv"), &res.rows)?;
    write_csv(&out.join("timing.csv"), &res.timing)?;
    let grid: BTreeMap<&str, &SimConfig> = cells.iter().map(|c| (c.label.as_str(), &c.sim)).collect();
    write_json(
        &out.join("config.json"),
        &json!({
            "figure": figure, "reps": reps, "seed": seed, "workers": workers, "alpha": alpha,
            "methods": methods, "cells": grid,
        }),
    )?;
    let failures: usize = res.rows.iter().map(|r| r.failures).sum();
    if failures > 0 {
        log::warn!("{failures} method runs failed; see the failures column");
    }
    println!("{} rows written to {}", res.rows.len(), out.display());
    Ok(())
}
