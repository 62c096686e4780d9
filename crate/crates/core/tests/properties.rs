use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;

use subgroup_select::group_agg::{binomial_eta, group_kappa};
use subgroup_select::io;
use subgroup_select::model::{MatchedSet, Partition, Provenance};
use subgroup_select::partition::{random_partition, tree_partition, SignFreeResponse, TreeConfig};
use subgroup_select::pvalues::{bh_select, sensitivity_pvalue_with_u};
use subgroup_select::rng::Substreams;
use subgroup_select::select::{run_selection, CcMode, Method, SelectConfig};
use subgroup_select::simulate::{gen_replicate, ExperimentParams, SimConfig};

/// Matched sets with a shift `tau` on the treated unit, split into `k` groups.
fn synthetic(seed: u64, sets: usize, n: usize, k: usize, tau: f64) -> (Vec<MatchedSet>, Partition) {
    let mut rng = Substreams::new(seed).stream("test", 0);
    let data: Vec<MatchedSet> = (0..sets)
        .map(|i| {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            let effect = if i % 3 == 0 { tau } else { 0.0 };
            let ys = (0..n).map(|j| vec![rng.random::<f64>() + if j == 0 { effect } else { 0.0 }]).collect();
            MatchedSet::new(i, x, ys, 0).unwrap()
        })
        .collect();
    let mut groups = vec![Vec::new(); k];
    for i in 0..sets {
        groups[i % k].push(i);
    }
    let ids: Vec<usize> = (0..sets).collect();
    (data, Partition::new(groups, Provenance::External, &ids).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn calibration_only_adds(seed in 0u64..10_000, tau in 0.0f64..2.0, n in 2usize..4, gamma in 1.0f64..2.5) {
        let (sets, part) = synthetic(seed, 60, n, 12, tau);
        let base = SelectConfig { gamma, alpha: 0.2, ..SelectConfig::default() };
        let subs = Substreams::new(seed);
        let off = run_selection(&sets, &part, &base, &subs).unwrap();
        let on = run_selection(&sets, &part, &SelectConfig { cc: CcMode::Light, ..base }, &subs).unwrap();
        prop_assert_eq!(&on.base_selection, &off.selection);
        let sel: HashSet<_> = on.selection.iter().collect();
        prop_assert!(off.selection.iter().all(|g| sel.contains(g)));
        for g in &on.added {
            prop_assert!(!off.selection.contains(g));
        }
    }

    #[test]
    fn selection_is_reproducible(seed in 0u64..10_000, method in 0usize..6) {
        let (sets, part) = synthetic(seed, 40, 3, 8, 1.0);
        let m = ["np", "max", "topgap", "medsplit", "bh", "pscreen"][method];
        let cfg = SelectConfig { method: Method::parse(m).unwrap(), gamma: 1.5, ..SelectConfig::default() };
        let a = run_selection(&sets, &part, &cfg, &Substreams::new(seed)).unwrap();
        let b = run_selection(&sets, &part, &cfg, &Substreams::new(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.groups.len(), 8);
        prop_assert!(a.selection.iter().all(|&g| g < 8 && a.groups[g].selected));
    }

    #[test]
    fn pvalue_is_valid_and_grows_with_gamma(
        signs in proptest::collection::vec(prop_oneof![Just(-1i8), Just(0i8), Just(1i8)], 1..14),
        g1 in 1.0f64..4.0,
        dg in 0.0f64..3.0,
    ) {
        let w: Vec<f64> = (1..=signs.len()).map(|r| r as f64).collect();
        let lo = sensitivity_pvalue_with_u(&signs, &w, g1, None).unwrap().value;
        let hi = sensitivity_pvalue_with_u(&signs, &w, g1 + dg, None).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(hi >= lo - 1e-12, "p({}) = {lo} > p({}) = {hi}", g1, g1 + dg);
        let r = sensitivity_pvalue_with_u(&signs, &w, g1, Some(0.5)).unwrap().value;
        prop_assert!(r <= lo + 1e-12);
    }

    #[test]
    fn bh_matches_step_up_definition(ps in proptest::collection::vec(0.0f64..1.0, 1..30), alpha in 0.01f64..0.5) {
        let k = ps.len();
        let mut sorted = ps.clone();
        sorted.sort_by(f64::total_cmp);
        let r = (1..=k).rev().find(|&r| sorted[r - 1] <= r as f64 * alpha / k as f64).unwrap_or(0);
        let sel = bh_select(&ps, alpha);
        prop_assert_eq!(sel.len(), r);
        if r > 0 {
            prop_assert!(sel.iter().all(|&i| ps[i] <= sorted[r - 1]));
        }
    }

    #[test]
    fn kappa_is_at_most_gamma(q in 1usize..60, gamma in 1.0f64..12.0) {
        let p = gamma / (1.0 + gamma);
        let eta = binomial_eta(q, p).unwrap();
        prop_assert!(eta < q);
        let kappa = group_kappa(q, p).unwrap();
        prop_assert!(kappa > 0.0 && kappa <= gamma * (1.0 + 1e-9));
    }

    #[test]
    fn random_partition_keeps_labels_apart(seed in 0u64..10_000, sets in 20usize..120, k in 2usize..8) {
        let ids: Vec<usize> = (0..sets).map(|i| 3 * i + 1).collect();
        let labels: Vec<bool> = (0..sets).map(|i| i % 4 == 0).collect();
        let mut rng = Substreams::new(seed).stream("partition", 0);
        let p = random_partition(&ids, &labels, k, 0.3, &mut rng);
        let k_imp = (k as f64 * 0.3).floor() as usize;
        if k_imp == 0 {
            prop_assert!(p.is_err());
            return Ok(());
        }
        let p = p.unwrap();
        prop_assert_eq!(p.groups.len(), k);
        let label = |id: usize| labels[(id - 1) / 3];
        for g in &p.groups {
            prop_assert!(g.iter().all(|&id| label(id) == label(g[0])));
        }
        let sizes: Vec<usize> = p.groups.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), sets);
    }

    #[test]
    fn tree_leaves_respect_minbucket(seed in 0u64..10_000, sets in 10usize..150, bucket in 1usize..12) {
        let mut rng = Substreams::new(seed).stream("tree", 0);
        let ids: Vec<usize> = (0..sets).collect();
        let x: Vec<Vec<f64>> = (0..sets).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        let y: Vec<f64> = x.iter().map(|v| if v[0] > 0.5 { 2.0 } else { 0.0 } + rng.random::<f64>()).collect();
        let cfg = TreeConfig { minsplit: bucket, minbucket: bucket, ..TreeConfig::default() };
        let p = tree_partition(&ids, &x, &SignFreeResponse::from_treatment_free(y), &cfg).unwrap();
        prop_assert!(p.validate(&ids).is_ok());
        if p.groups.len() > 1 {
            prop_assert!(p.groups.iter().all(|g| g.len() >= bucket));
        }
        prop_assert!(matches!(p.provenance, Provenance::Tree(_)));
    }
}

#[test]
fn simulated_data_round_trips_through_csv() {
    let cfg = SimConfig { sets: 50, n: 3, outcomes: 2, ..SimConfig::default() };
    let subs = Substreams::new(9);
    let params = ExperimentParams::draw(cfg.d, cfg.outcomes, &subs);
    let data = gen_replicate(&cfg, &params, &subs, 0).unwrap();
    let table = io::sim_table(&data);
    let mut buf = Vec::new();
    io::write_sets(&mut buf, &table).unwrap();
    let back = io::read_sets(buf.as_slice()).unwrap();
    assert_eq!(back.ids(), data.ids());
    assert_eq!(back.outcome_names, ["y_1", "y_2"]);
    for (a, b) in back.sets.iter().zip(&data.sets) {
        assert_eq!(a.treated_index, b.treated_index);
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.covariates, b.covariates);
    }
    let mut truth = Vec::new();
    io::write_truth(&mut truth, &data).unwrap();
    let imp = io::read_importance(truth.as_slice()).unwrap();
    assert!(data.sets.iter().zip(&data.important).all(|(s, &i)| imp[&s.id] == i));
}

#[test]
fn strong_signal_is_found_and_null_is_quiet() {
    let (sets, part) = synthetic(1, 300, 2, 30, 5.0);
    let cfg = SelectConfig { gamma: 1.0, alpha: 0.1, ..SelectConfig::default() };
    let r = run_selection(&sets, &part, &cfg, &Substreams::new(1)).unwrap();
    assert!(!r.selection.is_empty());

    let mut empties = 0;
    for seed in 0..20 {
        let (sets, part) = synthetic(seed, 120, 2, 12, 0.0);
        let r = run_selection(&sets, &part, &cfg, &Substreams::new(seed)).unwrap();
        empties += usize::from(r.selection.is_empty());
    }
    assert!(empties >= 15, "null data produced selections in {} of 20 runs", 20 - empties);
}
