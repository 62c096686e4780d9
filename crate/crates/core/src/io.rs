//! CSV formats for matched-set datasets, simulation truth and partitions.
//!
//! Dataset: `set_id, unit_id, role, y_1..y_M, <covariates>`, one row per
//! unit, `role` in {treated, control}. Set-level covariates are read from the
//! treated row. Partition: `set_id, group_id`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{MatchedSet, Partition, Provenance};
use crate::simulate::SimData;

#[derive(Debug, Clone, PartialEq)]
pub struct SetTable {
    pub sets: Vec<MatchedSet>,
    /// Unit ids per set, treated first as stored in `sets`.
    pub unit_ids: Vec<Vec<String>>,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl SetTable {
    pub fn ids(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.id).collect()
    }

    pub fn covariates(&self) -> Vec<Vec<f64>> {
        self.sets.iter().map(|s| s.covariates.clone()).collect()
    }
}

fn outcome_col(h: &str) -> Option<usize> {
    h.strip_prefix("y_").and_then(|r| r.parse::<usize>().ok())
}

pub fn write_sets<W: Write>(w: W, table: &SetTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["set_id".to_string(), "unit_id".into(), "role".into()];
    header.extend(table.outcome_names.iter().cloned());
    header.extend(table.covariate_names.iter().cloned());
    wr.write_record(&header)?;
    for (s, ids) in table.sets.iter().zip(&table.unit_ids) {
        for (j, row) in s.outcomes.iter().enumerate() {
            let mut rec = vec![
                s.id.to_string(),
                ids[j].clone(),
                if j == s.treated_index { "treated" } else { "control" }.to_string(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.extend(s.covariates.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_sets<R: Read>(r: R) -> Result<SetTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column {name}")))
    };
    let (c_set, c_unit, c_role) = (col("set_id")?, col("unit_id")?, col("role")?);
    let mut y: Vec<(usize, usize)> =
        headers.iter().enumerate().filter_map(|(j, h)| outcome_col(h).map(|m| (m, j))).collect();
    y.sort_unstable();
    if y.is_empty() {
        return Err(Error::Data("no outcome columns (expected y_1, y_2, ...)".into()));
    }
    let y_idx: Vec<usize> = y.iter().map(|&(_, j)| j).collect();
    let x_idx: Vec<usize> =
        (0..headers.len()).filter(|j| ![c_set, c_unit, c_role].contains(j) && !y_idx.contains(j)).collect();

    struct Acc {
        units: Vec<String>,
        outcomes: Vec<Vec<f64>>,
        treated: Vec<usize>,
        cov: Option<Vec<f64>>,
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Data(format!("row {row}: column {} has non-numeric value {:?}", &headers[j], &rec[j]))
            })
        };
        let id: usize = rec[c_set]
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: set_id must be a nonnegative integer, got {:?}", &rec[c_set])))?;
        let treated = match &rec[c_role] {
            "treated" => true,
            "control" => false,
            other => return Err(Error::Data(format!("row {row}: role must be treated or control, got {other:?}"))),
        };
        let ys = y_idx.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?;
        let a = acc.entry(id).or_insert_with(|| Acc { units: vec![], outcomes: vec![], treated: vec![], cov: None });
        if treated {
            a.treated.push(a.units.len());
            a.cov = Some(x_idx.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?);
        }
        a.units.push(rec[c_unit].to_string());
        a.outcomes.push(ys);
    }
    if acc.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let mut table = SetTable {
        sets: Vec::with_capacity(acc.len()),
        unit_ids: Vec::with_capacity(acc.len()),
        outcome_names: y_idx.iter().map(|&j| headers[j].to_string()).collect(),
        covariate_names: x_idx.iter().map(|&j| headers[j].to_string()).collect(),
    };
    for (id, a) in acc {
        if a.treated.len() != 1 {
            return Err(Error::Data(format!("set {id} has {} treated units; expected exactly 1", a.treated.len())));
        }
        table.sets.push(MatchedSet::new(id, a.cov.unwrap(), a.outcomes, a.treated[0])?);
        table.unit_ids.push(a.units);
    }
    Ok(table)
}

/// Dataset table for simulated data; unit ids are `<set>_<unit>`.
pub fn sim_table(data: &SimData) -> SetTable {
    let m = data.sets.first().map_or(0, |s| s.n_outcomes());
    let d = data.sets.first().map_or(0, |s| s.covariates.len());
    SetTable {
        unit_ids: data.sets.iter().map(|s| (1..=s.n()).map(|j| format!("{}_{j}", s.id)).collect()).collect(),
        sets: data.sets.clone(),
        outcome_names: (1..=m).map(|i| format!("y_{i}")).collect(),
        covariate_names: (1..=d).map(|i| format!("x{i}")).collect(),
    }
}

/// Truth CSV: `set_id, important, treated_prob, effect_1..effect_M`.
pub fn write_truth<W: Write>(w: W, data: &SimData) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let m = data.effects.first().map_or(0, |e| e.len());
    let mut header = vec!["set_id".to_string(), "important".into(), "treated_prob".into()];
    header.extend((1..=m).map(|i| format!("effect_{i}")));
    wr.write_record(&header)?;
    for (i, s) in data.sets.iter().enumerate() {
        let mut rec = vec![
            s.id.to_string(),
            u8::from(data.important[i]).to_string(),
            data.assign_probs[i][s.treated_index].to_string(),
        ];
        rec.extend(data.effects[i].iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the `important` column of a truth CSV as a map from set id.
pub fn read_importance<R: Read>(r: R) -> Result<HashMap<usize, bool>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let find = |n: &str| headers.iter().position(|h| h == n).ok_or_else(|| Error::Data(format!("missing column {n}")));
    let (c_set, c_imp) = (find("set_id")?, find("important")?);
    let mut out = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec[c_set].parse().map_err(|_| Error::Data(format!("row {}: bad set_id", r + 1)))?;
        let imp = match &rec[c_imp] {
            "1" | "true" => true,
            "0" | "false" => false,
            o => return Err(Error::Data(format!("row {}: important must be 0 or 1, got {o:?}", r + 1))),
        };
        out.insert(id, imp);
    }
    Ok(out)
}

/// Writes `set_id, group_id` with group ids 0..K-1 in partition order.
pub fn write_partition<W: Write>(w: W, partition: &Partition) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["set_id", "group_id"])?;
    let mut rows: Vec<(usize, usize)> =
        partition.groups.iter().enumerate().flat_map(|(k, g)| g.iter().map(move |&id| (id, k))).collect();
    rows.sort_unstable();
    for (id, k) in rows {
        wr.write_record([id.to_string(), k.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a partition CSV. Groups are ordered by ascending `group_id`; the
/// returned labels give the file's group id for each position.
pub fn read_partition<R: Read>(r: R, universe: &[usize]) -> Result<(Partition, Vec<i64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let find = |n: &str| headers.iter().position(|h| h == n).ok_or_else(|| Error::Data(format!("missing column {n}")));
    let (c_set, c_group) = (find("set_id")?, find("group_id")?);
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id: usize = rec[c_set].parse().map_err(|_| Error::Data(format!("row {}: bad set_id {:?}", r + 1, &rec[c_set])))?;
        let g: i64 =
            rec[c_group].parse().map_err(|_| Error::Data(format!("row {}: bad group_id {:?}", r + 1, &rec[c_group])))?;
        groups.entry(g).or_default().push(id);
    }
    let labels: Vec<i64> = groups.keys().copied().collect();
    let p = Partition::new(groups.into_values().collect(), Provenance::External, universe)?;
    Ok((p, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SetTable {
        SetTable {
            sets: vec![
                MatchedSet::new(3, vec![0.5, -1.0], vec![vec![1.0], vec![2.5]], 0).unwrap(),
                MatchedSet::new(7, vec![1.5, 2.0], vec![vec![0.0], vec![-1.0], vec![4.0]], 0).unwrap(),
            ],
            unit_ids: vec![vec!["a".into(), "b".into()], vec!["c".into(), "d".into(), "e".into()]],
            outcome_names: vec!["y_1".into()],
            covariate_names: vec!["age".into(), "score".into()],
        }
    }

    #[test]
    fn sets_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        write_sets(&mut buf, &t).unwrap();
        let back = read_sets(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn treated_row_need_not_come_first() {
        let csv = "set_id,unit_id,role,y_1,x\n1,a,control,0.5,9\n1,b,treated,1.5,2\n";
        let t = read_sets(csv.as_bytes()).unwrap();
        assert_eq!(t.sets[0].treated_index, 1);
        assert_eq!(t.sets[0].covariates, vec![2.0]);
    }

    #[test]
    fn rejects_bad_sets() {
        let two_treated = "set_id,unit_id,role,y_1\n1,a,treated,0\n1,b,treated,1\n";
        assert!(matches!(read_sets(two_treated.as_bytes()), Err(Error::Data(_))));
        let singleton = "set_id,unit_id,role,y_1\n1,a,treated,0\n";
        assert!(read_sets(singleton.as_bytes()).is_err());
        let bad_role = "set_id,unit_id,role,y_1\n1,a,case,0\n";
        assert!(read_sets(bad_role.as_bytes()).is_err());
        let no_y = "set_id,unit_id,role,x\n1,a,treated,0\n";
        assert!(read_sets(no_y.as_bytes()).is_err());
    }

    #[test]
    fn partition_round_trip_and_labels() {
        let p = Partition::new(vec![vec![7], vec![3]], Provenance::Random, &[3, 7]).unwrap();
        let mut buf = Vec::new();
        write_partition(&mut buf, &p).unwrap();
        let (q, labels) = read_partition(buf.as_slice(), &[3, 7]).unwrap();
        assert_eq!(q.groups, p.groups);
        assert_eq!(labels, vec![0, 1]);
        let csv = "set_id,group_id\n3,10\n7,-2\n";
        let (q, labels) = read_partition(csv.as_bytes(), &[3, 7]).unwrap();
        assert_eq!(q.groups, vec![vec![7], vec![3]]);
        assert_eq!(labels, vec![-2, 10]);
        assert!(read_partition(csv.as_bytes(), &[3, 7, 9]).is_err());
    }
}
