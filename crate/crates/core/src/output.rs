//! Trajectory CSV and the JSON metadata sidecar.
//!
//! The CSV has one column per unit of the universe,
//! `t,mismatch,total_cost,P_1..P_N,z_1..z_N,v_1..v_N`; units that are not
//! active at a row leave their cells empty, as do the `z` and `v` columns
//! of centralized runs. Floats are written in shortest round-trip form, so
//! equal trajectories give byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::dynamics::{AlgorithmParams, ConditionReport};
use crate::error::{Error, Result};
use crate::scenario::RunReport;
use crate::simulator::{EventRecord, LoadSignal, SimSettings, Trajectory};

pub fn csv_header(universe: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "mismatch", "total_cost"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["P", "z", "v"] {
        h.extend((1..=universe).map(|i| format!("{prefix}_{i}")));
    }
    h
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w: W) -> Result<()> {
    let n = traj.universe;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(csv_header(n)).map_err(csv_err)?;
    let mut record: Vec<String> = Vec::with_capacity(3 + 3 * n);
    for row in &traj.rows {
        record.clear();
        record.extend(
            [row.t, row.mismatch, row.total_cost]
                .iter()
                .map(f64::to_string),
        );
        for values in [&row.p, &row.z, &row.v] {
            let mut cells = vec![String::new(); n];
            if !values.is_empty() {
                for (&unit, x) in row.active.iter().zip(values.iter()) {
                    cells[unit - 1] = x.to_string();
                }
            }
            record.extend(cells);
        }
        out.write_record(&record).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trajectory_csv_file(traj: &Trajectory, path: &Path) -> Result<()> {
    write_trajectory_csv(traj, BufWriter::new(File::create(path)?))
}

/// A trajectory CSV read back column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable {
    pub universe: usize,
    pub t: Vec<f64>,
    pub mismatch: Vec<f64>,
    pub total_cost: Vec<f64>,
    /// `p[i][k]` is unit `i + 1` at row `k`.
    pub p: Vec<Vec<Option<f64>>>,
    pub z: Vec<Vec<Option<f64>>>,
    pub v: Vec<Vec<Option<f64>>>,
}

impl TrajectoryTable {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `1'P` at every row.
    pub fn total_generation(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.p.iter().filter_map(|col| col[k]).sum())
            .collect()
    }
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<TrajectoryTable> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || !(header.len() - 3).is_multiple_of(3) {
        return Err(Error::Csv(format!(
            "unexpected column count {}",
            header.len()
        )));
    }
    let universe = (header.len() - 3) / 3;
    if header != csv_header(universe) {
        return Err(Error::Csv(
            "header must be t,mismatch,total_cost,P_1..P_n,z_1..z_n,v_1..v_n".into(),
        ));
    }
    let mut table = TrajectoryTable {
        universe,
        t: Vec::new(),
        mismatch: Vec::new(),
        total_cost: Vec::new(),
        p: vec![Vec::new(); universe],
        z: vec![Vec::new(); universe],
        v: vec![Vec::new(); universe],
    };
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = k + 2;
        let cell = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| {
                Error::Csv(format!(
                    "line {line}, column {}: not a number: {s:?}",
                    header[j]
                ))
            })
        };
        let required = |j: usize| -> Result<f64> {
            cell(j)?
                .ok_or_else(|| Error::Csv(format!("line {line}: column {} is empty", header[j])))
        };
        table.t.push(required(0)?);
        table.mismatch.push(required(1)?);
        table.total_cost.push(required(2)?);
        for i in 0..universe {
            table.p[i].push(cell(3 + i)?);
            table.z[i].push(cell(3 + universe + i)?);
            table.v[i].push(cell(3 + 2 * universe + i)?);
        }
    }
    Ok(table)
}

pub fn read_trajectory_csv_file(path: &Path) -> Result<TrajectoryTable> {
    read_trajectory_csv(File::open(path)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    /// Seed of a random initial allocation, if one was drawn.
    pub init: Option<u64>,
}

/// Everything needed to interpret a trajectory CSV.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub schema_version: u32,
    pub scenario: &'a str,
    pub description: &'a str,
    pub graph: &'a str,
    pub fleet: &'a str,
    pub universe: usize,
    pub params: &'a AlgorithmParams,
    pub sim: &'a SimSettings,
    pub load: &'a LoadSignal,
    pub seeds: Seeds,
    pub initial_condition: Option<ConditionReport>,
    pub events: &'a [EventRecord],
    pub report: &'a RunReport,
}

pub fn write_metadata(meta: &RunMetadata, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
