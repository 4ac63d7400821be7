//! File formats: trajectory CSV with a metadata sidecar, and small JSON
//! helpers shared by the report and model writers.
//!
//! Trajectory CSV columns are `t, x0, …, x{d-1}, dt_next`; `dt_next` is
//! empty on the last row. Floats are written in shortest round-trip form, so
//! reading a file back reproduces the trajectory bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::systems::{SamplingSpec, SystemSpec, RNG_NAME};

/// Sidecar describing how a trajectory file was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: SystemSpec,
    pub x0: Vec<f64>,
    pub sampling: SamplingSpec,
    pub seed: u64,
    #[serde(default = "rng_name")]
    pub rng: String,
}

fn rng_name() -> String {
    RNG_NAME.to_string()
}

impl TrajectoryMeta {
    pub fn new(system: SystemSpec, x0: Vec<f64>, sampling: SamplingSpec) -> Self {
        Self {
            system,
            x0,
            seed: sampling.seed,
            sampling,
            rng: rng_name(),
        }
    }
}

pub fn write_trajectory_csv<W: std::io::Write>(traj: &Trajectory, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = traj.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("dt_next".to_string());
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let mut row = Vec::with_capacity(dim + 2);
        row.push(traj.times[k].to_string());
        row.extend(traj.states[k].iter().map(f64::to_string));
        row.push(traj.gaps.get(k).map(f64::to_string).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: std::io::Read>(reader: R) -> Result<Trajectory> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = r.headers()?.clone();
    let cols = header.len();
    if cols < 3 || &header[0] != "t" || &header[cols - 1] != "dt_next" {
        return Err(Error::Data(
            "trajectory header must be `t, x0, ..., dt_next`".into(),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Data(format!("cannot parse {what} `{s}`")))
    };
    let (mut times, mut states, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    let mut last_gap_empty = false;
    for rec in r.records() {
        let rec = rec?;
        if last_gap_empty {
            return Err(Error::Data("dt_next is empty before the last row".into()));
        }
        times.push(parse(&rec[0], "time")?);
        states.push(
            (1..cols - 1)
                .map(|i| parse(&rec[i], "state"))
                .collect::<Result<Vec<_>>>()?,
        );
        match &rec[cols - 1] {
            "" => last_gap_empty = true,
            g => gaps.push(parse(g, "dt_next")?),
        }
    }
    if !last_gap_empty && !times.is_empty() {
        return Err(Error::Data("dt_next must be empty on the last row".into()));
    }
    Trajectory::with_gaps(times, states, gaps)
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_trajectory_csv(traj, std::io::BufWriter::new(file))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path)?;
    read_trajectory_csv(std::io::BufReader::new(file))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes an `h,error` curve. Non-finite errors are written as `inf`.
pub fn write_curve_csv<W: std::io::Write>(points: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["h", "error"])?;
    for (h, e) in points {
        w.write_record([h.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: std::io::Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.len() != 2 || &header[0] != "h" || &header[1] != "error" {
        return Err(Error::Data("curve header must be `h,error`".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let h = rec[0].parse::<f64>();
            let e = rec[1].parse::<f64>();
            match (h, e) {
                (Ok(h), Ok(e)) => Ok((h, e)),
                _ => Err(Error::Data(format!("bad curve row {:?}", rec))),
            }
        })
        .collect()
}
