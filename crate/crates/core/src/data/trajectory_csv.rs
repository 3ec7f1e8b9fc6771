//! Plain CSV trajectory import.
//!
//! Header `body,step,x,y,z,vx,vy,vz,mass` is required; rows may come in any
//! order but every `(body, step)` pair of the implied grid must be present
//! exactly once. Masses are taken from each body's first row.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::sim::Trajectory;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COLUMNS: [&str; 9] = ["body", "step", "x", "y", "z", "vx", "vy", "vz", "mass"];

#[derive(Debug, Deserialize)]
struct Row {
    body: String,
    step: usize,
    x: f64,
    y: f64,
    z: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    mass: f64,
}

pub fn read_trajectory_csv<R: std::io::Read>(reader: R, dt: f64) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::InvalidArgument(format!(
            "trajectory CSV header must be {}, got {}",
            COLUMNS.join(","),
            header.join(",")
        )));
    }
    let mut rows: BTreeMap<(usize, usize), Row> = BTreeMap::new();
    let mut bodies: Vec<String> = Vec::new();
    let mut steps: Vec<usize> = Vec::new();
    for rec in rdr.deserialize() {
        let row: Row = rec?;
        let b = match bodies.iter().position(|x| *x == row.body) {
            Some(b) => b,
            None => {
                bodies.push(row.body.clone());
                bodies.len() - 1
            }
        };
        if !steps.contains(&row.step) {
            steps.push(row.step);
        }
        let step = row.step;
        if rows.insert((step, b), row).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate row for body `{}` at step {step}",
                bodies[b]
            )));
        }
    }
    steps.sort_unstable();
    let (n, frames) = (bodies.len(), steps.len());
    if n == 0 {
        return Err(Error::InvalidArgument("trajectory CSV has no rows".into()));
    }
    let mut pos = Vec::with_capacity(frames * n * 3);
    let mut vel = Vec::with_capacity(frames * n * 3);
    let mut masses = vec![0.0; n];
    for (f, &step) in steps.iter().enumerate() {
        for (b, name) in bodies.iter().enumerate() {
            let r = rows.get(&(step, b)).ok_or_else(|| {
                Error::InvalidArgument(format!("body `{name}` has no row at step {step}"))
            })?;
            pos.extend_from_slice(&[r.x, r.y, r.z]);
            vel.extend_from_slice(&[r.vx, r.vy, r.vz]);
            if f == 0 {
                masses[b] = r.mass;
            }
        }
    }
    let record_every = match steps.as_slice() {
        [a, b, ..] => b - a,
        _ => 1,
    };
    if steps.windows(2).any(|w| w[1] - w[0] != record_every) {
        return Err(Error::InvalidArgument("trajectory steps are not evenly spaced".into()));
    }
    Ok(Trajectory {
        positions: Tensor::new(&[frames, n, 3], pos)?,
        velocities: Tensor::new(&[frames, n, 3], vel)?,
        masses,
        charges: None,
        dt,
        record_every: record_every.max(1),
    })
}

pub fn load_trajectory_csv(path: &Path, dt: f64) -> Result<Trajectory> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectory_csv(file, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_grid_in_any_order() {
        let text = "body,step,x,y,z,vx,vy,vz,mass\n\
                    moon,0,1,0,0,0,1,0,0.01\n\
                    sun,0,0,0,0,0,0,0,1\n\
                    sun,2,0,0,0,0,0,0,1\n\
                    moon,2,0,1,0,-1,0,0,0.01\n";
        let t = read_trajectory_csv(text.as_bytes(), 0.5).unwrap();
        assert_eq!(t.frames(), 2);
        assert_eq!(t.n_bodies(), 2);
        assert_eq!(t.masses, vec![0.01, 1.0]);
        assert_eq!(t.record_every, 2);
        assert_eq!(t.positions_at(1).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn header_is_required() {
        let text = "moon,0,1,0,0,0,1,0,0.01\n";
        assert!(read_trajectory_csv(text.as_bytes(), 1.0).is_err());
    }

    #[test]
    fn missing_cell_is_an_error() {
        let text = "body,step,x,y,z,vx,vy,vz,mass\n\
                    a,0,0,0,0,0,0,0,1\n\
                    b,0,0,0,0,0,0,0,1\n\
                    a,1,0,0,0,0,0,0,1\n";
        assert!(read_trajectory_csv(text.as_bytes(), 1.0).is_err());
    }
}
