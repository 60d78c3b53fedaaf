//! CSV emission and parsing for the field and trajectory formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back reproduces the stored values bit for bit.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::inviscid::Trajectory;
use crate::scalar::Real;
use crate::selection::SweepRow;
use crate::simplex::{GridField, SimplexGrid};
use crate::viscous::Ensemble;

fn write_float<S: Real, W: Write>(out: &mut W, v: S) -> Result<()> {
    write!(out, "{}", v.to_f64_lossy())?;
    Ok(())
}

/// Grid field CSV: header `t,x_1,...,x_{d-1},v_1,...,v_k`, rows over
/// (time, node) in grid enumeration order.
pub fn write_grid_field<S: Real>(path: &Path, field: &GridField<S>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let m = field.grid.chart_dim();
    write!(out, "t")?;
    for j in 1..=m {
        write!(out, ",x_{j}")?;
    }
    for c in 1..=field.width {
        write!(out, ",v_{c}")?;
    }
    writeln!(out)?;
    for (k, &t) in field.times.iter().enumerate() {
        for node in 0..field.grid.len() {
            write_float(&mut out, t)?;
            for &x in field.grid.chart(node).coords() {
                write!(out, ",")?;
                write_float(&mut out, x)?;
            }
            for c in 0..field.width {
                write!(out, ",")?;
                write_float(&mut out, field.at(k, node, c))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads a grid field CSV back, reconstructing the lattice from the node
/// count and validating the enumeration order.
pub fn read_grid_field(path: &Path) -> Result<GridField<f64>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty field file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let m = cols.iter().filter(|c| c.starts_with("x_")).count();
    let width = cols.iter().filter(|c| c.starts_with("v_")).count();
    if m == 0 || width == 0 || cols.len() != 1 + m + width {
        return Err(Error::Parse(format!("unrecognised field header `{header}`")));
    }
    let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .trim()
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("bad float {v}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 1 + m + width {
            return Err(Error::Parse(format!("row width {} != header", vals.len())));
        }
        rows.push((vals[0], vals[1..1 + m].to_vec(), vals[1 + m..].to_vec()));
    }
    let mut times: Vec<f64> = Vec::new();
    for (t, _, _) in &rows {
        if times.last() != Some(t) {
            times.push(*t);
        }
    }
    let nt = times.len();
    if nt == 0 || rows.len() % nt != 0 {
        return Err(Error::Parse("ragged time blocks".into()));
    }
    let n_nodes = rows.len() / nt;
    let grid = grid_from_node_count(m + 1, n_nodes)?;
    let mut field = GridField::zeros(grid.clone(), times, width);
    let h = grid.h();
    for (idx, (_, x, v)) in rows.iter().enumerate() {
        let node = idx % n_nodes;
        let expect = grid.chart(node);
        for (a, b) in x.iter().zip(expect.coords()) {
            if (a - b).abs() > 1e-9 * h.max(1e-9) + 1e-12 {
                return Err(Error::Parse(format!(
                    "node {node} coordinates {x:?} do not match the lattice"
                )));
            }
        }
        let t = idx / n_nodes;
        for (c, &val) in v.iter().enumerate() {
            field.set(t, node, c, val);
        }
    }
    Ok(field)
}

/// Inverts the lattice size formula `count = C(n + d - 1, d - 1)`.
pub fn grid_from_node_count(d: usize, count: usize) -> Result<Arc<SimplexGrid<f64>>> {
    for n in 1..=4096usize {
        let g = SimplexGrid::<f64>::new(d, n)?;
        match g.len().cmp(&count) {
            std::cmp::Ordering::Equal => return Ok(g),
            std::cmp::Ordering::Greater => break,
            std::cmp::Ordering::Less => {}
        }
    }
    Err(Error::Parse(format!("{count} nodes is not a d={d} lattice size")))
}

/// Trajectory CSV: `t,p_1..p_d,alpha_12,alpha_13,...` with off-diagonal
/// rates in row-major order.
pub fn write_trajectory<S: Real>(path: &Path, traj: &Trajectory<S>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let d = traj.points[0].dim();
    write!(out, "t")?;
    for i in 1..=d {
        write!(out, ",p_{i}")?;
    }
    for i in 1..=d {
        for j in 1..=d {
            if i != j {
                write!(out, ",alpha_{i}{j}")?;
            }
        }
    }
    writeln!(out)?;
    for (k, &t) in traj.times.iter().enumerate() {
        write_float(&mut out, t)?;
        for &p in traj.points[k].coords() {
            write!(out, ",")?;
            write_float(&mut out, p)?;
        }
        for v in traj.controls[k.min(traj.controls.len() - 1)].off_diagonal() {
            write!(out, ",")?;
            write_float(&mut out, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Ensemble summary CSV: `path_id,t,p_1..p_d,q_1..q_d` (tagged columns zero
/// when the tagged mass was not simulated).
pub fn write_ensemble<S: Real>(path: &Path, ens: &Ensemble<S>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "path_id,t")?;
    for i in 1..=ens.d {
        write!(out, ",p_{i}")?;
    }
    for i in 1..=ens.d {
        write!(out, ",q_{i}")?;
    }
    writeln!(out)?;
    for path_id in 0..ens.n_paths {
        for (k, &t) in ens.times.iter().enumerate() {
            write!(out, "{path_id},")?;
            write_float(&mut out, t)?;
            for &p in ens.state(path_id, k) {
                write!(out, ",")?;
                write_float(&mut out, p)?;
            }
            match ens.tagged(path_id, k) {
                Some(q) => {
                    for &v in q {
                        write!(out, ",")?;
                        write_float(&mut out, v)?;
                    }
                }
                None => {
                    for _ in 0..ens.d {
                        write!(out, ",0")?;
                    }
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Two-state gap field CSV: `t,m,Z`.
pub fn write_line_field<S: Real>(path: &Path, field: &crate::masterweak::LineField<S>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,m,Z")?;
    for (k, &t) in field.times.iter().enumerate() {
        for (i, &m) in field.centers.iter().enumerate() {
            write_float(&mut out, t)?;
            write!(out, ",")?;
            write_float(&mut out, m)?;
            write!(out, ",")?;
            write_float(&mut out, field.at(k, i))?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Convergence report CSV with the per-intensity sweep rows.
pub fn write_sweep_rows<S: Real>(path: &Path, rows: &[SweepRow<S>]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let k = rows.iter().map(|r| r.weights.len()).max().unwrap_or(0);
    write!(
        out,
        "eps,delta,theta,kappa_eps,sup_gap_V,l1_gap_DV,l1_gap_U,xi,traj_dist"
    )?;
    for i in 1..=k {
        write!(out, ",w_{i}")?;
    }
    writeln!(out, ",boundary_hit_rate")?;
    for r in rows {
        for (i, v) in [
            r.eps,
            r.delta,
            r.theta,
            r.kappa_eps,
            r.sup_gap_value,
            r.l1_gap_gradient,
            r.l1_gap_state_value,
            r.xi,
            r.traj_dist,
        ]
        .into_iter()
        .enumerate()
        {
            if i > 0 {
                write!(out, ",")?;
            }
            write_float(&mut out, v)?;
        }
        for i in 0..k {
            write!(out, ",")?;
            write_float(&mut out, r.weights.get(i).copied().unwrap_or(S::zero()))?;
        }
        write!(out, ",")?;
        write_float(&mut out, r.boundary_hit_rate)?;
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_field_round_trip() {
        let dir = std::env::temp_dir().join(format!("mfg-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let grid = SimplexGrid::<f64>::new(3, 7).unwrap();
        let mut f = GridField::zeros(grid.clone(), vec![0.0, 0.5, 1.0], 2);
        for t in 0..3 {
            for n in 0..grid.len() {
                for c in 0..2 {
                    f.set(t, n, c, crate::rng::uniform_at(5, t as u64, n as u64, c as u64) - 0.5);
                }
            }
        }
        let path = dir.join("field.csv");
        write_grid_field(&path, &f).unwrap();
        let back = read_grid_field(&path).unwrap();
        assert_eq!(back.times, f.times);
        assert_eq!(back.width, 2);
        assert_eq!(back.grid.len(), grid.len());
        for t in 0..3 {
            for n in 0..grid.len() {
                for c in 0..2 {
                    // bitwise round trip through shortest decimal
                    assert_eq!(back.at(t, n, c), f.at(t, n, c));
                }
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn node_count_inversion() {
        for (d, n) in [(2usize, 17usize), (3, 33), (4, 9)] {
            let g = SimplexGrid::<f64>::new(d, n).unwrap();
            let back = grid_from_node_count(d, g.len()).unwrap();
            assert_eq!(back.subdivisions(), n);
        }
        assert!(grid_from_node_count(3, 7).is_err());
    }
}
