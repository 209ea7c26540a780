//! Legacy VTK snapshots, per-point CSV dumps and the convergence table.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::analysis::{ConvergenceRow, Rate};
use crate::error::Result;
use crate::forces::FieldState;
use crate::geometry::PointCloud;

/// ASCII legacy VTK with one vertex cell per point and point arrays `displacement`,
/// `velocity` (one component per dimension) and `damage`. Values carry 17 significant digits.
pub fn write_vtk(cloud: &PointCloud, state: &FieldState, damage: &[f64], path: &Path) -> Result<()> {
    let n = cloud.len();
    let dims = cloud.dim().count();
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "pd snapshot t={:.16e}", state.t)?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {n} double")?;
    for p in cloud.positions() {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z)?;
    }
    writeln!(out, "CELLS {n} {}", 2 * n)?;
    for i in 0..n {
        writeln!(out, "1 {i}")?;
    }
    writeln!(out, "CELL_TYPES {n}")?;
    for _ in 0..n {
        writeln!(out, "1")?;
    }
    writeln!(out, "POINT_DATA {n}")?;
    writeln!(out, "FIELD fields 3")?;
    for (name, field) in [("displacement", &state.u), ("velocity", &state.v)] {
        writeln!(out, "{name} {dims} {n} double")?;
        for x in field.iter() {
            let line: Vec<String> = x.iter().take(dims).map(|c| format!("{c:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    writeln!(out, "damage 1 {n} double")?;
    for d in damage {
        writeln!(out, "{d:.16e}")?;
    }
    out.flush()?;
    Ok(())
}

/// One row per point: position, displacement, velocity and damage.
pub fn write_state_csv(cloud: &PointCloud, state: &FieldState, damage: &[f64], path: &Path) -> Result<()> {
    let dims = cloud.dim().count();
    let axes = &["x", "y", "z"][..dims];
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut header: Vec<String> = axes.iter().map(|a| a.to_string()).collect();
    header.extend(axes.iter().map(|a| format!("u{a}")));
    header.extend(axes.iter().map(|a| format!("v{a}")));
    header.push("damage".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let cols: Vec<String> = p
            .iter()
            .take(dims)
            .chain(state.u[i].iter().take(dims))
            .chain(state.v[i].iter().take(dims))
            .chain(std::iter::once(&damage[i]))
            .map(|c| format!("{c:.16e}"))
            .collect();
        writeln!(out, "{}", cols.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub const CSV_HEADER: &str = "dt,K,scope,error,CR";

/// Six significant digits in scientific notation.
pub fn sci6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Rounds to the six significant digits the table prints.
pub fn round_sci6(x: f64) -> f64 {
    sci6(x).parse().expect("formatted float parses")
}

fn format_rate(rate: &Option<Rate>) -> String {
    match rate {
        None => String::new(),
        Some(Rate::Saturated) => "sat".into(),
        Some(Rate::Value(v)) => sci6(*v),
    }
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut text = format!("{CSV_HEADER}\n");
    for r in rows {
        text += &format!(
            "{},{},{},{},{}\n",
            sci6(r.dt),
            r.substeps,
            r.scope.name(),
            sci6(r.error),
            format_rate(&r.rate)
        );
    }
    text
}

pub fn write_csv(rows: &[ConvergenceRow], path: &Path) -> Result<()> {
    fs::write(path, convergence_csv(rows))?;
    Ok(())
}
