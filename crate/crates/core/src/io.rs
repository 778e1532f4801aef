//! Plain-text exports: CSV with 17 significant digits, legacy ASCII VTK, COO matrices.

use std::io::Write;

use crate::error::Result;
use crate::grid::{Nozzle, ScalarField};

/// Round-trippable decimal rendering (17 significant digits).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per node: coordinates then one column per field.
pub fn write_fields_csv<W: Write>(grid: &Nozzle, fields: &[(&str, &ScalarField)], out: W) -> Result<()> {
    write_fields_csv_at(grid, |k| grid.coords(k), fields, out)
}

/// As [`write_fields_csv`] with caller-supplied node positions (e.g. a deformed grid).
pub fn write_fields_csv_at<W: Write>(
    grid: &Nozzle,
    position: impl Fn(usize) -> Vec<f64>,
    fields: &[(&str, &ScalarField)],
    mut out: W,
) -> Result<()> {
    for (_, f) in fields {
        f.check(grid)?;
    }
    let axes = ["x", "y", "z"];
    let mut header: Vec<&str> = axes[..grid.dim()].to_vec();
    header.extend(fields.iter().map(|(n, _)| *n));
    writeln!(out, "{}", header.join(","))?;
    for k in 0..grid.num_nodes() {
        let mut row: Vec<String> = position(k).into_iter().map(fmt17).collect();
        row.extend(fields.iter().map(|(_, f)| fmt17(f.values[k])));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn vtk_dims(grid: &Nozzle) -> [usize; 3] {
    let mut d = [1; 3];
    d[..grid.dim()].copy_from_slice(&grid.counts);
    d
}

fn vtk_point_data<W: Write>(grid: &Nozzle, fields: &[(&str, &ScalarField)], out: &mut W) -> Result<()> {
    writeln!(out, "POINT_DATA {}", grid.num_nodes())?;
    for (name, f) in fields {
        f.check(grid)?;
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in &f.values {
            writeln!(out, "{}", fmt17(*v))?;
        }
    }
    Ok(())
}

/// Legacy ASCII VTK `STRUCTURED_POINTS` on the reference grid.
pub fn write_fields_vtk<W: Write>(grid: &Nozzle, fields: &[(&str, &ScalarField)], mut out: W) -> Result<()> {
    let d = vtk_dims(grid);
    let mut origin = [0.0; 3];
    let mut spacing = [1.0; 3];
    origin[..grid.dim()].copy_from_slice(&grid.lower);
    spacing[..grid.dim()].copy_from_slice(&grid.spacing);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "nozzle fields")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {} {} {}", d[0], d[1], d[2])?;
    writeln!(out, "ORIGIN {} {} {}", fmt17(origin[0]), fmt17(origin[1]), fmt17(origin[2]))?;
    writeln!(out, "SPACING {} {} {}", fmt17(spacing[0]), fmt17(spacing[1]), fmt17(spacing[2]))?;
    vtk_point_data(grid, fields, &mut out)
}

/// Legacy ASCII VTK `STRUCTURED_GRID` with explicit (possibly deformed) node positions.
pub fn write_fields_vtk_at<W: Write>(
    grid: &Nozzle,
    position: impl Fn(usize) -> Vec<f64>,
    fields: &[(&str, &ScalarField)],
    mut out: W,
) -> Result<()> {
    let d = vtk_dims(grid);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "nozzle fields (physical coordinates)")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_GRID")?;
    writeln!(out, "DIMENSIONS {} {} {}", d[0], d[1], d[2])?;
    writeln!(out, "POINTS {} double", grid.num_nodes())?;
    for k in 0..grid.num_nodes() {
        let mut p = position(k);
        p.resize(3, 0.0);
        writeln!(out, "{} {} {}", fmt17(p[0]), fmt17(p[1]), fmt17(p[2]))?;
    }
    vtk_point_data(grid, fields, &mut out)
}

/// Coordinate-format dump: header `rows cols nnz`, then `row col value` lines.
pub fn write_coo<W: Write>(rows: usize, cols: usize, entries: &[(usize, usize, f64)], mut out: W) -> Result<()> {
    writeln!(out, "{rows} {cols} {}", entries.len())?;
    for (r, c, v) in entries {
        writeln!(out, "{r} {c} {}", fmt17(*v))?;
    }
    Ok(())
}
