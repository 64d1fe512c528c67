//! Nodal field files and legacy VTK volume export.

use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::{ElementLocator, TetMesh};
use crate::recon::VolumeGrid;

#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
}

/// `field v1 N` header followed by one value per line.
pub fn field_to_text(values: &[f64]) -> String {
    let mut s = format!("field v1 {}\n", values.len());
    for v in values {
        let _ = writeln!(s, "{v:e}");
    }
    s
}

pub fn field_from_text(text: &str) -> Result<Vec<f64>, ExportError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let n = match header.as_slice() {
        ["field", "v1", n] => n.parse::<usize>().map_err(|_| ExportError::Parse { line: 1, msg: format!("bad count `{n}`") })?,
        _ => return Err(ExportError::Parse { line: 1, msg: "expected `field v1 N`".into() }),
    };
    let mut values = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| ExportError::Parse { line: i + 2, msg: format!("cannot parse `{t}`") })?;
        if !v.is_finite() {
            return Err(ExportError::Parse { line: i + 2, msg: "non-finite value".into() });
        }
        values.push(v);
    }
    if values.len() != n {
        return Err(ExportError::Length { expected: n, found: values.len() });
    }
    Ok(values)
}

/// P1 interpolation of a nodal field onto the grid; points outside the mesh get 0.
pub fn nodal_to_grid(mesh: &TetMesh, values: &[f64], grid: &VolumeGrid) -> Vec<f64> {
    let loc = ElementLocator::new(mesh);
    grid.points().into_iter().map(|p| loc.interpolate(values, p).unwrap_or(0.0)).collect()
}

/// 1 inside the mesh, 0 outside.
pub fn domain_mask(mesh: &TetMesh, grid: &VolumeGrid) -> Vec<bool> {
    let loc = ElementLocator::new(mesh);
    grid.points().into_iter().map(|p| loc.locate(p).is_some()).collect()
}

/// Legacy ASCII VTK `STRUCTURED_POINTS` with one scalar array.
pub fn vtk_structured_points(grid: &VolumeGrid, name: &str, values: &[f64]) -> String {
    assert_eq!(values.len(), grid.len());
    let [nx, ny, nz] = grid.dims;
    let mut s = String::from("# vtk DataFile Version 3.0\nfluorescence volume\nASCII\nDATASET STRUCTURED_POINTS\n");
    let _ = writeln!(s, "DIMENSIONS {nx} {ny} {nz}");
    let _ = writeln!(s, "ORIGIN {:e} {:e} {:e}", grid.origin[0], grid.origin[1], grid.origin[2]);
    let _ = writeln!(s, "SPACING {:e} {:e} {:e}", grid.spacing[0], grid.spacing[1], grid.spacing[2]);
    let _ = writeln!(s, "POINT_DATA {}", grid.len());
    let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
    for v in values {
        let _ = writeln!(s, "{v:e}");
    }
    s
}

/// Reads back a file written by [`vtk_structured_points`].
pub fn read_vtk_structured_points(text: &str) -> Result<(VolumeGrid, Vec<f64>), ExportError> {
    let lines: Vec<&str> = text.lines().collect();
    let err = |line: usize, msg: &str| ExportError::Parse { line, msg: msg.to_string() };
    let find = |key: &str| -> Result<(usize, Vec<&str>), ExportError> {
        lines
            .iter()
            .position(|l| l.starts_with(key))
            .map(|i| (i + 1, lines[i].split_whitespace().skip(1).collect()))
            .ok_or_else(|| err(0, &format!("missing {key}")))
    };
    let triple = |key: &str| -> Result<[f64; 3], ExportError> {
        let (ln, t) = find(key)?;
        let v: Vec<f64> = t.iter().map(|x| x.parse()).collect::<Result<_, _>>().map_err(|_| err(ln, key))?;
        v.try_into().map_err(|_| err(ln, key))
    };
    if lines.len() < 10 || !lines[0].starts_with("# vtk DataFile") || lines[2] != "ASCII" {
        return Err(err(1, "not an ASCII legacy VTK file"));
    }
    let dims = triple("DIMENSIONS")?;
    let grid = VolumeGrid {
        origin: triple("ORIGIN")?,
        spacing: triple("SPACING")?,
        dims: dims.map(|d| d as usize),
    };
    let (ln, _) = find("LOOKUP_TABLE")?;
    let values: Vec<f64> = lines[ln..]
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| err(ln + i + 1, "bad scalar")))
        .collect::<Result<_, _>>()?;
    if values.len() != grid.len() {
        return Err(ExportError::Length { expected: grid.len(), found: values.len() });
    }
    Ok((grid, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_slab_mesh;

    #[test]
    fn field_round_trip() {
        let v = vec![0.0, 1.5, -2.25e-7, 3.0 / 7.0];
        assert_eq!(field_from_text(&field_to_text(&v)).unwrap(), v);
        assert_eq!(field_from_text("field v1 3\n1\n2\n"), Err(ExportError::Length { expected: 3, found: 2 }));
        assert!(matches!(field_from_text("field v1 1\nx\n"), Err(ExportError::Parse { line: 2, .. })));
    }

    #[test]
    fn vtk_round_trip() {
        let grid = VolumeGrid { origin: [0.0, -1.0, 0.5], spacing: [0.5, 1.0, 2.0], dims: [3, 2, 2] };
        let values: Vec<f64> = (0..12).map(|i| i as f64 / 3.0).collect();
        let text = vtk_structured_points(&grid, "c", &values);
        let (g, v) = read_vtk_structured_points(&text).unwrap();
        assert_eq!(g, grid);
        assert_eq!(v, values);
    }

    #[test]
    fn nodal_grid_matches_nodes_on_aligned_grid() {
        let mesh = generate_slab_mesh([10.0, 5.0, 5.0], 2.5).unwrap();
        let values: Vec<f64> = (0..mesh.num_nodes()).map(|i| (i as f64 * 0.37).sin()).collect();
        let grid = VolumeGrid::covering(&mesh, 2.5);
        let g = nodal_to_grid(&mesh, &values, &grid);
        // slab nodes and grid points share ordering (x fastest)
        for (a, b) in g.iter().zip(&values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(domain_mask(&mesh, &grid).iter().all(|&m| m));
    }
}
