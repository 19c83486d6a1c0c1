use std::fmt::Write as _;
use std::path::Path;

use super::{format_sig, write_text, GridFile};
use crate::error::{Error, Result};

/// Legacy ASCII `STRUCTURED_POINTS` rendering with one `SCALARS` block per
/// channel, values in x-fastest order.
pub fn vtk_string(grid: &GridFile) -> Result<String> {
    if grid.channels.is_empty() {
        return Err(Error::invalid("VTK export needs at least one channel"));
    }
    let g = grid.geometry;
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "fluvinv grid");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", g.nx, g.ny, g.nz);
    let _ = writeln!(s, "ORIGIN 0 0 0");
    let _ = writeln!(s, "SPACING {} {} {}", g.dx, g.dy, g.dz);
    let _ = writeln!(s, "POINT_DATA {}", g.cells());
    for (name, t) in &grid.channels {
        let _ = writeln!(s, "SCALARS {name} float 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for row in t.data().chunks(g.nx) {
            let line: Vec<String> = row.iter().map(|v| format_sig(*v, 9)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    Ok(s)
}

pub fn export_vtk(grid: &GridFile, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &vtk_string(grid)?)
}
