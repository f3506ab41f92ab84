//! CSV serialization for grid fields and ensembles.
//!
//! Values are written with `{:.16e}` (17 significant digits), which
//! round-trips every finite `f64` exactly, so write/read cycles and repeated
//! runs are bit-identical. Fields use `x,y,value` rows in flat grid order;
//! ensembles use one row per location with one column per realization plus a
//! JSON sidecar (`<stem>.meta.json`) carrying the grid geometry and the
//! seed that produced the ensemble.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{Field, Grid2D, Locations};
use crate::ensemble::Ensemble;
use crate::error::{PhikError, Result};

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token.trim().parse::<f64>().map_err(|_| {
        PhikError::Parse(format!("line {line}: invalid number {token:?}"))
    })
}

/// Writes a field as `x,y,value` rows in flat grid order.
pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,value")?;
    let grid = field.grid();
    for (k, v) in field.values().iter().enumerate() {
        let [x, y] = grid.point_at(k);
        writeln!(w, "{x:.16e},{y:.16e},{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field`], reconstructing the grid from the
/// coordinates (first row block fixes `nx`, coordinate extremes fix the
/// bounds) and validating every node position.
pub fn read_field(path: &Path) -> Result<Field> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| PhikError::Parse("empty field file".into()))?;
    if header.trim() != "x,y,value" {
        return Err(PhikError::Parse(format!(
            "expected header 'x,y,value', got {header:?}"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (x, y, v) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(x), Some(y), Some(v), None) => (x, y, v),
            _ => {
                return Err(PhikError::Parse(format!(
                    "line {}: expected 3 comma-separated columns",
                    lineno + 2
                )))
            }
        };
        xs.push(parse_f64(x, lineno + 2)?);
        ys.push(parse_f64(y, lineno + 2)?);
        values.push(parse_f64(v, lineno + 2)?);
    }
    if values.len() < 4 {
        return Err(PhikError::Parse(format!(
            "field needs at least 4 nodes, got {}",
            values.len()
        )));
    }
    // flat order is row-major: the first block shares one y value
    let nx = ys
        .iter()
        .position(|&y| y != ys[0])
        .ok_or_else(|| PhikError::Parse("all rows share one y coordinate".into()))?;
    if values.len() % nx != 0 {
        return Err(PhikError::Parse(format!(
            "{} rows do not tile rows of width {nx}",
            values.len()
        )));
    }
    let ny = values.len() / nx;
    let grid = Grid2D::new(nx, ny, xs[0], xs[nx - 1], ys[0], ys[ys.len() - 1])?;
    let (tol_x, tol_y) = (1e-9 * grid.dx(), 1e-9 * grid.dy());
    for k in 0..grid.n_nodes() {
        let [gx, gy] = grid.point_at(k);
        if (xs[k] - gx).abs() > tol_x || (ys[k] - gy).abs() > tol_y {
            return Err(PhikError::Parse(format!(
                "row {} coordinates ({}, {}) do not match a uniform grid node ({gx}, {gy})",
                k + 2,
                xs[k],
                ys[k]
            )));
        }
    }
    Field::new(grid, values)
}

/// Grid geometry and generation metadata stored next to an ensemble CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub nx: usize,
    pub ny: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
}

/// Sidecar path of an ensemble CSV: `dir/name.csv -> dir/name.meta.json`.
pub fn ensemble_meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes a grid-located ensemble as `loc_index,m0,m1,...` rows plus the JSON
/// sidecar.
pub fn write_ensemble(
    path: &Path,
    ensemble: &Ensemble,
    level: Option<u32>,
    base_seed: Option<u64>,
) -> Result<()> {
    let grid = ensemble.locations().as_grid().ok_or_else(|| {
        PhikError::InvalidArgument(
            "only grid-located ensembles can be serialized".into(),
        )
    })?;
    let (xmin, xmax, ymin, ymax) = grid.bounds();
    let meta = EnsembleMeta {
        nx: grid.nx(),
        ny: grid.ny(),
        xmin,
        xmax,
        ymin,
        ymax,
        level,
        base_seed,
    };
    let meta_file = File::create(ensemble_meta_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(meta_file), &meta)?;

    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "loc_index")?;
    for m in 0..ensemble.n_realizations() {
        write!(w, ",m{m}")?;
    }
    writeln!(w)?;
    for k in 0..ensemble.n_locations() {
        write!(w, "{k}")?;
        for m in 0..ensemble.n_realizations() {
            write!(w, ",{:.16e}", ensemble.realizations()[(k, m)])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an ensemble written by [`write_ensemble`].
pub fn read_ensemble(path: &Path) -> Result<(Ensemble, EnsembleMeta)> {
    let meta_file = File::open(ensemble_meta_path(path))?;
    let meta: EnsembleMeta = serde_json::from_reader(BufReader::new(meta_file))?;
    let grid = Grid2D::new(meta.nx, meta.ny, meta.xmin, meta.xmax, meta.ymin, meta.ymax)?;

    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| PhikError::Parse("empty ensemble file".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"loc_index") || cols.len() < 2 {
        return Err(PhikError::Parse(format!(
            "expected header 'loc_index,m0,...', got {header:?}"
        )));
    }
    let m = cols.len() - 1;
    let n = grid.n_nodes();
    let mut values = DMatrix::zeros(n, m);
    let mut row = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(PhikError::Parse(format!(
                "more rows than the {n} grid nodes declared in the sidecar"
            )));
        }
        let mut parts = line.split(',');
        let idx = parts
            .next()
            .ok_or_else(|| PhikError::Parse(format!("line {}: empty row", lineno + 2)))?;
        let idx: usize = idx.trim().parse().map_err(|_| {
            PhikError::Parse(format!("line {}: invalid location index {idx:?}", lineno + 2))
        })?;
        if idx != row {
            return Err(PhikError::Parse(format!(
                "line {}: expected location index {row}, got {idx}",
                lineno + 2
            )));
        }
        let mut count = 0;
        for (mm, tok) in parts.enumerate() {
            if mm >= m {
                return Err(PhikError::Parse(format!(
                    "line {}: more than {m} realization columns",
                    lineno + 2
                )));
            }
            values[(row, mm)] = parse_f64(tok, lineno + 2)?;
            count += 1;
        }
        if count != m {
            return Err(PhikError::Parse(format!(
                "line {}: expected {m} realization columns, got {count}",
                lineno + 2
            )));
        }
        row += 1;
    }
    if row != n {
        return Err(PhikError::Parse(format!(
            "expected {n} location rows, got {row}"
        )));
    }
    let ensemble = Ensemble::new(Locations::Grid(grid), values)?;
    Ok((ensemble, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use tempfile::tempdir;

    #[test]
    fn field_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("field.csv");
        let grid = Grid2D::new(5, 4, -1.0, 2.0, 0.25, 1.75).unwrap();
        let mut rng = SplitMix64::new(8);
        let field = Field::new(
            grid.clone(),
            (0..20).map(|_| rng.next_standard_normal() * 1e3).collect(),
        )
        .unwrap();
        write_field(&path, &field).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back.grid(), &grid);
        for (a, b) in back.values().iter().zip(field.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn field_write_is_deterministic() {
        let dir = tempdir().unwrap();
        let grid = Grid2D::unit(4, 4).unwrap();
        let field = Field::from_fn(grid, |x, y| (x * 12.3).sin() + y).unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        write_field(&p1, &field).unwrap();
        write_field(&p2, &field).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn field_rejects_malformed_input() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y,value\n0.0,0.0\n").unwrap();
        assert!(matches!(read_field(&path), Err(PhikError::Parse(_))));
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(read_field(&path), Err(PhikError::Parse(_))));
        std::fs::write(&path, "x,y,value\n0,0,oops\n0.5,0,1\n0,1,1\n0.5,1,1\n").unwrap();
        assert!(matches!(read_field(&path), Err(PhikError::Parse(_))));
    }

    #[test]
    fn ensemble_round_trip_with_sidecar() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ens.csv");
        let grid = Grid2D::new(3, 3, 0.0, 1.0, -1.0, 1.0).unwrap();
        let mut rng = SplitMix64::new(3);
        let r = DMatrix::from_fn(9, 4, |_, _| rng.next_standard_normal());
        let e = Ensemble::new(Locations::Grid(grid.clone()), r).unwrap();
        write_ensemble(&path, &e, Some(2), Some(99)).unwrap();
        assert!(ensemble_meta_path(&path).exists());

        let (back, meta) = read_ensemble(&path).unwrap();
        assert_eq!(meta.level, Some(2));
        assert_eq!(meta.base_seed, Some(99));
        assert_eq!(meta.nx, 3);
        assert_eq!(back.locations(), e.locations());
        for (a, b) in back.realizations().iter().zip(e.realizations().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ensemble_read_validates_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ens.csv");
        let grid = Grid2D::unit(2, 2).unwrap();
        let e = Ensemble::new(
            Locations::Grid(grid),
            DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
        )
        .unwrap();
        write_ensemble(&path, &e, None, None).unwrap();

        // truncate a row
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(read_ensemble(&path), Err(PhikError::Parse(_))));
    }

    #[test]
    fn point_located_ensembles_are_not_serializable() {
        let dir = tempdir().unwrap();
        let ps = crate::domain::PointSet::from_2d(&[[0.0, 0.0], [1.0, 0.5]]).unwrap();
        let e = Ensemble::new(
            Locations::Points(ps),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
        )
        .unwrap();
        let path = dir.path().join("ens.csv");
        assert!(write_ensemble(&path, &e, None, None).is_err());
    }
}
