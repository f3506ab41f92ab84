//! Location and field containers: point sets, uniform 2-D grids, discrete
//! fields, and observations.
//!
//! All discrete fields are stored row-major flattened; [`Grid2D`] is the single
//! source of index arithmetic (`flat = j * nx + i`).

use serde::{Deserialize, Serialize};

use crate::error::{PhikError, Result};

/// An ordered set of pairwise-distinct points in `dim` dimensions.
///
/// Duplicate locations are rejected at construction (with exact coordinate
/// comparison) because they make covariance matrices singular.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Vec<f64>,
    dim: usize,
}

impl PointSet {
    /// Builds a point set from flattened coordinates (`coords.len()` must be a
    /// multiple of `dim`). All coordinates must be finite and no two points may
    /// be exactly identical.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(PhikError::InvalidArgument(
                "point dimension must be positive".into(),
            ));
        }
        if coords.len() % dim != 0 {
            return Err(PhikError::DimensionMismatch {
                context: "PointSet coordinates",
                expected: dim * (coords.len() / dim + 1),
                got: coords.len(),
            });
        }
        if let Some(bad) = coords.iter().find(|v| !v.is_finite()) {
            return Err(PhikError::NonFinite(format!(
                "point coordinate {bad} in PointSet"
            )));
        }
        let set = Self { coords, dim };
        let n = set.len();
        for i in 0..n {
            for j in (i + 1)..n {
                if set.point(i) == set.point(j) {
                    return Err(PhikError::DuplicateLocation { first: i, second: j });
                }
            }
        }
        Ok(set)
    }

    /// Convenience constructor for 2-D points.
    pub fn from_2d(points: &[[f64; 2]]) -> Result<Self> {
        let coords = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(2, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinates of the `i`-th point.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Returns a copy with `point` appended (re-runs the duplicate check).
    pub fn with_point(&self, point: &[f64]) -> Result<Self> {
        if point.len() != self.dim {
            return Err(PhikError::DimensionMismatch {
                context: "PointSet::with_point",
                expected: self.dim,
                got: point.len(),
            });
        }
        let mut coords = self.coords.clone();
        coords.extend_from_slice(point);
        Self::new(self.dim, coords)
    }

    /// Axis-aligned bounding box as (lower, upper) corner vectors.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.iter() {
            for (k, &v) in p.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    }
}

/// A uniform 2-D grid: `nx x ny` nodes over `[xmin, xmax] x [ymin, ymax]`.
///
/// Node `(i, j)` sits at `(xmin + i*dx, ymin + j*dy)` and has flattened index
/// `j * nx + i` (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(PhikError::InvalidArgument(format!(
                "grid needs at least 2 nodes per axis, got {nx} x {ny}"
            )));
        }
        for v in [xmin, xmax, ymin, ymax] {
            if !v.is_finite() {
                return Err(PhikError::NonFinite(format!("grid bound {v}")));
            }
        }
        if xmax <= xmin || ymax <= ymin {
            return Err(PhikError::InvalidArgument(format!(
                "degenerate grid bounds [{xmin}, {xmax}] x [{ymin}, {ymax}]"
            )));
        }
        Ok(Self { nx, ny, xmin, xmax, ymin, ymax })
    }

    /// The unit square `[0,1]^2`.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 0.0, 1.0, 0.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.xmin, self.xmax, self.ymin, self.ymax)
    }

    /// Exact equality of domain bounds (required for inter-grid interpolation).
    pub fn same_bounds(&self, other: &Grid2D) -> bool {
        self.xmin == other.xmin
            && self.xmax == other.xmax
            && self.ymin == other.ymin
            && self.ymax == other.ymax
    }

    pub fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.ymax - self.ymin) / (self.ny - 1) as f64
    }

    /// Area of one grid cell, used as the quadrature weight of discrete L2 norms.
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.xmin + i as f64 * (self.xmax - self.xmin) / (self.nx - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.ymin + j as f64 * (self.ymax - self.ymin) / (self.ny - 1) as f64
    }

    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x(i), self.y(j)]
    }

    pub fn flat_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn from_flat(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn point_at(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.from_flat(k);
        self.point(i, j)
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    /// Flat index and coordinates of the node nearest to `(x, y)`.
    pub fn nearest_node(&self, x: f64, y: f64) -> (usize, [f64; 2]) {
        let fi = ((x - self.xmin) / self.dx()).round();
        let fj = ((y - self.ymin) / self.dy()).round();
        let i = (fi.max(0.0) as usize).min(self.nx - 1);
        let j = (fj.max(0.0) as usize).min(self.ny - 1);
        (self.flat_index(i, j), self.point(i, j))
    }

    /// Flat index of the node at `(x, y)`, if some node lies within a
    /// 1e-9-cell tolerance of that position. Used to interpret arbitrary
    /// coordinates as members of the grid's location set.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let (k, node) = self.nearest_node(x, y);
        let tol_x = 1e-9 * self.dx();
        let tol_y = 1e-9 * self.dy();
        if (x - node[0]).abs() <= tol_x && (y - node[1]).abs() <= tol_y {
            Some(k)
        } else {
            None
        }
    }

    /// All nodes as a flat-ordered point set.
    pub fn to_point_set(&self) -> PointSet {
        let mut coords = Vec::with_capacity(2 * self.n_nodes());
        for k in 0..self.n_nodes() {
            coords.extend_from_slice(&self.point_at(k));
        }
        // Grid nodes are distinct by construction.
        PointSet { coords, dim: 2 }
    }
}

/// A scalar field sampled on every node of a [`Grid2D`], stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(PhikError::DimensionMismatch {
                context: "Field values",
                expected: grid.n_nodes(),
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(PhikError::NonFinite(format!("field value {bad}")));
        }
        Ok(Self { grid, values })
    }

    /// Evaluates `f(x, y)` at every node.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.n_nodes())
            .map(|k| {
                let p = grid.point_at(k);
                f(p[0], p[1])
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.flat_index(i, j)]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Relative Frobenius error `||reconstruction - truth||_F / ||truth||_F`
/// between two fields on the same grid.
pub fn relative_frobenius_error(reconstruction: &Field, truth: &Field) -> Result<f64> {
    if reconstruction.grid() != truth.grid() {
        return Err(PhikError::GridMismatch(
            "relative_frobenius_error requires identical grids".into(),
        ));
    }
    Ok(relative_l2_error(reconstruction.values(), truth.values()))
}

/// Relative l2 error between two equally long value vectors.
pub fn relative_l2_error(reconstruction: &[f64], truth: &[f64]) -> f64 {
    let diff: f64 = reconstruction
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm: f64 = truth.iter().map(|v| v * v).sum();
    (diff / norm).sqrt()
}

/// Observed state values `y` at a set of locations.
#[derive(Clone, Debug)]
pub struct Observations {
    locations: PointSet,
    values: Vec<f64>,
}

impl Observations {
    pub fn new(locations: PointSet, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(PhikError::DimensionMismatch {
                context: "Observations values",
                expected: locations.len(),
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(PhikError::NonFinite(format!("observed value {bad}")));
        }
        Ok(Self { locations, values })
    }

    pub fn locations(&self) -> &PointSet {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Returns a copy extended by one observation.
    pub fn with_observation(&self, point: &[f64], value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(PhikError::NonFinite(format!("observed value {value}")));
        }
        let locations = self.locations.with_point(point)?;
        let mut values = self.values.clone();
        values.push(value);
        Ok(Self { locations, values })
    }
}

/// Prediction/ensemble locations: either an explicit point list or a full grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Locations {
    Points(PointSet),
    Grid(Grid2D),
}

impl Locations {
    pub fn len(&self) -> usize {
        match self {
            Locations::Points(ps) => ps.len(),
            Locations::Grid(g) => g.n_nodes(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Locations::Points(ps) => ps.dim(),
            Locations::Grid(_) => 2,
        }
    }

    /// Materializes the locations as a point set (flat order for grids).
    pub fn to_point_set(&self) -> PointSet {
        match self {
            Locations::Points(ps) => ps.clone(),
            Locations::Grid(g) => g.to_point_set(),
        }
    }

    /// Index of the member equal to `p` (grid: within a 1e-9-cell snap
    /// tolerance; point list: exact coordinate equality).
    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        match self {
            Locations::Grid(g) => {
                if p.len() == 2 {
                    g.locate(p[0], p[1])
                } else {
                    None
                }
            }
            Locations::Points(ps) => ps.iter().position(|q| q == p),
        }
    }

    /// The underlying grid, if the locations are a grid.
    pub fn as_grid(&self) -> Option<&Grid2D> {
        match self {
            Locations::Grid(g) => Some(g),
            Locations::Points(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_set_rejects_duplicates() {
        let err = PointSet::from_2d(&[[0.0, 1.0], [0.5, 0.5], [0.0, 1.0]]).unwrap_err();
        match err {
            PhikError::DuplicateLocation { first, second } => {
                assert_eq!((first, second), (0, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn point_set_rejects_non_finite() {
        assert!(PointSet::from_2d(&[[f64::NAN, 0.0]]).is_err());
        assert!(PointSet::new(2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn grid_index_round_trip() {
        let g = Grid2D::new(5, 3, -1.0, 1.0, 0.0, 4.0).unwrap();
        assert_eq!(g.n_nodes(), 15);
        for k in 0..g.n_nodes() {
            let (i, j) = g.from_flat(k);
            assert_eq!(g.flat_index(i, j), k);
        }
        // row-major: flat = j*nx + i
        assert_eq!(g.flat_index(2, 1), 7);
        assert_eq!(g.point(0, 0), [-1.0, 0.0]);
        assert_eq!(g.point(4, 2), [1.0, 4.0]);
        assert_eq!(g.point(2, 1), [0.0, 2.0]);
    }

    #[test]
    fn grid_locate_snaps_only_nearby_points() {
        let g = Grid2D::unit(41, 41).unwrap();
        let p = g.point(13, 27);
        assert_eq!(g.locate(p[0], p[1]), Some(g.flat_index(13, 27)));
        // a perturbation well below the tolerance still locates
        assert_eq!(
            g.locate(p[0] + 1e-13, p[1] - 1e-13),
            Some(g.flat_index(13, 27))
        );
        // half a cell away is not a member
        assert_eq!(g.locate(p[0] + g.dx() / 2.0, p[1]), None);
    }

    #[test]
    fn grid_rejects_degenerate_bounds() {
        assert!(Grid2D::new(1, 5, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(Grid2D::new(5, 5, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(Grid2D::new(5, 5, 0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn field_length_must_match_grid() {
        let g = Grid2D::unit(3, 3).unwrap();
        assert!(Field::new(g.clone(), vec![0.0; 8]).is_err());
        assert!(Field::new(g, vec![0.0; 9]).is_ok());
    }

    #[test]
    fn relative_error_of_identical_fields_is_zero() {
        let g = Grid2D::unit(4, 4).unwrap();
        let f = Field::from_fn(g, |x, y| 1.0 + x + y * y).unwrap();
        assert_eq!(relative_frobenius_error(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn relative_error_scaling() {
        // reconstruction = 1.1 * truth gives exactly 10% relative error
        let g = Grid2D::unit(4, 4).unwrap();
        let truth = Field::from_fn(g.clone(), |x, y| 1.0 + x - y).unwrap();
        let rec = Field::new(
            g,
            truth.values().iter().map(|v| 1.1 * v).collect(),
        )
        .unwrap();
        let e = relative_frobenius_error(&rec, &truth).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn observations_check_lengths() {
        let ps = PointSet::from_2d(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(Observations::new(ps.clone(), vec![1.0]).is_err());
        let obs = Observations::new(ps, vec![1.0, 2.0]).unwrap();
        let obs2 = obs.with_observation(&[0.5, 0.5], 3.0).unwrap();
        assert_eq!(obs2.len(), 3);
        // appending an existing location fails the duplicate check
        assert!(obs2.with_observation(&[0.0, 0.0], 9.0).is_err());
    }

    #[test]
    fn locations_locate_points_and_grid() {
        let g = Grid2D::unit(3, 3).unwrap();
        let locs = Locations::Grid(g.clone());
        assert_eq!(locs.locate(&g.point(1, 2)), Some(7));
        let ps = PointSet::from_2d(&[[0.25, 0.5], [0.75, 0.1]]).unwrap();
        let locs = Locations::Points(ps);
        assert_eq!(locs.locate(&[0.75, 0.1]), Some(1));
        assert_eq!(locs.locate(&[0.75, 0.11]), None);
    }
}
