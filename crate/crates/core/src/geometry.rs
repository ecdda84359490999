//! Cell-centred grids, control/observation regions and the inverse-square potential.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Layout of the spatial mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// One-dimensional radial mesh for a radially symmetric problem in three dimensions.
    Radial3d,
    /// Full N-dimensional box `(-L, L)^N`.
    Tensor,
}

/// Input description of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mode: GridMode,
    /// Spatial dimension; forced to 3 in radial mode.
    pub dimension: usize,
    /// Outer radius (radial) or half-width (tensor).
    pub extent: f64,
    pub cells_per_axis: usize,
}

impl GridSpec {
    pub fn radial(extent: f64, cells: usize) -> Self {
        GridSpec { mode: GridMode::Radial3d, dimension: 3, extent, cells_per_axis: cells }
    }

    pub fn tensor(dimension: usize, extent: f64, cells: usize) -> Self {
        GridSpec { mode: GridMode::Tensor, dimension, extent, cells_per_axis: cells }
    }
}

/// A validated cell-centred grid. The origin is never a cell centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    mode: GridMode,
    dimension: usize,
    extent: f64,
    cells_per_axis: usize,
    spacing: f64,
    /// Per-cell coordinates: the radius in radial mode, N components in tensor mode.
    coords: Vec<f64>,
    radii: Vec<f64>,
    volumes: Vec<f64>,
}

pub const MIN_CELLS_PER_AXIS: usize = 8;

/// Build a grid from its description.
pub fn build_grid(spec: &GridSpec) -> Result<SpatialGrid, GeometryError> {
    if !(spec.extent > 1.0) || !spec.extent.is_finite() {
        return Err(GeometryError::ExtentTooSmall(spec.extent));
    }
    if spec.cells_per_axis < MIN_CELLS_PER_AXIS {
        return Err(GeometryError::TooFewCells(spec.cells_per_axis));
    }
    let n = spec.cells_per_axis;
    match spec.mode {
        GridMode::Radial3d => {
            if spec.dimension != 3 {
                log::warn!("radial3d grids are three-dimensional; dimension {} ignored", spec.dimension);
            }
            let h = spec.extent / n as f64;
            let radii: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) * h).collect();
            let volumes = radii.iter().map(|r| 4.0 * std::f64::consts::PI * r * r * h).collect();
            Ok(SpatialGrid {
                mode: GridMode::Radial3d,
                dimension: 3,
                extent: spec.extent,
                cells_per_axis: n,
                spacing: h,
                coords: radii.clone(),
                radii,
                volumes,
            })
        }
        GridMode::Tensor => {
            let dim = spec.dimension;
            if dim < 2 {
                return Err(GeometryError::InvalidDimension(dim));
            }
            if n % 2 == 1 {
                return Err(GeometryError::OriginNode(n));
            }
            let total = n.checked_pow(dim as u32).ok_or(GeometryError::InvalidDimension(dim))?;
            let h = 2.0 * spec.extent / n as f64;
            let axis: Vec<f64> = (0..n).map(|k| -spec.extent + (k as f64 + 0.5) * h).collect();
            let mut coords = Vec::with_capacity(total * dim);
            let mut radii = Vec::with_capacity(total);
            let mut idx = vec![0usize; dim];
            for _ in 0..total {
                let mut r2 = 0.0;
                for &k in &idx {
                    coords.push(axis[k]);
                    r2 += axis[k] * axis[k];
                }
                radii.push(r2.sqrt());
                for d in (0..dim).rev() {
                    idx[d] += 1;
                    if idx[d] < n {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let vol = h.powi(dim as i32);
            Ok(SpatialGrid {
                mode: GridMode::Tensor,
                dimension: dim,
                extent: spec.extent,
                cells_per_axis: n,
                spacing: h,
                coords,
                radii,
                volumes: vec![vol; total],
            })
        }
    }
}

impl SpatialGrid {
    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn n_cells(&self) -> usize {
        self.radii.len()
    }

    /// Number of coordinates stored per cell.
    pub fn coord_len(&self) -> usize {
        match self.mode {
            GridMode::Radial3d => 1,
            GridMode::Tensor => self.dimension,
        }
    }

    /// Cell centre: `[r]` in radial mode, `[x_1, .., x_N]` otherwise.
    pub fn center(&self, j: usize) -> &[f64] {
        let k = self.coord_len();
        &self.coords[j * k..(j + 1) * k]
    }

    /// Euclidean norm of the cell centre.
    pub fn radius(&self, j: usize) -> f64 {
        self.radii[j]
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Quadrature weight of each cell.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Multi-index of a tensor cell, axis 0 slowest.
    pub fn tensor_index(&self, mut j: usize) -> Vec<usize> {
        let n = self.cells_per_axis;
        let mut idx = vec![0; self.dimension];
        for d in (0..self.dimension).rev() {
            idx[d] = j % n;
            j /= n;
        }
        idx
    }

    /// Inverse of [`tensor_index`](Self::tensor_index).
    pub fn tensor_flat(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &k| acc * self.cells_per_axis + k)
    }

    /// Volume of the continuous domain.
    pub fn domain_volume(&self) -> f64 {
        match self.mode {
            GridMode::Radial3d => 4.0 / 3.0 * std::f64::consts::PI * self.extent.powi(3),
            GridMode::Tensor => (2.0 * self.extent).powi(self.dimension as i32),
        }
    }
}

/// Optimal constant of the Hardy inequality in dimension `n`.
pub fn hardy_constant(n: usize) -> f64 {
    let m = n as f64 - 2.0;
    m * m / 4.0
}

/// Per-cell values of `μ/|x|²`.
pub fn hardy_potential(grid: &SpatialGrid, mu: f64) -> Result<Vec<f64>, GeometryError> {
    check_mu(grid.dimension(), mu)?;
    Ok(grid.radii().iter().map(|r| mu / (r * r)).collect())
}

pub(crate) fn check_mu(dimension: usize, mu: f64) -> Result<(), GeometryError> {
    let max = hardy_constant(dimension);
    if !(mu >= 0.0 && mu <= max) {
        return Err(GeometryError::MuOutOfRange { mu, max });
    }
    Ok(())
}

/// One elementary region shape, in domain coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// `inner < |x| < outer`; a ball when `inner` is 0.
    Annulus { inner: f64, outer: f64 },
    /// Open axis-aligned box; in radial mode `lo`, `hi` have one entry (the radius).
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Shape {
    pub fn annulus(inner: f64, outer: f64) -> Self {
        Shape::Annulus { inner, outer }
    }

    fn contains(&self, grid: &SpatialGrid, j: usize) -> bool {
        match self {
            Shape::Annulus { inner, outer } => {
                let r = grid.radius(j);
                r > *inner && r < *outer
            }
            Shape::Box { lo, hi } => grid
                .center(j)
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (a, b))| x > a && x < b),
        }
    }

    /// Whether the open shape meets the closed unit ball.
    fn meets_unit_ball(&self) -> bool {
        match self {
            Shape::Annulus { inner, outer } => inner < &1.0 && outer > inner,
            Shape::Box { lo, hi } => {
                let d2: f64 = lo
                    .iter()
                    .zip(hi)
                    .map(|(a, b)| {
                        let c = if *a > 0.0 { *a } else if *b < 0.0 { -*b } else { 0.0 };
                        c * c
                    })
                    .sum();
                d2 < 1.0
            }
        }
    }
}

/// Union of shapes.
pub type Region = Vec<Shape>;

fn region_mask(grid: &SpatialGrid, region: &Region) -> Vec<bool> {
    (0..grid.n_cells()).map(|j| region.iter().any(|s| s.contains(grid, j))).collect()
}

/// Radial intervals `(inner, outer)` of a region made only of annuli.
pub fn radial_intervals(region: &Region) -> Option<Vec<(f64, f64)>> {
    region
        .iter()
        .map(|s| match s {
            Shape::Annulus { inner, outer } => Some((*inner, *outer)),
            Shape::Box { lo, hi } if lo.len() == 1 => Some((lo[0].max(0.0), hi[0])),
            Shape::Box { .. } => None,
        })
        .collect()
}

/// Which observability geometry the targets realise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFlag {
    /// Both followers track the same region.
    Shared,
    /// The target regions differ inside the leader region.
    Distinct,
}

/// Geometry of the five regions plus the case flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub control: Region,
    pub followers: [Region; 2],
    pub targets: [Region; 2],
    pub case: CaseFlag,
}

/// Indicator masks of the leader, follower and target regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub control: Vec<bool>,
    pub followers: [Vec<bool>; 2],
    pub targets: [Vec<bool>; 2],
    pub case: CaseFlag,
}

impl RegionSet {
    pub fn shared_targets(&self) -> bool {
        self.targets[0] == self.targets[1]
    }

    /// CSV with one row per cell: index, coordinates, five 0/1 columns.
    pub fn to_csv(&self, grid: &SpatialGrid) -> String {
        let mut out = String::from("cell");
        for d in 0..grid.coord_len() {
            out.push_str(&format!(",x{d}"));
        }
        out.push_str(",control,follower1,follower2,target1,target2\n");
        for j in 0..grid.n_cells() {
            out.push_str(&j.to_string());
            for x in grid.center(j) {
                out.push_str(&format!(",{x:e}"));
            }
            for m in [&self.control, &self.followers[0], &self.followers[1], &self.targets[0], &self.targets[1]] {
                out.push_str(if m[j] { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

/// Rasterise the regions and check every geometric hypothesis.
pub fn build_regions(grid: &SpatialGrid, spec: &RegionSpec) -> Result<RegionSet, GeometryError> {
    for (name, region) in [
        ("control", &spec.control),
        ("follower 1", &spec.followers[0]),
        ("follower 2", &spec.followers[1]),
        ("target 1", &spec.targets[0]),
        ("target 2", &spec.targets[1]),
    ] {
        for s in region {
            if let Shape::Box { lo, hi } = s {
                if lo.len() != grid.coord_len() || hi.len() != grid.coord_len() {
                    return Err(GeometryError::ShapeDimension { region: name.into() });
                }
            }
        }
    }
    let set = RegionSet {
        control: region_mask(grid, &spec.control),
        followers: [region_mask(grid, &spec.followers[0]), region_mask(grid, &spec.followers[1])],
        targets: [region_mask(grid, &spec.targets[0]), region_mask(grid, &spec.targets[1])],
        case: spec.case,
    };
    for (name, m) in [
        ("control", &set.control),
        ("follower 1", &set.followers[0]),
        ("follower 2", &set.followers[1]),
        ("target 1", &set.targets[0]),
        ("target 2", &set.targets[1]),
    ] {
        if !m.iter().any(|&b| b) {
            return Err(GeometryError::EmptyRegion { region: name.into() });
        }
    }
    for i in 0..2 {
        let touches = spec.targets[i].iter().any(Shape::meets_unit_ball)
            || (0..grid.n_cells()).any(|j| set.targets[i][j] && grid.radius(j) <= 1.0);
        if touches {
            return Err(GeometryError::SingularOverlap { target: i + 1 });
        }
        if !set.control.iter().zip(&set.targets[i]).any(|(a, b)| *a && *b) {
            return Err(GeometryError::EmptyIntersection { target: i + 1 });
        }
    }
    let within_control = |m: &Vec<bool>| -> Vec<bool> { m.iter().zip(&set.control).map(|(a, b)| *a && *b).collect() };
    match spec.case {
        CaseFlag::Shared if set.targets[0] != set.targets[1] => {
            return Err(GeometryError::CaseMismatch("shared case needs identical target masks".into()))
        }
        CaseFlag::Distinct if within_control(&set.targets[0]) == within_control(&set.targets[1]) => {
            return Err(GeometryError::CaseMismatch(
                "distinct case needs different target masks inside the control region".into(),
            ))
        }
        _ => {}
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_centers_are_offset() {
        let g = build_grid(&GridSpec::radial(2.0, 64)).unwrap();
        assert_eq!(g.n_cells(), 64);
        assert_eq!(g.radius(0), 2.0 / 64.0 / 2.0);
        assert!((g.radius(63) - 63.5 * 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_2d_counts() {
        let g = build_grid(&GridSpec::tensor(2, 1.5, 16)).unwrap();
        assert_eq!(g.n_cells(), 256);
        assert_eq!(g.spacing(), 0.1875);
        let j = g.tensor_flat(&[3, 11]);
        assert_eq!(g.tensor_index(j), vec![3, 11]);
    }

    #[test]
    fn rejects_small_extent_and_odd_counts() {
        assert!(matches!(build_grid(&GridSpec::radial(1.0, 16)), Err(GeometryError::ExtentTooSmall(_))));
        assert!(matches!(build_grid(&GridSpec::tensor(2, 1.5, 9)), Err(GeometryError::OriginNode(9))));
        assert!(matches!(build_grid(&GridSpec::tensor(2, 1.5, 6)), Err(GeometryError::TooFewCells(6))));
    }

    #[test]
    fn hardy_examples() {
        assert_eq!(hardy_constant(3), 0.25);
        assert_eq!(hardy_constant(2), 0.0);
        assert_eq!(hardy_constant(4), 1.0);
        assert!(matches!(check_mu(3, 0.3), Err(GeometryError::MuOutOfRange { .. })));
    }
}
