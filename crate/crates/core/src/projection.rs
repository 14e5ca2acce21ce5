//! The five point-plane projections and their inverses.
//!
//! Each projection assigns every 3D point to a cell of a 2D grid
//! (three Cartesian planes, a log-radial polar grid, or a spherical
//! range image), scatters per-point features into cells by arithmetic
//! mean, and gathers them back per point. Scatter accumulation always
//! runs in ascending point-index order so results are reproducible.

use serde::{Deserialize, Serialize};

use crate::cloud::{CropBounds, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The projection plane used by a backbone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneKind {
    PolarGrid,
    Xy,
    Xz,
    Yz,
    RangeImage,
}

impl PlaneKind {
    pub const ALL: [PlaneKind; 5] = [
        PlaneKind::PolarGrid,
        PlaneKind::Xy,
        PlaneKind::Xz,
        PlaneKind::Yz,
        PlaneKind::RangeImage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlaneKind::PolarGrid => "polar",
            PlaneKind::Xy => "xy",
            PlaneKind::Xz => "xz",
            PlaneKind::Yz => "yz",
            PlaneKind::RangeImage => "range",
        }
    }

    pub fn parse(s: &str) -> Result<PlaneKind> {
        match s {
            "polar" => Ok(PlaneKind::PolarGrid),
            "xy" => Ok(PlaneKind::Xy),
            "xz" => Ok(PlaneKind::Xz),
            "yz" => Ok(PlaneKind::Yz),
            "range" => Ok(PlaneKind::RangeImage),
            other => Err(Error::arg(format!(
                "unknown plane '{other}' (expected polar|xy|xz|yz|range)"
            ))),
        }
    }
}

/// Default plane cycle; layer `l` (1-based) uses entry `(l - 1) % 5`.
pub const DEFAULT_PLANE_CYCLE: [PlaneKind; 5] = PlaneKind::ALL;

/// Plane used by backbone layer `l` in `1..=total_layers`.
pub fn plane_for_layer(l: usize, total_layers: usize) -> Result<PlaneKind> {
    plane_for_layer_in(&DEFAULT_PLANE_CYCLE, l, total_layers)
}

/// Same as [`plane_for_layer`] with a custom cycle order.
pub fn plane_for_layer_in(
    cycle: &[PlaneKind; 5],
    l: usize,
    total_layers: usize,
) -> Result<PlaneKind> {
    if total_layers == 0 || !total_layers.is_multiple_of(5) {
        return Err(Error::config(format!(
            "layer count {total_layers} must be a positive multiple of 5"
        )));
    }
    if l == 0 || l > total_layers {
        return Err(Error::arg(format!(
            "layer index {l} outside 1..={total_layers}"
        )));
    }
    Ok(cycle[(l - 1) % 5])
}

/// One of the three axis-aligned Cartesian planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartesianPlane {
    Xy,
    Xz,
    Yz,
}

impl CartesianPlane {
    /// The (first, second) coordinate pair; first maps to columns,
    /// second to rows.
    fn pick(&self, p: &[f64; 3]) -> (f64, f64) {
        match self {
            CartesianPlane::Xy => (p[0], p[1]),
            CartesianPlane::Xz => (p[0], p[2]),
            CartesianPlane::Yz => (p[1], p[2]),
        }
    }
}

/// Regular grid over a Cartesian plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianGridConfig {
    pub plane: CartesianPlane,
    pub first_min: f64,
    pub first_max: f64,
    pub second_min: f64,
    pub second_max: f64,
    pub cell_size: f64,
}

impl CartesianGridConfig {
    pub fn from_bounds(plane: CartesianPlane, bounds: &CropBounds, cell_size: f64) -> Self {
        let (first_min, first_max, second_min, second_max) = match plane {
            CartesianPlane::Xy => (bounds.x_min, bounds.x_max, bounds.y_min, bounds.y_max),
            CartesianPlane::Xz => (bounds.x_min, bounds.x_max, bounds.z_min, bounds.z_max),
            CartesianPlane::Yz => (bounds.y_min, bounds.y_max, bounds.z_min, bounds.z_max),
        };
        CartesianGridConfig {
            plane,
            first_min,
            first_max,
            second_min,
            second_max,
            cell_size,
        }
    }

    /// Columns.
    pub fn width(&self) -> usize {
        ((self.first_max - self.first_min) / self.cell_size).ceil() as usize
    }

    /// Rows.
    pub fn height(&self) -> usize {
        ((self.second_max - self.second_min) / self.cell_size).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::arg(format!(
                "cell size must be positive (got {})",
                self.cell_size
            )));
        }
        if !(self.first_min < self.first_max) || !(self.second_min < self.second_max) {
            return Err(Error::arg("cartesian grid extents must be non-empty"));
        }
        if self.width() == 0 || self.height() == 0 {
            return Err(Error::arg("cartesian grid has zero cells"));
        }
        Ok(())
    }
}

/// Log-radial polar grid on the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGridConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rings: usize,
    pub sectors: usize,
}

impl Default for PolarGridConfig {
    fn default() -> Self {
        PolarGridConfig {
            rho_min: 2.0,
            rho_max: 50.0,
            rings: 64,
            sectors: 512,
        }
    }
}

impl PolarGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_max) {
            return Err(Error::arg(format!(
                "polar grid requires 0 < rho_min < rho_max (got {} .. {})",
                self.rho_min, self.rho_max
            )));
        }
        if self.rings < 2 || self.sectors < 2 {
            return Err(Error::arg("polar grid requires rings >= 2 and sectors >= 2"));
        }
        Ok(())
    }
}

/// Spherical range image. `fov_down` is stored as the magnitude of the
/// downward extent, so the total vertical field of view is
/// `fov_up + fov_down`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeImageConfig {
    pub height: usize,
    pub width: usize,
    /// Upward field of view, radians.
    pub fov_up: f64,
    /// Downward field of view magnitude, radians.
    pub fov_down: f64,
}

impl Default for RangeImageConfig {
    fn default() -> Self {
        RangeImageConfig {
            height: 64,
            width: 2048,
            fov_up: 3.0_f64.to_radians(),
            fov_down: 25.0_f64.to_radians(),
        }
    }
}

impl RangeImageConfig {
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::arg("range image requires height >= 2 and width >= 2"));
        }
        if !(self.fov_up >= 0.0) || !(self.fov_down > 0.0) {
            return Err(Error::arg(
                "range image requires fov_up >= 0 and fov_down > 0 (magnitudes)",
            ));
        }
        Ok(())
    }
}

/// Grid configuration for all five planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSetConfig {
    pub xy: CartesianGridConfig,
    pub xz: CartesianGridConfig,
    pub yz: CartesianGridConfig,
    pub polar: PolarGridConfig,
    pub range_image: RangeImageConfig,
}

impl PlaneSetConfig {
    /// Cartesian grids spanning the crop bounds with one shared cell
    /// size, plus default polar and range-image grids.
    pub fn from_crop_bounds(bounds: &CropBounds, cell_size: f64) -> Self {
        PlaneSetConfig {
            xy: CartesianGridConfig::from_bounds(CartesianPlane::Xy, bounds, cell_size),
            xz: CartesianGridConfig::from_bounds(CartesianPlane::Xz, bounds, cell_size),
            yz: CartesianGridConfig::from_bounds(CartesianPlane::Yz, bounds, cell_size),
            polar: PolarGridConfig::default(),
            range_image: RangeImageConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.xy.validate()?;
        self.xz.validate()?;
        self.yz.validate()?;
        self.polar.validate()?;
        self.range_image.validate()?;
        for (cfg, plane) in [
            (&self.xy, CartesianPlane::Xy),
            (&self.xz, CartesianPlane::Xz),
            (&self.yz, CartesianPlane::Yz),
        ] {
            if cfg.plane != plane {
                return Err(Error::config("cartesian grid entry bound to the wrong plane"));
            }
        }
        Ok(())
    }

    /// `(rows, cols)` of the grid for `kind`.
    pub fn grid_shape(&self, kind: PlaneKind) -> (usize, usize) {
        match kind {
            PlaneKind::PolarGrid => (self.polar.rings, self.polar.sectors),
            PlaneKind::Xy => (self.xy.height(), self.xy.width()),
            PlaneKind::Xz => (self.xz.height(), self.xz.width()),
            PlaneKind::Yz => (self.yz.height(), self.yz.width()),
            PlaneKind::RangeImage => (self.range_image.height, self.range_image.width),
        }
    }
}

fn clamp_index(v: f64, len: usize) -> usize {
    if v < 0.0 {
        0
    } else {
        (v as usize).min(len - 1)
    }
}

/// Cell of a point in a Cartesian grid: `(row, col)`. Coordinates
/// outside the extents clamp to the edge cells.
pub fn cartesian_bin(point: &[f64; 3], cfg: &CartesianGridConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (first, second) = cfg.plane.pick(point);
    let col = clamp_index(((first - cfg.first_min) / cfg.cell_size).floor(), cfg.width());
    let row = clamp_index(
        ((second - cfg.second_min) / cfg.cell_size).floor(),
        cfg.height(),
    );
    Ok((row, col))
}

/// Cell of a point in the polar grid: `(ring, sector)`. The radius is
/// clamped to `[rho_min, rho_max]` before the log scale, so points at or
/// inside the blind zone land on ring 0.
pub fn polar_bin(point: &[f64; 3], cfg: &PolarGridConfig) -> (usize, usize) {
    let rho = (point[0] * point[0] + point[1] * point[1])
        .sqrt()
        .clamp(cfg.rho_min, cfg.rho_max);
    let phi = point[1].atan2(point[0]);
    let ring = ((rho.ln() - cfg.rho_min.ln()) / (cfg.rho_max.ln() - cfg.rho_min.ln())
        * (cfg.rings - 1) as f64)
        .round();
    let sector = (0.5 * (phi + std::f64::consts::PI) * cfg.sectors as f64
        / std::f64::consts::PI
        - 1.0)
        .round();
    (
        clamp_index(ring, cfg.rings),
        clamp_index(sector, cfg.sectors),
    )
}

/// Cell of a point in the range image: `(col, row)`, i.e. `(u, v)` in
/// image coordinates. Fails on the degenerate zero-range point.
pub fn spherical_bin(point: &[f64; 3], cfg: &RangeImageConfig) -> Result<(usize, usize)> {
    let r = (point[0] * point[0] + point[1] * point[1] + point[2] * point[2]).sqrt();
    if r == 0.0 {
        return Err(Error::numeric(
            "degenerate point at the sensor origin has no projection direction",
        ));
    }
    let yaw = point[1].atan2(point[0]);
    let pitch = (point[2] / r).asin();
    let u = (0.5 * (1.0 - yaw / std::f64::consts::PI) * cfg.width as f64).floor();
    let v = ((1.0 - (pitch + cfg.fov_down) / cfg.fov()) * cfg.height as f64).floor();
    Ok((clamp_index(u, cfg.width), clamp_index(v, cfg.height)))
}

/// Flattened cell assignment of every point of a cloud for one plane.
#[derive(Debug, Clone)]
pub struct CellAssignment {
    /// Flat cell index (`row * width + col`) per point.
    pub cells: Vec<u32>,
    /// Points per cell.
    pub counts: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

impl CellAssignment {
    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }
}

/// Compute the cell of every point for the given plane.
pub fn assign_cells(
    cloud: &PointCloud,
    kind: PlaneKind,
    cfg: &PlaneSetConfig,
) -> Result<CellAssignment> {
    cfg.validate()?;
    let (height, width) = cfg.grid_shape(kind);
    let mut cells = Vec::with_capacity(cloud.len());
    for p in &cloud.coords {
        let (row, col) = match kind {
            PlaneKind::Xy => cartesian_bin(p, &cfg.xy)?,
            PlaneKind::Xz => cartesian_bin(p, &cfg.xz)?,
            PlaneKind::Yz => cartesian_bin(p, &cfg.yz)?,
            PlaneKind::PolarGrid => polar_bin(p, &cfg.polar),
            PlaneKind::RangeImage => {
                let (u, v) = spherical_bin(p, &cfg.range_image)?;
                (v, u)
            }
        };
        cells.push((row * width + col) as u32);
    }
    let mut counts = vec![0u32; height * width];
    for &c in &cells {
        counts[c as usize] += 1;
    }
    Ok(CellAssignment {
        cells,
        counts,
        height,
        width,
    })
}

/// Scatter rows of `features` into their cells and average. Empty cells
/// stay zero. Accumulation order is ascending point index, with sums held
/// in f64 so cell means are insensitive to point order even in f32 mode.
pub fn scatter_mean<R: Real>(features: &Tensor<R>, assignment: &CellAssignment) -> Tensor<R> {
    let c = features.cols();
    let mut sums = vec![0.0f64; assignment.num_cells() * c];
    for (i, &cell) in assignment.cells.iter().enumerate() {
        let row = features.row(i);
        let base = cell as usize * c;
        for (dst, &src) in sums[base..base + c].iter_mut().zip(row) {
            *dst += src.to_f64_c();
        }
    }
    let mut grid = Tensor::zeros(&[assignment.height, assignment.width, c]);
    let data = grid.data_mut();
    for (cell, &count) in assignment.counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            for ch in 0..c {
                data[cell * c + ch] = R::from_f64_c(sums[cell * c + ch] * inv);
            }
        }
    }
    grid
}

/// A projected feature grid plus the per-point cell assignment that
/// produced it.
#[derive(Debug, Clone)]
pub struct PlaneGrid<R: Real> {
    /// `[height, width, channels]` cell means; zero where unoccupied.
    pub cells: Tensor<R>,
    /// Points per cell, flattened row-major.
    pub occupancy: Vec<u32>,
    /// Flat cell index per point.
    pub cell_of_point: Vec<u32>,
}

impl<R: Real> PlaneGrid<R> {
    pub fn height(&self) -> usize {
        self.cells.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.cells.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.cells.shape()[2]
    }

    pub fn cell_features(&self, flat_index: usize) -> &[R] {
        let c = self.channels();
        &self.cells.data()[flat_index * c..(flat_index + 1) * c]
    }
}

/// Project per-point features onto the grid of `kind` by cell mean.
pub fn project<R: Real>(
    features: &Tensor<R>,
    cloud: &PointCloud,
    kind: PlaneKind,
    cfg: &PlaneSetConfig,
) -> Result<PlaneGrid<R>> {
    if features.rows() != cloud.len() {
        return Err(Error::shape(format!(
            "feature rows {} differ from point count {}",
            features.rows(),
            cloud.len()
        )));
    }
    let assignment = assign_cells(cloud, kind, cfg)?;
    let cells = scatter_mean(features, &assignment);
    Ok(PlaneGrid {
        cells,
        occupancy: assignment.counts,
        cell_of_point: assignment.cells,
    })
}

/// Copy each point's cell features back out of the grid.
pub fn unproject<R: Real>(grid: &PlaneGrid<R>) -> Tensor<R> {
    let c = grid.channels();
    let n = grid.cell_of_point.len();
    let mut data = Vec::with_capacity(n * c);
    for &cell in &grid.cell_of_point {
        data.extend_from_slice(grid.cell_features(cell as usize));
    }
    Tensor::new(&[n, c], data)
}
