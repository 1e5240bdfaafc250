//! Membrane deformation fields and the point clouds derived from them.
//!
//! A field stores the deformed 3D position of every node of a regular
//! `g × g` material grid over the square membrane. Indentation fields only
//! move nodes vertically; bend fields also move them in-plane because the
//! sheet wraps a cylinder without stretching.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GRID: usize = 80;
pub const DEFAULT_EXTENT_MM: f64 = 140.0;
/// Sanity bound on indentation heights.
pub const MAX_ABS_HEIGHT_MM: f64 = 40.0;
pub const MAX_WALL_ANGLE_DEG: f64 = 150.0;
/// Commanded depths used for dataset generation stay inside this range.
pub const DATASET_MAX_DEPTH_MM: f64 = 25.0;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("relaxation did not converge after {iterations} iterations (residual {residual:.3e} mm)")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid indenter: {0}")]
    InvalidIndenter(String),
    #[error("wall angle {0} deg outside [0, 150]")]
    WallAngleOutOfRange(f64),
    #[error("stride {stride} leaves fewer than 2 samples per axis on a {grid}-node grid")]
    StrideTooLarge { stride: usize, grid: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("point cloud contains a non-finite coordinate at index {0}")]
    NonFinitePoint(usize),
    #[error("degenerate path: endpoints coincide")]
    DegeneratePath,
    #[error("path endpoint ({0:.3}, {1:.3}) lies outside the membrane")]
    OutsideMembrane(f64, f64),
    #[error("invalid field configuration: {0}")]
    InvalidConfig(String),
}

type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    ClampedAllSides,
    ClampedOneSide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tolerance_mm: f64,
    pub max_iterations: usize,
    /// Over-relaxation factor. `None` picks the optimal SOR factor for the
    /// grid; `Some(1.0)` is plain projected Gauss-Seidel.
    pub relaxation: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance_mm: 1e-6,
            max_iterations: 20_000,
            relaxation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: usize,
    pub extent_mm: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            extent_mm: DEFAULT_EXTENT_MM,
            solver: SolverConfig::default(),
        }
    }
}

impl FieldConfig {
    pub fn with_grid(grid: usize) -> Self {
        Self {
            grid,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 3 {
            return Err(GeometryError::InvalidConfig(format!(
                "grid must have at least 3 nodes per side, got {}",
                self.grid
            )));
        }
        if !(self.extent_mm.is_finite() && self.extent_mm > 0.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "extent must be positive, got {}",
                self.extent_mm
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        self.extent_mm / (self.grid - 1) as f64
    }
}

/// Deformed membrane sampled on a regular material grid.
///
/// Nodes are stored row-major with the row index running along +y and the
/// column index along +x, so node `(r, c)` starts at material position
/// `(c·h, r·h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    grid: usize,
    extent_mm: f64,
    boundary: Boundary,
    wall_angle_deg: Option<f64>,
    nodes: Vec<Point3>,
}

impl DeformationField {
    pub fn flat(config: &FieldConfig) -> Result<Self> {
        config.validate()?;
        let g = config.grid;
        let mut nodes = Vec::with_capacity(g * g);
        for r in 0..g {
            for c in 0..g {
                nodes.push([material_coord(config, c), material_coord(config, r), 0.0]);
            }
        }
        Ok(Self {
            grid: g,
            extent_mm: config.extent_mm,
            boundary: Boundary::ClampedAllSides,
            wall_angle_deg: None,
            nodes,
        })
    }

    /// Builds a field from explicit node heights (row-major, row along +y).
    pub fn from_heights(config: &FieldConfig, boundary: Boundary, heights: &[f64]) -> Result<Self> {
        let mut field = Self::flat(config)?;
        if heights.len() != field.nodes.len() {
            return Err(GeometryError::InvalidConfig(format!(
                "expected {} heights, got {}",
                field.nodes.len(),
                heights.len()
            )));
        }
        for (node, &z) in field.nodes.iter_mut().zip(heights) {
            node[2] = z;
        }
        field.boundary = boundary;
        Ok(field)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn extent_mm(&self) -> f64 {
        self.extent_mm
    }

    pub fn spacing(&self) -> f64 {
        self.extent_mm / (self.grid - 1) as f64
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn wall_angle_deg(&self) -> Option<f64> {
        self.wall_angle_deg
    }

    pub fn node(&self, row: usize, col: usize) -> Point3 {
        self.nodes[row * self.grid + col]
    }

    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.node(row, col)[2]
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn heights(&self) -> Vec<f64> {
        self.nodes.iter().map(|p| p[2]).collect()
    }

    pub fn max_abs_height(&self) -> f64 {
        self.nodes.iter().fold(0.0, |m, p| m.max(p[2].abs()))
    }

    /// Checks the field invariants for its boundary mode.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.nodes.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        if self.boundary == Boundary::ClampedAllSides {
            if self.max_abs_height() > MAX_ABS_HEIGHT_MM {
                return Err(GeometryError::InvalidConfig(format!(
                    "height {:.3} mm exceeds the {MAX_ABS_HEIGHT_MM} mm bound",
                    self.max_abs_height()
                )));
            }
            let g = self.grid;
            for i in 0..g {
                for (r, c) in [(0, i), (g - 1, i), (i, 0), (i, g - 1)] {
                    if self.height(r, c).abs() >= 1e-9 {
                        return Err(GeometryError::InvalidConfig(format!(
                            "boundary node ({r}, {c}) is not clamped"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mirror image about the membrane midline `x = W/2`.
    pub fn mirrored_x(&self) -> Self {
        let g = self.grid;
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for r in 0..g {
            for c in 0..g {
                let p = self.node(r, g - 1 - c);
                nodes.push([self.extent_mm - p[0], p[1], p[2]]);
            }
        }
        Self { nodes, ..self.clone() }
    }

    /// Surface position and tangent vectors at material point `(x, y)`,
    /// from bilinear interpolation of the node positions.
    fn lift(&self, x: f64, y: f64) -> (Point3, Point3, Point3) {
        let h = self.spacing();
        let g = self.grid;
        let locate = |v: f64| {
            let s = (v / h).max(0.0);
            let cell = (s.floor() as usize).min(g - 2);
            (cell, (s - cell as f64).clamp(0.0, 1.0))
        };
        let (c, tx) = locate(x);
        let (r, ty) = locate(y);
        let p00 = self.node(r, c);
        let p01 = self.node(r, c + 1);
        let p10 = self.node(r + 1, c);
        let p11 = self.node(r + 1, c + 1);
        let mut pos = [0.0; 3];
        let mut du = [0.0; 3];
        let mut dv = [0.0; 3];
        for k in 0..3 {
            pos[k] = (1.0 - ty) * ((1.0 - tx) * p00[k] + tx * p01[k]) + ty * ((1.0 - tx) * p10[k] + tx * p11[k]);
            du[k] = ((1.0 - ty) * (p01[k] - p00[k]) + ty * (p11[k] - p10[k])) / h;
            dv[k] = ((1.0 - tx) * (p10[k] - p00[k]) + tx * (p11[k] - p01[k])) / h;
        }
        (pos, du, dv)
    }

    /// Mean absolute mean-curvature over interior nodes (1/mm), estimated
    /// from second differences along both material directions.
    pub fn mean_curvature(&self) -> f64 {
        let g = self.grid;
        let mut total = 0.0;
        for r in 1..g - 1 {
            for c in 1..g - 1 {
                let p = self.node(r, c);
                let (xm, xp) = (self.node(r, c - 1), self.node(r, c + 1));
                let (ym, yp) = (self.node(r - 1, c), self.node(r + 1, c));
                let tu = sub(xp, xm);
                let tv = sub(yp, ym);
                let n = normalize(cross(tu, tv));
                let hu = 0.5 * norm(tu);
                let hv = 0.5 * norm(tv);
                let ku = dot(add(sub(xp, p), sub(xm, p)), n) / (hu * hu);
                let kv = dot(add(sub(yp, p), sub(ym, p)), n) / (hv * hv);
                total += 0.5 * (ku + kv).abs();
            }
        }
        total / ((g - 2) * (g - 2)) as f64
    }
}

fn material_coord(config: &FieldConfig, index: usize) -> f64 {
    config.extent_mm * index as f64 / (config.grid - 1) as f64
}

// ---------------------------------------------------------------------------
// Indenters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndenterFamily {
    Sphere,
    Cylinder,
    Cube,
    TriangularPrism,
    UShape,
}

impl IndenterFamily {
    pub const ALL: [IndenterFamily; 5] = [
        IndenterFamily::Sphere,
        IndenterFamily::Cylinder,
        IndenterFamily::Cube,
        IndenterFamily::TriangularPrism,
        IndenterFamily::UShape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndenterFamily::Sphere => "sphere",
            IndenterFamily::Cylinder => "cylinder",
            IndenterFamily::Cube => "cube",
            IndenterFamily::TriangularPrism => "triangular_prism",
            IndenterFamily::UShape => "u_shape",
        }
    }
}

impl fmt::Display for IndenterFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndenterFamily {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        IndenterFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| GeometryError::InvalidIndenter(format!("unknown family `{s}`")))
    }
}

/// Indenter geometry in its local frame: `u` runs along the yaw axis, `v`
/// across it, and the lowest point of the body sits at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndenterShape {
    Sphere {
        radius_mm: f64,
    },
    /// Cylinder lying on its side, axis along `u`.
    Cylinder {
        radius_mm: f64,
        length_mm: f64,
    },
    /// Flat-bottomed cube.
    Cube {
        side_mm: f64,
    },
    /// Equilateral prism resting on an edge that runs along `u`.
    TriangularPrism {
        width_mm: f64,
        length_mm: f64,
    },
    /// Two rectangular feet along `u` joined by a raised web.
    UShape {
        span_mm: f64,
        foot_width_mm: f64,
        length_mm: f64,
        web_height_mm: f64,
    },
}

impl IndenterShape {
    pub fn family(&self) -> IndenterFamily {
        match self {
            IndenterShape::Sphere { .. } => IndenterFamily::Sphere,
            IndenterShape::Cylinder { .. } => IndenterFamily::Cylinder,
            IndenterShape::Cube { .. } => IndenterFamily::Cube,
            IndenterShape::TriangularPrism { .. } => IndenterFamily::TriangularPrism,
            IndenterShape::UShape { .. } => IndenterFamily::UShape,
        }
    }

    /// Height of the indenter's lower surface above its lowest point, or
    /// `None` outside the planform.
    pub fn clearance(&self, u: f64, v: f64) -> Option<f64> {
        match *self {
            IndenterShape::Sphere { radius_mm: r } => {
                let rho2 = u * u + v * v;
                (rho2 < r * r).then(|| r - (r * r - rho2).sqrt())
            }
            IndenterShape::Cylinder {
                radius_mm: r,
                length_mm,
            } => (u.abs() <= 0.5 * length_mm && v.abs() < r).then(|| r - (r * r - v * v).sqrt()),
            IndenterShape::Cube { side_mm } => (u.abs() <= 0.5 * side_mm && v.abs() <= 0.5 * side_mm).then_some(0.0),
            IndenterShape::TriangularPrism { width_mm, length_mm } => {
                (u.abs() <= 0.5 * length_mm && v.abs() <= 0.5 * width_mm).then(|| 3f64.sqrt() * v.abs())
            }
            IndenterShape::UShape {
                span_mm,
                foot_width_mm,
                length_mm,
                web_height_mm,
            } => {
                if u.abs() > 0.5 * length_mm || v.abs() > 0.5 * span_mm {
                    None
                } else if v.abs() >= 0.5 * span_mm - foot_width_mm {
                    Some(0.0)
                } else {
                    Some(web_height_mm)
                }
            }
        }
    }

    /// Half sizes of the planform bounding rectangle along `u` and `v`.
    fn half_sizes(&self) -> (f64, f64) {
        match *self {
            IndenterShape::Sphere { radius_mm } => (radius_mm, radius_mm),
            IndenterShape::Cylinder { radius_mm, length_mm } => (0.5 * length_mm, radius_mm),
            IndenterShape::Cube { side_mm } => (0.5 * side_mm, 0.5 * side_mm),
            IndenterShape::TriangularPrism { width_mm, length_mm } => (0.5 * length_mm, 0.5 * width_mm),
            IndenterShape::UShape { span_mm, length_mm, .. } => (0.5 * length_mm, 0.5 * span_mm),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            IndenterShape::Sphere { radius_mm } => radius_mm > 0.0,
            IndenterShape::Cylinder { radius_mm, length_mm } => radius_mm > 0.0 && length_mm > 0.0,
            IndenterShape::Cube { side_mm } => side_mm > 0.0,
            IndenterShape::TriangularPrism { width_mm, length_mm } => width_mm > 0.0 && length_mm > 0.0,
            IndenterShape::UShape {
                span_mm,
                foot_width_mm,
                length_mm,
                web_height_mm,
            } => foot_width_mm > 0.0 && 2.0 * foot_width_mm < span_mm && length_mm > 0.0 && web_height_mm > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIndenter(format!("bad dimensions: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x_mm: f64,
    pub y_mm: f64,
    pub yaw_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Indenter {
    pub shape: IndenterShape,
    pub pose: Pose,
    pub depth_mm: f64,
}

impl Indenter {
    pub fn family(&self) -> IndenterFamily {
        self.shape.family()
    }

    /// Half extents of the footprint bounding box in membrane axes.
    pub fn footprint_half_extents(&self) -> (f64, f64) {
        let (a, b) = self.shape.half_sizes();
        let (s, c) = self.pose.yaw_deg.to_radians().sin_cos();
        (a * c.abs() + b * s.abs(), a * s.abs() + b * c.abs())
    }

    /// Whether the footprint stays strictly inside the membrane with at
    /// least `margin` mm to every edge.
    pub fn fits(&self, extent_mm: f64, margin: f64) -> bool {
        let (hx, hy) = self.footprint_half_extents();
        let Pose { x_mm, y_mm, .. } = self.pose;
        x_mm - hx >= margin && x_mm + hx <= extent_mm - margin && y_mm - hy >= margin && y_mm + hy <= extent_mm - margin
    }

    pub fn validate(&self, extent_mm: f64) -> Result<()> {
        self.shape.validate()?;
        if !(0.0..=MAX_ABS_HEIGHT_MM).contains(&self.depth_mm) {
            return Err(GeometryError::InvalidIndenter(format!(
                "depth {} mm outside [0, {MAX_ABS_HEIGHT_MM}]",
                self.depth_mm
            )));
        }
        if !self.fits(extent_mm, 0.0) {
            return Err(GeometryError::InvalidIndenter(
                "footprint leaves the membrane interior".into(),
            ));
        }
        Ok(())
    }

    /// Upper bound on the membrane height at `(x, y)`; `+inf` off the planform.
    pub fn obstacle(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.pose.x_mm;
        let dy = y - self.pose.y_mm;
        let (s, c) = self.pose.yaw_deg.to_radians().sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.shape.clearance(u, v) {
            Some(h) => h - self.depth_mm,
            None => f64::INFINITY,
        }
    }
}

/// Presses an indenter into a membrane clamped on all sides.
///
/// Minimizes the discrete Dirichlet energy subject to `z ≤ obstacle` with
/// projected successive over-relaxation. Convergence is declared when the
/// projected Gauss-Seidel fixed-point residual `|z − min(avg, obstacle)|`
/// falls below the configured tolerance at every free node.
pub fn indent(config: &FieldConfig, indenter: &Indenter) -> Result<DeformationField> {
    config.validate()?;
    indenter.validate(config.extent_mm)?;
    let g = config.grid;
    let mut field = DeformationField::flat(config)?;
    if indenter.depth_mm == 0.0 {
        return Ok(field);
    }

    let mut obstacle = vec![f64::INFINITY; g * g];
    let mut z = vec![0.0; g * g];
    for r in 1..g - 1 {
        for c in 1..g - 1 {
            let phi = indenter.obstacle(material_coord(config, c), material_coord(config, r));
            obstacle[r * g + c] = phi;
            z[r * g + c] = phi.min(0.0);
        }
    }
    let omega = config
        .solver
        .relaxation
        .unwrap_or_else(|| 2.0 / (1.0 + (PI / (g - 1) as f64).sin()));

    let mut residual = f64::INFINITY;
    for iteration in 0..config.solver.max_iterations {
        residual = 0.0;
        for r in 1..g - 1 {
            let row = r * g;
            for c in 1..g - 1 {
                let i = row + c;
                let avg = 0.25 * (z[i - 1] + z[i + 1] + z[i - g] + z[i + g]);
                let phi = obstacle[i];
                let target = avg.min(phi);
                residual = f64::max(residual, (z[i] - target).abs());
                z[i] = (z[i] + omega * (avg - z[i])).min(phi);
            }
        }
        if residual < config.solver.tolerance_mm {
            for (node, &h) in field.nodes.iter_mut().zip(&z) {
                node[2] = h;
            }
            field.validate()?;
            return Ok(field);
        }
        if !residual.is_finite() {
            return Err(GeometryError::NotConverged {
                iterations: iteration + 1,
                residual,
            });
        }
    }
    Err(GeometryError::NotConverged {
        iterations: config.solver.max_iterations,
        residual,
    })
}

/// Kinematic gravity bend: the sheet is clamped horizontally along its west
/// edge (`x = 0`) and wraps a circular arc whose total turning equals the
/// wall angle. Material lines keep their length.
pub fn bend(config: &FieldConfig, wall_angle_deg: f64) -> Result<DeformationField> {
    config.validate()?;
    if !(0.0..=MAX_WALL_ANGLE_DEG).contains(&wall_angle_deg) || !wall_angle_deg.is_finite() {
        return Err(GeometryError::WallAngleOutOfRange(wall_angle_deg));
    }
    let mut field = DeformationField::flat(config)?;
    field.boundary = Boundary::ClampedOneSide;
    field.wall_angle_deg = Some(wall_angle_deg);
    if wall_angle_deg == 0.0 {
        return Ok(field);
    }
    let kappa = wall_angle_deg.to_radians() / config.extent_mm;
    for node in &mut field.nodes {
        let s = node[0];
        node[0] = (kappa * s).sin() / kappa;
        node[2] = -(1.0 - (kappa * s).cos()) / kappa;
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Point clouds

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// Flat `[x0, y0, z0, x1, ...]` coordinates.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Samples every `stride`-th node along both axes, starting at the corner.
pub fn to_pointcloud(field: &DeformationField, stride: usize) -> Result<PointCloud> {
    let g = field.grid();
    let per_axis = if stride == 0 { 0 } else { g.div_ceil(stride) };
    if per_axis < 2 {
        return Err(GeometryError::StrideTooLarge { stride, grid: g });
    }
    let mut points = Vec::with_capacity(per_axis * per_axis);
    for r in (0..g).step_by(stride) {
        for c in (0..g).step_by(stride) {
            points.push(field.node(r, c));
        }
    }
    PointCloud::new(points)
}

/// Deformation magnitude `z_max − z_min`.
pub fn delta_z(cloud: &PointCloud) -> Result<f64> {
    let mut it = cloud.points().iter().map(|p| p[2]);
    let first = it.next().ok_or(GeometryError::EmptyCloud)?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), z| (lo.min(z), hi.max(z)));
    Ok(hi - lo)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathProfile {
    /// 3D arc length of the lifted path (mm).
    pub length_mm: f64,
    /// Integral of the absolute normal curvature along the path (rad).
    pub curvature_integral: f64,
}

/// Lifts the straight material segment `a → b` onto the deformed surface
/// and integrates its length and absolute normal curvature.
pub fn path_profile(field: &DeformationField, a: [f64; 2], b: [f64; 2]) -> Result<PathProfile> {
    let w = field.extent_mm();
    for p in [a, b] {
        let inside = |v: f64| (-1e-9..=w + 1e-9).contains(&v);
        if !(inside(p[0]) && inside(p[1])) {
            return Err(GeometryError::OutsideMembrane(p[0], p[1]));
        }
    }
    let planar = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    if planar < 1e-12 {
        return Err(GeometryError::DegeneratePath);
    }
    let n = ((planar / field.spacing()).ceil() as usize).max(2);
    let samples: Vec<(Point3, Point3)> = (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            let (pos, du, dv) = field.lift(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
            (pos, normalize(cross(du, dv)))
        })
        .collect();

    let length_mm = samples.windows(2).map(|w| norm(sub(w[1].0, w[0].0))).sum();
    let mut curvature_integral = 0.0;
    for k in 1..n {
        let (prev, (cur, normal), next) = (samples[k - 1].0, samples[k], samples[k + 1].0);
        let ds = 0.5 * (norm(sub(next, cur)) + norm(sub(cur, prev)));
        if ds > 0.0 {
            let d2 = add(sub(next, cur), sub(prev, cur));
            curvature_integral += dot(d2, normal).abs() / ds;
        }
    }
    Ok(PathProfile {
        length_mm,
        curvature_integral,
    })
}

// ---------------------------------------------------------------------------
// Pose / depth sampling for dataset generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndenterSampler {
    pub families: Vec<IndenterFamily>,
    /// Side of the central square that pose positions are drawn from.
    pub central_square_mm: f64,
    pub depth_mean_mm: f64,
    pub depth_std_mm: f64,
    pub depth_max_mm: f64,
    /// Minimum clearance between the footprint and the clamped edge.
    pub edge_margin_mm: f64,
}

impl Default for IndenterSampler {
    fn default() -> Self {
        Self {
            families: IndenterFamily::ALL.to_vec(),
            central_square_mm: 100.0,
            depth_mean_mm: 15.0,
            depth_std_mm: 5.0,
            depth_max_mm: DATASET_MAX_DEPTH_MM,
            edge_margin_mm: 5.0,
        }
    }
}

impl IndenterSampler {
    pub fn sample_shape<R: Rng>(&self, family: IndenterFamily, rng: &mut R) -> IndenterShape {
        match family {
            IndenterFamily::Sphere => IndenterShape::Sphere {
                radius_mm: rng.gen_range(15.0..30.0),
            },
            IndenterFamily::Cylinder => IndenterShape::Cylinder {
                radius_mm: rng.gen_range(10.0..20.0),
                length_mm: rng.gen_range(30.0..60.0),
            },
            IndenterFamily::Cube => IndenterShape::Cube {
                side_mm: rng.gen_range(20.0..40.0),
            },
            IndenterFamily::TriangularPrism => IndenterShape::TriangularPrism {
                width_mm: rng.gen_range(20.0..35.0),
                length_mm: rng.gen_range(30.0..60.0),
            },
            IndenterFamily::UShape => IndenterShape::UShape {
                span_mm: rng.gen_range(40.0..60.0),
                foot_width_mm: rng.gen_range(8.0..12.0),
                length_mm: rng.gen_range(20.0..35.0),
                web_height_mm: 8.0,
            },
        }
    }

    /// Commanded depth from a normal distribution truncated to
    /// `[0, depth_max_mm]` by rejection.
    pub fn sample_depth<R: Rng>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.depth_mean_mm, self.depth_std_mm).expect("finite depth distribution");
        loop {
            let d = normal.sample(rng);
            if (0.0..=self.depth_max_mm).contains(&d) {
                return d;
            }
        }
    }

    /// Draws a family uniformly from the mix, a shape, a pose whose
    /// footprint fits inside the membrane, and a depth.
    pub fn sample<R: Rng>(&self, extent_mm: f64, rng: &mut R) -> Result<Indenter> {
        if self.families.is_empty() {
            return Err(GeometryError::InvalidIndenter("empty indenter mix".into()));
        }
        let family = self.families[rng.gen_range(0..self.families.len())];
        let shape = self.sample_shape(family, rng);
        let lo = 0.5 * (extent_mm - self.central_square_mm);
        let hi = lo + self.central_square_mm;
        for _ in 0..1000 {
            let pose = Pose {
                x_mm: rng.gen_range(lo..hi),
                y_mm: rng.gen_range(lo..hi),
                yaw_deg: rng.gen_range(0.0..360.0),
            };
            let candidate = Indenter {
                shape: shape.clone(),
                pose,
                depth_mm: 0.0,
            };
            if candidate.fits(extent_mm, self.edge_margin_mm) {
                return Ok(Indenter {
                    depth_mm: self.sample_depth(rng),
                    ..candidate
                });
            }
        }
        Err(GeometryError::InvalidIndenter(format!(
            "no pose keeps a {family} inside the membrane"
        )))
    }
}

// ---------------------------------------------------------------------------
// small vector helpers

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    if n > 0.0 {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        [0.0, 0.0, 1.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_at_center(radius: f64, depth: f64) -> Indenter {
        Indenter {
            shape: IndenterShape::Sphere { radius_mm: radius },
            pose: Pose {
                x_mm: 70.0,
                y_mm: 70.0,
                yaw_deg: 0.0,
            },
            depth_mm: depth,
        }
    }

    #[test]
    fn zero_depth_is_flat() {
        let f = indent(&FieldConfig::default(), &sphere_at_center(20.0, 0.0)).unwrap();
        assert!(f.heights().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn sphere_indent_depth_and_obstacle_consistency() {
        let cfg = FieldConfig::default();
        let ind = sphere_at_center(20.0, 15.0);
        let f = indent(&cfg, &ind).unwrap();
        let cloud = to_pointcloud(&f, 1).unwrap();
        let dz = delta_z(&cloud).unwrap();
        assert!((dz - 15.0).abs() < 0.1, "delta z {dz}");
        f.validate().unwrap();
        for r in 0..cfg.grid {
            for c in 0..cfg.grid {
                let p = f.node(r, c);
                assert!(p[2] <= ind.obstacle(p[0], p[1]) + 1e-6);
            }
        }
    }

    #[test]
    fn solver_reports_non_convergence() {
        let mut cfg = FieldConfig::default();
        cfg.solver.max_iterations = 5;
        let err = indent(&cfg, &sphere_at_center(20.0, 15.0)).unwrap_err();
        assert!(matches!(err, GeometryError::NotConverged { iterations: 5, residual } if residual > 1e-6));
    }

    #[test]
    fn every_family_produces_a_clamped_field() {
        let cfg = FieldConfig::default();
        let sampler = IndenterSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in IndenterFamily::ALL {
            let shape = sampler.sample_shape(family, &mut rng);
            let ind = Indenter {
                shape,
                pose: Pose {
                    x_mm: 70.0,
                    y_mm: 65.0,
                    yaw_deg: 30.0,
                },
                depth_mm: 12.0,
            };
            let f = indent(&cfg, &ind).unwrap();
            f.validate().unwrap();
            let dz = delta_z(&to_pointcloud(&f, 1).unwrap()).unwrap();
            assert!(dz > 10.0 && dz <= 12.0 + 1e-9, "{family}: {dz}");
        }
    }

    #[test]
    fn indenter_outside_membrane_is_rejected() {
        let mut ind = sphere_at_center(20.0, 5.0);
        ind.pose.x_mm = 10.0;
        assert!(matches!(
            indent(&FieldConfig::default(), &ind),
            Err(GeometryError::InvalidIndenter(_))
        ));
    }

    #[test]
    fn bend_zero_matches_flat_exactly() {
        let cfg = FieldConfig::default();
        let bent = to_pointcloud(&bend(&cfg, 0.0).unwrap(), 2).unwrap();
        let flat = to_pointcloud(&DeformationField::flat(&cfg).unwrap(), 2).unwrap();
        assert_eq!(bent, flat);
    }

    #[test]
    fn bend_range_is_checked() {
        let cfg = FieldConfig::default();
        assert_eq!(
            bend(&cfg, 151.0).unwrap_err(),
            GeometryError::WallAngleOutOfRange(151.0)
        );
        assert!(bend(&cfg, -1.0).is_err());
    }

    #[test]
    fn bend_sweep_curvature_increases() {
        let cfg = FieldConfig::default();
        let curv: Vec<f64> = (0..6)
            .map(|k| bend(&cfg, 30.0 * k as f64).unwrap().mean_curvature())
            .collect();
        assert_eq!(curv.len(), 6);
        assert!(curv.windows(2).all(|w| w[1] > w[0]), "{curv:?}");
    }

    #[test]
    fn bend_preserves_arc_length() {
        let cfg = FieldConfig::default();
        for angle in [30.0, 90.0, 150.0] {
            let f = bend(&cfg, angle).unwrap();
            let prof = path_profile(&f, [0.0, 70.0], [140.0, 70.0]).unwrap();
            assert!(
                (prof.length_mm - 140.0).abs() / 140.0 < 1e-3,
                "{angle}: {}",
                prof.length_mm
            );
        }
    }

    #[test]
    fn flat_path_profile() {
        let f = DeformationField::flat(&FieldConfig::default()).unwrap();
        let p = path_profile(&f, [10.0, 20.0], [100.0, 77.0]).unwrap();
        let expected = (90.0f64.powi(2) + 57.0f64.powi(2)).sqrt();
        assert!((p.length_mm - expected).abs() < 1e-9);
        assert!(p.curvature_integral.abs() < 1e-9);
    }

    #[test]
    fn cylinder_curvature_integral_matches_closed_form() {
        let cfg = FieldConfig::default();
        let angle = 120.0f64;
        let f = bend(&cfg, angle).unwrap();
        let radius = cfg.extent_mm / angle.to_radians();
        let aligned = path_profile(&f, [0.0, 70.0], [70.0, 70.0]).unwrap();
        let expected = aligned.length_mm / radius;
        assert!(
            (aligned.curvature_integral - expected).abs() / expected < 0.05,
            "{} vs {expected}",
            aligned.curvature_integral
        );
        let ruling = path_profile(&f, [70.0, 0.0], [70.0, 70.0]).unwrap();
        assert!(ruling.curvature_integral < 1e-3 * aligned.curvature_integral);
    }

    #[test]
    fn degenerate_and_outside_paths() {
        let f = DeformationField::flat(&FieldConfig::default()).unwrap();
        assert_eq!(
            path_profile(&f, [5.0, 5.0], [5.0, 5.0]).unwrap_err(),
            GeometryError::DegeneratePath
        );
        assert!(matches!(
            path_profile(&f, [-1.0, 5.0], [5.0, 5.0]),
            Err(GeometryError::OutsideMembrane(..))
        ));
    }

    #[test]
    fn pointcloud_sizes() {
        let f = DeformationField::flat(&FieldConfig::default()).unwrap();
        assert_eq!(to_pointcloud(&f, 1).unwrap().len(), 6400);
        assert_eq!(to_pointcloud(&f, 2).unwrap().len(), 1600);
        assert_eq!(to_pointcloud(&f, 5).unwrap().len(), 256);
        assert!(to_pointcloud(&f, 1).unwrap().points().iter().all(|p| p[2] == 0.0));
        assert!(matches!(
            to_pointcloud(&f, 80),
            Err(GeometryError::StrideTooLarge { .. })
        ));
        assert!(to_pointcloud(&f, 0).is_err());
    }

    #[test]
    fn reported_ground_truth_sizes_are_reachable_by_stride() {
        // A 1000-column camera grid reaches all three sizes.
        let f = DeformationField::flat(&FieldConfig::with_grid(1000)).unwrap();
        assert_eq!(to_pointcloud(&f, 13).unwrap().len(), 5929);
        assert_eq!(to_pointcloud(&f, 22).unwrap().len(), 2116);
        assert_eq!(to_pointcloud(&f, 27).unwrap().len(), 1444);
    }

    #[test]
    fn delta_z_of_empty_and_flat() {
        assert_eq!(PointCloud::new(vec![]).unwrap_err(), GeometryError::EmptyCloud);
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(delta_z(&c).unwrap(), 0.0);
    }

    #[test]
    fn sampler_depths_stay_in_range() {
        let sampler = IndenterSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let ind = sampler.sample(DEFAULT_EXTENT_MM, &mut rng).unwrap();
            assert!((0.0..=25.0).contains(&ind.depth_mm));
            assert!(ind.fits(DEFAULT_EXTENT_MM, sampler.edge_margin_mm));
        }
    }
}
