//! Visual-hull reconstruction from posed silhouettes and surface point
//! sampling for 3D metrics.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::gridops::ViewImage;
use crate::poseplan::{target_poses, CameraPose};
use crate::synthdata::{OrthoCamera, Primitive, SceneSpec, Shape, Vec3};

pub const DEFAULT_GRID_RESOLUTION: usize = 64;
pub const DEFAULT_SURFACE_POINTS: usize = 16_384;
pub const DEFAULT_SILHOUETTE_THRESHOLD: f32 = 0.05;

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    side: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(side: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != side * side {
            bail_arg!("mask of side {side} needs {} entries, got {}", side * side, data.len());
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.side + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Grow the foreground by `px` pixels (Chebyshev distance).
    pub fn dilated(&self, px: usize) -> Mask {
        if px == 0 {
            return self.clone();
        }
        let n = self.side;
        let mut out = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                if !self.get(r, c) {
                    continue;
                }
                for rr in r.saturating_sub(px)..(r + px + 1).min(n) {
                    for cc in c.saturating_sub(px)..(c + px + 1).min(n) {
                        out[rr * n + cc] = true;
                    }
                }
            }
        }
        Mask { side: n, data: out }
    }
}

/// Foreground iff the darkest channel is below `1 - threshold`.
pub fn silhouette(view: &ViewImage, threshold: f32) -> Mask {
    let img = view.image();
    let cut = 1.0 - threshold;
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].min(p[1]).min(p[2]) < cut)
        .collect();
    Mask {
        side: view.side(),
        data,
    }
}

/// `N^3` occupancy over [-1, 1]^3, indexed `(x * N + y) * N + z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    n: usize,
    data: Vec<bool>,
}

impl OccupancyGrid {
    pub fn filled(n: usize, value: bool) -> Self {
        Self {
            n,
            data: vec![value; n * n * n],
        }
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 / self.n as f64
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size();
        [i, j, k].map(|a| -1.0 + (a as f64 + 0.5) * s)
    }

    /// Occupied with at least one empty (or out-of-grid) 6-neighbour.
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        if !self.get(i, j, k) {
            return false;
        }
        let n = self.n;
        let c = [i, j, k];
        (0..3).any(|axis| {
            [-1i64, 1].iter().any(|&d| {
                let v = c[axis] as i64 + d;
                if v < 0 || v >= n as i64 {
                    return true;
                }
                let mut nb = c;
                nb[axis] = v as usize;
                !self.get(nb[0], nb[1], nb[2])
            })
        })
    }

    pub fn boundary_voxels(&self) -> Vec<[usize; 3]> {
        let n = self.n;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if self.is_boundary(i, j, k) {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    /// Analytic occupancy: voxel centers inside the scene.
    pub fn from_scene(scene: &SceneSpec, n: usize) -> Self {
        let mut g = Self::filled(n, false);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let c = g.voxel_center(i, j, k);
                    g.set(i, j, k, scene.contains(c));
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarveConfig {
    pub resolution: usize,
    /// Masks are dilated by this many pixels before carving, absorbing the
    /// half-pixel quantization of rasterized silhouettes.
    pub tolerance_px: usize,
    pub threshold: f32,
}

impl Default for CarveConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_GRID_RESOLUTION,
            tolerance_px: 0,
            threshold: DEFAULT_SILHOUETTE_THRESHOLD,
        }
    }
}

/// A voxel survives iff its center projects onto foreground in every mask.
/// Centers projecting outside a view are carved away.
pub fn carve(views: &[(Mask, CameraPose)], config: &CarveConfig) -> Result<OccupancyGrid> {
    if views.is_empty() {
        bail_arg!("carving needs at least one view");
    }
    if config.resolution == 0 {
        bail_arg!("grid resolution must be positive");
    }
    let n = config.resolution;
    let mut grid = OccupancyGrid::filled(n, true);
    for (mask, pose) in views {
        let mask = mask.dilated(config.tolerance_px);
        let cam = OrthoCamera::from_pose(pose);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if !grid.get(i, j, k) {
                        continue;
                    }
                    let (u, v) = cam.project(grid.voxel_center(i, j, k));
                    let keep = cam
                        .pixel_of(u, v, mask.side())
                        .is_some_and(|(r, c)| mask.get(r, c));
                    if !keep {
                        grid.set(i, j, k, false);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Silhouettes of posed views, then [`carve`].
pub fn carve_views(views: &[(&ViewImage, CameraPose)], config: &CarveConfig) -> Result<OccupancyGrid> {
    let masks: Vec<_> = views
        .iter()
        .map(|(v, p)| (silhouette(v, config.threshold), *p))
        .collect();
    carve(&masks, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One `x y z` line per point.
    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.points.len() * 40);
        for p in &self.points {
            writeln!(buf, "{:.9} {:.9} {:.9}", p[0], p[1], p[2]).expect("in-memory write");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::schema(path.display().to_string(), format!("line {}", n + 1), format!("{e}")))?;
            if vals.len() != 3 {
                return Err(Error::schema(
                    path.display().to_string(),
                    format!("line {}", n + 1),
                    "expected three coordinates",
                ));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        Ok(Self { points })
    }
}

/// The input pose followed by the six target poses around it.
pub fn protocol_poses(input: CameraPose) -> Vec<CameraPose> {
    std::iter::once(input)
        .chain(target_poses().map(|p| p.relative_to(input.azimuth_deg)))
        .collect()
}

/// `count` points over the boundary voxels, each jittered uniformly within
/// its voxel. Voxels are drawn without replacement when there are enough.
pub fn surface_points(grid: &OccupancyGrid, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let boundary = grid.boundary_voxels();
    if boundary.is_empty() {
        return Err(Error::EmptyReconstruction(format!(
            "no occupied voxels in a {0}^3 grid",
            grid.resolution()
        )));
    }
    let picks: Vec<usize> = if boundary.len() >= count {
        sample_indices(rng, boundary.len(), count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..boundary.len())).collect()
    };
    let half = grid.voxel_size() / 2.0;
    let points = picks
        .into_iter()
        .map(|idx| {
            let [i, j, k] = boundary[idx];
            let c = grid.voxel_center(i, j, k);
            c.map(|x| x + rng.random_range(-half..half))
        })
        .collect();
    Ok(PointCloud { points })
}

fn sample_on_primitive(prim: &Primitive, rng: &mut impl Rng) -> Vec3 {
    use std::f64::consts::PI;
    let c = prim.center;
    let local = match prim.shape {
        Shape::Sphere { radius } => {
            // Uniform direction from the area-preserving cylinder map.
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi = rng.random_range(0.0..2.0 * PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            [radius * s * phi.cos(), radius * s * phi.sin(), radius * z]
        }
        Shape::Box { half_extents: h } => {
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (a, &area) in areas.iter().enumerate() {
                if pick < area {
                    axis = a;
                    break;
                }
                pick -= area;
            }
            let mut p = [0.0; 3];
            for (a, slot) in p.iter_mut().enumerate() {
                *slot = if a == axis {
                    if rng.random::<bool>() {
                        h[a]
                    } else {
                        -h[a]
                    }
                } else {
                    rng.random_range(-h[a]..=h[a])
                };
            }
            p
        }
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let side = 2.0 * PI * radius * 2.0 * half_height;
            let caps = 2.0 * PI * radius * radius;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + caps) < side {
                let y = rng.random_range(-half_height..=half_height);
                [radius * theta.cos(), y, radius * theta.sin()]
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let y = if rng.random::<bool>() {
                    half_height
                } else {
                    -half_height
                };
                [r * theta.cos(), y, r * theta.sin()]
            }
        }
    };
    [local[0] + c[0], local[1] + c[1], local[2] + c[2]]
}

fn strictly_inside(prim: &Primitive, p: Vec3) -> bool {
    let d = [p[0] - prim.center[0], p[1] - prim.center[1], p[2] - prim.center[2]];
    let eps = 1e-9;
    match prim.shape {
        Shape::Sphere { radius } => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() < radius - eps,
        Shape::Box { half_extents } => (0..3).all(|i| d[i].abs() < half_extents[i] - eps),
        Shape::Cylinder {
            radius,
            half_height,
        } => d[1].abs() < half_height - eps && (d[0] * d[0] + d[2] * d[2]).sqrt() < radius - eps,
    }
}

/// Area-weighted uniform samples on the surface of the union of primitives:
/// a primitive is picked in proportion to its area, a point is drawn
/// uniformly on it, and points buried inside another primitive are redrawn.
pub fn gt_surface_points(scene: &SceneSpec, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if scene.primitives.is_empty() {
        return Err(Error::EmptyReconstruction("scene has no primitives".into()));
    }
    let areas: Vec<f64> = scene.primitives.iter().map(|p| p.shape.surface_area()).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(1000).max(1000);
    let mut attempts = 0;
    while points.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::EmptyReconstruction(
                "union surface could not be sampled".into(),
            ));
        }
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = areas.len() - 1;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                chosen = i;
                break;
            }
            pick -= a;
        }
        let p = sample_on_primitive(&scene.primitives[chosen], rng);
        let buried = scene
            .primitives
            .iter()
            .enumerate()
            .any(|(i, other)| i != chosen && strictly_inside(other, p));
        if !buried {
            points.push(p);
        }
    }
    Ok(PointCloud { points })
}
