//! Orthographic ray caster for [`SceneSpec`]s.
//!
//! The camera sits on an orbit around the origin; the image plane spans
//! [-1, 1] in both view axes, so the unit ball always projects inside the
//! frame.

use serde::{Deserialize, Serialize};

use super::scene::{add_scaled, dot, normalize, sub, Primitive, SceneSpec, Shape, Vec3};
use crate::gridops::{Image, ViewImage};
use crate::poseplan::CameraPose;

/// Half-width of the orthographic view window in world units.
pub const VIEW_HALF_WIDTH: f64 = 1.0;
const CAMERA_DISTANCE: f64 = 3.0;
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
const LIGHT_DIR: Vec3 = [0.4, 0.8, 0.45];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub resolution: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { resolution: 32 }
    }
}

/// Orthonormal camera frame for an orbit pose. `forward` points from the
/// origin toward the camera.
#[derive(Debug, Clone, Copy)]
pub struct OrthoCamera {
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

impl OrthoCamera {
    pub fn from_pose(pose: &CameraPose) -> Self {
        let (az, el) = (pose.azimuth_deg.to_radians(), pose.elevation_deg.to_radians());
        let forward = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
        let right = [az.cos(), 0.0, -az.sin()];
        let up = [
            forward[1] * right[2] - forward[2] * right[1],
            forward[2] * right[0] - forward[0] * right[2],
            forward[0] * right[1] - forward[1] * right[0],
        ];
        Self { forward, right, up }
    }

    /// World point to image-plane coordinates (u right, v up).
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        (dot(p, self.right), dot(p, self.up))
    }

    /// Pixel (row, col) containing image-plane point (u, v), if inside.
    pub fn pixel_of(&self, u: f64, v: f64, resolution: usize) -> Option<(usize, usize)> {
        let scale = resolution as f64 / (2.0 * VIEW_HALF_WIDTH);
        let col = ((u + VIEW_HALF_WIDTH) * scale).floor();
        let row = ((VIEW_HALF_WIDTH - v) * scale).floor();
        let n = resolution as f64;
        (col >= 0.0 && row >= 0.0 && col < n && row < n).then(|| (row as usize, col as usize))
    }

    /// Image-plane coordinates of a pixel center.
    pub fn pixel_center(row: usize, col: usize, resolution: usize) -> (f64, f64) {
        let step = 2.0 * VIEW_HALF_WIDTH / resolution as f64;
        (
            -VIEW_HALF_WIDTH + (col as f64 + 0.5) * step,
            VIEW_HALF_WIDTH - (row as f64 + 0.5) * step,
        )
    }

    /// Ray origin and direction through image-plane point (u, v).
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let mut o = self.forward.map(|x| x * CAMERA_DISTANCE);
        o = add_scaled(o, self.right, u);
        o = add_scaled(o, self.up, v);
        (o, self.forward.map(|x| -x))
    }
}

/// Nearest hit distance and outward normal.
fn intersect(prim: &Primitive, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    let o = sub(origin, prim.center);
    match prim.shape {
        Shape::Sphere { radius } => {
            let b = dot(o, dir);
            let c = dot(o, o) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t > 0.0).then(|| (t, normalize(add_scaled(o, dir, t))))
        }
        Shape::Box { half_extents } => {
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 1.0;
            for i in 0..3 {
                if dir[i].abs() < 1e-15 {
                    if o[i].abs() > half_extents[i] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_extents[i] - o[i]) / dir[i];
                let t2 = (half_extents[i] - o[i]) / dir[i];
                let (near, far, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if near > tmin {
                    tmin = near;
                    axis = i;
                    sign = s;
                }
                tmax = tmax.min(far);
            }
            if tmin > tmax || tmin <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((tmin, n))
        }
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let mut best: Option<(f64, Vec3)> = None;
            let mut consider = |t: f64, n: Vec3| {
                if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = dir[0] * dir[0] + dir[2] * dir[2];
            if a > 1e-15 {
                let b = o[0] * dir[0] + o[2] * dir[2];
                let c = o[0] * o[0] + o[2] * o[2] - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    for t in [(-b - disc.sqrt()) / a, (-b + disc.sqrt()) / a] {
                        let p = add_scaled(o, dir, t);
                        if p[1].abs() <= half_height {
                            consider(t, normalize([p[0], 0.0, p[2]]));
                        }
                    }
                }
            }
            if dir[1].abs() > 1e-15 {
                for cap in [-half_height, half_height] {
                    let t = (cap - o[1]) / dir[1];
                    let p = add_scaled(o, dir, t);
                    if p[0] * p[0] + p[2] * p[2] <= radius * radius {
                        consider(t, [0.0, cap.signum(), 0.0]);
                    }
                }
            }
            best
        }
    }
}

/// Render a view and the coverage mask (true where a primitive is hit).
pub fn render_with_mask(
    scene: &SceneSpec,
    pose: &CameraPose,
    config: &RenderConfig,
) -> (ViewImage, Vec<bool>) {
    let res = config.resolution;
    let cam = OrthoCamera::from_pose(pose);
    let light = normalize(LIGHT_DIR);
    let mut img = Image::filled(res, res, [1.0; 3]);
    let mut mask = vec![false; res * res];
    for row in 0..res {
        for col in 0..res {
            let (u, v) = OrthoCamera::pixel_center(row, col, res);
            let (o, d) = cam.ray(u, v);
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| intersect(p, o, d).map(|(t, n)| (t, n, p.color)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, n, color)) = hit {
                let shade = AMBIENT + DIFFUSE * dot(n, light).max(0.0);
                img.set_pixel(row, col, color.map(|c| (c as f64 * shade) as f32));
                mask[row * res + col] = true;
            }
        }
    }
    (ViewImage::new(img).expect("square by construction"), mask)
}

pub fn render(scene: &SceneSpec, pose: &CameraPose, config: &RenderConfig) -> ViewImage {
    render_with_mask(scene, pose, config).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> SceneSpec {
        SceneSpec::single(
            Shape::Box {
                half_extents: [0.5; 3],
            },
            [0.0; 3],
            [0.5, 0.4, 0.3],
        )
    }

    #[test]
    fn empty_scene_is_white() {
        let img = render(&SceneSpec::empty(), &CameraPose::new(10.0, 5.0), &RenderConfig::default());
        assert!(img.image().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn front_box_matches_square_projection() {
        let cfg = RenderConfig::default();
        let (img, mask) = render_with_mask(&unit_box(), &CameraPose::new(0.0, 0.0), &cfg);
        let res = cfg.resolution;
        for row in 0..res {
            for col in 0..res {
                // analytic projection: |x| <= 0.5 and |y| <= 0.5 on the image plane
                let u = -1.0 + (col as f64 + 0.5) * 2.0 / res as f64;
                let v = 1.0 - (row as f64 + 0.5) * 2.0 / res as f64;
                let inside = u.abs() <= 0.5 && v.abs() <= 0.5;
                assert_eq!(mask[row * res + col], inside, "pixel {row},{col}");
                if !inside {
                    assert_eq!(img.image().pixel(row, col), [1.0; 3]);
                }
            }
        }
    }

    #[test]
    fn sphere_area_rotation_invariant() {
        let scene = SceneSpec::single(Shape::Sphere { radius: 0.6 }, [0.0; 3], [0.3; 3]);
        let cfg = RenderConfig::default();
        let area = |az: f64| {
            render_with_mask(&scene, &CameraPose::new(az, 20.0), &cfg)
                .1
                .iter()
                .filter(|&&m| m)
                .count()
        };
        let a0 = area(0.0);
        for az in [30.0, 90.0, 145.0, 270.0] {
            assert_eq!(area(az), a0);
        }
    }

    #[test]
    fn projection_roundtrip() {
        let cam = OrthoCamera::from_pose(&CameraPose::new(37.0, -12.0));
        let (o, d) = cam.ray(0.3, -0.2);
        let p = add_scaled(o, d, 2.7);
        let (u, v) = cam.project(p);
        assert!((u - 0.3).abs() < 1e-12 && (v + 0.2).abs() < 1e-12);
        let (u, v) = OrthoCamera::pixel_center(3, 7, 32);
        assert_eq!(cam.pixel_of(u, v, 32), Some((3, 7)));
        assert_eq!(cam.pixel_of(1.5, 0.0, 32), None);
    }

    #[test]
    fn positive_elevation_looks_down() {
        let cam = OrthoCamera::from_pose(&CameraPose::new(0.0, 20.0));
        assert!(cam.forward[1] > 0.0);
        assert!(cam.up[1] > 0.0);
    }
}
