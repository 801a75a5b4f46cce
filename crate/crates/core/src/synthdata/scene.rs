use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Primitive geometry. Cylinders are aligned with the world y axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
        }
    }

    /// Radius of the smallest origin-centered ball containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => norm(half_extents),
            Shape::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
        }
    }

    /// Axis-aligned half extents.
    pub fn half_box(&self) -> Vec3 {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
            Shape::Cylinder {
                radius,
                half_height,
            } => [radius, half_height, radius],
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half_extents: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Shape::Cylinder {
                radius,
                half_height,
            } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub color: [f32; 3],
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.center);
        match self.shape {
            Shape::Sphere { radius } => dot(d, d) <= radius * radius,
            Shape::Box { half_extents } => (0..3).all(|i| d[i].abs() <= half_extents[i]),
            Shape::Cylinder {
                radius,
                half_height,
            } => d[1].abs() <= half_height && d[0] * d[0] + d[2] * d[2] <= radius * radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            seed: 0,
        }
    }

    pub fn single(shape: Shape, center: Vec3, color: [f32; 3]) -> Self {
        Self {
            primitives: vec![Primitive {
                shape,
                center,
                color,
            }],
            seed: 0,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|prim| prim.contains(p))
    }
}

/// Deterministic toy object: 1-4 primitives with every point inside the
/// unit ball (and therefore inside [-1, 1]^3), so any orthographic view with
/// a half-width of 1 sees the whole object.
pub fn random_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=4usize);
    let primitives = (0..count)
        .map(|_| {
            let shape = match rng.random_range(0..3u8) {
                0 => Shape::Sphere {
                    radius: rng.random_range(0.15..0.4),
                },
                1 => Shape::Box {
                    half_extents: std::array::from_fn(|_| rng.random_range(0.1..0.35)),
                },
                _ => Shape::Cylinder {
                    radius: rng.random_range(0.1..0.3),
                    half_height: rng.random_range(0.15..0.4),
                },
            };
            let mut center: Vec3 = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
            let reach = 1.0 - shape.bounding_radius();
            let dist = norm(center);
            if dist > reach {
                let s = reach / dist;
                center = center.map(|c| c * s);
            }
            let color = std::array::from_fn(|_| rng.random_range(0.15f32..0.85));
            Primitive {
                shape,
                center,
                color,
            }
        })
        .collect();
    SceneSpec { primitives, seed }
}
