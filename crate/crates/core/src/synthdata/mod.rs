//! Procedural toy objects, an orthographic renderer, and the 7-view dataset
//! format (one input view plus the six scheduled targets).

mod dataset;
mod render;
mod scene;

pub use dataset::{
    generate_split, make_sample, read_dataset, read_manifest, write_dataset, DatasetManifest, Sample,
    DATASET_VERSION,
};
pub use render::{render, render_with_mask, OrthoCamera, RenderConfig, VIEW_HALF_WIDTH};
pub use scene::{random_scene, Primitive, SceneSpec, Shape, Vec3};

pub const INPUT_ELEVATION_RANGE_DEG: (f64, f64) = (-20.0, 45.0);
