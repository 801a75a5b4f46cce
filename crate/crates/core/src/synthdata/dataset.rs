use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, RenderConfig};
use super::scene::{random_scene, SceneSpec};
use super::INPUT_ELEVATION_RANGE_DEG;
use crate::error::{Error, Result};
use crate::gridops::{Image, ViewImage};
use crate::poseplan::{target_poses, CameraPose, NUM_TARGETS};
use crate::seeding::{self, tag};

pub const DATASET_VERSION: u32 = 1;
const PROTOCOL: &str = "input+6 targets, azimuth 30+60i relative, elevations 20/-10";

/// One object: the input view plus six targets, all with absolute poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub input_view: ViewImage,
    pub input_pose: CameraPose,
    pub target_views: [ViewImage; NUM_TARGETS],
    pub target_poses: [CameraPose; NUM_TARGETS],
    pub scene: SceneSpec,
}

impl Sample {
    pub fn resolution(&self) -> usize {
        self.input_view.side()
    }

    /// Target azimuths relative to the input azimuth, wrapped to [0, 360).
    pub fn relative_target_azimuths(&self) -> [f64; NUM_TARGETS] {
        self.target_poses
            .map(|p| crate::poseplan::wrap_degrees(p.azimuth_deg - self.input_pose.azimuth_deg))
    }
}

/// Render the 7-view sample for `scene`. The input pose is drawn from `rng`;
/// images are stored at 8-bit precision so the in-memory sample equals what
/// a dataset round trip returns.
pub fn make_sample(
    index: usize,
    scene: &SceneSpec,
    rng: &mut impl Rng,
    config: &RenderConfig,
) -> Sample {
    let (lo, hi) = INPUT_ELEVATION_RANGE_DEG;
    let input_pose = CameraPose::new(rng.random_range(0.0..360.0), rng.random_range(lo..=hi));
    let target_poses = target_poses().map(|p| p.relative_to(input_pose.azimuth_deg));
    let shot = |pose: &CameraPose| {
        ViewImage::new(render(scene, pose, config).image().quantized()).expect("square")
    };
    Sample {
        index,
        input_view: shot(&input_pose),
        input_pose,
        target_views: target_poses.each_ref().map(shot),
        target_poses,
        scene: scene.clone(),
    }
}

/// Samples `offset..offset + count` of the dataset defined by `seed`.
pub fn generate_split(seed: u64, offset: usize, count: usize, config: &RenderConfig) -> Vec<Sample> {
    (offset..offset + count)
        .map(|i| {
            let scene = random_scene(seeding::derive_seed(seed, &[tag::SCENE, i as u64]));
            let mut rng = seeding::stream(seed, &[tag::POSE, i as u64]);
            make_sample(i, &scene, &mut rng, config)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub file: String,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub scene: SceneSpec,
    pub input: ViewRecord,
    pub targets: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub protocol: String,
    pub resolution: usize,
    pub count: usize,
    pub samples: Vec<SampleRecord>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolution = samples.first().map_or(0, Sample::resolution);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let input_file = format!("{:05}_input.png", s.index);
        s.input_view.image().save_png(&dir.join(&input_file))?;
        let mut targets = Vec::with_capacity(NUM_TARGETS);
        for (j, (view, pose)) in s.target_views.iter().zip(&s.target_poses).enumerate() {
            let file = format!("{:05}_target{}.png", s.index, j + 1);
            view.image().save_png(&dir.join(&file))?;
            targets.push(ViewRecord { file, pose: *pose });
        }
        records.push(SampleRecord {
            index: s.index,
            scene: s.scene.clone(),
            input: ViewRecord {
                file: input_file,
                pose: s.input_pose,
            },
            targets,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        protocol: PROTOCOL.to_string(),
        resolution,
        count: samples.len(),
        samples: records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::schema(path.display().to_string(), field, e.inner().to_string())
    })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::schema(
            "manifest",
            "version",
            format!("unsupported version {} (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::schema(
            "manifest",
            "count",
            format!("count {} but {} samples listed", manifest.count, manifest.samples.len()),
        ));
    }
    for (i, rec) in manifest.samples.iter().enumerate() {
        if rec.targets.len() != NUM_TARGETS {
            return Err(Error::schema(
                format!("samples[{i}]"),
                "targets",
                format!("expected {NUM_TARGETS} target views, found {}", rec.targets.len()),
            ));
        }
    }
    Ok(manifest)
}

fn load_view(dir: &Path, rec: &ViewRecord, resolution: usize, record: &str) -> Result<ViewImage> {
    let img: Image = Image::load_png(&dir.join(&rec.file))?;
    if img.height() != resolution || img.width() != resolution {
        return Err(Error::schema(
            record,
            "file",
            format!(
                "{} is {}x{}, manifest says {resolution}",
                rec.file,
                img.height(),
                img.width()
            ),
        ));
    }
    ViewImage::new(img)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let record = format!("samples[{i}]");
            let input_view = load_view(dir, &rec.input, manifest.resolution, &record)?;
            let mut views = Vec::with_capacity(NUM_TARGETS);
            for t in &rec.targets {
                views.push(load_view(dir, t, manifest.resolution, &record)?);
            }
            Ok(Sample {
                index: rec.index,
                input_view,
                input_pose: rec.input.pose,
                target_views: views.try_into().expect("count validated"),
                target_poses: std::array::from_fn(|j| rec.targets[j].pose),
                scene: rec.scene.clone(),
            })
        })
        .collect()
}
