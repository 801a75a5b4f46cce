use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{EvalMode, ExperimentConfig};
use crate::arpipeline::{
    checkpoint_dir, infer, load_checkpoint, InferConfig, LogRecord, NextViewModel, StepTrace,
    Trainer,
};
use crate::error::{bail_arg, Error, Result};
use crate::gridops::{tile6, Image, ViewImage};
use crate::metrics::{evaluate_sample, format_table, write_reports, AggregateReport, ReportHeader, SampleReport};
use crate::poseplan::{target_poses, CameraPose};
use crate::recon3d::{carve_views, gt_surface_points, surface_points, CarveConfig, PointCloud};
use crate::seeding::{derive_seed, stream, tag};
use crate::synthdata::{generate_split, read_dataset, write_dataset, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail_arg!("unknown split `{other}`"),
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: ExperimentConfig,
}

pub fn write_run_record(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = RunRecord {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
    };
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&record).expect("run record serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub dir: PathBuf,
    pub train: usize,
    pub test: usize,
}

/// Render both splits; test scenes continue the train index range so the
/// splits never share a scene.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<GenDataSummary> {
    let dir = cfg.data_dir();
    let render = cfg.data.render;
    let train = generate_split(cfg.seed, 0, cfg.data.train_count, &render);
    write_dataset(&train, &dir.join(Split::Train.as_str()))?;
    let test = generate_split(cfg.seed, cfg.data.train_count, cfg.data.test_count, &render);
    write_dataset(&test, &dir.join(Split::Test.as_str()))?;
    write_run_record(&dir, "gen-data", cfg)?;
    Ok(GenDataSummary {
        dir,
        train: train.len(),
        test: test.len(),
    })
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>> {
    let dir = cfg.data_dir().join(split.as_str());
    let samples = read_dataset(&dir)?;
    if samples.is_empty() {
        return Err(Error::schema(dir.display().to_string(), "count", "dataset split is empty"));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub last_loss: Option<f64>,
}

/// Train `cfg.model` from scratch, or continue from `resume`, up to
/// `cfg.train.steps` steps. Checkpoints go to `out_dir/checkpoints/`.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = load_split(cfg, Split::Train)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, data, cfg.train.clone())?,
        None => {
            let model = NextViewModel::new(&cfg.model, &cfg.diffusion, cfg.seed)?;
            Trainer::new(model, data, cfg.train.clone())?
        }
    };
    write_run_record(out_dir, "train", cfg)?;
    let hash = cfg.hash();
    let total = cfg.train.steps;
    let every = (total / 20).max(1);
    let mut last_loss = None;
    let last = trainer.run(total, out_dir, &hash, |r| {
        last_loss = Some(r.loss);
        if r.step % every == 0 || r.step == total {
            log::info!("step {}/{total} k={} loss={:.5} lr={:.2e} |g|={:.3}", r.step, r.k, r.loss, r.lr, r.grad_norm);
        }
    })?;
    let checkpoint = match last {
        Some(p) => p,
        None => {
            let dir = checkpoint_dir(out_dir, trainer.step());
            if !dir.exists() {
                trainer.save(&dir, &hash)?;
            }
            dir
        }
    };
    Ok(TrainSummary {
        checkpoint,
        steps: trainer.step(),
        last_loss,
    })
}

/// Last logged loss in a training directory, if any.
pub(crate) fn last_logged_loss(out_dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(out_dir.join("train_log.jsonl")).ok()?;
    let line = text.lines().last()?;
    serde_json::from_str::<LogRecord>(line).ok().map(|r| r.report.loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRecord {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub files: Vec<String>,
    /// Target poses with azimuths relative to the input view.
    pub poses: Vec<CameraPose>,
    pub trace: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub views: Vec<PathBuf>,
    pub grid: PathBuf,
    pub record: PathBuf,
}

pub fn infer_to_dir(cfg: &ExperimentConfig, checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<InferSummary> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let image = ViewImage::new(Image::load_png(input)?)?;
    let output = infer(&model, &image, &cfg.infer)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut views = Vec::new();
    let mut files = Vec::new();
    for (i, view) in output.views.iter().enumerate() {
        let name = format!("view_{}.png", i + 1);
        let path = out_dir.join(&name);
        view.image().save_png(&path)?;
        views.push(path);
        files.push(name);
    }
    let grid = out_dir.join("grid.png");
    tile6(&output.views)?.image().save_png(&grid)?;
    let record = InferRecord {
        config_hash: cfg.hash(),
        checkpoint: checkpoint.to_path_buf(),
        input: input.to_path_buf(),
        files,
        poses: target_poses().to_vec(),
        trace: output.trace,
    };
    let record_path = out_dir.join("poses.json");
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(&record_path, text + "\n").map_err(|e| Error::io(&record_path, e))?;
    Ok(InferSummary {
        views,
        grid,
        record: record_path,
    })
}

fn resized(view: &ViewImage, side: usize) -> Result<ViewImage> {
    if view.side() == side {
        Ok(view.clone())
    } else {
        ViewImage::new(view.image().resize(side, side))
    }
}

/// Per-sample reports for `mode`. `model` is required for
/// [`EvalMode::Model`] and supplies the feature encoder otherwise.
pub fn evaluate_samples(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    mode: EvalMode,
    model: Option<&NextViewModel>,
    infer_cfg: &InferConfig,
) -> Result<Vec<SampleReport>> {
    let carve_cfg = CarveConfig {
        resolution: cfg.eval.grid_resolution,
        tolerance_px: cfg.eval.tolerance_px,
        threshold: cfg.eval.silhouette_threshold,
    };
    let features = model
        .filter(|_| cfg.eval.feature_sim)
        .map(|m| (m.conditioner().encoder(), m.dtype()));
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let generated: Vec<ViewImage> = match mode {
            EvalMode::Model => {
                let Some(model) = model else {
                    bail_arg!("eval mode `model` needs a checkpoint");
                };
                let per_sample = InferConfig {
                    seed: derive_seed(infer_cfg.seed, &[tag::EVAL, s.index as u64]),
                    ..infer_cfg.clone()
                };
                infer(model, &s.input_view, &per_sample)?.views.to_vec()
            }
            EvalMode::GroundTruth | EvalMode::GroundTruthHull => s.target_views.to_vec(),
        };
        let side = generated[0].side();
        let reference = s
            .target_views
            .iter()
            .map(|v| resized(v, side))
            .collect::<Result<Vec<_>>>()?;
        let gt_cloud = gt_surface_points(
            &s.scene,
            cfg.eval.surface_points,
            &mut stream(cfg.seed, &[tag::SURFACE, s.index as u64, 0]),
        )?;
        let (recon, empty) = if mode == EvalMode::GroundTruth {
            (gt_cloud.clone(), false)
        } else {
            let mut views: Vec<(&ViewImage, CameraPose)> = vec![(&s.input_view, s.input_pose)];
            views.extend(generated.iter().zip(s.target_poses.iter().copied()));
            let hull = carve_views(&views, &carve_cfg)?;
            match surface_points(
                &hull,
                cfg.eval.surface_points,
                &mut stream(cfg.seed, &[tag::SURFACE, s.index as u64, 1]),
            ) {
                Ok(cloud) => (cloud, false),
                Err(Error::EmptyReconstruction(msg)) => {
                    log::warn!("sample {}: {msg}; scoring a single point at the origin", s.index);
                    (PointCloud { points: vec![[0.0; 3]] }, true)
                }
                Err(e) => return Err(e),
            }
        };
        let (metrics_2d, metrics_3d) = evaluate_sample(&generated, &reference, &recon, &gt_cloud, features)?;
        reports.push(SampleReport {
            index: s.index,
            empty_reconstruction: empty,
            metrics_2d,
            metrics_3d,
        });
    }
    Ok(reports)
}

/// Evaluate one split and write `eval.jsonl`, `eval.csv`, `eval.txt`.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    split: Split,
    out_dir: &Path,
) -> Result<AggregateReport> {
    let mut samples = load_split(cfg, split)?;
    if let Some(max) = cfg.eval.max_samples {
        samples.truncate(max);
    }
    let model = checkpoint.map(load_checkpoint).transpose()?.map(|(m, _)| m);
    let reports = evaluate_samples(cfg, &samples, cfg.eval.mode, model.as_ref(), &cfg.infer)?;
    let header = ReportHeader::new(&cfg.hash(), cfg.eval.mode.as_str());
    write_run_record(out_dir, "eval", cfg)?;
    write_reports(out_dir, &header, &reports)
}

/// Human-readable table for an eval or ablation output directory (or its
/// `.jsonl` file).
pub fn report(path: &Path) -> Result<String> {
    let file = if path.is_dir() {
        ["eval.jsonl", "ablation.jsonl"]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no eval.jsonl or ablation.jsonl"))
            })?
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let bad = |n: usize, e: serde_json::Error| Error::schema(file.display().to_string(), format!("line {}", n + 1), e.to_string());
    if file.file_name().is_some_and(|n| n == "ablation.jsonl") {
        let rows = text
            .lines()
            .enumerate()
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| bad(n, e)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(super::format_ablation_table(&rows));
    }

    #[derive(Deserialize)]
    #[serde(rename_all = "snake_case")]
    enum Line {
        Header(ReportHeader),
        Sample(SampleReport),
        Aggregate(AggregateReport),
    }
    let (mut header, mut samples, mut agg) = (None, Vec::new(), None);
    for (n, l) in text.lines().enumerate() {
        match serde_json::from_str::<Line>(l).map_err(|e| bad(n, e))? {
            Line::Header(h) => header = Some(h),
            Line::Sample(s) => samples.push(s),
            Line::Aggregate(a) => agg = Some(a),
        }
    }
    let missing = |what: &str| Error::schema(file.display().to_string(), what, "record missing");
    Ok(format_table(
        &header.ok_or_else(|| missing("header"))?,
        &samples,
        &agg.ok_or_else(|| missing("aggregate"))?,
    ))
}
