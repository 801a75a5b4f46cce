//! Image and point-cloud fidelity metrics and their report records.

mod image;
mod points;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use image::{
    cosine, feature_sim, gaussian_taps, luma, psnr, ssim, LUMA_WEIGHTS, PSNR_CAP_DB, SSIM_K1,
    SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use points::{
    chamfer, cloud_metrics, fscore, nearest_distances, FSCORE_TAU, FSCORE_TAU_COARSE,
};

use crate::conditioning::GlobalEncoder;
use crate::error::{bail_arg, Error, Result};
use crate::gridops::ViewImage;
use crate::recon3d::PointCloud;

/// Stated in every report so chamfer values are self-describing.
pub const CHAMFER_FORM: &str =
    "unsquared euclidean, 0.5 * (mean_x min_y |x-y| + mean_y min_x |x-y|), cube [-1,1]^3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub feature_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric2DReport {
    pub per_view: Vec<ViewMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_sim: Option<f64>,
    /// Always null: no pretrained perceptual network is available.
    pub lpips: Option<f64>,
    pub views: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric3DReport {
    pub chamfer: f64,
    pub fscore: f64,
    pub tau: f64,
    pub fscore_coarse: f64,
    pub tau_coarse: f64,
    pub pred_points: usize,
    pub gt_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    /// Carving left no voxels; 3D metrics score a lone point at the origin.
    #[serde(default)]
    pub empty_reconstruction: bool,
    pub metrics_2d: Metric2DReport,
    pub metrics_3d: Metric3DReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub samples: usize,
    #[serde(default)]
    pub empty_reconstructions: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_sim: Option<f64>,
    pub lpips: Option<f64>,
    pub chamfer: f64,
    pub fscore: f64,
    pub fscore_coarse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub config_hash: String,
    pub mode: String,
    pub chamfer_form: String,
    pub tau: f64,
    pub tau_coarse: f64,
    pub lpips: String,
}

impl ReportHeader {
    pub fn new(config_hash: &str, mode: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            mode: mode.to_string(),
            chamfer_form: CHAMFER_FORM.to_string(),
            tau: FSCORE_TAU,
            tau_coarse: FSCORE_TAU_COARSE,
            lpips: "not computed".to_string(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// 2D metrics over paired views plus 3D metrics over the two clouds.
/// `features` enables the encoder-based similarity column.
pub fn evaluate_sample(
    generated: &[ViewImage],
    ground_truth: &[ViewImage],
    recon: &PointCloud,
    gt_cloud: &PointCloud,
    features: Option<(&GlobalEncoder, DType)>,
) -> Result<(Metric2DReport, Metric3DReport)> {
    if generated.is_empty() || generated.len() != ground_truth.len() {
        bail_arg!(
            "need matching non-empty view lists, got {} generated and {} reference",
            generated.len(),
            ground_truth.len()
        );
    }
    let per_view = generated
        .iter()
        .zip(ground_truth)
        .map(|(g, t)| {
            Ok(ViewMetrics {
                psnr: psnr(g.image(), t.image())?,
                ssim: ssim(g.image(), t.image())?,
                feature_sim: features
                    .map(|(enc, dtype)| feature_sim(enc, dtype, g.image(), t.image()))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let feature_mean = features.map(|_| mean(per_view.iter().filter_map(|v| v.feature_sim)));
    let m2 = Metric2DReport {
        psnr: mean(per_view.iter().map(|v| v.psnr)),
        ssim: mean(per_view.iter().map(|v| v.ssim)),
        feature_sim: feature_mean,
        lpips: None,
        views: per_view.len(),
        resolution: generated[0].side(),
        per_view,
    };
    let (cd, f) = cloud_metrics(&recon.points, &gt_cloud.points, &[FSCORE_TAU, FSCORE_TAU_COARSE])?;
    let m3 = Metric3DReport {
        chamfer: cd,
        fscore: f[0],
        tau: FSCORE_TAU,
        fscore_coarse: f[1],
        tau_coarse: FSCORE_TAU_COARSE,
        pred_points: recon.len(),
        gt_points: gt_cloud.len(),
    };
    Ok((m2, m3))
}

pub fn aggregate(reports: &[SampleReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        bail_arg!("cannot aggregate zero sample reports");
    }
    let feature_sim = reports
        .iter()
        .map(|r| r.metrics_2d.feature_sim)
        .collect::<Option<Vec<_>>>()
        .map(|v| mean(v.into_iter()));
    Ok(AggregateReport {
        samples: reports.len(),
        empty_reconstructions: reports.iter().filter(|r| r.empty_reconstruction).count(),
        psnr: mean(reports.iter().map(|r| r.metrics_2d.psnr)),
        ssim: mean(reports.iter().map(|r| r.metrics_2d.ssim)),
        feature_sim,
        lpips: None,
        chamfer: mean(reports.iter().map(|r| r.metrics_3d.chamfer)),
        fscore: mean(reports.iter().map(|r| r.metrics_3d.fscore)),
        fscore_coarse: mean(reports.iter().map(|r| r.metrics_3d.fscore_coarse)),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn format_table(header: &ReportHeader, reports: &[SampleReport], agg: &AggregateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# mode: {}  config: {}", header.mode, header.config_hash);
    let _ = writeln!(s, "# chamfer: {}", header.chamfer_form);
    let _ = writeln!(s, "# lpips: {}", header.lpips);
    let _ = writeln!(
        s,
        "{:>6} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8}",
        "sample",
        "psnr",
        "ssim",
        "feat",
        "cd",
        format!("f@{}", header.tau),
        format!("f@{}", header.tau_coarse)
    );
    let row = |s: &mut String, label: &str, p: f64, q: f64, f: Option<f64>, cd: f64, f1: f64, f2: f64| {
        let _ = writeln!(
            s,
            "{label:>6} {p:>8.3} {q:>7.4} {:>8} {cd:>8.4} {f1:>8.4} {f2:>8.4}",
            opt(f)
        );
    };
    for r in reports {
        row(
            &mut s,
            &r.index.to_string(),
            r.metrics_2d.psnr,
            r.metrics_2d.ssim,
            r.metrics_2d.feature_sim,
            r.metrics_3d.chamfer,
            r.metrics_3d.fscore,
            r.metrics_3d.fscore_coarse,
        );
    }
    row(&mut s, "mean", agg.psnr, agg.ssim, agg.feature_sim, agg.chamfer, agg.fscore, agg.fscore_coarse);
    s
}

#[derive(Serialize)]
struct CsvRow<'a> {
    config_hash: &'a str,
    mode: &'a str,
    sample: usize,
    psnr: f64,
    ssim: f64,
    feature_sim: Option<f64>,
    lpips: Option<f64>,
    chamfer: f64,
    fscore: f64,
    fscore_coarse: f64,
}

/// Write `eval.jsonl` (header, one record per sample, aggregate),
/// `eval.csv` and `eval.txt` into `dir`.
pub fn write_reports(dir: &Path, header: &ReportHeader, reports: &[SampleReport]) -> Result<AggregateReport> {
    let agg = aggregate(reports)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut jsonl = String::new();
    let line = |v: serde_json::Value| serde_json::to_string(&v).expect("json value");
    jsonl.push_str(&line(serde_json::json!({ "header": header })));
    jsonl.push('\n');
    for r in reports {
        jsonl.push_str(&line(serde_json::json!({ "sample": r })));
        jsonl.push('\n');
    }
    jsonl.push_str(&line(serde_json::json!({ "aggregate": agg })));
    jsonl.push('\n');
    let path = dir.join("eval.jsonl");
    fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in reports {
        w.serialize(CsvRow {
            config_hash: &header.config_hash,
            mode: &header.mode,
            sample: r.index,
            psnr: r.metrics_2d.psnr,
            ssim: r.metrics_2d.ssim,
            feature_sim: r.metrics_2d.feature_sim,
            lpips: None,
            chamfer: r.metrics_3d.chamfer,
            fscore: r.metrics_3d.fscore,
            fscore_coarse: r.metrics_3d.fscore_coarse,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("eval.txt");
    fs::write(&path, format_table(header, reports, &agg)).map_err(|e| Error::io(&path, e))?;
    Ok(agg)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
