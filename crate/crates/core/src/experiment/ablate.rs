use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::commands::{evaluate_samples, last_logged_loss, load_split, write_run_record, Split};
use super::config::{EvalMode, ExperimentConfig};
use super::Arm;
use crate::arpipeline::{checkpoint_dir, load_checkpoint, read_meta, InferConfig, NextViewModel, TrainConfig, Trainer};
use crate::conditioning::GlobalMode;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, csv_error, AggregateReport};
use crate::poseplan::SequenceOrder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    pub arm: Arm,
    pub order: SequenceOrder,
    pub alpha: f64,
    pub stacked_le: bool,
    pub global_mode: GlobalMode,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
    pub samples: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_sim: Option<f64>,
    pub chamfer: f64,
    pub fscore: f64,
    pub fscore_coarse: f64,
    pub empty_reconstructions: usize,
}

/// Train one model per (arm, order) and evaluate it at every alpha.
///
/// Alpha only acts at inference, so each trained checkpoint is reused for
/// the whole alpha sweep without further training. A checkpoint already on
/// disk with a matching config hash is loaded instead of retrained.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let root = cfg.out.join("ablation");
    let hash = cfg.hash();
    let steps = cfg.ablation.train_steps.unwrap_or(cfg.train.steps);
    let train_data = load_split(cfg, Split::Train)?;
    let mut test = load_split(cfg, Split::Test)?;
    if let Some(n) = cfg.ablation.eval_samples {
        test.truncate(n);
    }

    let mut rows = Vec::new();
    for &arm in &cfg.ablation.arms {
        for &order in &cfg.ablation.orders {
            let model_cfg = arm.apply(&cfg.model);
            let run_hash = format!("{hash}-{arm}-{order}");
            let dir = root.join(format!("{arm}-{order}"));
            let ckpt = checkpoint_dir(&dir, steps);
            let cached = read_meta(&ckpt).is_ok_and(|m| m.config_hash == run_hash && m.step == steps);
            let model = if cached {
                log::info!("{arm}/{order}: reusing {}", ckpt.display());
                load_checkpoint(&ckpt)?.0
            } else {
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                log::info!("{arm}/{order}: training {steps} steps");
                let train_cfg = TrainConfig {
                    steps,
                    order,
                    checkpoint_every: 0,
                    ..cfg.train.clone()
                };
                let model = NextViewModel::new(&model_cfg, &cfg.diffusion, cfg.seed)?;
                let mut trainer = Trainer::new(model, train_data.clone(), train_cfg)?;
                trainer.run(steps, &dir, &run_hash, |_| {})?;
                trainer.into_model()
            };
            let final_loss = last_logged_loss(&dir);

            let mut alpha_free: Option<AggregateReport> = None;
            for &alpha in &cfg.ablation.alphas {
                let agg = match &alpha_free {
                    Some(a) => a.clone(),
                    None => {
                        let infer_cfg = InferConfig {
                            alpha,
                            order,
                            ..cfg.infer.clone()
                        };
                        let reports = evaluate_samples(cfg, &test, EvalMode::Model, Some(&model), &infer_cfg)?;
                        let a = aggregate(&reports)?;
                        if !model_cfg.stacked_le {
                            alpha_free = Some(a.clone());
                        }
                        a
                    }
                };
                log::info!("{arm}/{order}/alpha={alpha}: psnr {:.3} cd {:.4}", agg.psnr, agg.chamfer);
                rows.push(AblationRow {
                    config_hash: hash.clone(),
                    arm,
                    order,
                    alpha,
                    stacked_le: model_cfg.stacked_le,
                    global_mode: model_cfg.global_mode,
                    train_steps: steps,
                    final_loss,
                    samples: agg.samples,
                    psnr: agg.psnr,
                    ssim: agg.ssim,
                    feature_sim: agg.feature_sim,
                    chamfer: agg.chamfer,
                    fscore: agg.fscore,
                    fscore_coarse: agg.fscore_coarse,
                    empty_reconstructions: agg.empty_reconstructions,
                });
            }
        }
    }

    write_run_record(&root, "ablate", cfg)?;
    let path = root.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = root.join("ablation.jsonl");
    let jsonl: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;
    let path = root.join("ablation.txt");
    fs::write(&path, format_ablation_table(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "# config: {}  train steps: {}  samples: {}", r.config_hash, r.train_steps, r.samples);
    }
    let _ = writeln!(
        s,
        "{:<11} {:<8} {:>5} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8}",
        "arm", "order", "alpha", "psnr", "ssim", "feat", "cd", "f@0.02", "f@0.05"
    );
    for r in rows {
        let feat = r.feature_sim.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        let _ = writeln!(
            s,
            "{:<11} {:<8} {:>5.2} {:>8.3} {:>7.4} {:>8} {:>8.4} {:>8.4} {:>8.4}",
            r.arm.as_str(),
            r.order.as_str(),
            r.alpha,
            r.psnr,
            r.ssim,
            feat,
            r.chamfer,
            r.fscore,
            r.fscore_coarse
        );
    }
    s
}
