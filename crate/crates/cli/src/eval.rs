use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::detector;
use lcdet_core::eval::{self, CurvePoint, SweepRow};
use lcdet_core::train::{self, Annotations, ANNOTATIONS_FILE};

use crate::common::{self, usage, OutArgs};

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Detections as JSON Lines (from `lcdet infer`).
    #[arg(long)]
    pub detections: PathBuf,
    /// Annotation JSON, or a dataset directory holding one.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// IoU needed for a detection to count as a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f32,
    /// Criteria for the sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6")]
    pub iou_sweep: Vec<f32>,
    /// False positives allowed when reading TP rates off the curves
    /// (default: number of images).
    #[arg(long)]
    pub fp_budget: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    images: usize,
    detections: usize,
    total_gt: usize,
    iou_criterion: f32,
    fp_budget: usize,
    tp_rate_at_fp_budget: f64,
    max_tp: usize,
    /// Counts at the lowest score threshold.
    at_lowest_threshold: Option<CurvePoint>,
    sweep: Vec<SweepRow>,
}

pub fn run(a: EvalArgs) -> Result<()> {
    for &c in std::iter::once(&a.iou).chain(&a.iou_sweep) {
        if !(c > 0.0 && c < 1.0) {
            return Err(usage(format!("IoU criterion {c} must lie in (0, 1)")));
        }
    }
    let ann = read_ground_truth(&a.ground_truth)?;
    let file = fs::File::open(&a.detections).with_context(|| format!("opening {}", a.detections.display()))?;
    let records = detector::read_jsonl(BufReader::new(file)).with_context(|| format!("in {}", a.detections.display()))?;
    let (_ids, dets, gts) = eval::group_by_image(&records, &ann)?;
    let budget = a.fp_budget.unwrap_or(dets.len());

    let main = eval::curve(&dets, &gts, a.iou)?;
    let (rows, curves) = eval::iou_sweep(&dets, &gts, &a.iou_sweep, Some(budget))?;

    let dir = a.out.prepare()?;
    common::write_resolved_config(
        dir,
        "eval",
        serde_json::json!({ "args": &a, "fp_budget": budget, "images": dets.len() }),
    )?;
    write_with(&dir.join("curve.csv"), |w| eval::write_curve_csv(w, &main))?;
    for c in &curves {
        write_with(&dir.join(format!("curve_iou{}.csv", c.iou_criterion)), |w| eval::write_curve_csv(w, c))?;
    }
    write_with(&dir.join("sweep.csv"), |w| eval::write_sweep_csv(w, &rows))?;
    let title = format!("IoU {}", a.iou);
    fs::write(
        dir.join("tp_fp.svg"),
        eval::svg_plot(&title, "false positives", "true positives", &[eval::tp_fp_series(&main)]),
    )?;
    fs::write(
        dir.join("pr.svg"),
        eval::svg_plot(&title, "recall", "precision", &[eval::pr_series(&main)]),
    )?;
    let sweep_series: Vec<_> = curves.iter().map(eval::tp_fp_series).collect();
    fs::write(
        dir.join("sweep_tp_fp.svg"),
        eval::svg_plot("IoU sweep", "false positives", "true positives", &sweep_series),
    )?;

    let summary = EvalSummary {
        images: dets.len(),
        detections: records.len(),
        total_gt: main.total_gt,
        iou_criterion: a.iou,
        fp_budget: budget,
        tp_rate_at_fp_budget: main.tp_rate_at_fp(budget),
        max_tp: main.max_tp(),
        at_lowest_threshold: main.points.last().copied(),
        sweep: rows,
    };
    common::write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{} images, {} ground truths, TP rate {:.4} at {} FPs (IoU {})",
        summary.images, summary.total_gt, summary.tp_rate_at_fp_budget, budget, a.iou
    );
    for r in &summary.sweep {
        println!("  IoU {:<5} TP rate {:.4}", r.iou_criterion, r.tp_rate);
    }
    Ok(())
}

fn read_ground_truth(path: &Path) -> Result<Annotations> {
    let file = if path.is_dir() { path.join(ANNOTATIONS_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(usage(format!("no ground truth at {}", file.display())));
    }
    Ok(train::read_annotations(&file)?)
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> lcdet_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
