use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::detector::{self, Detection, DEFAULT_NMS_IOU, DEMO_SCORE_THRESHOLD};
use lcdet_core::model::{Mode, Model};
use lcdet_core::par;
use lcdet_core::train::{self, ANNOTATIONS_FILE};

use crate::common::{self, usage, OutArgs};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const FDDB_FILE: &str = "detections.fddb.txt";

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PPM images, directories of them, or dataset directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Arithmetic to run in; defaults to the model's own representation.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, default_value_t = DEMO_SCORE_THRESHOLD)]
    pub score_threshold: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f32,
    /// Also write detections in the FDDB rectangle listing.
    #[arg(long)]
    pub fddb: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// One image to run: the id recorded in the output and where to read it.
struct Job {
    id: String,
    path: PathBuf,
}

pub fn run(a: InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.score_threshold) {
        return Err(usage("--score-threshold must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&a.nms_iou) {
        return Err(usage("--nms-iou must lie in [0, 1]"));
    }
    let model = common::load_model(&a.model)?;
    let mode = a.mode.unwrap_or(if model.is_quantized() { Mode::Quantized } else { Mode::Float });
    if mode == Mode::Quantized && !model.is_quantized() {
        return Err(usage("--mode quantized needs a quantized model; run `lcdet quantize` first"));
    }
    let mut jobs = Vec::new();
    for input in &a.inputs {
        collect_jobs(input, &mut jobs)?;
    }
    if jobs.is_empty() {
        return Err(usage("no input images found"));
    }

    let dir = a.out.prepare()?;
    common::write_resolved_config(
        dir,
        "infer",
        serde_json::json!({ "args": &a, "mode": mode, "images": jobs.len(), "network": model.spec() }),
    )?;

    let results: Vec<Result<Vec<Detection>>> = par::map(&jobs, |j| detect(&model, j, mode, &a));
    let mut jsonl = BufWriter::new(fs::File::create(dir.join(DETECTIONS_FILE))?);
    let mut fddb = if a.fddb {
        Some(BufWriter::new(fs::File::create(dir.join(FDDB_FILE))?))
    } else {
        None
    };
    let mut total = 0;
    for (job, r) in jobs.iter().zip(results) {
        let dets = r?;
        total += dets.len();
        detector::write_jsonl(&mut jsonl, &job.id, &dets)?;
        if let Some(f) = fddb.as_mut() {
            detector::write_fddb(f, &job.id, &dets)?;
        }
    }
    jsonl.flush()?;
    if let Some(mut f) = fddb {
        f.flush()?;
    }
    println!("{total} detections in {} images", jobs.len());
    Ok(())
}

fn detect(model: &Model, job: &Job, mode: Mode, a: &InferArgs) -> Result<Vec<Detection>> {
    let image = train::read_ppm(&job.path).with_context(|| format!("reading {}", job.path.display()))?;
    let grid = model
        .forward(&image, mode)
        .with_context(|| format!("running {}", job.path.display()))?;
    let dets = detector::decode(&grid, (image.width(), image.height()), model.spec().head(), a.score_threshold)?;
    Ok(detector::nms(&dets, a.nms_iou))
}

/// Files keep the path as given. Dataset directories use their annotation
/// keys, plain directories the file name, so ids line up with ground truth.
fn collect_jobs(input: &Path, jobs: &mut Vec<Job>) -> Result<()> {
    if input.is_file() {
        jobs.push(Job {
            id: input.display().to_string(),
            path: input.to_path_buf(),
        });
        return Ok(());
    }
    if !input.is_dir() {
        return Err(usage(format!("input {} does not exist", input.display())));
    }
    if input.join(ANNOTATIONS_FILE).exists() {
        let ann = train::read_annotations(&input.join(ANNOTATIONS_FILE))?;
        jobs.extend(ann.keys().map(|k| Job {
            id: k.clone(),
            path: input.join(k),
        }));
        return Ok(());
    }
    let mut names: Vec<String> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".ppm"))
        .collect();
    names.sort();
    jobs.extend(names.into_iter().map(|n| Job {
        path: input.join(&n),
        id: n,
    }));
    Ok(())
}
