use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::model::{self, Model};
use lcdet_core::tensor::Tensor;
use lcdet_core::train::{self, ANNOTATIONS_FILE};

use crate::common::{self, usage, NetArgs, OutArgs, DEFAULT_SEED};
use crate::train::MODEL_FILE;

#[derive(Args, Debug, Serialize)]
pub struct QuantizeArgs {
    /// Float model to convert.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration images: a dataset directory or a directory of .ppm files.
    #[arg(long, conflicts_with = "synthetic")]
    pub calibration: Option<PathBuf>,
    /// Calibrate on N generated scenes instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Serialize)]
struct QuantizeReport {
    input_bytes: u64,
    output_bytes: u64,
    ratio: f64,
    calibration_images: usize,
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let float = common::load_model(&a.model)?;
    if float.is_quantized() {
        return Err(usage(format!("{} is already quantized", a.model.display())));
    }
    let images = match (&a.calibration, a.synthetic) {
        (Some(dir), _) => calibration_images(dir)?,
        (None, Some(n)) => {
            let [w, h] = float.spec().input_size;
            train::synth_dataset(n, (w, h), a.seed)?.into_iter().map(|s| s.image).collect()
        }
        (None, None) => return Err(usage("quantize needs --calibration DIR or --synthetic N")),
    };
    let quantized = float.quantize_calibrated(&images)?;

    let dir = a.out.prepare()?;
    let bytes = model::save(&quantized);
    let input_bytes = model::encoded_len(&float);
    let report = QuantizeReport {
        input_bytes,
        output_bytes: bytes.len() as u64,
        ratio: bytes.len() as f64 / input_bytes as f64,
        calibration_images: images.len(),
    };
    common::write_resolved_config(
        dir,
        "quantize",
        serde_json::json!({ "args": &a, "calibration_images": images.len() }),
    )?;
    common::write_atomic(&dir.join(MODEL_FILE), &bytes)?;
    common::write_json(&dir.join("quantize_report.json"), &report)?;
    println!(
        "{} -> {} bytes ({:.1}% of float, {:.2}x smaller)",
        report.input_bytes,
        report.output_bytes,
        100.0 * report.ratio,
        1.0 / report.ratio
    );
    Ok(())
}

/// Images listed by `annotations.json` when present, else every `.ppm` in
/// the directory in name order.
fn calibration_images(dir: &Path) -> Result<Vec<Tensor>> {
    if !dir.is_dir() {
        return Err(usage(format!("calibration path {} is not a directory", dir.display())));
    }
    if dir.join(ANNOTATIONS_FILE).exists() {
        return Ok(train::load_dataset(dir)?.into_iter().map(|s| s.image).collect());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    if paths.is_empty() {
        return Err(usage(format!("no calibration images in {}", dir.display())));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| train::read_ppm(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

#[derive(Args, Debug, Serialize)]
pub struct InitArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn init(a: InitArgs) -> Result<()> {
    let m = Model::init(a.net.network()?, a.seed)?;
    let dir = a.out.prepare()?;
    common::write_resolved_config(dir, "init", serde_json::json!({ "args": &a, "network": m.spec() }))?;
    common::write_atomic(&dir.join(MODEL_FILE), &model::save(&m))?;
    println!("{} parameters, {} bytes", m.param_count(), model::encoded_len(&m));
    Ok(())
}
