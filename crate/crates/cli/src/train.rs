use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::model::{self, Model};
use lcdet_core::train::{self, AdamConfig, LossConfig, Sample, SynthConfig, TrainConfig};

use crate::common::{self, usage, NetArgs, OutArgs, DEFAULT_SEED};

pub const MODEL_FILE: &str = "model.lcdt";
pub const INITIAL_MODEL_FILE: &str = "initial.lcdt";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Start from an existing float model instead of a fresh initialization.
    #[arg(long, conflicts_with_all = ["profile", "config"])]
    pub init_model: Option<PathBuf>,
    /// Train on N generated rectangle scenes at the network's nominal size.
    #[arg(long, conflicts_with = "dataset")]
    pub synthetic: Option<usize>,
    /// Dataset directory (or annotations.json path).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Random rescale and crop of generated scenes.
    #[arg(long, requires = "synthetic")]
    pub augment: bool,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_coord: f32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_noobj: f32,
    /// Seeds initialization, data generation and shuffling.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(a: TrainArgs) -> Result<()> {
    if a.synthetic.is_none() && a.dataset.is_none() {
        return Err(usage("train needs --synthetic N or --dataset DIR"));
    }
    let initial = match &a.init_model {
        Some(p) => common::load_model(p)?,
        None => Model::init(a.net.network()?, a.seed)?,
    };
    if initial.is_quantized() {
        return Err(usage("cannot train a quantized model"));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        loss: LossConfig {
            lambda_coord: a.lambda_coord,
            lambda_noobj: a.lambda_noobj,
        },
        seed: a.seed,
    };
    let [w, h] = initial.spec().input_size;
    let synth = a.synthetic.map(|count| SynthConfig {
        count,
        width: w,
        height: h,
        seed: a.seed,
        augment: a.augment,
    });
    let samples: Vec<Sample> = match (&synth, &a.dataset) {
        (Some(s), _) => train::synth_dataset_with(s)?,
        (None, Some(dir)) => train::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        (None, None) => unreachable!(),
    };

    let dir = a.out.prepare()?;
    common::write_resolved_config(
        dir,
        "train",
        serde_json::json!({
            "args": &a,
            "train": cfg,
            "synthetic": synth,
            "samples": samples.len(),
            "network": initial.spec(),
        }),
    )?;
    common::write_atomic(&dir.join(INITIAL_MODEL_FILE), &model::save(&initial))?;
    common::write_atomic(&dir.join(MODEL_FILE), &model::save(&initial))?;

    let model_path = dir.join(MODEL_FILE);
    let loss_path = dir.join(LOSS_FILE);
    let write_loss = |history: &[train::EpochStats]| -> lcdet_core::Result<()> {
        let mut buf = Vec::new();
        train::write_loss_csv(&mut buf, history)?;
        fs::write(&loss_path, buf)?;
        Ok(())
    };
    write_loss(&[])?;
    let mut history = Vec::with_capacity(cfg.epochs);
    train::train_loop(initial, &samples, &cfg, |stats, m| {
        history.push(*stats);
        println!(
            "epoch {:>3}  loss {:.5}  coord {:.5}  obj {:.5}  noobj {:.5}  class {:.5}",
            stats.epoch,
            stats.loss.total(),
            stats.loss.coord,
            stats.loss.obj_conf,
            stats.loss.noobj_conf,
            stats.loss.class
        );
        common::write_atomic(&model_path, &model::save(m)).map_err(|e| lcdet_core::Error::Data(format!("{e:#}")))?;
        write_loss(&history)
    })
    .context("training stopped; model.lcdt holds the last completed epoch")?;
    println!("wrote {}", model_path.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "112x112", value_parser = common::parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub augment: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: a.count,
        width: a.size.0,
        height: a.size.1,
        seed: a.seed,
        augment: a.augment,
    };
    let samples = train::synth_dataset_with(&cfg)?;
    let dir = a.out.prepare()?;
    common::write_resolved_config(dir, "synth", serde_json::json!({ "args": &a, "synth": cfg }))?;
    train::save_dataset(dir, &samples)?;
    let boxes: usize = samples.iter().map(|s| s.boxes.len()).sum();
    println!("wrote {} images with {boxes} boxes to {}", samples.len(), dir.display());
    Ok(())
}
