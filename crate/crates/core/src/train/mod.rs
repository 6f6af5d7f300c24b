//! Grid targets, the detection loss, backprop, Adam and the training loop.

mod backward;
mod data;
mod loss;
mod optim;
mod target;

pub use backward::{backward, head_backward, Gradients, LayerGrad};
pub use data::{
    augment, convert_rect_annotations, load_dataset, read_annotations, read_ppm, save_dataset, synth_dataset,
    synth_dataset_with, write_ppm, Annotations, Sample, SynthConfig, ANNOTATIONS_FILE, MAX_RECTS, RECT_SIDE_RANGE,
};
pub use loss::{detection_loss, detection_loss_grad, LossConfig, LossParts, SIZE_EPS};
pub use optim::{Adam, AdamConfig};
pub use target::{
    assign_cells, build_target, cell_of, select_responsible, CellAssignment, GridTarget, GroundTruthBox,
    ObjectTarget,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

/// Mean per-image loss over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
    /// Ground-truth boxes that lost their cell to a larger box.
    pub discarded: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// One optimizer step on `batch`. Returns the mean per-image loss and the
/// number of discarded boxes.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&Sample], loss: &LossConfig) -> Result<(LossParts, usize)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let per_image = par::map(batch, |s| -> Result<(LossParts, Gradients, usize)> {
        let trace = backward::traced_forward(model, &s.image)?;
        let pred = trace.last().expect("network has layers");
        let (t, discarded) = build_target(pred, &s.boxes, s.dims(), model.spec().head())?;
        let (parts, grad_out) = detection_loss_grad(pred, &t, loss)?;
        let grads = backward::backward_from_output(model, &s.image, &trace, grad_out)?;
        Ok((parts, grads, discarded))
    });
    let mut total = LossParts::default();
    let mut sum = Gradients::zeros_like(model);
    let mut discarded = 0;
    for (i, r) in per_image.into_iter().enumerate() {
        let (parts, grads, d) = r.map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("image {}: {m}", batch[i].id)),
            other => other,
        })?;
        total.add(&parts);
        sum.add_assign(&grads);
        discarded += d;
    }
    let inv = 1.0 / batch.len() as f32;
    let mean = total.scaled(inv);
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("loss diverged to {}", mean.total())));
    }
    sum.scale(inv);
    adam.update(model, &sum)?;
    Ok((mean, discarded))
}

/// Train for `cfg.epochs` passes over `samples`. `on_epoch` sees the stats
/// and the model after every epoch (checkpointing goes there). Divergence
/// stops training with [`Error::Numeric`]; the last completed epoch has
/// already been handed to `on_epoch`.
pub fn train_loop<F>(mut model: Model, samples: &[Sample], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, &Model) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    cfg.loss.validate()?;
    let mut adam = Adam::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut discarded = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (mean, d) = train_step(&mut model, &mut adam, &batch, &cfg.loss).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
            sum.add(&mean.scaled(batch.len() as f32));
            discarded += d;
        }
        let stats = EpochStats {
            epoch,
            loss: sum.scaled(1.0 / samples.len() as f32),
            discarded,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (coord {:.5}, obj {:.5}, noobj {:.5}, class {:.5})",
            stats.loss.total(),
            stats.loss.coord,
            stats.loss.obj_conf,
            stats.loss.noobj_conf,
            stats.loss.class
        );
        on_epoch(&stats, &model)?;
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

/// Loss curve as CSV: `epoch,total,coord,obj_conf,noobj_conf,class`.
pub fn write_loss_csv<W: Write>(w: W, history: &[EpochStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["epoch", "total", "coord", "obj_conf", "noobj_conf", "class"]).map_err(io)?;
    for s in history {
        let l = &s.loss;
        out.write_record([
            s.epoch.to_string(),
            l.total().to_string(),
            l.coord.to_string(),
            l.obj_conf.to_string(),
            l.noobj_conf.to_string(),
            l.class.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_from_config, profile};

    fn toy() -> Model {
        Model::init(build_from_config(&profile("toy").unwrap()).unwrap(), 7).unwrap()
    }

    #[test]
    fn fixed_batch_loss_decreases_for_ten_steps() {
        let mut model = toy();
        let data = synth_dataset(8, (112, 112), 7).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut last = f32::INFINITY;
        for step in 0..10 {
            let (l, _) = train_step(&mut model, &mut adam, &batch, &LossConfig::default()).unwrap();
            assert!(l.total() < last, "step {step}: {} !< {last}", l.total());
            last = l.total();
        }
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let model = toy();
        let data = synth_dataset(4, (112, 112), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            optimizer: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let out = train_loop(model.clone(), &data, &cfg, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.model, model);
        assert_eq!(seen, 2);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_dataset(4, (112, 112), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train_loop(toy(), &data, &cfg, |_, _| Ok(())).unwrap();
        let b = train_loop(toy(), &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_is_a_numeric_error() {
        let data = synth_dataset(2, (112, 112), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 1,
            optimizer: AdamConfig {
                lr: 1e30,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut saved = 0;
        let r = train_loop(toy(), &data, &cfg, |_, _| {
            saved += 1;
            Ok(())
        });
        assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        assert!(matches!(
            train_loop(toy(), &[], &TrainConfig::default(), |_, _| Ok(())),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn loss_csv_layout() {
        let h = [EpochStats {
            epoch: 1,
            loss: LossParts {
                coord: 1.0,
                obj_conf: 0.5,
                noobj_conf: 0.25,
                class: 0.25,
            },
            discarded: 0,
        }];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &h).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,total,coord,obj_conf,noobj_conf,class\n1,2,1,0.5,0.25,0.25\n"
        );
    }
}
