//! Multi-part detection loss on activated grid outputs.

use serde::{Deserialize, Serialize};

use super::target::GridTarget;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to predicted square-root sizes inside the loss.
pub const SIZE_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_coord: f32,
    pub lambda_noobj: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite() && v >= 0.0;
        if ok(self.lambda_coord) && ok(self.lambda_noobj) {
            Ok(())
        } else {
            Err(Error::config("loss weights must be finite and >= 0"))
        }
    }
}

/// Loss broken down by term. Weighted terms already include their lambda.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub coord: f32,
    pub obj_conf: f32,
    pub noobj_conf: f32,
    pub class: f32,
}

impl LossParts {
    pub fn total(&self) -> f32 {
        self.coord + self.obj_conf + self.noobj_conf + self.class
    }

    pub fn add(&mut self, o: &LossParts) {
        self.coord += o.coord;
        self.obj_conf += o.obj_conf;
        self.noobj_conf += o.noobj_conf;
        self.class += o.class;
    }

    pub fn scaled(&self, s: f32) -> LossParts {
        LossParts {
            coord: self.coord * s,
            obj_conf: self.obj_conf * s,
            noobj_conf: self.noobj_conf * s,
            class: self.class * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Loss of one image.
pub fn detection_loss(pred: &Tensor, target: &GridTarget, cfg: &LossConfig) -> Result<LossParts> {
    evaluate(pred, target, cfg, None)
}

/// Loss of one image and its gradient with respect to the activated outputs.
pub fn detection_loss_grad(pred: &Tensor, target: &GridTarget, cfg: &LossConfig) -> Result<(LossParts, Tensor)> {
    let mut grad = vec![0.0f32; pred.len()];
    let parts = evaluate(pred, target, cfg, Some(&mut grad))?;
    Ok((parts, Tensor::new(pred.dims().to_vec(), grad)?))
}

fn evaluate(pred: &Tensor, t: &GridTarget, cfg: &LossConfig, mut grad: Option<&mut [f32]>) -> Result<LossParts> {
    let l = t.layout;
    if pred.dims() != [t.rows, t.cols, l.channels()] {
        return Err(Error::config(format!(
            "prediction grid {:?} does not match target {}x{}x{}",
            pred.dims(),
            t.rows,
            t.cols,
            l.channels()
        )));
    }
    if let Some(bad) = pred.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite prediction at grid element {bad}")));
    }
    let (lc, ln) = (cfg.lambda_coord as f64, cfg.lambda_noobj as f64);
    let ch = l.channels();
    let (mut coord, mut obj, mut noobj, mut class) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for cell in 0..t.rows * t.cols {
        let p = &pred.data()[cell * ch..(cell + 1) * ch];
        let mut g = grad.as_deref_mut().map(|g| &mut g[cell * ch..(cell + 1) * ch]);
        let resp = t.responsible[cell];
        for b in 0..l.boxes {
            let ci = l.conf(b);
            let conf = p[ci] as f64;
            if resp == Some(b) {
                let o = t.objects[cell].expect("responsible box implies an object");
                let xi = l.coords(b);
                let targets = [o.x as f64, o.y as f64, (o.w as f64).sqrt(), (o.h as f64).sqrt()];
                for (k, &tv) in targets.iter().enumerate() {
                    let raw = p[xi + k] as f64;
                    let (v, live) = if k < 2 { (raw, true) } else { (raw.max(SIZE_EPS as f64), raw > SIZE_EPS as f64) };
                    let d = tv - v;
                    coord += lc * d * d;
                    if let (Some(g), true) = (g.as_deref_mut(), live) {
                        g[xi + k] = (-2.0 * lc * d) as f32;
                    }
                }
                let d = t.confidence[cell * l.boxes + b] as f64 - conf;
                obj += d * d;
                if let Some(g) = g.as_deref_mut() {
                    g[ci] = (-2.0 * d) as f32;
                }
            } else {
                noobj += ln * conf * conf;
                if let Some(g) = g.as_deref_mut() {
                    g[ci] = (2.0 * ln * conf) as f32;
                }
            }
        }
        if let Some(o) = t.objects[cell] {
            for c in 0..l.num_classes {
                let d = if c == o.class_id { 1.0 } else { 0.0 } - p[c] as f64;
                class += d * d;
                if let Some(g) = g.as_deref_mut() {
                    g[c] = (-2.0 * d) as f32;
                }
            }
        }
    }
    Ok(LossParts {
        coord: coord as f32,
        obj_conf: obj as f32,
        noobj_conf: noobj as f32,
        class: class as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadLayout;
    use crate::train::target::ObjectTarget;

    const FACE: HeadLayout = HeadLayout {
        num_classes: 1,
        boxes: 3,
    };

    fn one_object(x: f32, y: f32, w: f32, h: f32) -> GridTarget {
        let mut t = GridTarget::empty(7, 7, FACE);
        t.objects[24] = Some(ObjectTarget {
            x,
            y,
            w,
            h,
            class_id: 0,
        });
        t.responsible[24] = Some(1);
        t.confidence[24 * 3 + 1] = 1.0;
        t
    }

    fn perfect(t: &GridTarget) -> Tensor {
        let mut p = Tensor::zeros(vec![7, 7, FACE.channels()]);
        let base = 24 * FACE.channels();
        let d = p.data_mut();
        d[base] = 1.0;
        d[base + FACE.conf(1)] = 1.0;
        let o = t.objects[24].unwrap();
        d[base + FACE.coords(1)..base + FACE.coords(1) + 4].copy_from_slice(&[o.x, o.y, o.w.sqrt(), o.h.sqrt()]);
        p
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = one_object(0.5, 0.25, 0.25, 0.5625);
        let (parts, g) = detection_loss_grad(&perfect(&t), &t, &LossConfig::default()).unwrap();
        assert_eq!(parts.total(), 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_grid_noobj() {
        let t = GridTarget::empty(7, 7, FACE);
        let mut p = Tensor::zeros(vec![7, 7, FACE.channels()]);
        p.data_mut()[FACE.conf(0)] = 0.5;
        let parts = detection_loss(&p, &t, &LossConfig::default()).unwrap();
        assert_eq!(parts.noobj_conf, 0.25);
        assert_eq!(parts.total(), 0.25);
        for cell in 0..49 {
            for b in 0..3 {
                p.data_mut()[cell * FACE.channels() + FACE.conf(b)] = 0.5;
            }
        }
        let parts = detection_loss(&p, &t, &LossConfig::default()).unwrap();
        assert!((parts.noobj_conf - 0.25 * 147.0).abs() < 1e-4);
    }

    #[test]
    fn coord_offset() {
        let t = one_object(0.5, 0.5, 0.25, 0.25);
        let mut p = perfect(&t);
        let base = 24 * FACE.channels() + FACE.coords(1);
        p.data_mut()[base] += 0.1;
        p.data_mut()[base + 1] -= 0.1;
        let parts = detection_loss(&p, &t, &LossConfig::default()).unwrap();
        assert!((parts.coord - 0.1).abs() < 1e-6, "{}", parts.coord);
        assert_eq!(parts.obj_conf + parts.noobj_conf + parts.class, 0.0);
    }

    #[test]
    fn lambda_coord_is_linear() {
        let t = one_object(0.3, 0.6, 0.1, 0.2);
        let mut p = perfect(&t);
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v += (i % 7) as f32 * 0.01;
        }
        let a = detection_loss(&p, &t, &LossConfig::default()).unwrap();
        let b = detection_loss(
            &p,
            &t,
            &LossConfig {
                lambda_coord: 10.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert!((b.coord - 2.0 * a.coord).abs() <= 1e-6 * a.coord.abs());
        assert_eq!((a.obj_conf, a.noobj_conf, a.class), (b.obj_conf, b.noobj_conf, b.class));
    }

    #[test]
    fn noobj_gradient_pushes_confidence_down() {
        let t = GridTarget::empty(7, 7, FACE);
        let mut p = Tensor::filled(vec![7, 7, FACE.channels()], 0.2);
        let (_, g) = detection_loss_grad(&p, &t, &LossConfig::default()).unwrap();
        assert!(g.data()[FACE.conf(0)] > 0.0);
        p.data_mut()[FACE.conf(0)] = 0.0;
        let (_, g) = detection_loss_grad(&p, &t, &LossConfig::default()).unwrap();
        assert_eq!(g.data()[FACE.conf(0)], 0.0);
    }

    #[test]
    fn errors() {
        let t = GridTarget::empty(7, 7, FACE);
        assert!(detection_loss(&Tensor::zeros(vec![7, 6, 16]), &t, &LossConfig::default()).is_err());
        let mut p = Tensor::zeros(vec![7, 7, 16]);
        p.data_mut()[5] = f32::NAN;
        assert!(matches!(
            detection_loss(&p, &t, &LossConfig::default()),
            Err(Error::Numeric(_))
        ));
        assert!(LossConfig {
            lambda_coord: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
