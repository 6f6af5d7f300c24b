//! Grid decoding and non-maximum suppression.
//!
//! Coordinates per box are `(x, y, w, h)` raw outputs: `x, y` are the box
//! centre offset inside its cell and `w, h` the square roots of the box size
//! relative to the image. Decoding clamps all four to `[0, 1]`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadLayout;
use crate::tensor::Tensor;

/// Score threshold used when producing detections for evaluation.
pub const EVAL_SCORE_THRESHOLD: f32 = 0.005;
/// Score threshold for human-facing output.
pub const DEMO_SCORE_THRESHOLD: f32 = 0.25;
pub const DEFAULT_NMS_IOU: f32 = 0.5;

/// Axis-aligned box in image pixels, centre form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(left, top, right, bottom)`
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let corners = |r: &BBox| {
        let (cx, cy, hw, hh) = (r.cx as f64, r.cy as f64, r.w.max(0.0) as f64 / 2.0, r.h.max(0.0) as f64 / 2.0);
        (cx - hw, cy - hh, cx + hw, cy + hh)
    };
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub class_prob: f32,
    pub confidence: f32,
    /// `confidence * class_prob`
    pub score: f32,
}

/// Decode the raw `(x, y, w, h)` outputs of one box predicted at cell
/// `(row, col)`.
pub fn decode_box(coords: &[f32], (row, col): (usize, usize), (rows, cols): (usize, usize), image_dims: (usize, usize)) -> BBox {
    let (img_w, img_h) = (image_dims.0 as f32, image_dims.1 as f32);
    let (sx, sy) = (img_w / cols as f32, img_h / rows as f32);
    let (x, y) = (coords[0].clamp(0.0, 1.0), coords[1].clamp(0.0, 1.0));
    let (w, h) = (coords[2].clamp(0.0, 1.0), coords[3].clamp(0.0, 1.0));
    BBox::new((col as f32 + x) * sx, (row as f32 + y) * sy, w * w * img_w, h * h * img_h)
}

/// Turn an output grid into image-space detections with `score >= threshold`.
/// `image_dims` is `(width, height)`.
pub fn decode(grid: &Tensor, image_dims: (usize, usize), layout: HeadLayout, score_threshold: f32) -> Result<Vec<Detection>> {
    if grid.dims().len() != 3 || grid.channels() != layout.channels() {
        return Err(Error::config(format!(
            "grid {:?} does not carry C + 5K = {} channels",
            grid.dims(),
            layout.channels()
        )));
    }
    let (rows, cols) = (grid.height(), grid.width());
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let cell = grid.pixel(i, j);
            let (class_id, class_prob) = cell[..layout.num_classes]
                .iter()
                .copied()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (k, p)| if p > best.1 { (k, p) } else { best });
            for b in 0..layout.boxes {
                let confidence = cell[layout.conf(b)];
                let score = confidence * class_prob;
                if !(score >= score_threshold) {
                    continue;
                }
                let c = &cell[layout.coords(b)..layout.coords(b) + 4];
                out.push(Detection {
                    bbox: decode_box(c, (i, j), (rows, cols), image_dims),
                    class_id,
                    class_prob,
                    confidence,
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// Indices of `dets` ordered by descending score, ties by original index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy per-class NMS. Output is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let clear = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) < iou_threshold);
        if clear {
            kept.push(*d);
        }
    }
    kept
}

/// One line of the detections JSON Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f32,
    pub confidence: f32,
    pub class_prob: f32,
    /// `[cx, cy, w, h]` in pixels
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            confidence: d.confidence,
            class_prob: d.class_prob,
            bbox: [d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h],
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]),
            class_id: self.class_id,
            class_prob: self.class_prob,
            confidence: self.confidence,
            score: self.score,
        }
    }
}

pub fn write_jsonl<W: Write>(w: &mut W, image_id: &str, dets: &[Detection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut *w, &DetectionRecord::new(image_id, d)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(format!("detections line {}", n + 1), e))?);
    }
    Ok(out)
}

/// FDDB submission block: path, count, then `left top width height score`.
pub fn write_fddb<W: Write>(w: &mut W, image_path: &str, dets: &[Detection]) -> Result<()> {
    writeln!(w, "{image_path}")?;
    writeln!(w, "{}", dets.len())?;
    for d in dets {
        let (l, t, _, _) = d.bbox.corners();
        writeln!(w, "{} {} {} {} {}", l, t, d.bbox.w, d.bbox.h, d.score)?;
    }
    Ok(())
}
