//! Discrete-score detection evaluation: greedy matching, TP/FP and
//! precision/recall curves, IoU sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, score_order, Detection, DetectionRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::train::{Annotations, GroundTruthBox};

/// Label every detection of one image as true (`true`) or false positive.
/// Detections are visited by descending score (input order on ties); each
/// takes the unmatched same-class ground truth of highest IoU, provided that
/// IoU reaches `iou_criterion`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_criterion: f32) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_criterion && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            labels[i] = true;
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Detections with `score >= threshold` are counted.
    pub threshold: f32,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub iou_criterion: f32,
    pub total_gt: usize,
    pub images: usize,
    /// One point per distinct score, thresholds descending.
    pub points: Vec<CurvePoint>,
    /// Set when there are no ground truths and recall is reported as 0.
    pub no_ground_truth: bool,
}

impl EvalCurve {
    /// Largest TP fraction reachable with at most `fp_budget` false positives.
    pub fn tp_rate_at_fp(&self, fp_budget: usize) -> f64 {
        let tp = self
            .points
            .iter()
            .filter(|p| p.fp <= fp_budget)
            .map(|p| p.tp)
            .max()
            .unwrap_or(0);
        if self.total_gt == 0 {
            0.0
        } else {
            tp as f64 / self.total_gt as f64
        }
    }

    /// Counts at a score threshold.
    pub fn at_threshold(&self, threshold: f32) -> CurvePoint {
        self.points
            .iter()
            .rev()
            .find(|p| p.threshold >= threshold)
            .copied()
            .unwrap_or(CurvePoint {
                threshold,
                tp: 0,
                fp: 0,
                precision: 0.0,
                recall: 0.0,
            })
    }

    /// Max TP over the curve.
    pub fn max_tp(&self) -> usize {
        self.points.last().map_or(0, |p| p.tp)
    }
}

/// Aggregate curve over images; `dets[i]` and `gts[i]` belong to image `i`.
pub fn curve(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], iou_criterion: f32) -> Result<EvalCurve> {
    if dets.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} detection lists for {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    check_criterion(iou_criterion)?;
    let idx: Vec<usize> = (0..dets.len()).collect();
    let labels = par::map(&idx, |&i| match_detections(&dets[i], &gts[i], iou_criterion));
    let mut scored: Vec<(f32, bool)> = dets
        .iter()
        .zip(&labels)
        .flat_map(|(d, l)| d.iter().map(|d| d.score).zip(l.iter().copied()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &(score, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(k + 1).is_some_and(|n| n.0 == score) {
            continue;
        }
        points.push(CurvePoint {
            threshold: score,
            tp,
            fp,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
        });
    }
    if total_gt == 0 {
        log::warn!("no ground-truth boxes: recall reported as 0");
    }
    Ok(EvalCurve {
        iou_criterion,
        total_gt,
        images: dets.len(),
        points,
        no_ground_truth: total_gt == 0,
    })
}

fn check_criterion(c: f32) -> Result<()> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("IoU criterion {c} must lie in (0, 1)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iou_criterion: f32,
    pub fp_budget: usize,
    pub tp: usize,
    pub tp_rate: f64,
}

/// TP rate at a fixed FP budget for each criterion. The budget defaults to
/// the number of images.
pub fn iou_sweep(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    criteria: &[f32],
    fp_budget: Option<usize>,
) -> Result<(Vec<SweepRow>, Vec<EvalCurve>)> {
    let budget = fp_budget.unwrap_or(dets.len());
    let mut rows = Vec::with_capacity(criteria.len());
    let mut curves = Vec::with_capacity(criteria.len());
    for &c in criteria {
        let cv = curve(dets, gts, c)?;
        let rate = cv.tp_rate_at_fp(budget);
        rows.push(SweepRow {
            iou_criterion: c,
            fp_budget: budget,
            tp: (rate * cv.total_gt as f64).round() as usize,
            tp_rate: rate,
        });
        curves.push(cv);
    }
    Ok((rows, curves))
}

/// Pair detection records with annotations by image id. Images follow the
/// annotation order; images without detections get an empty list.
pub fn group_by_image(
    records: &[DetectionRecord],
    annotations: &Annotations,
) -> Result<(Vec<String>, Vec<Vec<Detection>>, Vec<Vec<GroundTruthBox>>)> {
    let mut by_id: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for r in records {
        if !annotations.contains_key(&r.image_id) {
            return Err(Error::Data(format!("detections reference unknown image {:?}", r.image_id)));
        }
        by_id.entry(r.image_id.as_str()).or_default().push(r.detection());
    }
    let ids: Vec<String> = annotations.keys().cloned().collect();
    let dets = ids.iter().map(|k| by_id.remove(k.as_str()).unwrap_or_default()).collect();
    let gts = annotations.values().cloned().collect();
    Ok((ids, dets, gts))
}

pub fn write_curve_csv<W: Write>(w: W, curve: &EvalCurve) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["threshold", "tp", "fp", "precision", "recall"]).map_err(io)?;
    for p in &curve.points {
        out.write_record([
            p.threshold.to_string(),
            p.tp.to_string(),
            p.fp.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["iou_criterion", "fp_budget", "tp", "tp_rate"]).map_err(io)?;
    for r in rows {
        out.write_record([
            r.iou_criterion.to_string(),
            r.fp_budget.to_string(),
            r.tp.to_string(),
            r.tp_rate.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// A named polyline for [`svg_plot`].
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Self-contained SVG line chart with axes from 0 to the data maximum.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let max = |f: fn(&(f64, f64)) -> f64| {
        series
            .iter()
            .flat_map(|s| s.points.iter().map(f))
            .fold(0.0f64, f64::max)
            .max(1e-9)
    };
    let (xmax, ymax) = (max(|p| p.0), max(|p| p.1));
    let sx = |x: f64| m + x / xmax * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / ymax * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        b = h - m,
        r = w - m
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#, sx(f * xmax), h - m + 16.0, tick(f * xmax));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#, m - 6.0, sy(f * ymax) + 4.0, tick(f * ymax));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, pts.join(" "));
        let ly = m + 8.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 150.0, w - m - 126.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, w - m - 120.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v >= 10.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// TP-versus-FP series of a curve, starting at the origin.
pub fn tp_fp_series(c: &EvalCurve) -> Series {
    let mut points = vec![(0.0, 0.0)];
    points.extend(c.points.iter().map(|p| (p.fp as f64, p.tp as f64)));
    Series {
        label: format!("IoU {}", c.iou_criterion),
        points,
    }
}

pub fn pr_series(c: &EvalCurve) -> Series {
    Series {
        label: format!("IoU {}", c.iou_criterion),
        points: c.points.iter().map(|p| (p.recall, p.precision)).collect(),
    }
}
