//! Ground-truth to grid assignment and per-step regression targets.

use serde::{Deserialize, Serialize};

use crate::detector::{decode_box, iou, BBox};
use crate::error::{Error, Result};
use crate::model::HeadLayout;
use crate::tensor::Tensor;

/// Annotated object, image pixels, centre form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    #[serde(default)]
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }

    /// Positive size and centre inside a `width x height` image.
    pub fn validate(&self, (width, height): (usize, usize)) -> Result<()> {
        let b = &self.bbox;
        let finite = [b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite || b.w <= 0.0 || b.h <= 0.0 {
            return Err(Error::Data(format!("box {b:?} must have positive finite size")));
        }
        if b.cx < 0.0 || b.cy < 0.0 || b.cx > width as f32 || b.cy > height as f32 {
            return Err(Error::Data(format!("box centre of {b:?} lies outside the {width}x{height} image")));
        }
        Ok(())
    }
}

/// `[cx, cy, w, h]` on the wire.
mod box_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        [b.cx, b.cy, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [cx, cy, w, h] = <[f32; 4]>::deserialize(d)?;
        Ok(BBox::new(cx, cy, w, h))
    }
}

/// Result of mapping boxes onto the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellAssignment {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; index into the input box list.
    pub cells: Vec<Option<usize>>,
    /// Boxes that lost their cell to a larger one.
    pub discarded: usize,
}

/// Cell `(row, col)` containing the box centre. Centres on the far edge map
/// to the last cell.
pub fn cell_of(b: &BBox, (rows, cols): (usize, usize), (width, height): (usize, usize)) -> (usize, usize) {
    let col = ((b.cx / width as f32 * cols as f32).floor().max(0.0) as usize).min(cols - 1);
    let row = ((b.cy / height as f32 * rows as f32).floor().max(0.0) as usize).min(rows - 1);
    (row, col)
}

/// Map every box to the cell holding its centre. One object per cell: the
/// largest area wins, equal areas go to the earlier box.
pub fn assign_cells(gts: &[GroundTruthBox], grid_dims: (usize, usize), image_dims: (usize, usize)) -> CellAssignment {
    let (rows, cols) = grid_dims;
    let mut cells: Vec<Option<usize>> = vec![None; rows * cols];
    let mut discarded = 0;
    for (k, gt) in gts.iter().enumerate() {
        let (r, c) = cell_of(&gt.bbox, grid_dims, image_dims);
        let slot = &mut cells[r * cols + c];
        match *slot {
            None => *slot = Some(k),
            Some(prev) => {
                discarded += 1;
                if gt.bbox.area() > gts[prev].bbox.area() {
                    *slot = Some(k);
                }
            }
        }
    }
    CellAssignment {
        rows,
        cols,
        cells,
        discarded,
    }
}

/// Pick the box responsible for `gt`: highest IoU, or when nothing overlaps
/// the closest in normalized `(x, y, sqrt w, sqrt h)`. Ties go to the lower index.
pub fn select_responsible(preds: &[BBox], gt: &BBox, (width, height): (usize, usize)) -> usize {
    let ious: Vec<f32> = preds.iter().map(|p| iou(p, gt)).collect();
    let mut best = 0;
    for (k, &v) in ious.iter().enumerate() {
        if v > ious[best] {
            best = k;
        }
    }
    if ious[best] > 0.0 {
        return best;
    }
    let (w, h) = (width as f32, height as f32);
    let key = |b: &BBox| [b.cx / w, b.cy / h, (b.w.max(0.0) / w).sqrt(), (b.h.max(0.0) / h).sqrt()];
    let g = key(gt);
    let dist = |b: &BBox| key(b).iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
    let mut best = 0;
    for (k, p) in preds.iter().enumerate() {
        if dist(p) < dist(&preds[best]) {
            best = k;
        }
    }
    best
}

/// Regression target of an object cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectTarget {
    /// Centre offset inside the cell, `[0, 1]`.
    pub x: f32,
    pub y: f32,
    /// Size as a fraction of the image.
    pub w: f32,
    pub h: f32,
    pub class_id: usize,
}

/// Per-cell training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTarget {
    pub rows: usize,
    pub cols: usize,
    pub layout: HeadLayout,
    pub objects: Vec<Option<ObjectTarget>>,
    /// Responsible box of each object cell.
    pub responsible: Vec<Option<usize>>,
    /// Confidence target per cell per box; IoU for the responsible box, else 0.
    pub confidence: Vec<f32>,
}

impl GridTarget {
    pub fn empty(rows: usize, cols: usize, layout: HeadLayout) -> Self {
        Self {
            rows,
            cols,
            layout,
            objects: vec![None; rows * cols],
            responsible: vec![None; rows * cols],
            confidence: vec![0.0; rows * cols * layout.boxes],
        }
    }

    pub fn object_cells(&self) -> usize {
        self.objects.iter().flatten().count()
    }
}

/// Build the target for one image from the current activated predictions.
/// Returns the target and the number of discarded boxes.
pub fn build_target(
    pred: &Tensor,
    gts: &[GroundTruthBox],
    image_dims: (usize, usize),
    layout: HeadLayout,
) -> Result<(GridTarget, usize)> {
    if pred.dims().len() != 3 || pred.channels() != layout.channels() {
        return Err(Error::config(format!(
            "prediction grid {:?} does not match head with {} channels",
            pred.dims(),
            layout.channels()
        )));
    }
    for gt in gts {
        gt.validate(image_dims)?;
        if gt.class_id >= layout.num_classes {
            return Err(Error::Data(format!(
                "class id {} out of range for {} classes",
                gt.class_id, layout.num_classes
            )));
        }
    }
    let grid = (pred.height(), pred.width());
    let (rows, cols) = grid;
    let assignment = assign_cells(gts, grid, image_dims);
    let mut t = GridTarget::empty(rows, cols, layout);
    let (cw, ch) = (image_dims.0 as f32 / cols as f32, image_dims.1 as f32 / rows as f32);
    for (cell, slot) in assignment.cells.iter().enumerate() {
        let Some(k) = *slot else { continue };
        let gt = &gts[k];
        let (r, c) = (cell / cols, cell % cols);
        t.objects[cell] = Some(ObjectTarget {
            x: (gt.bbox.cx / cw - c as f32).clamp(0.0, 1.0),
            y: (gt.bbox.cy / ch - r as f32).clamp(0.0, 1.0),
            w: (gt.bbox.w / image_dims.0 as f32).min(1.0),
            h: (gt.bbox.h / image_dims.1 as f32).min(1.0),
            class_id: gt.class_id,
        });
        let values = pred.pixel(r, c);
        let boxes: Vec<BBox> = (0..layout.boxes)
            .map(|b| decode_box(&values[layout.coords(b)..layout.coords(b) + 4], (r, c), grid, image_dims))
            .collect();
        let resp = select_responsible(&boxes, &gt.bbox, image_dims);
        t.responsible[cell] = Some(resp);
        t.confidence[cell * layout.boxes + resp] = iou(&boxes[resp], &gt.bbox);
    }
    Ok((t, assignment.discarded))
}
