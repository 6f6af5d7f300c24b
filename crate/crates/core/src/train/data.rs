//! Synthetic rectangle scenes and the on-disk dataset layout.
//!
//! A dataset directory holds binary PPM images and `annotations.json`, a map
//! from image path (relative to the annotation file) to its boxes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::target::GroundTruthBox;
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Smallest and largest rectangle side as a fraction of the image side.
pub const RECT_SIDE_RANGE: (f32, f32) = (0.08, 0.6);
pub const MAX_RECTS: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `height x width x 3`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    /// `(width, height)`
    pub fn dims(&self) -> (usize, usize) {
        (self.image.width(), self.image.height())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Random rescale (plus or minus 20%) and object-centred crop.
    #[serde(default)]
    pub augment: bool,
}

/// `n` images of uniform noise with 1 to 4 non-overlapping solid rectangles,
/// all class 0.
pub fn synth_dataset(n: usize, (width, height): (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    synth_dataset_with(&SynthConfig {
        count: n,
        width,
        height,
        seed,
        augment: false,
    })
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.count == 0 {
        return Err(Error::Usage("synthetic dataset needs at least one image".into()));
    }
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::config("synthetic images must be at least 16x16"));
    }
    Ok(par::map_range(cfg.count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let s = synth_sample(&mut rng, format!("synth_{i:05}"), cfg.width, cfg.height);
        if cfg.augment {
            augment(&s, &mut rng)
        } else {
            s
        }
    }))
}

fn noise_canvas(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f32> {
    (0..width * height * 3).map(|_| rng.random::<f32>()).collect()
}

fn synth_sample(rng: &mut ChaCha8Rng, id: String, width: usize, height: usize) -> Sample {
    let mut data = noise_canvas(rng, width, height);
    let wanted = rng.random_range(1..=MAX_RECTS);
    let side = |rng: &mut ChaCha8Rng, n: usize| {
        let f = rng.random_range(RECT_SIDE_RANGE.0..=RECT_SIDE_RANGE.1);
        ((f * n as f32).round() as usize).clamp(1, n)
    };
    let mut rects: Vec<[usize; 4]> = Vec::new();
    'outer: for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (w, h) = (side(rng, width), side(rng, height));
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            let clear = rects
                .iter()
                .all(|r| x0 >= r[0] + r[2] || r[0] >= x0 + w || y0 >= r[1] + r[3] || r[1] >= y0 + h);
            if clear {
                rects.push([x0, y0, w, h]);
                continue 'outer;
            }
        }
    }
    let mut boxes = Vec::with_capacity(rects.len());
    for &[x0, y0, w, h] in &rects {
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let p = (y * width + x) * 3;
                data[p..p + 3].copy_from_slice(&color);
            }
        }
        boxes.push(GroundTruthBox::new(
            BBox::new(x0 as f32 + w as f32 / 2.0, y0 as f32 + h as f32 / 2.0, w as f32, h as f32),
            0,
        ));
    }
    Sample {
        id,
        image: Tensor::from_hwc(height, width, 3, data).expect("canvas dims"),
        boxes,
    }
}

/// Rescale by a random factor in `[0.8, 1.2]` (nearest neighbour), then crop
/// back to the original size around a random object, or pad with fresh noise
/// when the image shrank. Boxes whose centre leaves the frame are dropped,
/// the rest are clipped.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let (w, h) = sample.dims();
    let s: f32 = rng.random_range(0.8..=1.2);
    let (sw, sh) = (((w as f32 * s).round() as usize).max(1), ((h as f32 * s).round() as usize).max(1));
    let (fx, fy) = (sw as f32 / w as f32, sh as f32 / h as f32);
    let src = sample.image.data();
    let scaled: Vec<f32> = (0..sh)
        .flat_map(|y| {
            let sy = ((y as f32 / fy) as usize).min(h - 1);
            (0..sw).flat_map(move |x| {
                let sx = ((x as f32 / fx) as usize).min(w - 1);
                let p = (sy * w + sx) * 3;
                src[p..p + 3].iter().copied()
            })
        })
        .collect();
    let boxes: Vec<BBox> = sample
        .boxes
        .iter()
        .map(|b| BBox::new(b.bbox.cx * fx, b.bbox.cy * fy, b.bbox.w * fx, b.bbox.h * fy))
        .collect();

    // offset of the output frame inside the scaled image (negative: padding)
    let pick = |rng: &mut ChaCha8Rng, scaled: usize, out: usize, centre: Option<f32>| -> isize {
        if scaled >= out {
            let (mut lo, mut hi) = (0isize, (scaled - out) as isize);
            if let Some(c) = centre {
                lo = lo.max(c.ceil() as isize - out as isize + 1);
                hi = hi.min(c.floor() as isize);
            }
            if lo > hi {
                lo = hi.max(0);
            }
            rng.random_range(lo as i64..=hi as i64) as isize
        } else {
            -(rng.random_range(0..=(out - scaled) as i64) as isize)
        }
    };
    let anchor = (!boxes.is_empty()).then(|| boxes[rng.random_range(0..boxes.len())]);
    let ox = pick(rng, sw, w, anchor.map(|b| b.cx));
    let oy = pick(rng, sh, h, anchor.map(|b| b.cy));

    let mut data = noise_canvas(rng, w, h);
    for y in 0..h {
        let syy = y as isize + oy;
        if syy < 0 || syy >= sh as isize {
            continue;
        }
        for x in 0..w {
            let sxx = x as isize + ox;
            if sxx < 0 || sxx >= sw as isize {
                continue;
            }
            let sp = (syy as usize * sw + sxx as usize) * 3;
            let dp = (y * w + x) * 3;
            data[dp..dp + 3].copy_from_slice(&scaled[sp..sp + 3]);
        }
    }
    let (wf, hf) = (w as f32, h as f32);
    let out_boxes = boxes
        .iter()
        .zip(&sample.boxes)
        .filter_map(|(b, orig)| {
            let (x1, y1, x2, y2) = b.corners();
            let (x1, x2) = (x1 - ox as f32, x2 - ox as f32);
            let (y1, y2) = (y1 - oy as f32, y2 - oy as f32);
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            if cx < 0.0 || cy < 0.0 || cx >= wf || cy >= hf {
                return None;
            }
            let clipped = BBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(wf), y2.min(hf));
            (clipped.w > 0.0 && clipped.h > 0.0).then(|| GroundTruthBox::new(clipped, orig.class_id))
        })
        .collect();
    Sample {
        id: sample.id.clone(),
        image: Tensor::from_hwc(h, w, 3, data).expect("canvas dims"),
        boxes: out_boxes,
    }
}

/// Image path to boxes.
pub type Annotations = BTreeMap<String, Vec<GroundTruthBox>>;

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::from_hwc(h as usize, w as usize, 3, data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.dims().len() != 3 || image.channels() != 3 {
        return Err(Error::config(format!("PPM output needs an h x w x 3 image, got {:?}", image.dims())));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes).expect("buffer size");
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Write images and `annotations.json` under `dir`. Sample ids become file
/// stems.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut ann = Annotations::new();
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        write_ppm(&dir.join(&rel), &s.image)?;
        ann.insert(rel, s.boxes.clone());
    }
    let text = serde_json::to_string_pretty(&ann).map_err(std::io::Error::from)?;
    fs::write(dir.join(ANNOTATIONS_FILE), text)?;
    Ok(())
}

/// Load a dataset from a directory holding `annotations.json` or from the
/// annotation file itself. Samples come back in path order.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let ann_path: PathBuf = if path.is_dir() { path.join(ANNOTATIONS_FILE) } else { path.to_path_buf() };
    if !ann_path.exists() {
        return Err(Error::Usage(format!("no annotation file at {}", ann_path.display())));
    }
    let root = ann_path.parent().unwrap_or(Path::new("."));
    let ann = read_annotations(&ann_path)?;
    if ann.is_empty() {
        return Err(Error::Usage(format!("{} lists no images", ann_path.display())));
    }
    let entries: Vec<(&String, &Vec<GroundTruthBox>)> = ann.iter().collect();
    par::map(&entries, |(rel, boxes)| {
        let image = read_ppm(&root.join(rel))?;
        for b in boxes.iter() {
            b.validate((image.width(), image.height()))
                .map_err(|e| Error::Data(format!("{rel}: {e}")))?;
        }
        Ok(Sample {
            id: rel.to_string(),
            image,
            boxes: boxes.to_vec(),
        })
    })
    .into_iter()
    .collect()
}

/// Parse rectangle annotations laid out as blocks of
/// `path`, `count`, then `count` lines of `left top width height [class]`.
/// Ellipse lines (six fields) are rejected.
pub fn convert_rect_annotations(text: &str) -> Result<Annotations> {
    let mut lines = text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty());
    let mut out = Annotations::new();
    let bad = |n: usize, msg: &str| Error::parse(format!("rect annotations line {}", n + 1), msg);
    while let Some((_, path)) = lines.next() {
        let (n, count) = lines.next().ok_or_else(|| bad(0, "missing box count after path"))?;
        let count: usize = count.parse().map_err(|_| bad(n, "box count is not an integer"))?;
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| bad(n, "fewer box lines than announced"))?;
            let fields: Vec<f32> = line
                .split_whitespace()
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "non-numeric field"))?;
            match fields.len() {
                4 | 5 => {
                    let [l, t, w, h] = [fields[0], fields[1], fields[2], fields[3]];
                    let class_id = fields.get(4).map_or(0, |c| *c as usize);
                    boxes.push(GroundTruthBox::new(BBox::new(l + w / 2.0, t + h / 2.0, w, h), class_id));
                }
                6 => {
                    return Err(Error::Unsupported(format!(
                        "line {}: ellipse annotations are not supported, convert to rectangles first",
                        n + 1
                    )))
                }
                _ => return Err(bad(n, "expected 4 or 5 fields")),
            }
        }
        out.insert(path.to_string(), boxes);
    }
    Ok(out)
}
