use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Maxpool,
    DetectionHead,
}

/// Per-layer nonlinearity. `Final` is the split head activation: sigmoid on
/// each box confidence, softmax over the class channels (sigmoid when there is
/// a single class), identity on coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerActivation {
    Relu,
    LeakyRelu,
    Identity,
    Final,
}

fn default_stride() -> usize {
    1
}

fn default_padding() -> Padding {
    Padding::Same
}

fn default_activation() -> LayerActivation {
    LayerActivation::Relu
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// `(kh, kw)`; the pooling window for `maxpool`.
    pub kernel: [usize; 2],
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    #[serde(default = "default_activation")]
    pub activation: LayerActivation,
}

impl LayerSpec {
    pub fn conv(k: usize, out_channels: usize, stride: usize, activation: LayerActivation) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel: [k, k],
            out_channels,
            stride,
            padding: Padding::Same,
            activation,
        }
    }

    pub fn maxpool(size: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Maxpool,
            kernel: [size, size],
            out_channels: 0,
            stride,
            padding: Padding::Valid,
            activation: LayerActivation::Identity,
        }
    }

    pub fn head(out_channels: usize) -> Self {
        Self {
            kind: LayerKind::DetectionHead,
            kernel: [1, 1],
            out_channels,
            stride: 1,
            padding: Padding::Same,
            activation: LayerActivation::Final,
        }
    }

    pub fn has_weights(&self) -> bool {
        self.kind != LayerKind::Maxpool
    }
}

/// Where each quantity lives in a grid cell's channel vector: classes
/// `[0, C)`, then per box `b` the confidence at `C + 5b` followed by
/// `x, y, w, h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_classes: usize,
    pub boxes: usize,
}

impl HeadLayout {
    pub fn channels(&self) -> usize {
        self.num_classes + 5 * self.boxes
    }

    #[inline]
    pub fn conf(&self, b: usize) -> usize {
        self.num_classes + 5 * b
    }

    /// Index of the first of the four coordinate channels `x, y, w, h`.
    #[inline]
    pub fn coords(&self, b: usize) -> usize {
        self.num_classes + 5 * b + 1
    }

    /// Split head activation applied to one cell's channel vector in place.
    pub fn activate(&self, v: &mut [f32]) {
        let c = self.num_classes;
        if c == 1 {
            v[0] = tensor::sigmoid(v[0]);
        } else {
            tensor::softmax_in_place(&mut v[..c]);
        }
        for b in 0..self.boxes {
            let i = self.conf(b);
            v[i] = tensor::sigmoid(v[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub profile: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub boxes_per_cell: usize,
    /// Nominal `(width, height)` the profile is trained at.
    pub input_size: [usize; 2],
    pub layers: Vec<LayerSpec>,
}

/// Shapes around one layer for a given input resolution, `(h, w, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

impl NetworkSpec {
    pub fn head(&self) -> HeadLayout {
        HeadLayout {
            num_classes: self.num_classes,
            boxes: self.boxes_per_cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.boxes_per_cell < 1 {
            return Err(Error::config("num_classes and boxes_per_cell must be >= 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::config("input_channels must be >= 1"));
        }
        let heads: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::DetectionHead)
            .map(|(i, _)| i)
            .collect();
        if heads.len() != 1 {
            return Err(Error::config(format!(
                "network needs exactly one detection_head, found {}",
                heads.len()
            )));
        }
        let last = self.layers.len() - 1;
        if heads[0] != last {
            return Err(Error::config("detection_head must be the last layer").in_layer(heads[0]));
        }
        let want = self.head().channels();
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |m: String| Err(Error::config(m).in_layer(i));
            if l.kernel[0] == 0 || l.kernel[1] == 0 || l.stride == 0 {
                return bad("kernel and stride must be >= 1".into());
            }
            match l.kind {
                LayerKind::Conv if l.out_channels == 0 => return bad("conv needs out_channels >= 1".into()),
                LayerKind::Conv | LayerKind::Maxpool if l.activation == LayerActivation::Final => {
                    return bad("final activation is reserved for the detection_head".into())
                }
                LayerKind::DetectionHead if l.out_channels != want => {
                    return bad(format!(
                        "detection_head has {} channels, expected C + 5K = {want}",
                        l.out_channels
                    ))
                }
                LayerKind::DetectionHead if l.activation != LayerActivation::Final => {
                    return bad("detection_head must use the final activation".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Reject resolutions that are not exact multiples of the total stride.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.total_stride();
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::config(format!(
                "input {width}x{height} must be a positive multiple of the total stride {s} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Input channels of every layer.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                let cin = c;
                if l.kind != LayerKind::Maxpool {
                    c = l.out_channels;
                }
                cin
            })
            .collect()
    }

    /// Per-layer geometry for an input of `height x width`.
    pub fn shapes(&self, height: usize, width: usize) -> Result<Vec<LayerShape>> {
        self.check_input(height, width)?;
        let mut cur = (height, width, self.input_channels);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let next = match l.kind {
                LayerKind::Maxpool => (
                    tensor::pool_extent(cur.0, l.kernel[0], l.stride).map_err(|e| e.in_layer(i))?,
                    tensor::pool_extent(cur.1, l.kernel[1], l.stride).map_err(|e| e.in_layer(i))?,
                    cur.2,
                ),
                _ => {
                    let g = ConvGeometry::new(cur, (l.kernel[0], l.kernel[1]), l.stride, l.padding)
                        .map_err(|e| e.in_layer(i))?;
                    (g.out_h, g.out_w, l.out_channels)
                }
            };
            out.push(LayerShape {
                input: cur,
                output: next,
            });
            cur = next;
        }
        Ok(out)
    }

    /// Output grid `(rows, cols)` for an input resolution.
    pub fn grid_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let shapes = self.shapes(height, width)?;
        let last = shapes.last().expect("validated network has layers").output;
        Ok((last.0, last.1))
    }

    /// Weights plus biases per layer (0 for pooling).
    pub fn layer_params(&self) -> Vec<usize> {
        self.layers
            .iter()
            .zip(self.layer_input_channels())
            .map(|(l, cin)| match l.kind {
                LayerKind::Maxpool => 0,
                _ => l.kernel[0] * l.kernel[1] * cin * l.out_channels + l.out_channels,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text).map_err(|e| Error::parse("network spec", e))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Backbone description; `build_lcdet` appends the two detection layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub profile: String,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_boxes")]
    pub boxes_per_cell: usize,
    pub input_size: [usize; 2],
    /// Kernels in the 3x3 conv that precedes the 1x1 head.
    pub convdet_channels: usize,
    pub layers: Vec<LayerSpec>,
}

fn default_input_channels() -> usize {
    3
}

fn default_classes() -> usize {
    1
}

fn default_boxes() -> usize {
    3
}

impl BackboneConfig {
    /// Parse a JSON config; errors carry serde's line/column and field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BackboneConfig = serde_json::from_str(text).map_err(|e| Error::parse("network config", e))?;
        if cfg.convdet_channels == 0 {
            return Err(Error::parse("network config", "convdet_channels must be >= 1"));
        }
        if cfg.layers.iter().any(|l| l.kind == LayerKind::DetectionHead) {
            return Err(Error::parse(
                "network config",
                "backbone layers must not contain a detection_head; it is appended automatically",
            ));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

const TOY_CONFIG: &str = include_str!("../../configs/toy.json");
const PAPER_CONFIG: &str = include_str!("../../configs/paper.json");

/// Names accepted by [`profile`].
pub const PROFILES: [&str; 3] = ["toy", "paper", "paper-256"];

/// Shipped backbone presets. `paper` carries a 4096-kernel ConvDet conv and
/// `paper-256` the 256-kernel variant; both share the 24-layer backbone.
pub fn profile(name: &str) -> Result<BackboneConfig> {
    match name {
        "toy" => BackboneConfig::from_json(TOY_CONFIG),
        "paper" => BackboneConfig::from_json(PAPER_CONFIG),
        "paper-256" => {
            let mut cfg = BackboneConfig::from_json(PAPER_CONFIG)?;
            cfg.profile = "paper-256".into();
            cfg.convdet_channels = 256;
            Ok(cfg)
        }
        other => Err(Error::Usage(format!(
            "unknown profile {other:?}; expected one of {PROFILES:?}"
        ))),
    }
}

/// Backbone + ConvDet: a 3x3 ReLU conv with `convdet_channels` kernels and a
/// 1x1 head producing `C + 5K` channels.
pub fn build_lcdet(backbone: &BackboneConfig, num_classes: usize, boxes_per_cell: usize) -> Result<NetworkSpec> {
    let mut layers = backbone.layers.clone();
    layers.push(LayerSpec::conv(3, backbone.convdet_channels, 1, LayerActivation::Relu));
    layers.push(LayerSpec::head(num_classes + 5 * boxes_per_cell));
    let spec = NetworkSpec {
        profile: backbone.profile.clone(),
        input_channels: backbone.input_channels,
        num_classes,
        boxes_per_cell,
        input_size: backbone.input_size,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// `build_lcdet` with the class/box counts the config itself declares.
pub fn build_from_config(backbone: &BackboneConfig) -> Result<NetworkSpec> {
    build_lcdet(backbone, backbone.num_classes, backbone.boxes_per_cell)
}
