//! Network description, weights and the single-pass forward.

mod file;
mod spec;

pub use file::{encoded_len, load, load_from, save, save_to, FORMAT_VERSION, MAGIC};
pub use spec::{
    build_from_config, build_lcdet, profile, BackboneConfig, HeadLayout, LayerActivation, LayerKind, LayerShape,
    LayerSpec, NetworkSpec, PROFILES,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, CalibrationRecord, QuantizedTensor};
use crate::tensor::{self, Activation, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Float,
    Quantized,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Mode::Float),
            "quantized" | "u8" => Ok(Mode::Quantized),
            other => Err(Error::Usage(format!("unknown mode {other:?} (float|quantized)"))),
        }
    }
}

/// Trainable parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// Pooling layers carry nothing.
    None,
    Float { kernel: Tensor, bias: Vec<f32> },
    /// Kernel in u8; biases stay float32 and are folded at requantization.
    Quantized { kernel: QuantizedTensor, bias: Vec<f32> },
}

impl LayerParams {
    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            LayerParams::None => None,
            LayerParams::Float { bias, .. } | LayerParams::Quantized { bias, .. } => Some(bias),
        }
    }

    fn kernel_dims(&self) -> Option<&[usize]> {
        match self {
            LayerParams::None => None,
            LayerParams::Float { kernel, .. } => Some(kernel.dims()),
            LayerParams::Quantized { kernel, .. } => Some(kernel.dims()),
        }
    }
}

/// A network with its weights. `forward` is reentrant.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
    calibration: Option<CalibrationRecord>,
}

impl Model {
    pub fn new(spec: NetworkSpec, layers: Vec<LayerParams>, calibration: Option<CalibrationRecord>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::config(format!(
                "{} parameter sets for {} layers",
                layers.len(),
                spec.layers.len()
            )));
        }
        let cins = spec.layer_input_channels();
        let mut quantized = None;
        for (i, ((l, p), cin)) in spec.layers.iter().zip(&layers).zip(cins).enumerate() {
            let want = l
                .has_weights()
                .then(|| vec![l.kernel[0], l.kernel[1], cin, l.out_channels]);
            let got = p.kernel_dims().map(<[usize]>::to_vec);
            if want != got {
                return Err(Error::config(format!("expected kernel {want:?}, got {got:?}")).in_layer(i));
            }
            if let Some(b) = p.bias() {
                if b.len() != l.out_channels {
                    return Err(Error::config("bias length mismatch").in_layer(i));
                }
            }
            let q = match p {
                LayerParams::None => continue,
                LayerParams::Float { .. } => false,
                LayerParams::Quantized { .. } => true,
            };
            if *quantized.get_or_insert(q) != q {
                return Err(Error::config("mixed float and quantized layers").in_layer(i));
            }
        }
        if let Some(cal) = &calibration {
            if cal.layers.len() != spec.layers.len() {
                return Err(Error::config("calibration record length does not match the layer count"));
            }
        }
        Ok(Self {
            spec,
            layers,
            calibration,
        })
    }

    /// He-normal kernels, zero biases. The head's confidence biases start
    /// negative so early training does not flood the grid with detections,
    /// and its w/h biases start inside the valid square-root range.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = spec.head();
        let cins = spec.layer_input_channels();
        let layers = spec
            .layers
            .iter()
            .zip(cins)
            .map(|(l, cin)| {
                if !l.has_weights() {
                    return LayerParams::None;
                }
                let fan_in = (l.kernel[0] * l.kernel[1] * cin) as f32;
                let std = if l.kind == LayerKind::DetectionHead {
                    (1.0 / fan_in).sqrt() * 0.1
                } else {
                    (2.0 / fan_in).sqrt()
                };
                let normal = Normal::new(0.0f32, std).expect("positive std");
                let dims = vec![l.kernel[0], l.kernel[1], cin, l.out_channels];
                let n = dims.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let mut bias = vec![0.0; l.out_channels];
                if l.kind == LayerKind::DetectionHead {
                    for b in 0..head.boxes {
                        bias[head.conf(b)] = -2.0;
                        bias[head.coords(b)] = 0.5;
                        bias[head.coords(b) + 1] = 0.5;
                        bias[head.coords(b) + 2] = 0.5;
                        bias[head.coords(b) + 3] = 0.5;
                    }
                }
                LayerParams::Float {
                    kernel: Tensor::new(dims, data).expect("dims match"),
                    bias,
                }
            })
            .collect();
        Self::new(spec, layers, None)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn calibration(&self) -> Option<&CalibrationRecord> {
        self.calibration.as_ref()
    }

    pub fn is_quantized(&self) -> bool {
        self.layers
            .iter()
            .any(|p| matches!(p, LayerParams::Quantized { .. }))
    }

    pub fn param_count(&self) -> usize {
        self.spec.layer_params().iter().sum()
    }

    /// Float parameters, `(kernel, bias)` per weighted layer; `None` for a
    /// quantized model.
    pub fn float_params(&self) -> Option<Vec<Option<(&[f32], &[f32])>>> {
        if self.is_quantized() {
            return None;
        }
        Some(
            self.layers
                .iter()
                .map(|p| match p {
                    LayerParams::Float { kernel, bias } => Some((kernel.data(), bias.as_slice())),
                    _ => None,
                })
                .collect(),
        )
    }

    /// Mutable float parameters, `(kernel, bias)` per weighted layer. Shapes
    /// are fixed; only values can change.
    pub fn float_params_mut(&mut self) -> Result<Vec<Option<(&mut [f32], &mut [f32])>>> {
        if self.is_quantized() {
            return Err(Error::Unsupported("quantized models are inference-only".into()));
        }
        Ok(self
            .layers
            .iter_mut()
            .map(|p| match p {
                LayerParams::Float { kernel, bias } => Some((kernel.data_mut(), bias.as_mut_slice())),
                _ => None,
            })
            .collect())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.dims().len() != 3 {
            return Err(Error::config(format!("image must be rank 3 (h, w, c), got {:?}", image.dims())));
        }
        if image.channels() != self.spec.input_channels {
            return Err(Error::config(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                self.spec.input_channels
            )));
        }
        self.spec.check_input(image.height(), image.width())
    }

    /// Single forward pass producing the `H_f x W_f x (C + 5K)` grid.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Float => {
                let mut trace = Vec::new();
                self.forward_float(image, |_, _| {}, &mut trace)
            }
            Mode::Quantized => self.forward_quantized(image),
        }
    }

    /// Float forward returning every layer output in order.
    pub fn forward_trace(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut trace = Vec::with_capacity(self.layers.len());
        self.forward_float(image, |_, _| {}, &mut trace)?;
        Ok(trace)
    }

    fn forward_float<F>(&self, image: &Tensor, mut observe: F, trace: &mut Vec<Tensor>) -> Result<Tensor>
    where
        F: FnMut(usize, &Tensor),
    {
        self.check_image(image)?;
        let keep = trace.capacity() > 0;
        let mut x = image.clone();
        for (i, (l, p)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            x = match p {
                LayerParams::None => tensor::maxpool2d(&x, l.kernel[0], l.stride).map_err(|e| e.in_layer(i))?,
                LayerParams::Float { kernel, bias } => {
                    let mut y = tensor::conv2d(&x, kernel, bias, l.stride, l.padding).map_err(|e| e.in_layer(i))?;
                    self.apply_activation(l.activation, &mut y);
                    y
                }
                LayerParams::Quantized { .. } => {
                    return Err(Error::Unsupported(
                        "float forward on a quantized model; use quantized mode".into(),
                    ))
                }
            };
            observe(i, &x);
            if keep {
                trace.push(x.clone());
            }
        }
        Ok(x)
    }

    pub(crate) fn apply_activation(&self, act: LayerActivation, y: &mut Tensor) {
        match act {
            LayerActivation::Relu => tensor::activate_in_place(y, Activation::Relu),
            LayerActivation::LeakyRelu => tensor::activate_in_place(y, Activation::LeakyRelu),
            LayerActivation::Identity => {}
            LayerActivation::Final => {
                let head = self.spec.head();
                let c = y.channels();
                for cell in y.data_mut().chunks_exact_mut(c) {
                    head.activate(cell);
                }
            }
        }
    }

    fn forward_quantized(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let cal = self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::config("quantized forward needs a calibration record"))?;
        let head = self.spec.head();
        let mut x = quant::quantize(image);
        for (i, (l, p)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            x = match p {
                LayerParams::None => quant::qmaxpool2d(&x, l.kernel[0], l.stride).map_err(|e| e.in_layer(i))?,
                LayerParams::Quantized { kernel, bias } => {
                    let out = Some(cal.layers[i]);
                    let r = match l.activation {
                        LayerActivation::Relu => quant::qconv2d(&x, kernel, bias, l.stride, l.padding, out, |v| {
                            v.iter_mut().for_each(|e| *e = e.max(0.0))
                        }),
                        LayerActivation::LeakyRelu => {
                            quant::qconv2d(&x, kernel, bias, l.stride, l.padding, out, |v| {
                                v.iter_mut().for_each(|e| *e = Activation::LeakyRelu.apply(*e))
                            })
                        }
                        LayerActivation::Identity => quant::qconv2d(&x, kernel, bias, l.stride, l.padding, out, |_| {}),
                        LayerActivation::Final => {
                            quant::qconv2d(&x, kernel, bias, l.stride, l.padding, out, |v| head.activate(v))
                        }
                    };
                    r.map_err(|e| e.in_layer(i))?
                }
                LayerParams::Float { .. } => {
                    return Err(Error::Unsupported(
                        "quantized forward on a float model; run quantize first".into(),
                    ))
                }
            };
        }
        Ok(quant::dequantize(&x))
    }

    /// Convert every kernel to u8 and attach the calibration record.
    pub fn quantize(&self, calibration: CalibrationRecord) -> Result<Model> {
        if self.is_quantized() {
            return Err(Error::Usage("model is already quantized".into()));
        }
        let layers = self
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::Float { kernel, bias } => LayerParams::Quantized {
                    kernel: quant::quantize(kernel),
                    bias: bias.clone(),
                },
                other => other.clone(),
            })
            .collect();
        Model::new(self.spec.clone(), layers, Some(calibration))
    }

    /// Calibrate on `images`, then quantize.
    pub fn quantize_calibrated(&self, images: &[Tensor]) -> Result<Model> {
        let cal = quant::calibrate(self, images)?;
        self.quantize(cal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> Model {
        let spec = build_from_config(&profile("toy").unwrap()).unwrap();
        Model::init(spec, 1).unwrap()
    }

    fn noise(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn grid_dims_and_confidence_range() {
        let m = toy();
        let g = m.forward(&noise(112, 112, 0), Mode::Float).unwrap();
        assert_eq!(g.dims(), &[7, 7, 16]);
        let head = m.spec().head();
        for y in 0..7 {
            for x in 0..7 {
                let cell = g.pixel(y, x);
                for b in 0..3 {
                    assert!((0.0..=1.0).contains(&cell[head.conf(b)]));
                }
            }
        }
        let g = m.forward(&noise(64, 160, 1), Mode::Float).unwrap();
        assert_eq!(g.dims(), &[4, 10, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = toy();
        let img = noise(112, 112, 3);
        let a = m.forward(&img, Mode::Float).unwrap();
        let b = m.forward(&img, Mode::Float).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = toy();
        let err = m.forward(&noise(100, 112, 0), Mode::Float).unwrap_err();
        assert!(err.to_string().contains("multiple of the total stride 16"));
        let gray = Tensor::zeros(vec![112, 112, 1]);
        assert!(m.forward(&gray, Mode::Float).is_err());
        // quantized mode without calibration
        assert!(m.forward(&noise(112, 112, 0), Mode::Quantized).is_err());
    }

    #[test]
    fn quantize_twice_is_usage_error() {
        let m = toy();
        let q = m.quantize_calibrated(&[noise(112, 112, 4)]).unwrap();
        assert!(q.is_quantized());
        assert!(matches!(q.quantize(q.calibration().unwrap().clone()), Err(Error::Usage(_))));
        assert!(matches!(quant::calibrate(&m, &[]), Err(Error::Usage(_))));
        assert!(q.forward(&noise(112, 112, 0), Mode::Float).is_err());
    }

    #[test]
    fn calibration_ranges() {
        let m = toy();
        let imgs = [noise(112, 112, 5), noise(112, 112, 6)];
        let cal = quant::calibrate(&m, &imgs).unwrap();
        assert_eq!(cal.layers.len(), m.spec().layers.len());
        let traces: Vec<_> = imgs.iter().map(|i| m.forward_trace(i).unwrap()).collect();
        for (li, p) in cal.layers.iter().enumerate() {
            for t in &traces {
                let (lo, hi) = t[li].min_max();
                assert!(p.min <= lo && p.max >= hi);
            }
            if m.spec().layers[li].activation == LayerActivation::Relu {
                assert!(p.min >= 0.0);
            }
        }
    }

    #[test]
    fn quantized_forward_tracks_float() {
        let m = toy();
        let imgs: Vec<_> = (0..4).map(|s| noise(112, 112, 10 + s)).collect();
        let q = m.quantize_calibrated(&imgs).unwrap();
        let step = q.calibration().unwrap().layers.last().unwrap().max - q.calibration().unwrap().layers.last().unwrap().min;
        let step = step / 255.0;
        for img in &imgs {
            let f = m.forward(img, Mode::Float).unwrap();
            let g = q.forward(img, Mode::Quantized).unwrap();
            let within = f
                .data()
                .iter()
                .zip(g.data())
                .filter(|(a, b)| (*a - *b).abs() <= 3.0 * step)
                .count();
            assert!(within as f64 >= 0.99 * f.len() as f64);
        }
    }

    fn identity_then_head() -> Model {
        let spec = NetworkSpec {
            profile: "unit".into(),
            input_channels: 1,
            num_classes: 1,
            boxes_per_cell: 1,
            input_size: [2, 2],
            layers: vec![LayerSpec::conv(1, 1, 1, LayerActivation::Identity), LayerSpec::head(6)],
        };
        let layers = vec![
            LayerParams::Float {
                kernel: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
                bias: vec![0.0],
            },
            LayerParams::Float {
                kernel: Tensor::zeros(vec![1, 1, 1, 6]),
                bias: vec![0.0; 6],
            },
        ];
        Model::new(spec, layers, None).unwrap()
    }

    #[test]
    fn identity_layer_calibration_is_running_min_max() {
        let m = identity_then_head();
        let a = Tensor::new(vec![2, 2, 1], vec![-3.0, 1.0, 0.5, 2.0]).unwrap();
        let cal = quant::calibrate(&m, std::slice::from_ref(&a)).unwrap();
        assert_eq!((cal.layers[0].min, cal.layers[0].max), (-3.0, 2.0));

        let lo = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        let hi = Tensor::new(vec![2, 2, 1], vec![-1.0, 2.0, 0.0, 1.0]).unwrap();
        let cal = quant::calibrate(&m, &[lo, hi]).unwrap();
        assert_eq!((cal.layers[0].min, cal.layers[0].max), (-1.0, 2.0));
    }
}
