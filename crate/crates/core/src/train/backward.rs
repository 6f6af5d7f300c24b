//! Reverse-mode gradients through the float network.

use super::loss::{detection_loss_grad, LossConfig, LossParts};
use super::target::GridTarget;
use crate::error::{Error, Result};
use crate::model::{HeadLayout, LayerActivation, LayerParams, Model};
use crate::tensor::{self, ConvGeometry, Padding, Tensor, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Gradients for every weighted layer, `None` for pooling layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|p| match p {
                LayerParams::Float { kernel, bias } => Some(LayerGrad {
                    kernel: vec![0.0; kernel.len()],
                    bias: vec![0.0; bias.len()],
                }),
                _ => None,
            })
            .collect();
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.kernel.iter_mut().zip(&b.kernel).for_each(|(x, y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.layers.iter_mut().flatten() {
            g.kernel.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.kernel.iter().chain(&g.bias))
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Forward, fixed-target loss and gradients for one image.
pub fn backward(model: &Model, image: &Tensor, target: &GridTarget, cfg: &LossConfig) -> Result<(LossParts, Gradients)> {
    let trace = traced_forward(model, image)?;
    let pred = trace.last().expect("network has layers");
    let (parts, grad_out) = detection_loss_grad(pred, target, cfg)?;
    let grads = backward_from_output(model, image, &trace, grad_out)?;
    Ok((parts, grads))
}

/// Float forward keeping every layer output; rejects quantized models and
/// reports the first layer producing non-finite values.
pub(crate) fn traced_forward(model: &Model, image: &Tensor) -> Result<Vec<Tensor>> {
    if model.is_quantized() {
        return Err(Error::Unsupported("gradients need a float model; quantized models are inference-only".into()));
    }
    let trace = model.forward_trace(image)?;
    if let Some(i) = trace.iter().position(|t| t.data().iter().any(|v| !v.is_finite())) {
        let kind = &model.spec().layers[i].kind;
        return Err(Error::Numeric(format!("layer {i} ({kind:?}) produced non-finite activations")));
    }
    Ok(trace)
}

/// Backpropagate `grad_out`, the gradient with respect to the activated
/// network output, through every layer.
pub(crate) fn backward_from_output(model: &Model, image: &Tensor, trace: &[Tensor], grad_out: Tensor) -> Result<Gradients> {
    let spec = model.spec();
    let head = spec.head();
    let mut grads = Gradients::zeros_like(model);
    let mut g = grad_out.into_data();
    for i in (0..spec.layers.len()).rev() {
        let l = &spec.layers[i];
        let input = if i == 0 { image } else { &trace[i - 1] };
        let output = &trace[i];
        match &model.layers()[i] {
            LayerParams::None => {
                let (_, idx) = tensor::maxpool2d_indexed(input, l.kernel[0], l.stride)?;
                let mut dx = vec![0.0f32; input.len()];
                for (gv, &src) in g.iter().zip(&idx) {
                    dx[src as usize] += gv;
                }
                g = dx;
            }
            LayerParams::Float { kernel, .. } => {
                activation_backward(l.activation, head, output.data(), &mut g);
                let lg = grads.layers[i].as_mut().expect("float layer has a gradient slot");
                let dx = conv_backward(input, kernel, l.stride, l.padding, &g, lg, i > 0)?;
                g = dx.unwrap_or_default();
            }
            LayerParams::Quantized { .. } => unreachable!("rejected by traced_forward"),
        }
    }
    Ok(grads)
}

/// Turn a gradient with respect to activated values into one with respect
/// to pre-activation values. `out` holds the activated values.
pub(crate) fn activation_backward(act: LayerActivation, head: HeadLayout, out: &[f32], g: &mut [f32]) {
    match act {
        LayerActivation::Identity => {}
        LayerActivation::Relu => g.iter_mut().zip(out).for_each(|(g, &y)| {
            if y <= 0.0 {
                *g = 0.0
            }
        }),
        LayerActivation::LeakyRelu => g.iter_mut().zip(out).for_each(|(g, &y)| {
            if y <= 0.0 {
                *g *= LEAKY_SLOPE
            }
        }),
        LayerActivation::Final => {
            let c = head.channels();
            for (gc, pc) in g.chunks_exact_mut(c).zip(out.chunks_exact(c)) {
                head_backward(head, pc, gc);
            }
        }
    }
}

/// Jacobian of the split head activation for one cell, applied in place.
pub fn head_backward(head: HeadLayout, p: &[f32], g: &mut [f32]) {
    let c = head.num_classes;
    if c == 1 {
        g[0] *= p[0] * (1.0 - p[0]);
    } else {
        let dot: f32 = g[..c].iter().zip(&p[..c]).map(|(a, b)| a * b).sum();
        for k in 0..c {
            g[k] = p[k] * (g[k] - dot);
        }
    }
    for b in 0..head.boxes {
        let i = head.conf(b);
        g[i] *= p[i] * (1.0 - p[i]);
    }
}

/// Gradients of a conv layer given `dz`, the gradient at its pre-activation
/// output. Kernel and bias gradients are added into `acc`; the input
/// gradient is returned when `want_input` is set.
pub(crate) fn conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    dz: &[f32],
    acc: &mut LayerGrad,
    want_input: bool,
) -> Result<Option<Vec<f32>>> {
    let kd = kernel.dims();
    let g = ConvGeometry::new((input.height(), input.width(), input.channels()), (kd[0], kd[1]), stride, padding)?;
    let cout = kd[3];
    let patch = g.patch_len();
    let rows = g.out_h * g.out_w;
    debug_assert_eq!(dz.len(), rows * cout);

    let mut cols = Vec::new();
    tensor::im2col(input.data(), &g, 0, g.out_h, 0.0, &mut cols);
    // dW (patch x cout) += cols^T (patch x rows) . dz (rows x cout)
    tensor::gemm(patch, rows, cout, &cols, (1, patch), dz, (cout, 1), 1.0, &mut acc.kernel, (cout, 1));
    for row in dz.chunks_exact(cout) {
        acc.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
    }
    if !want_input {
        return Ok(None);
    }
    // dcols (rows x patch) = dz (rows x cout) . W^T (cout x patch)
    let mut dcols = vec![0.0f32; rows * patch];
    tensor::gemm(rows, cout, patch, dz, (cout, 1), kernel.data(), (1, cout), 0.0, &mut dcols, (patch, 1));
    let mut dx = vec![0.0f32; input.len()];
    tensor::col2im_add(&dcols, &g, &mut dx);
    Ok(Some(dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, NetworkSpec};
    use crate::train::target::{build_target, GroundTruthBox};
    use crate::detector::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            profile: "tiny".into(),
            input_channels: 3,
            num_classes: 2,
            boxes_per_cell: 2,
            input_size: [16, 16],
            layers: vec![
                LayerSpec::conv(3, 4, 1, LayerActivation::LeakyRelu),
                LayerSpec::maxpool(2, 2),
                LayerSpec::conv(3, 6, 2, LayerActivation::Relu),
                LayerSpec::head(12),
            ],
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_hwc(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn pointwise_layer_closed_form() {
        // y = w*x + b on one channel, L = sum (y - t)^2
        let input = Tensor::from_hwc(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let t = [1.0f32, 0.0, 2.0, 1.0];
        let y: Vec<f32> = input.data().iter().map(|x| 0.5 * x + 0.25).collect();
        let dz: Vec<f32> = y.iter().zip(&t).map(|(y, t)| 2.0 * (y - t)).collect();
        let mut acc = LayerGrad {
            kernel: vec![0.0],
            bias: vec![0.0],
        };
        let dx = conv_backward(&input, &kernel, 1, Padding::Same, &dz, &mut acc, true).unwrap().unwrap();
        let dw: f32 = dz.iter().zip(input.data()).map(|(d, x)| d * x).sum();
        assert!((acc.kernel[0] - dw).abs() < 1e-6);
        assert!((acc.bias[0] - dz.iter().sum::<f32>()).abs() < 1e-6);
        for (a, d) in dx.iter().zip(&dz) {
            assert!((a - 0.5 * d).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let model = Model::init(tiny_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16, 16);
        let trace = traced_forward(&model, &img).unwrap();
        let zero = Tensor::zeros(trace.last().unwrap().dims().to_vec());
        let g = backward_from_output(&model, &img, &trace, zero).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn quantized_model_is_rejected() {
        let model = Model::init(tiny_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16, 16);
        let q = model.quantize_calibrated(std::slice::from_ref(&img)).unwrap();
        let t = GridTarget::empty(2, 2, q.spec().head());
        assert!(matches!(
            backward(&q, &img, &t, &LossConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }

    /// Coarse f32 finite-difference check; the strict check lives in the
    /// acceptance suite with a double-precision reference.
    #[test]
    fn gradients_match_finite_differences() {
        let model = Model::init(tiny_spec(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 16, 16);
        let pred = model.forward(&img, crate::model::Mode::Float).unwrap();
        let gts = [GroundTruthBox::new(BBox::new(5.0, 6.0, 6.0, 9.0), 1)];
        let (t, _) = build_target(&pred, &gts, (16, 16), model.spec().head()).unwrap();
        let cfg = LossConfig::default();
        let (_, grads) = backward(&model, &img, &t, &cfg).unwrap();

        let loss_at = |m: &Model| -> f64 {
            let p = m.forward(&img, crate::model::Mode::Float).unwrap();
            super::super::loss::detection_loss(&p, &t, &cfg).unwrap().total() as f64
        };
        let h = 1e-3f32;
        let mut checked = 0;
        for layer in [0usize, 2, 3] {
            for k in 0..6 {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let idx = k * 7 % grads.layers[layer].as_ref().unwrap().kernel.len();
                plus.float_params_mut().unwrap()[layer].as_mut().unwrap().0[idx] += h;
                minus.float_params_mut().unwrap()[layer].as_mut().unwrap().0[idx] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h as f64);
                let an = grads.layers[layer].as_ref().unwrap().kernel[idx] as f64;
                assert!((fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()) + 1e-3, "layer {layer} idx {idx}: fd {fd} analytic {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 18);
    }

    #[test]
    fn head_backward_softmax_matches_finite_difference() {
        let head = HeadLayout {
            num_classes: 3,
            boxes: 1,
        };
        let z = [0.3f32, -0.2, 0.9, 0.4, 0.1, 0.2, 0.3, 0.4];
        let w = [1.0f32, -2.0, 0.5, 1.5, 0.0, 0.0, 0.0, 0.0];
        let f = |z: &[f32]| -> f32 {
            let mut p = z.to_vec();
            head.activate(&mut p);
            p.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut p = z.to_vec();
        head.activate(&mut p);
        let mut g = w.to_vec();
        head_backward(head, &p, &mut g);
        for i in 0..4 {
            let mut a = z.to_vec();
            let mut b = z.to_vec();
            a[i] += 1e-3;
            b[i] -= 1e-3;
            let fd = (f(&a) - f(&b)) / 2e-3;
            assert!((fd - g[i]).abs() < 1e-3, "{i}: {fd} vs {}", g[i]);
        }
    }
}
