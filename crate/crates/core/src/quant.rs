//! 8-bit affine quantization.
//!
//! A tensor is stored as bytes plus its `(min, max)` range; byte `q` stands for
//! `min + q * (max - min) / 255`. Quantization rounds to the nearest level with
//! ties away from zero. The fixed-point convolution accumulates `u8 x u8`
//! products in `i32` and touches floating point once per output element, to
//! apply the range offsets, the bias and the activation before requantizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::tensor::{self, check_conv_shapes, ConvGeometry, Padding, Tensor};

/// Largest im2col patch for which `patch * 255 * 255` fits in `i32`.
pub const MAX_PATCH_LEN: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub min: f32,
    pub max: f32,
}

impl QuantParams {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max < min {
            return Err(Error::config(format!("invalid quantization range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    /// Range of a slice; panics on an empty slice.
    pub fn of(values: &[f32]) -> Self {
        assert!(!values.is_empty(), "range of empty slice");
        let (min, max) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    pub fn scale(&self) -> f32 {
        ((self.max as f64 - self.min as f64) / 255.0) as f32
    }

    fn scale_f64(&self) -> f64 {
        (self.max as f64 - self.min as f64) / 255.0
    }

    #[inline]
    pub fn quantize(&self, w: f32) -> u8 {
        let span = self.max as f64 - self.min as f64;
        if span <= 0.0 {
            return 0;
        }
        // f64::round is half-away-from-zero
        let r = (255.0 * (w as f64 - self.min as f64) / span).round();
        r.clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f32 {
        (self.min as f64 + q as f64 * self.scale_f64()) as f32
    }

    fn widen(&mut self, other: &QuantParams) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>, params: QuantParams) -> Result<Self> {
        let len: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || len != data.len() {
            return Err(Error::config(format!(
                "quantized tensor dims {dims:?} do not match {} bytes",
                data.len()
            )));
        }
        Ok(Self { dims, data, params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn height(&self) -> usize {
        self.dims[0]
    }

    pub fn width(&self) -> usize {
        self.dims[1]
    }

    pub fn channels(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }
}

/// Quantize with the tensor's own range.
pub fn quantize(w: &Tensor) -> QuantizedTensor {
    quantize_with(w, QuantParams::of(w.data()))
}

/// Quantize with a given range; out-of-range values saturate.
pub fn quantize_with(w: &Tensor, params: QuantParams) -> QuantizedTensor {
    let data = w.data().iter().map(|&v| params.quantize(v)).collect();
    QuantizedTensor {
        dims: w.dims().to_vec(),
        data,
        params,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.data.iter().map(|&b| q.params.dequantize(b)).collect();
    Tensor::new(q.dims.clone(), data).expect("quantized tensor dims are valid")
}

/// Per-layer output ranges observed over a calibration set, in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub layers: Vec<QuantParams>,
}

/// Running min/max of every layer output of the float model over `images`.
pub fn calibrate(model: &Model, images: &[Tensor]) -> Result<CalibrationRecord> {
    if images.is_empty() {
        return Err(Error::Usage("calibration needs at least one image".into()));
    }
    let per_image = par::map(images, |img| -> Result<Vec<QuantParams>> {
        let trace = model.forward_trace(img)?;
        Ok(trace.iter().map(|t| QuantParams::of(t.data())).collect())
    });
    let mut record: Option<Vec<QuantParams>> = None;
    for ranges in per_image {
        let ranges = ranges?;
        match record.as_mut() {
            None => record = Some(ranges),
            Some(acc) => acc.iter_mut().zip(&ranges).for_each(|(a, r)| a.widen(r)),
        }
    }
    Ok(CalibrationRecord {
        layers: record.expect("non-empty calibration set"),
    })
}

/// Fixed-point convolution.
///
/// `activation` receives the float pre-activation channel vector of one output
/// position and transforms it in place; the result is requantized with
/// `out_params`.
#[allow(clippy::too_many_arguments)]
pub fn qconv2d<F>(
    input: &QuantizedTensor,
    weights: &QuantizedTensor,
    bias: &[f32],
    stride: usize,
    padding: Padding,
    out_params: Option<QuantParams>,
    activation: F,
) -> Result<QuantizedTensor>
where
    F: Fn(&mut [f32]) + Sync,
{
    let out_params = out_params.ok_or_else(|| Error::config("quantized conv needs a calibrated output range"))?;
    if input.dims.len() != 3 || weights.dims.len() != 4 {
        return Err(Error::config("quantized conv expects rank-3 input and rank-4 kernel"));
    }
    // shape checks reuse the float path's rules
    check_conv_shapes(
        &Tensor::zeros(input.dims.clone()),
        &Tensor::zeros(weights.dims.clone()),
        bias,
    )?;
    let wd = &weights.dims;
    let g = ConvGeometry::new(
        (input.height(), input.width(), input.channels()),
        (wd[0], wd[1]),
        stride,
        padding,
    )?;
    let patch = g.patch_len();
    if patch > MAX_PATCH_LEN {
        return Err(Error::config(format!(
            "patch length {patch} exceeds {MAX_PATCH_LEN}; i32 accumulation could overflow"
        )));
    }
    let out_c = wd[3];

    // kernel as out_c rows of patch bytes so each dot product is contiguous
    let mut wt = vec![0u8; patch * out_c];
    for k in 0..patch {
        for n in 0..out_c {
            wt[n * patch + k] = weights.data[k * out_c + n];
        }
    }
    let full_wsum: Vec<i32> = wt
        .chunks_exact(patch)
        .map(|row| row.iter().map(|&b| b as i32).sum())
        .collect();

    let a = input.params;
    let w = weights.params;
    let (sa, sw) = (a.scale_f64(), w.scale_f64());
    let (amin, wmin) = (a.min as f64, w.min as f64);

    let mut out = vec![0u8; g.out_h * g.out_w * out_c];
    let rows = tensor::rows_per_block(&g);
    par::for_each_chunk_mut(&mut out, rows * g.out_w * out_c, |bi, block| {
        let oy0 = bi * rows;
        let oy1 = (oy0 + rows).min(g.out_h);
        let mut cols = Vec::new();
        tensor::im2col(&input.data, &g, oy0, oy1, 0u8, &mut cols);
        let mut pre = vec![0f32; out_c];
        let mut wsum = vec![0i32; out_c];
        for (r, (col, dst)) in cols.chunks_exact(patch).zip(block.chunks_exact_mut(out_c)).enumerate() {
            let oy = oy0 + r / g.out_w;
            let ox = r % g.out_w;
            let sum_a: i32 = col.iter().map(|&b| b as i32).sum();
            let n_valid = if g.interior(oy, ox) {
                wsum.copy_from_slice(&full_wsum);
                patch
            } else {
                valid_weight_sums(&g, oy, ox, &wt, &mut wsum)
            };
            for n in 0..out_c {
                let acc = dot_u8(col, &wt[n * patch..(n + 1) * patch]);
                let real = sa * sw * acc as f64
                    + amin * sw * wsum[n] as f64
                    + wmin * sa * sum_a as f64
                    + n_valid as f64 * amin * wmin
                    + bias[n] as f64;
                pre[n] = real as f32;
            }
            activation(&mut pre);
            for (d, &v) in dst.iter_mut().zip(&pre) {
                *d = out_params.quantize(v);
            }
        }
    });
    QuantizedTensor::new(vec![g.out_h, g.out_w, out_c], out, out_params)
}

/// Kernel byte sums restricted to taps that land inside the input; returns the
/// number of valid patch entries.
fn valid_weight_sums(g: &ConvGeometry, oy: usize, ox: usize, wt: &[u8], out: &mut [i32]) -> usize {
    let patch = g.patch_len();
    out.iter_mut().for_each(|s| *s = 0);
    let mut n_valid = 0;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            if g.source(oy, ox, ky, kx).is_none() {
                continue;
            }
            n_valid += g.in_c;
            let k0 = (ky * g.kw + kx) * g.in_c;
            for (n, s) in out.iter_mut().enumerate() {
                let row = &wt[n * patch + k0..n * patch + k0 + g.in_c];
                *s += row.iter().map(|&b| b as i32).sum::<i32>();
            }
        }
    }
    n_valid
}

#[inline]
fn dot_u8(a: &[u8], b: &[u8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// Max pooling directly on bytes; the range is unchanged because the affine
/// map is monotone.
pub fn qmaxpool2d(input: &QuantizedTensor, size: usize, stride: usize) -> Result<QuantizedTensor> {
    if input.dims.len() != 3 {
        return Err(Error::config("pool input must be rank 3"));
    }
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let oh = tensor::pool_extent(h, size, stride)?;
    let ow = tensor::pool_extent(w, size, stride)?;
    let mut out = vec![0u8; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for y in oy * stride..(oy * stride + size).min(h) {
                for x in ox * stride..(ox * stride + size).min(w) {
                    let src = &input.data[(y * w + x) * c..(y * w + x + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (*d).max(s);
                    }
                }
            }
        }
    }
    QuantizedTensor::new(vec![oh, ow, c], out, input.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Activation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Vec<usize>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn affine_map_endpoints_and_tie() {
        let p = QuantParams::new(-1.0, 1.0).unwrap();
        assert_eq!(p.quantize(-1.0), 0);
        assert_eq!(p.quantize(1.0), 255);
        // 255 * 0.5 = 127.5 rounds away from zero
        assert_eq!(p.quantize(0.0), 128);
        assert_eq!(p.dequantize(0), -1.0);
        assert_eq!(p.dequantize(255), 1.0);
        assert!((p.dequantize(128) - 0.003_922).abs() < 1e-6);
    }

    #[test]
    fn tensor_quantize_uses_actual_range() {
        let t = Tensor::new(vec![4], vec![-2.0, 0.5, 3.0, 1.0]).unwrap();
        let q = quantize(&t);
        assert_eq!(q.params(), QuantParams { min: -2.0, max: 3.0 });
        assert_eq!(q.data()[0], 0);
        assert_eq!(q.data()[2], 255);
    }

    #[test]
    fn constant_tensor_is_exact() {
        let t = Tensor::filled(vec![3, 3, 2], 0.37);
        let q = quantize(&t);
        assert!(q.data().iter().all(|&b| b == 0));
        assert_eq!(q.params().scale(), 0.0);
        assert_eq!(dequantize(&q), t);
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(QuantParams::new(1.0, 0.0).is_err());
        assert!(QuantParams::new(f32::NAN, 0.0).is_err());
    }

    #[test]
    fn qconv_missing_range_is_config_error() {
        let x = quantize(&Tensor::filled(vec![2, 2, 1], 1.0));
        let k = quantize(&Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let r = qconv2d(&x, &k, &[0.0], 1, Padding::Same, None, |_| {});
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn qconv_zero_input_passes_bias_through_activation() {
        let x = QuantizedTensor::new(vec![3, 3, 1], vec![0; 9], QuantParams::new(0.0, 1.0).unwrap()).unwrap();
        let k = quantize(&Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let out = QuantParams::new(-1.0, 1.0).unwrap();
        let y = qconv2d(&x, &k, &[-0.4], 1, Padding::Same, Some(out), |v| {
            v.iter_mut().for_each(|x| *x = Activation::Relu.apply(*x))
        })
        .unwrap();
        assert!(y.data().iter().all(|&b| b == out.quantize(0.0)));
    }

    #[test]
    fn qconv_patch_limit() {
        let x = quantize(&Tensor::filled(vec![1, 1, 4096], 1.0));
        let k = quantize(&Tensor::filled(vec![3, 3, 4096, 1], 1.0));
        let r = qconv2d(&x, &k, &[0.0], 1, Padding::Same, Some(QuantParams::new(0.0, 1.0).unwrap()), |_| {});
        assert!(matches!(r, Err(Error::Config { .. })));
        // 255 * 255 * 2^15 stays below i32::MAX
        assert!(255i64 * 255 * MAX_PATCH_LEN as i64 <= i32::MAX as i64);
    }

    /// Float reference: dequantize, convolve, activate, quantize.
    fn reference(
        x: &QuantizedTensor,
        k: &QuantizedTensor,
        b: &[f32],
        stride: usize,
        pad: Padding,
        out: QuantParams,
        act: Activation,
    ) -> QuantizedTensor {
        let y = conv2d(&dequantize(x), &dequantize(k), b, stride, pad).unwrap();
        quantize_with(&tensor::activate(&y, act), out)
    }

    #[test]
    fn qconv_matches_float_reference_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad, act) in &[
            (1, Padding::Same, Activation::Relu),
            (2, Padding::Same, Activation::Identity),
            (1, Padding::Valid, Activation::LeakyRelu),
        ] {
            let xf = random(vec![8, 8, 4], -0.5, 1.5, &mut rng);
            let kf = random(vec![3, 3, 4, 6], -0.3, 0.3, &mut rng);
            let b: Vec<f32> = (0..6).map(|_| rng.random_range(-0.2..0.2)).collect();
            let (x, k) = (quantize(&xf), quantize(&kf));
            let float_out = tensor::activate(&conv2d(&dequantize(&x), &dequantize(&k), &b, stride, pad).unwrap(), act);
            let out = QuantParams::of(float_out.data());
            let got = qconv2d(&x, &k, &b, stride, pad, Some(out), |v| v.iter_mut().for_each(|e| *e = act.apply(*e))).unwrap();
            let want = reference(&x, &k, &b, stride, pad, out, act);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((*g as i32 - *w as i32).abs() <= 1, "{g} vs {w}");
            }
            // dequantized result stays within 1.5 output steps of the float conv
            let deq = dequantize(&got);
            for (d, f) in deq.data().iter().zip(float_out.data()) {
                assert!((d - f).abs() <= out.scale() * 1.5 + 1e-5, "{d} vs {f}");
            }
        }
    }

    #[test]
    fn two_chained_qconvs_track_float_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let relu = |v: &mut [f32]| v.iter_mut().for_each(|e| *e = e.max(0.0));
        for _ in 0..5 {
            let x = random(vec![8, 8, 3], 0.0, 1.0, &mut rng);
            let k1 = random(vec![3, 3, 3, 5], -0.4, 0.4, &mut rng);
            let k2 = random(vec![3, 3, 5, 4], -0.4, 0.4, &mut rng);
            let b1 = vec![0.05; 5];
            let b2 = vec![-0.02; 4];
            let (qx, qk1, qk2) = (quantize(&x), quantize(&k1), quantize(&k2));
            // float chain on the dequantized operands defines the calibrated ranges
            let f1 = tensor::activate(&conv2d(&dequantize(&qx), &dequantize(&qk1), &b1, 1, Padding::Same).unwrap(), Activation::Relu);
            let f2 = tensor::activate(&conv2d(&f1, &dequantize(&qk2), &b2, 1, Padding::Same).unwrap(), Activation::Relu);
            let (p1, p2) = (QuantParams::of(f1.data()), QuantParams::of(f2.data()));
            let q1 = qconv2d(&qx, &qk1, &b1, 1, Padding::Same, Some(p1), relu).unwrap();
            let q2 = qconv2d(&q1, &qk2, &b2, 1, Padding::Same, Some(p2), relu).unwrap();
            let want = quantize_with(&f2, p2);
            for (g, w) in q2.data().iter().zip(want.data()) {
                assert!((*g as i32 - *w as i32).abs() <= 2, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn qmaxpool_matches_float_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = quantize(&random(vec![6, 6, 3], -1.0, 1.0, &mut rng));
        let got = qmaxpool2d(&x, 2, 2).unwrap();
        let want = quantize_with(&tensor::maxpool2d(&dequantize(&x), 2, 2).unwrap(), x.params());
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(v in proptest::collection::vec(-100.0f32..100.0, 1..200)) {
            let t = Tensor::new(vec![v.len()], v).unwrap();
            let q = quantize(&t);
            let bound = (q.params().max - q.params().min) as f64 / 510.0 + 1e-6;
            for (a, b) in dequantize(&q).data().iter().zip(t.data()) {
                prop_assert!(((*a as f64) - (*b as f64)).abs() <= bound);
            }
        }

        #[test]
        fn quantize_is_monotone(lo in -50.0f32..0.0, width in 0.01f32..100.0, a in 0.0f32..1.0, b in 0.0f32..1.0) {
            let p = QuantParams::new(lo, lo + width).unwrap();
            let (x, y) = (lo + a * width, lo + b * width);
            let (x, y) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(p.quantize(x) <= p.quantize(y));
        }

        #[test]
        fn bytes_survive_dequantize_requantize(width in 0.01f32..1000.0, frac in 0.0f32..1.0, bytes in proptest::collection::vec(any::<u8>(), 1..64)) {
            let p = QuantParams::new(-frac * width, (1.0 - frac) * width).unwrap();
            let q = QuantizedTensor::new(vec![bytes.len()], bytes, p).unwrap();
            let back = quantize_with(&dequantize(&q), p);
            prop_assert_eq!(back.data(), q.data());
            for v in dequantize(&q).data() {
                prop_assert!(*v >= p.min && *v <= p.max);
            }
        }
    }
}
