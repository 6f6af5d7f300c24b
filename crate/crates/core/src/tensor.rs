//! Dense float32 tensors and the float inference primitives.
//!
//! Activations are rank-3 `(height, width, channels)` and kernels are rank-4
//! `(kh, kw, in_channels, out_channels)`, both row-major. A spatial position's
//! channel vector is therefore contiguous, which is what the grid decoder
//! relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::config(format!("tensor dims must be >= 1, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::config(format!(
                "tensor dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "tensor dims must be >= 1");
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![value; len],
        }
    }

    /// Rank-3 activation constructor.
    pub fn from_hwc(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![height, width, channels], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
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

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.dims[1] + x) * self.dims[2] + c]
    }

    /// Channel vector of one spatial position of a rank-3 tensor.
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let c = self.dims[2];
        let start = (y * self.dims[1] + x) * c;
        &self.data[start..start + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::config(format!(
                "{what} must be rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Identity,
}

pub const LEAKY_SLOPE: f32 = 0.1;

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Spatial bookkeeping shared by the float, quantized and gradient conv paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (in_h, in_w, in_c): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::config("kernel dims must be >= 1"));
        }
        let (out_h, pad_top) = axis_geometry(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = axis_geometry(in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Length of one im2col row.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input row/col for output position and kernel tap, `None` when padded.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    /// True when every tap of output position `(oy, ox)` reads inside the input.
    #[inline]
    pub fn interior(&self, oy: usize, ox: usize) -> bool {
        let y0 = (oy * self.stride) as isize - self.pad_top as isize;
        let x0 = (ox * self.stride) as isize - self.pad_left as isize;
        y0 >= 0
            && x0 >= 0
            && y0 as usize + self.kh <= self.in_h
            && x0 as usize + self.kw <= self.in_w
    }
}

fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            // extra padding cell goes bottom/right
            Ok((out, needed / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::config(format!(
                    "kernel extent {kernel} exceeds input extent {input} under valid padding"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Fill `out` with im2col rows for output rows `[oy0, oy1)`. Padded taps get
/// `pad_value`.
pub(crate) fn im2col<T: Copy>(
    input: &[T],
    g: &ConvGeometry,
    oy0: usize,
    oy1: usize,
    pad_value: T,
    out: &mut Vec<T>,
) {
    let patch = g.patch_len();
    out.clear();
    out.reserve((oy1 - oy0) * g.out_w * patch);
    for oy in oy0..oy1 {
        for ox in 0..g.out_w {
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                        out.extend(std::iter::repeat_n(pad_value, g.in_c));
                    } else {
                        let start = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        out.extend_from_slice(&input[start..start + g.in_c]);
                    }
                }
            }
        }
    }
}

/// Scatter-add im2col-shaped gradients back onto an input-shaped buffer.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let mut row = 0;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = row * g.patch_len();
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = base + (ky * g.kw + kx) * g.in_c;
                        let dst = (iy * g.in_w + ix) * g.in_c;
                        for (d, s) in out[dst..dst + g.in_c].iter_mut().zip(&cols[src..src + g.in_c]) {
                            *d += *s;
                        }
                    }
                }
            }
            row += 1;
        }
    }
}

/// Row-major single-precision GEMM: `c = a(m×k) · b(k×n) + beta·c`.
/// Strides are (row, col) element strides, so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output rows per work item so one im2col block stays around 1M floats.
pub(crate) fn rows_per_block(g: &ConvGeometry) -> usize {
    let per_row = (g.out_w * g.patch_len()).max(1);
    let by_mem = (1 << 20) / per_row;
    let by_workers = g.out_h.div_ceil(par::workers() * 2);
    by_mem.min(by_workers).clamp(1, g.out_h)
}

pub(crate) fn check_conv_shapes(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<()> {
    input.expect_rank(3, "conv input")?;
    weights.expect_rank(4, "conv kernel")?;
    let in_c = input.channels();
    if weights.dims()[2] != in_c {
        return Err(Error::config(format!(
            "kernel expects {} input channels, input has {in_c}",
            weights.dims()[2]
        )));
    }
    if bias.len() != weights.dims()[3] {
        return Err(Error::config(format!(
            "bias length {} != kernel output channels {}",
            bias.len(),
            weights.dims()[3]
        )));
    }
    Ok(())
}

/// 2-D convolution with zero padding, `out = conv(input, weights) + bias`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize, padding: Padding) -> Result<Tensor> {
    check_conv_shapes(input, weights, bias)?;
    let wd = weights.dims();
    let g = ConvGeometry::new(
        (input.height(), input.width(), input.channels()),
        (wd[0], wd[1]),
        stride,
        padding,
    )?;
    let out_c = wd[3];
    let mut out = vec![0.0f32; g.out_h * g.out_w * out_c];
    let patch = g.patch_len();

    if g.is_pointwise() {
        fill_bias(&mut out, bias);
        let m = g.out_h * g.out_w;
        gemm(m, patch, out_c, input.data(), (patch, 1), weights.data(), (out_c, 1), 1.0, &mut out, (out_c, 1));
    } else {
        let rows = rows_per_block(&g);
        let block_len = rows * g.out_w * out_c;
        par::for_each_chunk_mut(&mut out, block_len, |bi, block| {
            let oy0 = bi * rows;
            let oy1 = (oy0 + rows).min(g.out_h);
            let mut cols = Vec::new();
            im2col(input.data(), &g, oy0, oy1, 0.0, &mut cols);
            fill_bias(block, bias);
            let m = (oy1 - oy0) * g.out_w;
            gemm(m, patch, out_c, &cols, (patch, 1), weights.data(), (out_c, 1), 1.0, block, (out_c, 1));
        });
    }
    Tensor::new(vec![g.out_h, g.out_w, out_c], out)
}

fn fill_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

/// Pooling geometry: windows start every `stride` cells and are clipped at
/// the border, so `out = ceil((in - size) / stride) + 1`.
pub(crate) fn pool_extent(input: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(Error::config("pool size and stride must be >= 1"));
    }
    if size > input {
        return Err(Error::config(format!("pool window {size} larger than input extent {input}")));
    }
    Ok((input - size).div_ceil(stride) + 1)
}

pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool2d_indexed(input, size, stride)?.0)
}

/// Max pooling that also reports, per output element, the flat input index
/// that won (first occurrence on ties).
pub(crate) fn maxpool2d_indexed(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    input.expect_rank(3, "pool input")?;
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let oh = pool_extent(h, size, stride)?;
    let ow = pool_extent(w, size, stride)?;
    let src = input.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    let mut idx = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for y in oy * stride..(oy * stride + size).min(h) {
                for x in ox * stride..(ox * stride + size).min(w) {
                    let ibase = (y * w + x) * c;
                    for ch in 0..c {
                        let v = src[ibase + ch];
                        if v > out[obase + ch] || (y == oy * stride && x == ox * stride) {
                            out[obase + ch] = v;
                            idx[obase + ch] = (ibase + ch) as u32;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, idx))
}

pub fn activate(input: &Tensor, kind: Activation) -> Tensor {
    let mut out = input.clone();
    activate_in_place(&mut out, kind);
    out
}

pub fn activate_in_place(t: &mut Tensor, kind: Activation) {
    if kind == Activation::Identity {
        return;
    }
    for v in t.data_mut() {
        *v = kind.apply(*v);
    }
}

/// Numerically stable softmax.
pub fn softmax(input: &[f32]) -> Vec<f32> {
    let mut out = input.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
