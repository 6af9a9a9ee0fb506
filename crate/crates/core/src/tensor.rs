//! Dense NHWC tensors and the convolution/activation kernels the detector
//! backbone is built from, in f32 and int8 arithmetic.
//!
//! All kernels are pure functions: no shared state, bit-identical outputs for
//! identical inputs. Convolutions are direct nested loops on purpose — the
//! memory profile of an inference must mirror what a microcontroller arena
//! would see, so there is no im2col scratch and no FFT path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 4-D array, row-major `(n, h, w, c)`, 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            shape: [n, h, w, c],
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let want = shape.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{want} elements for {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(n, y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, y: usize, x: usize, c: usize) -> &mut f32 {
        let i = self.idx(n, y, x, c);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape_str(&self) -> String {
        format!(
            "({}, {}, {}, {})",
            self.shape[0], self.shape[1], self.shape[2], self.shape[3]
        )
    }
}

/// Scale/zero-point pair mapping int8 code `q` to the real value
/// `scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("quant scale must be positive, got {scale}")));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::Config(format!(
                "zero_point must lie in [-128, 127], got {zero_point}"
            )));
        }
        Ok(QuantParams { scale, zero_point })
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }

    /// Quantize one real value: `zero_point + round(v / scale)`, clamped to
    /// the int8 range. Rounding is half away from zero, computed branch-free
    /// as `trunc(x + copysign(0.5, x))` so the loop around it vectorizes.
    #[inline]
    pub fn quantize(&self, v: f32) -> i8 {
        let q = self.zero_point as f32 + v / self.scale;
        (q + 0.5f32.copysign(q)).clamp(-128.0, 127.0) as i8
    }
}

/// Dense 4-D array of int8 codes plus the quantization parameters that give
/// them real-valued meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: [usize; 4],
    data: Vec<i8>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn from_vec(shape: [usize; 4], data: Vec<i8>, params: QuantParams) -> Result<Self> {
        let want = shape.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::shape(
                "QuantTensor::from_vec",
                format!("{want} elements for {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(QuantTensor { shape, data, params })
    }

    pub fn filled(shape: [usize; 4], q: i8, params: QuantParams) -> Self {
        QuantTensor {
            shape,
            data: vec![q; shape.iter().product()],
            params,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    /// Real-valued view of the whole tensor.
    pub fn dequantize(&self) -> Tensor {
        let data = self.data.iter().map(|&q| self.params.dequantize(q)).collect();
        Tensor {
            shape: self.shape,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding (zero-point padding in int8) sized so the output spatial
    /// dims are `ceil(in / stride)`. Extra padding goes to the bottom/right.
    Same,
    /// No padding; output dims are `floor((in - k) / stride) + 1`.
    Valid,
}

/// Output spatial length and leading pad for one axis.
fn conv_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::shape(
                    "conv (valid padding)",
                    format!("input >= kernel ({kernel})"),
                    format!("input {input}"),
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// 2-D cross-correlation plus bias. `weights` has shape `(kh, kw, cin, cout)`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let [kh, kw, cin, cout] = weights.shape();
    if input.c() != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} (weights {})", weights.shape_str()),
            format!("input {}", input.shape_str()),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {cout}"),
            format!("bias length {}", bias.len()),
        ));
    }
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;

    let mut out = Tensor::zeros(input.n(), oh, ow, cout);
    let wdata = weights.data();
    for n in 0..input.n() {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = out.idx(n, oy, ox, 0);
                let acc = &mut out.data[base..base + cout];
                acc.copy_from_slice(bias);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_y as isize;
                    if iy < 0 || iy as usize >= input.h() {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_x as isize;
                        if ix < 0 || ix as usize >= input.w() {
                            continue;
                        }
                        let in_base = input.idx(n, iy as usize, ix as usize, 0);
                        let in_row = &input.data[in_base..in_base + cin];
                        let w_base = ((ky * kw + kx) * cin) * cout;
                        for (ci, &v) in in_row.iter().enumerate() {
                            let w_row = &wdata[w_base + ci * cout..w_base + (ci + 1) * cout];
                            for (a, &w) in acc.iter_mut().zip(w_row) {
                                *a += v * w;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise 2-D cross-correlation: channel `i` of the output depends only on
/// channel `i` of the input. `weights` has shape `(kh, kw, c, 1)`.
pub fn depthwise_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let [kh, kw, c, mult] = weights.shape();
    if mult != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            "channel multiplier 1",
            format!("weights {}", weights.shape_str()),
        ));
    }
    if input.c() != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input channels {c} (weights {})", weights.shape_str()),
            format!("input {}", input.shape_str()),
        ));
    }
    if bias.len() != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("bias length {c}"),
            format!("bias length {}", bias.len()),
        ));
    }
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;

    let mut out = Tensor::zeros(input.n(), oh, ow, c);
    let wdata = weights.data();
    for n in 0..input.n() {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = out.idx(n, oy, ox, 0);
                let acc = &mut out.data[base..base + c];
                acc.copy_from_slice(bias);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_y as isize;
                    if iy < 0 || iy as usize >= input.h() {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_x as isize;
                        if ix < 0 || ix as usize >= input.w() {
                            continue;
                        }
                        let in_base = input.idx(n, iy as usize, ix as usize, 0);
                        let in_row = &input.data[in_base..in_base + c];
                        let w_row = &wdata[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                        for ((a, &v), &w) in acc.iter_mut().zip(in_row).zip(w_row) {
                            *a += v * w;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Clamp every element to `[0, 6]`.
pub fn relu6(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.clamp(0.0, 6.0)).collect();
    Tensor {
        shape: input.shape,
        data,
    }
}

/// Elementwise sum of two tensors of identical shape.
pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "residual_add",
            a.shape_str(),
            b.shape_str(),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}

/// Per-cell softmax over the channel axis of a `(1, gh, gw, k)` logit map.
/// Each cell's `k` outputs are positive and sum to 1.
pub fn softmax_per_cell(logits: &Tensor) -> Result<Tensor> {
    let k = logits.c();
    if k < 2 {
        return Err(Error::Config(format!(
            "softmax_per_cell needs k >= 2 channels (background + classes), got {k}"
        )));
    }
    let mut out = logits.clone();
    for cell in out.data.chunks_mut(k) {
        let max = cell.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in cell.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in cell.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Guard against i32 accumulator overflow: with int8 operands every tap is
/// bounded by 255 * 255, so the tap count decides.
fn check_accumulator(taps: usize, bias: &[i32]) -> Result<()> {
    let max_bias = bias.iter().map(|b| b.unsigned_abs() as i64).max().unwrap_or(0);
    let bound = taps as i64 * 255 * 255 + max_bias;
    if bound >= i32::MAX as i64 {
        return Err(Error::Internal(format!(
            "int8 accumulator bound {bound} exceeds i32 range ({taps} taps)"
        )));
    }
    Ok(())
}

/// Center int8 codes on their zero point, widening to i16.
fn center_i16(data: &[i8], zero_point: i32) -> Vec<i16> {
    data.iter().map(|&q| (q as i32 - zero_point) as i16).collect()
}

// The integer hot loops are compiled twice, once for the baseline target and
// once with AVX2 enabled, selected once per convolution by a small kernel
// table. Integer SIMD is exact, so both paths produce bit-identical outputs.
// Each leaf processes one whole kernel tap so the call overhead amortizes.

/// One tap of the broadcast-form convolution: fan each of `cin` input values
/// across the `cout`-wide accumulator row. Wins when `cin` is narrow.
#[inline(always)]
fn tap_broadcast_body(in_row: &[i16], w_tap: &[i16], acc: &mut [i32]) {
    let cout = acc.len();
    for (ci, &v) in in_row.iter().enumerate() {
        let v = v as i32;
        let w_row = &w_tap[ci * cout..(ci + 1) * cout];
        for (a, &w) in acc.iter_mut().zip(w_row) {
            *a += v * w as i32;
        }
    }
}

/// One tap of the reduction-form convolution against weights transposed to
/// `(cout, cin)` rows: a widening dot per output channel. Wins when `cin` is
/// wide.
#[inline(always)]
fn tap_dot_body(in_row: &[i16], w_tap: &[i16], acc: &mut [i32]) {
    let cin = in_row.len();
    for (co, a) in acc.iter_mut().enumerate() {
        let w_row = &w_tap[co * cin..(co + 1) * cin];
        let mut dot = 0i32;
        for i in 0..cin {
            dot += in_row[i] as i32 * w_row[i] as i32;
        }
        *a += dot;
    }
}

/// One depthwise tap: per-channel multiply-accumulate, centering the raw
/// int8 input on its zero point as it streams through.
#[inline(always)]
fn tap_depthwise_body(in_row: &[i8], zp: i32, w_row: &[i16], acc: &mut [i32]) {
    for (a, (&x, &w)) in acc.iter_mut().zip(in_row.iter().zip(w_row)) {
        *a += (x as i32 - zp) * w as i32;
    }
}


/// Requantize one accumulator row: round half away from zero on the f64
/// product, then clamp into int8. Rounding is `trunc(x + copysign(0.5, x))`,
/// which unlike `f64::round` compiles to branch-free vector code.
#[inline(always)]
fn requantize_row_body(acc: &[i32], multiplier: f64, zp: i32, out: &mut [i8]) {
    for (o, &a) in out.iter_mut().zip(acc) {
        let p = a as f64 * multiplier;
        let v = (p + 0.5f64.copysign(p)) as i32 + zp;
        *o = v.clamp(-128, 127) as i8;
    }
}

/// Table of leaf kernels, either baseline or AVX2 codegen of the same bodies.
#[derive(Copy, Clone)]
struct Int8Kernels {
    tap_broadcast: fn(&[i16], &[i16], &mut [i32]),
    tap_dot: fn(&[i16], &[i16], &mut [i32]),
    tap_depthwise: fn(&[i8], i32, &[i16], &mut [i32]),
    requantize_row: fn(&[i32], f64, i32, &mut [i8]),
    /// Paired multiply-add kernel available (prepared-weight fast path).
    use_packed: bool,
}

fn tap_broadcast_baseline(a: &[i16], b: &[i16], acc: &mut [i32]) {
    tap_broadcast_body(a, b, acc)
}
fn tap_dot_baseline(a: &[i16], b: &[i16], acc: &mut [i32]) {
    tap_dot_body(a, b, acc)
}
fn tap_depthwise_baseline(a: &[i8], zp: i32, b: &[i16], acc: &mut [i32]) {
    tap_depthwise_body(a, zp, b, acc)
}
fn requantize_row_baseline(acc: &[i32], m: f64, zp: i32, out: &mut [i8]) {
    requantize_row_body(acc, m, zp, out)
}

const BASELINE_KERNELS: Int8Kernels = Int8Kernels {
    tap_broadcast: tap_broadcast_baseline,
    tap_dot: tap_dot_baseline,
    tap_depthwise: tap_depthwise_baseline,
    requantize_row: requantize_row_baseline,
    use_packed: false,
};

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    #[target_feature(enable = "avx2")]
    unsafe fn tap_broadcast_impl(a: &[i16], b: &[i16], acc: &mut [i32]) {
        tap_broadcast_body(a, b, acc)
    }
    #[target_feature(enable = "avx2")]
    unsafe fn tap_dot_impl(a: &[i16], b: &[i16], acc: &mut [i32]) {
        tap_dot_body(a, b, acc)
    }
    #[target_feature(enable = "avx2")]
    unsafe fn tap_depthwise_impl(a: &[i8], zp: i32, b: &[i16], acc: &mut [i32]) {
        tap_depthwise_body(a, zp, b, acc)
    }
    #[target_feature(enable = "avx2")]
    unsafe fn requantize_row_impl(acc: &[i32], m: f64, zp: i32, out: &mut [i8]) {
        requantize_row_body(acc, m, zp, out)
    }

    // entry points are plain fns so they fit the kernel table; they are only
    // reachable through `kernels()` after the runtime feature check
    pub(super) fn tap_broadcast(a: &[i16], b: &[i16], acc: &mut [i32]) {
        unsafe { tap_broadcast_impl(a, b, acc) }
    }
    pub(super) fn tap_dot(a: &[i16], b: &[i16], acc: &mut [i32]) {
        unsafe { tap_dot_impl(a, b, acc) }
    }
    pub(super) fn tap_depthwise(a: &[i8], zp: i32, b: &[i16], acc: &mut [i32]) {
        unsafe { tap_depthwise_impl(a, zp, b, acc) }
    }
    pub(super) fn requantize_row(acc: &[i32], m: f64, zp: i32, out: &mut [i8]) {
        unsafe { requantize_row_impl(acc, m, zp, out) }
    }
}

fn kernels() -> Int8Kernels {
    #[cfg(target_arch = "x86_64")]
    {
        static AVX2: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        if *AVX2.get_or_init(|| std::arch::is_x86_feature_detected!("avx2")) {
            return Int8Kernels {
                tap_broadcast: avx2::tap_broadcast,
                tap_dot: avx2::tap_dot,
                tap_depthwise: avx2::tap_depthwise,
                requantize_row: avx2::requantize_row,
                use_packed: true,
            };
        }
    }
    BASELINE_KERNELS
}

/// Depthwise driver over the raw int8 plane; the tap closure centers (and
/// optionally activation-maps) input values on the fly.
#[allow(clippy::too_many_arguments)]
fn depthwise_int8_driver(
    in8: &[i8],
    in_h: usize,
    in_w: usize,
    c: usize,
    w16: &[i16],
    bias: &[i32],
    kh: usize,
    kw: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
    out_h: usize,
    out_w: usize,
    multiplier: f64,
    zp_out: i32,
    out: &mut [i8],
    tap: impl Fn(&[i8], &[i16], &mut [i32]),
    requant: fn(&[i32], f64, i32, &mut [i8]),
) {
    let mut acc = vec![0i32; c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_y as isize;
                if iy < 0 || iy as usize >= in_h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_x as isize;
                    if ix < 0 || ix as usize >= in_w {
                        continue;
                    }
                    let in_base = (iy as usize * in_w + ix as usize) * c;
                    tap(
                        &in8[in_base..in_base + c],
                        &w16[(ky * kw + kx) * c..(ky * kw + kx + 1) * c],
                        &mut acc,
                    );
                }
            }
            let out_base = (oy * out_w + ox) * c;
            requant(&acc, multiplier, zp_out, &mut out[out_base..out_base + c]);
        }
    }
}

/// Shared driver for the int8 convolution variants: walks output positions
/// and in-bounds taps, delegating the dense work to the leaf kernels.
#[allow(clippy::too_many_arguments)]
fn conv_int8_driver(
    in16: &[i16],
    in_h: usize,
    in_w: usize,
    cin: usize,
    weights: &[i16],
    bias: &[i32],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
    out_h: usize,
    out_w: usize,
    multiplier: f64,
    zp_out: i32,
    out: &mut [i8],
    tap: fn(&[i16], &[i16], &mut [i32]),
    tap_weight_len: usize,
    requant: fn(&[i32], f64, i32, &mut [i8]),
) {
    let mut acc = vec![0i32; cout];
    for oy in 0..out_h {
        for ox in 0..out_w {
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_y as isize;
                if iy < 0 || iy as usize >= in_h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_x as isize;
                    if ix < 0 || ix as usize >= in_w {
                        continue;
                    }
                    let in_base = (iy as usize * in_w + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * tap_weight_len;
                    tap(
                        &in16[in_base..in_base + cin],
                        &weights[w_base..w_base + tap_weight_len],
                        &mut acc,
                    );
                }
            }
            let out_base = (oy * out_w + ox) * cout;
            requant(&acc, multiplier, zp_out, &mut out[out_base..out_base + cout]);
        }
    }
}

/// Above this input width the reduction form beats the broadcast form.
const DOT_FORM_MIN_CIN: usize = 48;

// --- prepared conv state -------------------------------------------------------
//
// Model inference prepares each conv layer once: weights are centered on
// their zero point, padded, and interleaved as (ci, ci+1) pairs per block of
// eight output channels, the layout consumed by the paired widening
// multiply-add kernel. Preparation never changes results; every path
// accumulates the same i32 values.

/// Conv weights packed for the paired kernel. Layout per tap:
/// `[cout_pad/8 blocks][cin_pad/2 pairs][8 lanes x 2 i16]`, zero-padded
/// where `cin`/`cout` fall short.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PackedConvWeights {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub cin_pad: usize,
    pub cout_pad: usize,
    /// Packed pairs, `kh*kw * (cout_pad/8) * (cin_pad/2) * 16` i16 values.
    pub data: Vec<i16>,
    /// Plain centered weights in the public-op layouts, for targets without
    /// the paired kernel.
    pub plain: Vec<i16>,
    /// True when `plain` is in transposed `(tap, cout, cin)` row order.
    pub plain_transposed: bool,
}

pub(crate) fn pack_conv_weights(weights: &QuantTensor) -> PackedConvWeights {
    let [kh, kw, cin, cout] = weights.shape();
    let cin_pad = cin.next_multiple_of(2);
    let cout_pad = cout.next_multiple_of(8);
    let wz = weights.params.zero_point;
    let at = |ky: usize, kx: usize, ci: usize, co: usize| -> i16 {
        if ci >= cin || co >= cout {
            return 0;
        }
        (weights.data()[((ky * kw + kx) * cin + ci) * cout + co] as i32 - wz) as i16
    };
    let mut data = Vec::with_capacity(kh * kw * (cout_pad / 8) * (cin_pad / 2) * 16);
    for ky in 0..kh {
        for kx in 0..kw {
            for blk in 0..cout_pad / 8 {
                for pair in 0..cin_pad / 2 {
                    for lane in 0..8 {
                        let co = blk * 8 + lane;
                        data.push(at(ky, kx, 2 * pair, co));
                        data.push(at(ky, kx, 2 * pair + 1, co));
                    }
                }
            }
        }
    }
    let use_dot = cin >= DOT_FORM_MIN_CIN;
    let plain = if use_dot {
        let mut t = vec![0i16; weights.data().len()];
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..cin {
                    for co in 0..cout {
                        t[((ky * kw + kx) * cout + co) * cin + ci] = at(ky, kx, ci, co);
                    }
                }
            }
        }
        t
    } else {
        center_i16(weights.data(), wz)
    };
    PackedConvWeights {
        kh,
        kw,
        cin,
        cout,
        cin_pad,
        cout_pad,
        data,
        plain,
        plain_transposed: use_dot,
    }
}

/// Centered-i16 view of a relu6 LUT for the consumer of a fused relu6: maps
/// a pre-activation code straight to the consumer's centered input value.
pub(crate) fn centered_lut16(lut8: &[i8; 256], consumer_zp: i32) -> Vec<i16> {
    lut8.iter().map(|&q| (q as i32 - consumer_zp) as i16).collect()
}

/// [`center_pairs`] with every code first mapped through a fused-activation
/// LUT; bit-identical to materializing the activation then centering.
pub(crate) fn center_pairs_lut(data: &[i8], lut16: &[i16], cin: usize, cin_pad: usize) -> Vec<i32> {
    let pixels = data.len() / cin;
    let mut out = vec![0i32; pixels * cin_pad / 2];
    for px in 0..pixels {
        let src = &data[px * cin..(px + 1) * cin];
        let dst = &mut out[px * cin_pad / 2..(px + 1) * cin_pad / 2];
        for (p, slot) in dst.iter_mut().enumerate() {
            let lo = lut16[(src[2 * p] as i32 + 128) as usize] as u16 as u32;
            let hi = if 2 * p + 1 < cin {
                lut16[(src[2 * p + 1] as i32 + 128) as usize] as u16 as u32
            } else {
                0
            };
            *slot = (lo | (hi << 16)) as i32;
        }
    }
    out
}

/// Center input codes and emit `(lo, hi)` i16 pairs as i32 words, channel
/// count padded with zeros to `cin_pad`.
pub(crate) fn center_pairs(data: &[i8], zero_point: i32, cin: usize, cin_pad: usize) -> Vec<i32> {
    let pixels = data.len() / cin;
    let mut out = vec![0i32; pixels * cin_pad / 2];
    for px in 0..pixels {
        let src = &data[px * cin..(px + 1) * cin];
        let dst = &mut out[px * cin_pad / 2..(px + 1) * cin_pad / 2];
        for (p, slot) in dst.iter_mut().enumerate() {
            let lo = (src[2 * p] as i32 - zero_point) as i16 as u16 as u32;
            let hi = if 2 * p + 1 < cin {
                (src[2 * p + 1] as i32 - zero_point) as i16 as u16 as u32
            } else {
                0
            };
            *slot = (lo | (hi << 16)) as i32;
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
mod packed_avx2 {
    #[cfg(target_arch = "x86_64")]
    use std::arch::x86_64::*;

    /// One tap: for each block of eight output channels, accumulate the
    /// paired widening multiply-add of the input pairs against the packed
    /// weight rows.
    ///
    /// Safety: caller verified AVX2 at runtime; slice lengths are consistent
    /// by the packing layout (`w.len() == pairs.len() * acc.len() * 2`).
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn madd_tap(pairs: &[i32], w: &[i16], acc: &mut [i32]) {
        let blocks = acc.len() / 8;
        let n_pairs = pairs.len();
        debug_assert_eq!(w.len(), blocks * n_pairs * 16);
        for blk in 0..blocks {
            let acc_ptr = acc.as_mut_ptr().add(blk * 8) as *mut __m256i;
            let mut a = _mm256_loadu_si256(acc_ptr as *const __m256i);
            let w_base = w.as_ptr().add(blk * n_pairs * 16);
            for (p, &pair) in pairs.iter().enumerate() {
                let v = _mm256_set1_epi32(pair);
                let wv = _mm256_loadu_si256(w_base.add(p * 16) as *const __m256i);
                a = _mm256_add_epi32(a, _mm256_madd_epi16(v, wv));
            }
            _mm256_storeu_si256(acc_ptr, a);
        }
    }
}

/// Convolution over prepared weights; bit-identical to the public
/// [`conv2d_int8`] op, including when a preceding relu6 is fused in via
/// `input_lut16`. `semantic_in` is the quantization of the logical input
/// (the fused activation's output when a LUT is present).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_int8_prepared(
    input: &QuantTensor,
    semantic_in: QuantParams,
    input_lut16: Option<&[i16]>,
    packed: &PackedConvWeights,
    bias32: &[i32],
    out_params: QuantParams,
    weight_scale: f32,
    stride: usize,
    padding: Padding,
) -> Result<QuantTensor> {
    let (kh, kw, cin, cout) = (packed.kh, packed.kw, packed.cin, packed.cout);
    if input.c() != cin {
        return Err(Error::shape(
            "conv2d_int8_prepared",
            format!("input channels {cin}"),
            format!("input channels {}", input.c()),
        ));
    }
    check_accumulator(kh * kw * cin, bias32)?;
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;
    let multiplier = semantic_in.scale as f64 * weight_scale as f64 / out_params.scale as f64;
    let k = kernels();
    let mut out = QuantTensor::filled([input.n(), oh, ow, cout], 0, out_params);

    #[cfg(target_arch = "x86_64")]
    if k.use_packed {
        let pairs_per_px = packed.cin_pad / 2;
        let tap_w = (packed.cout_pad / 8) * pairs_per_px * 16;
        let in_pairs = match input_lut16 {
            Some(lut) => center_pairs_lut(input.data(), lut, cin, packed.cin_pad),
            None => center_pairs(input.data(), semantic_in.zero_point, cin, packed.cin_pad),
        };
        let plane_px = input.h() * input.w();
        let plane_out = oh * ow * cout;
        let mut acc = vec![0i32; packed.cout_pad];
        for n in 0..input.n() {
            let pairs_plane = &in_pairs[n * plane_px * pairs_per_px..(n + 1) * plane_px * pairs_per_px];
            let out_plane = &mut out.data[n * plane_out..(n + 1) * plane_out];
            for oy in 0..oh {
                for ox in 0..ow {
                    acc[..cout].copy_from_slice(bias32);
                    acc[cout..].fill(0);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy as usize >= input.h() {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix as usize >= input.w() {
                                continue;
                            }
                            let px = iy as usize * input.w() + ix as usize;
                            let p_base = px * pairs_per_px;
                            let w_base = (ky * kw + kx) * tap_w;
                            // feature presence established by `kernels()`
                            unsafe {
                                packed_avx2::madd_tap(
                                    &pairs_plane[p_base..p_base + pairs_per_px],
                                    &packed.data[w_base..w_base + tap_w],
                                    &mut acc,
                                );
                            }
                        }
                    }
                    let out_base = (oy * ow + ox) * cout;
                    (k.requantize_row)(
                        &acc[..cout],
                        multiplier,
                        out_params.zero_point,
                        &mut out_plane[out_base..out_base + cout],
                    );
                }
            }
        }
        return Ok(out);
    }

    // plain fallback over the prepared (already centered) weights
    let in16: Vec<i16> = match input_lut16 {
        Some(lut) => input.data().iter().map(|&q| lut[(q as i32 + 128) as usize]).collect(),
        None => center_i16(input.data(), semantic_in.zero_point),
    };
    let tap = if packed.plain_transposed { k.tap_dot } else { k.tap_broadcast };
    let plane_in = input.h() * input.w() * cin;
    let plane_out = oh * ow * cout;
    for n in 0..input.n() {
        conv_int8_driver(
            &in16[n * plane_in..(n + 1) * plane_in],
            input.h(),
            input.w(),
            cin,
            &packed.plain,
            bias32,
            kh,
            kw,
            cout,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
            multiplier,
            out_params.zero_point,
            &mut out.data[n * plane_out..(n + 1) * plane_out],
            tap,
            cin * cout,
            k.requantize_row,
        );
    }
    Ok(out)
}

/// Int8 convolution. Accumulation is exact in i32 over zero-point-centered
/// operands; `bias32` is expressed at scale `input.scale * weights.scale`;
/// the accumulator is requantized to `out_params` rounding half away from
/// zero. "Same" padding pads with the input zero point, which contributes
/// nothing to the centered accumulator.
pub fn conv2d_int8(
    input: &QuantTensor,
    weights: &QuantTensor,
    bias32: &[i32],
    out_params: QuantParams,
    stride: usize,
    padding: Padding,
) -> Result<QuantTensor> {
    let [kh, kw, cin, cout] = weights.shape();
    if input.c() != cin {
        return Err(Error::shape(
            "conv2d_int8",
            format!("input channels {cin}"),
            format!("input channels {}", input.c()),
        ));
    }
    if bias32.len() != cout {
        return Err(Error::shape(
            "conv2d_int8",
            format!("bias length {cout}"),
            format!("bias length {}", bias32.len()),
        ));
    }
    check_accumulator(kh * kw * cin, bias32)?;
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;
    let multiplier = input.params.scale as f64 * weights.params.scale as f64 / out_params.scale as f64;

    let in16 = center_i16(&input.data, input.params.zero_point);
    let use_dot = cin >= DOT_FORM_MIN_CIN;
    let w16 = if use_dot {
        // per-tap transpose to (cout, cin) rows so each output channel
        // reduces a contiguous slice
        let mut t = vec![0i16; weights.data.len()];
        let wz = weights.params.zero_point;
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..cin {
                    for co in 0..cout {
                        let src = ((ky * kw + kx) * cin + ci) * cout + co;
                        let dst = ((ky * kw + kx) * cout + co) * cin + ci;
                        t[dst] = (weights.data[src] as i32 - wz) as i16;
                    }
                }
            }
        }
        t
    } else {
        center_i16(&weights.data, weights.params.zero_point)
    };

    let k = kernels();
    let tap = if use_dot { k.tap_dot } else { k.tap_broadcast };
    let mut out = QuantTensor::filled([input.n(), oh, ow, cout], 0, out_params);
    let plane_in = input.h() * input.w() * cin;
    let plane_out = oh * ow * cout;
    for n in 0..input.n() {
        conv_int8_driver(
            &in16[n * plane_in..(n + 1) * plane_in],
            input.h(),
            input.w(),
            cin,
            &w16,
            bias32,
            kh,
            kw,
            cout,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
            multiplier,
            out_params.zero_point,
            &mut out.data[n * plane_out..(n + 1) * plane_out],
            tap,
            cin * cout,
            k.requantize_row,
        );
    }
    Ok(out)
}

/// Int8 depthwise convolution; same numeric contract as [`conv2d_int8`].
pub fn depthwise_conv2d_int8(
    input: &QuantTensor,
    weights: &QuantTensor,
    bias32: &[i32],
    out_params: QuantParams,
    stride: usize,
    padding: Padding,
) -> Result<QuantTensor> {
    let [kh, kw, c, mult] = weights.shape();
    if mult != 1 || input.c() != c {
        return Err(Error::shape(
            "depthwise_conv2d_int8",
            format!("weights (kh, kw, {}, 1)", input.c()),
            format!("weights ({kh}, {kw}, {c}, {mult})"),
        ));
    }
    if bias32.len() != c {
        return Err(Error::shape(
            "depthwise_conv2d_int8",
            format!("bias length {c}"),
            format!("bias length {}", bias32.len()),
        ));
    }
    check_accumulator(kh * kw, bias32)?;
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;
    let multiplier = input.params.scale as f64 * weights.params.scale as f64 / out_params.scale as f64;

    let w16 = center_i16(&weights.data, weights.params.zero_point);

    let k = kernels();
    let mut out = QuantTensor::filled([input.n(), oh, ow, c], 0, out_params);
    let plane_in = input.h() * input.w() * c;
    let plane_out = oh * ow * c;
    let zp = input.params.zero_point;
    for n in 0..input.n() {
        depthwise_int8_driver(
            &input.data[n * plane_in..(n + 1) * plane_in],
            input.h(),
            input.w(),
            c,
            &w16,
            bias32,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
            multiplier,
            out_params.zero_point,
            &mut out.data[n * plane_out..(n + 1) * plane_out],
            |a, w, acc| (k.tap_depthwise)(a, zp, w, acc),
            k.requantize_row,
        );
    }
    Ok(out)
}

/// Lookup table mapping every input code through clamp-to-`[0, 6]` and
/// requantization into `out_params`.
pub(crate) fn build_relu6_lut(in_params: QuantParams, out_params: QuantParams) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        let q = i as i32 - 128;
        let real = in_params.scale * (q - in_params.zero_point) as f32;
        *slot = out_params.quantize(real.clamp(0.0, 6.0));
    }
    lut
}

pub(crate) fn relu6_int8_lut(input: &QuantTensor, lut: &[i8; 256], out_params: QuantParams) -> QuantTensor {
    let data = input.data.iter().map(|&q| lut[(q as i32 + 128) as usize]).collect();
    QuantTensor {
        shape: input.shape,
        data,
        params: out_params,
    }
}

/// Int8 relu6: clamp to the codes representing 0.0 and 6.0, then requantize
/// into `out_params`. Implemented as a 256-entry lookup so the hot path does
/// no float work per element.
pub fn relu6_int8(input: &QuantTensor, out_params: QuantParams) -> QuantTensor {
    let lut = build_relu6_lut(input.params, out_params);
    relu6_int8_lut(input, &lut, out_params)
}

/// Depthwise convolution over prepared (centered) weights; bit-identical to
/// [`depthwise_conv2d_int8`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_conv2d_int8_prepared(
    input: &QuantTensor,
    semantic_in: QuantParams,
    w16: &[i16],
    kh: usize,
    kw: usize,
    bias32: &[i32],
    out_params: QuantParams,
    weight_scale: f32,
    stride: usize,
    padding: Padding,
) -> Result<QuantTensor> {
    let c = input.c();
    check_accumulator(kh * kw, bias32)?;
    let (oh, pad_y) = conv_axis(input.h(), kh, stride, padding)?;
    let (ow, pad_x) = conv_axis(input.w(), kw, stride, padding)?;
    let multiplier = semantic_in.scale as f64 * weight_scale as f64 / out_params.scale as f64;
    let k = kernels();
    let mut out = QuantTensor::filled([input.n(), oh, ow, c], 0, out_params);
    let plane_in = input.h() * input.w() * c;
    let plane_out = oh * ow * c;
    let zp = semantic_in.zero_point;
    for n in 0..input.n() {
        depthwise_int8_driver(
            &input.data[n * plane_in..(n + 1) * plane_in],
            input.h(),
            input.w(),
            c,
            w16,
            bias32,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
            multiplier,
            out_params.zero_point,
            &mut out.data[n * plane_out..(n + 1) * plane_out],
            |a, w, acc| (k.tap_depthwise)(a, zp, w, acc),
            k.requantize_row,
        );
    }
    Ok(out)
}

/// Int8 residual add: dequantize both operands, sum, requantize.
pub fn residual_add_int8(a: &QuantTensor, b: &QuantTensor, out_params: QuantParams) -> Result<QuantTensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "residual_add_int8",
            format!("{:?}", a.shape),
            format!("{:?}", b.shape),
        ));
    }
    let sa = a.params.scale as f64;
    let sb = b.params.scale as f64;
    let so = out_params.scale as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&qa, &qb)| {
            let real = sa * (qa as i32 - a.params.zero_point) as f64
                + sb * (qb as i32 - b.params.zero_point) as f64;
            let q = (real / so).round() as i32 + out_params.zero_point;
            q.clamp(-128, 127) as i8
        })
        .collect();
    Ok(QuantTensor {
        shape: a.shape,
        data,
        params: out_params,
    })
}

impl QuantTensor {
    #[inline]
    fn idx_of(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3]
    }
}
