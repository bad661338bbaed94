//! Dense row-major tensors and the numeric kernels the autodiff tape is built on.
//!
//! Every kernel here is a pure function of its inputs with a fixed reduction
//! order, so repeated evaluation is bit-identical.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Storage type tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. Training runs in `f32`, tests and oracles in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Converts a literal. Never fails for the finite constants used in this crate.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossless(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = A·B + beta·C` on strided row/column layouts; see [`matrixmultiply::sgemm`].
    ///
    /// # Safety
    /// The strides must address valid, non-overlapping `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Display> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` literals; convenient in tests.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossless()))
                .collect(),
        }
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Self {
        let nd = self.shape.len();
        let (p, q) = if nd >= 2 {
            (self.shape[nd - 2], self.shape[nd - 1])
        } else {
            (1, self.shape[0])
        };
        let batch = self.numel() / (p * q);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * p * q..(b + 1) * p * q];
            let dst = &mut out[b * p * q..(b + 1) * p * q];
            transpose_into(src, p, q, dst);
        }
        let mut shape = self.shape.clone();
        if nd >= 2 {
            shape.swap(nd - 2, nd - 1);
        } else {
            shape = vec![q, 1];
        }
        Tensor { shape, data: out }
    }
}

pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// `C[m×n] (+)= op(A)[m×k] · op(B)[k×n]` over row-major slices.
///
/// With `trans_a` the slice `a` holds a `k×m` matrix; with `trans_b`, `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length checks above make every strided access in bounds, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_strided(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new([m, n], out)
}

/// Row-wise softmax over the last axis, computed with per-row max subtraction.
pub fn softmax_rows<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let q = *s.shape.last().expect("non-empty shape");
    let mut out = s.data.clone();
    for row in out.chunks_mut(q) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: s.shape.clone(),
        data: out,
    }
}

/// Per-group moments saved by [`standardize_groups`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Views `data` as `[outer, len, inner]` and maps every `(outer, inner)` fibre of
/// length `len` to `(x - mean) / (std + eps)` using the population std.
pub(crate) fn standardize_groups<T: Real>(
    data: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let mut out = vec![T::zero(); data.len()];
    let mut mean = vec![T::zero(); outer * inner];
    let mut std = vec![T::zero(); outer * inner];
    let n = T::from_usize(len).expect("len");
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |l: usize| base + l * inner + i;
            let mu = (0..len).map(|l| data[at(l)]).sum::<T>() / n;
            let var = (0..len).map(|l| (data[at(l)] - mu).powi(2)).sum::<T>() / n;
            let sd = var.sqrt();
            let denom = sd + eps;
            for l in 0..len {
                out[at(l)] = (data[at(l)] - mu) / denom;
            }
            mean[o * inner + i] = mu;
            std[o * inner + i] = sd;
        }
    }
    (out, GroupStats { mean, std })
}

/// `ω(X) = (X − μ) / (σ + eps)` with per-feature (column) statistics over the rows of an `n×d` matrix.
pub fn instance_normalize<T: Real>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::invalid(format!(
            "instance_normalize expects n×d, got {:?}",
            x.shape
        )));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    let (out, _) = standardize_groups(&x.data, 1, n, d, eps);
    Tensor::new(x.shape.clone(), out)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

/// Splits an image-like shape `[.., C, H, W]` (3-D or 4-D) into `(batch, C, H, W)`.
pub(crate) fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    dst[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    let sx0 = x_lo + kx - pad;
                    dst[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    let sx0 = x_lo + kx - pad;
                    let dst = &mut plane[(sy - pad) * w + sx0..][..src.len()];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = image_dims(&x.shape).ok_or_else(|| Error::shape("conv2d", &x.shape, &weight.shape))?;
    match *weight.shape() {
        [o, wc, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 => Ok((b, c, h, w, o, k1)),
        _ => Err(Error::shape("conv2d", &x.shape, &weight.shape)),
    }
}

/// Same-padded stride-1 cross-correlation with an odd square kernel (`O×C×k×k`),
/// over `C×H×W` or `B×C×H×W` inputs.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w, o, k) = conv_check(x, weight)?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * o * hw];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for bi in 0..b {
        let xin = &x.data[bi * c * hw..(bi + 1) * c * hw];
        let src: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, c, h, w, k, &mut cols);
            &cols
        };
        gemm(o, ckk, hw, &weight.data, false, src, false, &mut out[bi * o * hw..(bi + 1) * o * hw], false);
    }
    let shape = if x.ndim() == 3 { vec![o, h, w] } else { vec![b, o, h, w] };
    Tensor::new(shape, out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_grad_input<T: Real>(grad: &Tensor<T>, x_shape: &[usize], weight: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = image_dims(x_shape).expect("checked in forward");
    let (o, k) = (weight.shape[0], weight.shape[2]);
    let hw = h * w;
    let ckk = c * k * k;
    let mut gx = vec![T::zero(); b * c * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let g = &grad.data[bi * o * hw..(bi + 1) * o * hw];
        let dst = &mut gx[bi * c * hw..(bi + 1) * c * hw];
        if k == 1 {
            gemm(c, o, hw, &weight.data, true, g, false, dst, false);
        } else {
            gemm(ckk, o, hw, &weight.data, true, g, false, &mut cols, false);
            col2im_add(&cols, c, h, w, k, dst);
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: gx,
    }
}

/// Gradient of [`conv2d`] with respect to its weight.
pub(crate) fn conv2d_grad_weight<T: Real>(grad: &Tensor<T>, x: &Tensor<T>, w_shape: &[usize]) -> Tensor<T> {
    let (b, c, h, w) = image_dims(&x.shape).expect("checked in forward");
    let (o, k) = (w_shape[0], w_shape[2]);
    let hw = h * w;
    let ckk = c * k * k;
    let mut gw = vec![T::zero(); o * ckk];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for bi in 0..b {
        let xin = &x.data[bi * c * hw..(bi + 1) * c * hw];
        let src: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, c, h, w, k, &mut cols);
            &cols
        };
        let g = &grad.data[bi * o * hw..(bi + 1) * o * hw];
        gemm(o, hw, ckk, g, false, src, true, &mut gw, true);
    }
    Tensor {
        shape: w_shape.to_vec(),
        data: gw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

fn spatial_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let nd = shape.len();
    if nd < 2 {
        return None;
    }
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    Some((shape[..nd - 2].iter().product(), h, w))
}

/// 2× nearest-neighbour upsampling or 2×2 average pooling over the last two axes.
pub fn resample<T: Real>(x: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let (planes, h, w) =
        spatial_dims(&x.shape).ok_or_else(|| Error::invalid(format!("resample needs ≥2 axes, got {:?}", x.shape)))?;
    let mut shape = x.shape.clone();
    let nd = shape.len();
    match direction {
        Direction::Up => {
            shape[nd - 2] = 2 * h;
            shape[nd - 1] = 2 * w;
            let mut out = vec![T::zero(); x.numel() * 4];
            for p in 0..planes {
                let src = &x.data[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(shape, out)
        }
        Direction::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(format!("cannot downsample odd spatial size {h}×{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            shape[nd - 2] = oh;
            shape[nd - 1] = ow;
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); planes * oh * ow];
            for p in 0..planes {
                let src = &x.data[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let top = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                        let bottom = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                        dst[y * ow + xx] = (top + bottom) * quarter;
                    }
                }
            }
            Tensor::new(shape, out)
        }
    }
}

/// Adjoint of [`resample`]: maps an output-space gradient back to the input grid.
pub(crate) fn resample_grad<T: Real>(grad: &Tensor<T>, x_shape: &[usize], direction: Direction) -> Tensor<T> {
    let (planes, h, w) = spatial_dims(x_shape).expect("checked in forward");
    let mut gx = vec![T::zero(); planes * h * w];
    match direction {
        Direction::Up => {
            for p in 0..planes {
                let g = &grad.data[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let top = g[2 * y * 2 * w + 2 * xx] + g[2 * y * 2 * w + 2 * xx + 1];
                        let bottom = g[(2 * y + 1) * 2 * w + 2 * xx] + g[(2 * y + 1) * 2 * w + 2 * xx + 1];
                        dst[y * w + xx] = top + bottom;
                    }
                }
            }
        }
        Direction::Down => {
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            for p in 0..planes {
                let g = &grad.data[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = g[(y / 2) * ow + xx / 2] * quarter;
                    }
                }
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: gx,
    }
}
