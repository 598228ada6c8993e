//! Dense row-major tensors and the forward kernels the graph is built on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order.
///
/// Extents may be zero (an empty prompt bank is `0×d`); `data.len()` always
/// equals the product of the extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| F::of(x)).collect())
    }

    /// I.i.d. Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same values in another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Self::new(vec![c, r], transpose(&self.data, r, c))
    }

    /// Row-wise log-softmax of a 2-D tensor (a 1-D tensor is treated as one row).
    pub fn log_softmax(&self) -> Self {
        let cols = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                log_softmax_in_place(row);
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

pub(crate) fn transpose<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl Conv1dGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c_in, t_in) = match x_shape {
            [c, t] => (*c, *t),
            _ => return Err(Error::dim("conv1d", format!("input must be C×T, got {x_shape:?}"))),
        };
        let (c_out, kc, kernel) = match k_shape {
            [o, i, k] => (*o, *i, *k),
            _ => {
                return Err(Error::dim(
                    "conv1d",
                    format!("kernels must be C_out×C_in×K, got {k_shape:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::dim(
                "conv1d",
                format!("input has {c_in} channels, kernels expect {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d", "stride must be at least 1"));
        }
        if kernel == 0 || kernel > t_in + 2 * padding {
            return Err(Error::dim(
                "conv1d",
                format!("kernel width {kernel} exceeds padded input length {}", t_in + 2 * padding),
            ));
        }
        let t_out = (t_in + 2 * padding - kernel) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            t_in,
            t_out,
        })
    }

    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t * self.stride + j) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }

    pub(crate) fn forward<F: Scalar>(&self, x: &[F], k: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.c_out * self.t_out];
        for o in 0..self.c_out {
            for t in 0..self.t_out {
                let mut s = F::zero();
                for i in 0..self.c_in {
                    let kb = (o * self.c_in + i) * self.kernel;
                    let xb = i * self.t_in;
                    for j in 0..self.kernel {
                        if let Some(p) = self.src(t, j) {
                            s += k[kb + j] * x[xb + p];
                        }
                    }
                }
                out[o * self.t_out + t] = s;
            }
        }
        out
    }

    pub(crate) fn backward<F: Scalar>(
        &self,
        x: &[F],
        k: &[F],
        g: &[F],
        gx: Option<&mut [F]>,
        gk: Option<&mut [F]>,
    ) {
        if let Some(gx) = gx {
            for o in 0..self.c_out {
                for t in 0..self.t_out {
                    let go = g[o * self.t_out + t];
                    for i in 0..self.c_in {
                        let kb = (o * self.c_in + i) * self.kernel;
                        for j in 0..self.kernel {
                            if let Some(p) = self.src(t, j) {
                                gx[i * self.t_in + p] += go * k[kb + j];
                            }
                        }
                    }
                }
            }
        }
        if let Some(gk) = gk {
            for o in 0..self.c_out {
                for t in 0..self.t_out {
                    let go = g[o * self.t_out + t];
                    for i in 0..self.c_in {
                        let kb = (o * self.c_in + i) * self.kernel;
                        for j in 0..self.kernel {
                            if let Some(p) = self.src(t, j) {
                                gk[kb + j] += go * x[i * self.t_in + p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a per-frame 2-D patch extraction over `[L×H×W×C]` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Im2ColGeom {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Im2ColGeom {
    pub fn new(x_shape: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let [frames, height, width, channels] = x_shape[..] else {
            return Err(Error::dim("im2col", format!("expected L×H×W×C, got {x_shape:?}")));
        };
        if stride == 0 {
            return Err(Error::dim("im2col", "stride must be at least 1"));
        }
        if kernel > height + 2 * padding || kernel > width + 2 * padding {
            return Err(Error::dim(
                "im2col",
                format!("frame {height}×{width} is smaller than kernel {kernel}×{kernel}"),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn rows(&self) -> usize {
        self.frames * self.out_h * self.out_w
    }

    /// Visits `(patch_row, patch_col, source_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for l in 0..self.frames {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let r = (l * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.kernel {
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let x = (ox * self.stride + kx) as isize - self.padding as isize;
                            if x < 0 || x as usize >= self.width {
                                continue;
                            }
                            let src_base =
                                ((l * self.height + y as usize) * self.width + x as usize) * self.channels;
                            let col_base = (ky * self.kernel + kx) * self.channels;
                            for c in 0..self.channels {
                                f(r, col_base + c, src_base + c);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        let pl = self.patch_len();
        let mut out = vec![F::zero(); self.rows() * pl];
        self.for_each_tap(|r, c, s| out[r * pl + c] = x[s]);
        out
    }

    pub(crate) fn backward<F: Scalar>(&self, g: &[F], gx: &mut [F]) {
        let pl = self.patch_len();
        self.for_each_tap(|r, c, s| gx[s] += g[r * pl + c]);
    }
}
