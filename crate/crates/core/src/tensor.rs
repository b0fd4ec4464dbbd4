//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout and the `TNS4`
//! archive format used for fixtures, checkpoints and pyramid dumps.
//!
//! Archive layout: the magic bytes `TNS4`, one dtype byte (`0` = f32,
//! `1` = f64), four little-endian `u32` dims, then the raw little-endian
//! values.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::Float;
use rand::Rng;

use crate::error::{check_shape, Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Debug + Default + Sum + Send + Sync + 'static
{
    const DTYPE: u8;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on row-major matrices with explicit
    /// row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Row-major `(n, c, h, w)` tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
            grad: None,
        }
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::invalid(
                "tensor",
                format!("buffer of length {} does not fit dims {dims:?}", data.len()),
            ));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
        })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self {
            dims,
            data,
            grad: None,
        }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform(dims: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Self {
            dims,
            data,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Spatial plane `(n, c)` as a slice of `h * w` values.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn zeroed_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_shape("add_assign", self.dims, other.dims)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(mut self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.dims,
                rhs: dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    /// Mirror along the width axis.
    pub fn flip_w(&self) -> Self {
        let w = self.dims[3];
        Self::from_fn(self.dims, |[n, c, y, x]| self.at(n, c, y, w - 1 - x))
    }

    /// Mirror along the height axis.
    pub fn flip_h(&self) -> Self {
        let h = self.dims[2];
        Self::from_fn(self.dims, |[n, c, y, x]| self.at(n, c, h - 1 - y, x))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self {
            dims: [n, len, h, w],
            data,
            grad: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.data.len() * 8);
        out.extend_from_slice(b"TNS4");
        out.push(T::DTYPE);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 21 || &bytes[..4] != b"TNS4" {
            return Err("missing TNS4 header".into());
        }
        if bytes[4] != T::DTYPE {
            return Err(format!(
                "dtype tag {} does not match requested {}",
                bytes[4],
                T::NAME
            ));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 5 + 4 * i;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let width = std::mem::size_of::<T>();
        let len: usize = dims.iter().product();
        let body = &bytes[21..];
        if body.len() != len * width {
            return Err(format!(
                "expected {} value bytes for dims {dims:?}, found {}",
                len * width,
                body.len()
            ));
        }
        let data = body.chunks_exact(width).map(T::read_le).collect();
        Ok(Self {
            dims,
            data,
            grad: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// Peek at an archive's dtype tag and dims without decoding values.
pub fn archive_header(bytes: &[u8]) -> Option<(u8, [usize; 4])> {
    if bytes.len() < 21 || &bytes[..4] != b"TNS4" {
        return None;
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    Some((bytes[4], dims))
}
