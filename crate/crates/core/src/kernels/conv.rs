//! 2-D convolution with square odd kernels via im2col + GEMM.
//!
//! Work is split by batch item and by fixed blocks of output channels; the
//! split depends only on tensor dims, so results are bit-identical for any
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

const CHANNEL_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize) -> Result<Self> {
        let [c_out, c_in, k, k2] = w;
        if k != k2 || k % 2 == 0 {
            return Err(Error::invalid(
                "conv",
                format!("kernel must be square and odd, got {w:?}"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid("conv", format!("stride {stride} not in {{1, 2}}")));
        }
        if x[1] != c_in {
            return Err(Error::Shape {
                op: "conv",
                lhs: x,
                rhs: w,
            });
        }
        let pad = (k - 1) / 2;
        let h_out = (x[2] + 2 * pad - k) / stride + 1;
        let w_out = (x[3] + 2 * pad - k) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            k,
            stride,
            pad,
            h: x[2],
            w: x[3],
            h_out,
            w_out,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

fn columns<T: Scalar>(g: &ConvGeom, x: &Tensor4<T>) -> Vec<Vec<T>> {
    (0..x.n())
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![T::zero(); g.patch() * g.pixels()];
            im2col(g, x.item(n), &mut cols);
            cols
        })
        .collect()
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), stride)?;
    if bias.len() != g.c_out {
        return Err(Error::Shape {
            op: "conv bias",
            lhs: weight.dims(),
            rhs: bias.dims(),
        });
    }
    let n = x.n();
    let p = g.pixels();
    let ck = g.patch();
    let mut out = Tensor4::zeros([n, g.c_out, g.h_out, g.w_out]);
    let item_len = g.c_out * p;
    let wdata = weight.data();
    let bdata = bias.data();

    out.data_mut()
        .par_chunks_mut(item_len)
        .enumerate()
        .for_each(|(b, out_item)| {
            let owned;
            let cols: &[T] = if g.direct() {
                x.item(b)
            } else {
                let mut c = vec![T::zero(); ck * p];
                im2col(&g, x.item(b), &mut c);
                owned = c;
                &owned
            };
            out_item
                .par_chunks_mut(CHANNEL_BLOCK * p)
                .enumerate()
                .for_each(|(blk, dst)| {
                    let co0 = blk * CHANNEL_BLOCK;
                    let rows = dst.len() / p;
                    for r in 0..rows {
                        let bv = bdata[co0 + r];
                        dst[r * p..(r + 1) * p].iter_mut().for_each(|v| *v = bv);
                    }
                    T::gemm(
                        rows,
                        ck,
                        p,
                        T::one(),
                        &wdata[co0 * ck..],
                        ck as isize,
                        1,
                        cols,
                        p as isize,
                        1,
                        T::one(),
                        dst,
                        p as isize,
                        1,
                    );
                });
        });
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
    stride: usize,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let g = ConvGeom::new(x.dims(), weight.dims(), stride)?;
    let n = x.n();
    let p = g.pixels();
    let ck = g.patch();
    let wdata = weight.data();

    let cols: Vec<Vec<T>> = if g.direct() {
        Vec::new()
    } else {
        columns(&g, x)
    };
    let cols_of = |b: usize| -> &[T] {
        if g.direct() {
            x.item(b)
        } else {
            &cols[b]
        }
    };

    // dx per item: dcols = W^T dy, then scatter.
    let mut dx = Tensor4::zeros(x.dims());
    let x_item = g.c_in * g.h * g.w;
    dx.data_mut()
        .par_chunks_mut(x_item.max(1))
        .enumerate()
        .for_each(|(b, dx_item)| {
            let dy_item = dy.item(b);
            if g.direct() {
                T::gemm(
                    ck,
                    g.c_out,
                    p,
                    T::one(),
                    wdata,
                    1,
                    ck as isize,
                    dy_item,
                    p as isize,
                    1,
                    T::zero(),
                    dx_item,
                    p as isize,
                    1,
                );
            } else {
                let mut dcols = vec![T::zero(); ck * p];
                T::gemm(
                    ck,
                    g.c_out,
                    p,
                    T::one(),
                    wdata,
                    1,
                    ck as isize,
                    dy_item,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(&g, &dcols, dx_item);
            }
        });

    // dW in output-channel blocks, summing items in index order.
    let mut dw = Tensor4::zeros(weight.dims());
    let mut db = Tensor4::zeros([1, g.c_out, 1, 1]);
    dw.data_mut()
        .par_chunks_mut(CHANNEL_BLOCK * ck)
        .zip(db.data_mut().par_chunks_mut(CHANNEL_BLOCK))
        .enumerate()
        .for_each(|(blk, (dw_blk, db_blk))| {
            let co0 = blk * CHANNEL_BLOCK;
            let rows = db_blk.len();
            for b in 0..n {
                let dy_item = dy.item(b);
                let dy_rows = &dy_item[co0 * p..(co0 + rows) * p];
                T::gemm(
                    rows,
                    p,
                    ck,
                    T::one(),
                    dy_rows,
                    p as isize,
                    1,
                    cols_of(b),
                    1,
                    p as isize,
                    T::one(),
                    dw_blk,
                    ck as isize,
                    1,
                );
                for r in 0..rows {
                    let mut s = T::zero();
                    for &v in &dy_rows[r * p..(r + 1) * p] {
                        s += v;
                    }
                    db_blk[r] += s;
                }
            }
        });

    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>, s: usize) -> Tensor4<T> {
        let g = ConvGeom::new(x.dims(), w.dims(), s).unwrap();
        Tensor4::from_fn([x.n(), g.c_out, g.h_out, g.w_out], |[n, co, oy, ox]| {
            let mut acc = b.data()[co];
            for ci in 0..g.c_in {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let iy = (oy * s + ky) as isize - g.pad as isize;
                        let ix = (ox * s + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_summation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(k, s, h, w) in &[(3, 1, 5, 6), (3, 2, 7, 6), (1, 2, 5, 5), (1, 1, 4, 3)] {
            let x = Tensor4::<f64>::uniform([2, 3, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor4::<f64>::uniform([20, 3, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor4::<f64>::uniform([1, 20, 1, 1], -1.0, 1.0, &mut rng);
            let got = conv_forward(&x, &wt, &b, s).unwrap();
            let want = naive(&x, &wt, &b, s);
            assert_eq!(got.dims(), want.dims());
            assert!(got.max_abs_diff(&want) < 1e-12);
            assert_eq!(got.h(), h.div_ceil(s));
        }
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor4::<f32>::zeros([1, 1, 1, 1]);
        assert!(conv_forward(&x, &Tensor4::zeros([1, 2, 2, 2]), &b, 1).is_err());
        let err = conv_forward(&x, &Tensor4::zeros([1, 3, 1, 1]), &b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 1, 1]"), "{msg}");
    }
}
