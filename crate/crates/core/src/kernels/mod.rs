//! Forward and vector-Jacobian kernels on raw tensors. The tape in
//! [`crate::tape`] wires these together; they are also usable directly.

pub mod conv;

use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub use conv::{conv_backward, conv_forward, ConvGeom};

/// Added under the square root of the channel L2 norm.
pub const NORM_EPS: f64 = 1e-12;

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= s * (T::one() - s);
    }
    dx
}

pub fn softmax_channels<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut y = x.clone();
    let data = y.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[idx(ch)]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (data[idx(ch)] - m).exp();
                data[idx(ch)] = e;
                s += e;
            }
            for ch in 0..c {
                data[idx(ch)] = data[idx(ch)] / s;
            }
        }
    }
    y
}

pub fn softmax_channels_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = y.dims();
    let hw = h * w;
    let mut dx = Tensor4::zeros(y.dims());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mut dot = T::zero();
            for ch in 0..c {
                dot += yd[idx(ch)] * gd[idx(ch)];
            }
            for ch in 0..c {
                out[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot);
            }
        }
    }
    dx
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_shape("add", a.dims(), b.dims())?;
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let d = p.dims();
        if d[0] != n || d[2] != h || d[3] != w {
            return Err(Error::Shape {
                op: "concat_channels",
                lhs: first.dims(),
                rhs: d,
            });
        }
    }
    let c_total: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor4::from_vec([n, c_total, h, w], data)
}

/// Splits a gradient of a channel concat back into per-input pieces.
pub fn split_channels<T: Scalar>(dy: &Tensor4<T>, widths: &[usize]) -> Vec<Tensor4<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&c| {
            let part = dy.slice_channels(start, c).expect("widths sum to channel count");
            start += c;
            part
        })
        .collect()
}

pub fn upsample2x_nearest<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    Tensor4::from_fn([n, c, 2 * h, 2 * w], |[b, ch, y, xx]| x.at(b, ch, y / 2, xx / 2))
}

pub fn upsample2x_nearest_backward<T: Scalar>(dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h2, w2] = dy.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    Tensor4::from_fn([n, c, h, w], |[b, ch, y, x]| {
        dy.at(b, ch, 2 * y, 2 * x)
            + dy.at(b, ch, 2 * y, 2 * x + 1)
            + dy.at(b, ch, 2 * y + 1, 2 * x)
            + dy.at(b, ch, 2 * y + 1, 2 * x + 1)
    })
}

fn check_even(op: &'static str, x: &Tensor4<impl Scalar>) -> Result<()> {
    if !x.h().is_multiple_of(2) || !x.w().is_multiple_of(2) {
        return Err(Error::invalid(op, format!("odd spatial dims {:?}", x.dims())));
    }
    Ok(())
}

/// Returns the pooled map and the flat argmax index of each output cell.
pub fn maxpool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    check_even("maxpool2x2", x)?;
    let [n, c, h, w] = x.dims();
    let mut arg = Vec::with_capacity(n * c * h * w / 4);
    let y = Tensor4::from_fn([n, c, h / 2, w / 2], |[b, ch, y, xx]| {
        let mut best = x.offset(b, ch, 2 * y, 2 * xx);
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            let o = x.offset(b, ch, 2 * y + dy, 2 * xx + dx);
            if x.data()[o] > x.data()[best] {
                best = o;
            }
        }
        arg.push(best);
        x.data()[best]
    });
    Ok((y, arg))
}

pub fn maxpool2x2_backward<T: Scalar>(
    x_dims: [usize; 4],
    argmax: &[usize],
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x_dims);
    for (&o, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[o] += g;
    }
    dx
}

pub fn avgpool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even("avgpool2x2", x)?;
    let [n, c, h, w] = x.dims();
    let quarter = T::of(0.25);
    Ok(Tensor4::from_fn([n, c, h / 2, w / 2], |[b, ch, y, xx]| {
        (x.at(b, ch, 2 * y, 2 * xx)
            + x.at(b, ch, 2 * y, 2 * xx + 1)
            + x.at(b, ch, 2 * y + 1, 2 * xx)
            + x.at(b, ch, 2 * y + 1, 2 * xx + 1))
            * quarter
    }))
}

pub fn avgpool2x2_backward<T: Scalar>(x_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let quarter = T::of(0.25);
    Tensor4::from_fn(x_dims, |[b, ch, y, x]| dy.at(b, ch, y / 2, x / 2) * quarter)
}

/// `gamma ⊙ x / sqrt(Σ_c x_c² + ε)` at every `(n, h, w)`.
pub fn channel_l2norm_scale<T: Scalar>(x: &Tensor4<T>, gamma: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c {
        return Err(Error::Shape {
            op: "channel_l2norm_scale",
            lhs: x.dims(),
            rhs: gamma.dims(),
        });
    }
    let hw = h * w;
    let eps = T::of(NORM_EPS);
    let mut y = x.clone();
    y.data_mut()
        .par_chunks_mut((c * hw).max(1))
        .take(n)
        .for_each(|item| {
            for p in 0..hw {
                let mut ss = T::zero();
                for ch in 0..c {
                    let v = item[ch * hw + p];
                    ss += v * v;
                }
                let inv = T::one() / (ss + eps).sqrt();
                for ch in 0..c {
                    item[ch * hw + p] = item[ch * hw + p] * inv * gamma.data()[ch];
                }
            }
        });
    Ok(y)
}

/// Returns `(dx, dgamma)`.
pub fn channel_l2norm_scale_backward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let eps = T::of(NORM_EPS);
    let g = gamma.data();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dgamma = vec![T::zero(); c];
    for b in 0..n {
        let xi = x.item(b);
        let gi = dy.item(b);
        let off = b * c * hw;
        for p in 0..hw {
            let mut ss = T::zero();
            for ch in 0..c {
                ss += xi[ch * hw + p] * xi[ch * hw + p];
            }
            let s = (ss + eps).sqrt();
            let inv = T::one() / s;
            // dot = Σ_c gamma_c dy_c u_c with u = x / s
            let mut dot = T::zero();
            for ch in 0..c {
                let u = xi[ch * hw + p] * inv;
                dot += g[ch] * gi[ch * hw + p] * u;
                dgamma[ch] += gi[ch * hw + p] * u;
            }
            for ch in 0..c {
                let u = xi[ch * hw + p] * inv;
                dx.data_mut()[off + ch * hw + p] = (g[ch] * gi[ch * hw + p] - u * dot) * inv;
            }
        }
    }
    let dgamma = Tensor4::from_vec(gamma.dims(), dgamma).expect("gamma dims");
    (dx, dgamma)
}

/// Dense layer over the flattened `(c, h, w)` of each batch item; weight is
/// `(out, in, 1, 1)`, output `(n, out, 1, 1)`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let n = x.n();
    let fan_in = x.c() * x.h() * x.w();
    let [out, w_in, kh, kw] = weight.dims();
    if w_in * kh * kw != fan_in || bias.len() != out {
        return Err(Error::Shape {
            op: "fully_connected",
            lhs: x.dims(),
            rhs: weight.dims(),
        });
    }
    let mut y = Tensor4::zeros([n, out, 1, 1]);
    for b in 0..n {
        y.data_mut()[b * out..(b + 1) * out].copy_from_slice(bias.data());
    }
    // y (n × out) += x (n × in) · Wᵀ (in × out)
    T::gemm(
        n,
        fan_in,
        out,
        T::one(),
        x.data(),
        fan_in as isize,
        1,
        weight.data(),
        1,
        fan_in as isize,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    Ok(y)
}

/// Returns `(dx, dweight, dbias)`.
pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let n = x.n();
    let fan_in = x.c() * x.h() * x.w();
    let out = weight.n();
    let mut dx = Tensor4::zeros(x.dims());
    T::gemm(
        n,
        out,
        fan_in,
        T::one(),
        dy.data(),
        out as isize,
        1,
        weight.data(),
        fan_in as isize,
        1,
        T::zero(),
        dx.data_mut(),
        fan_in as isize,
        1,
    );
    let mut dw = Tensor4::zeros(weight.dims());
    T::gemm(
        out,
        n,
        fan_in,
        T::one(),
        dy.data(),
        1,
        out as isize,
        x.data(),
        fan_in as isize,
        1,
        T::zero(),
        dw.data_mut(),
        fan_in as isize,
        1,
    );
    let mut db = Tensor4::zeros([1, out, 1, 1]);
    for b in 0..n {
        for o in 0..out {
            db.data_mut()[o] += dy.data()[b * out + o];
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn upsample_maps_pixels_to_blocks() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = upsample2x_nearest(&x);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&t([1, 1, 1, 3], &[-1., 0., 2.]));
        assert_eq!(y.data(), &[0., 0., 2.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = softmax_channels(&t([1, 5, 1, 1], &[0.3; 5]));
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn l2norm_examples() {
        let x = t([1, 2, 1, 1], &[3., 4.]);
        let y = channel_l2norm_scale(&x, &t([1, 2, 1, 1], &[1., 1.])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
        let y = channel_l2norm_scale(&x, &t([1, 2, 1, 1], &[2., 2.])).unwrap();
        assert!((y.data()[0] - 1.2).abs() < 1e-12 && (y.data()[1] - 1.6).abs() < 1e-12);
        let z = channel_l2norm_scale(&t([1, 2, 1, 1], &[0., 0.]), &t([1, 2, 1, 1], &[1., 1.]))
            .unwrap();
        assert_eq!(z.data(), &[0., 0.]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = t([1, 1, 1, 2], &[1., 2.]);
        let b = t([1, 2, 1, 2], &[3., 4., 5., 6.]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.slice_channels(0, 1).unwrap(), a);
        assert_eq!(c.slice_channels(1, 2).unwrap(), b);
        assert!(concat_channels(&[&a, &t([1, 1, 2, 1], &[0., 0.])]).is_err());
    }

    #[test]
    fn fully_connected_matches_dot_products() {
        let x = t([2, 3, 1, 1], &[1., 2., 3., -1., 0., 1.]);
        let w = t([2, 3, 1, 1], &[1., 0., 0., 1., 1., 1.]);
        let b = t([1, 2, 1, 1], &[0.5, 0.]);
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 6., -0.5, 0.]);
    }

    #[test]
    fn pooling_rejects_odd_dims() {
        let x = Tensor4::<f64>::zeros([1, 1, 3, 4]);
        assert!(maxpool2x2(&x).is_err());
        assert!(avgpool2x2(&x).is_err());
    }
}
