//! Directional ReLU recurrences over rows or columns of a feature map:
//! `h_t = max(W_hh · h_{t-1} + x_t, 0)` with `h_{-1} = 0`.
//!
//! Each row (for left/right) or column (for down/up) is an independent
//! line. Lines run in parallel; every line produces its own output buffer
//! and weight-gradient partial, merged afterwards in line order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Sweep direction. The declaration order is the normative concat order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Left to right along each row.
    Right,
    /// Right to left along each row.
    Left,
    /// Top to bottom along each column.
    Down,
    /// Bottom to top along each column.
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Right,
        Direction::Left,
        Direction::Down,
        Direction::Up,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    fn horizontal(self) -> bool {
        matches!(self, Direction::Right | Direction::Left)
    }
}

#[derive(Clone, Copy)]
struct Lines {
    dir: Direction,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Lines {
    fn per_item(&self) -> usize {
        if self.dir.horizontal() {
            self.h
        } else {
            self.w
        }
    }

    fn count(&self) -> usize {
        self.n * self.per_item()
    }

    fn len(&self) -> usize {
        if self.dir.horizontal() {
            self.w
        } else {
            self.h
        }
    }

    /// Flat offset of channel `ch` at step `t` of line `line`.
    #[inline]
    fn offset(&self, line: usize, t: usize, ch: usize) -> usize {
        let b = line / self.per_item();
        let l = line % self.per_item();
        let (y, x) = match self.dir {
            Direction::Right => (l, t),
            Direction::Left => (l, self.w - 1 - t),
            Direction::Down => (t, l),
            Direction::Up => (self.h - 1 - t, l),
        };
        ((b * self.c + ch) * self.h + y) * self.w + x
    }
}

fn check<T: Scalar>(x: &Tensor4<T>, w_hh: &Tensor4<T>) -> Result<()> {
    let c = x.c();
    let d = w_hh.dims();
    if d != [c, c, 1, 1] {
        return Err(Error::Shape {
            op: "scan",
            lhs: x.dims(),
            rhs: d,
        });
    }
    Ok(())
}

/// `out = W h + x`, accumulated in a fixed order.
#[inline]
fn matvec_add<T: Scalar>(w: &[T], h: &[T], x: impl Fn(usize) -> T, out: &mut [T]) {
    let c = h.len();
    for (co, o) in out.iter_mut().enumerate() {
        let row = &w[co * c..(co + 1) * c];
        let mut acc = T::zero();
        for (wv, hv) in row.iter().zip(h) {
            acc += *wv * *hv;
        }
        *o = acc + x(co);
    }
}

pub fn scan_forward<T: Scalar>(
    x: &Tensor4<T>,
    w_hh: &Tensor4<T>,
    dir: Direction,
) -> Result<Tensor4<T>> {
    check(x, w_hh)?;
    let [n, c, h, w] = x.dims();
    let lines = Lines { dir, n, c, h, w };
    let len = lines.len();
    let wd = w_hh.data();
    let xd = x.data();

    let per_line: Vec<Vec<T>> = (0..lines.count())
        .into_par_iter()
        .map(|line| {
            let mut states = vec![T::zero(); len * c];
            let mut prev = vec![T::zero(); c];
            let mut cur = vec![T::zero(); c];
            for t in 0..len {
                matvec_add(wd, &prev, |ch| xd[lines.offset(line, t, ch)], &mut cur);
                for v in cur.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                states[t * c..(t + 1) * c].copy_from_slice(&cur);
                std::mem::swap(&mut prev, &mut cur);
            }
            states
        })
        .collect();

    let mut out = Tensor4::zeros(x.dims());
    let od = out.data_mut();
    for (line, states) in per_line.iter().enumerate() {
        for t in 0..len {
            for ch in 0..c {
                od[lines.offset(line, t, ch)] = states[t * c + ch];
            }
        }
    }
    Ok(out)
}

/// Reverse-mode of [`scan_forward`]. `states` is the forward output.
/// Returns `(dx, dw_hh)`.
pub fn scan_backward<T: Scalar>(
    dy: &Tensor4<T>,
    states: &Tensor4<T>,
    w_hh: &Tensor4<T>,
    dir: Direction,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check(states, w_hh)?;
    crate::error::check_shape("scan_backward", dy.dims(), states.dims())?;
    let [n, c, h, w] = states.dims();
    let lines = Lines { dir, n, c, h, w };
    let len = lines.len();
    let wd = w_hh.data();
    let sd = states.data();
    let gd = dy.data();

    let per_line: Vec<(Vec<T>, Vec<T>)> = (0..lines.count())
        .into_par_iter()
        .map(|line| {
            let mut dx = vec![T::zero(); len * c];
            let mut dw = vec![T::zero(); c * c];
            // dpre at step t + 1
            let mut dnext = vec![T::zero(); c];
            let mut dpre = vec![T::zero(); c];
            for t in (0..len).rev() {
                for ci in 0..c {
                    let mut acc = T::zero();
                    for co in 0..c {
                        acc += wd[co * c + ci] * dnext[co];
                    }
                    let dh = gd[lines.offset(line, t, ci)] + acc;
                    dpre[ci] = if sd[lines.offset(line, t, ci)] > T::zero() {
                        dh
                    } else {
                        T::zero()
                    };
                }
                dx[t * c..(t + 1) * c].copy_from_slice(&dpre);
                if t > 0 {
                    for co in 0..c {
                        let g = dpre[co];
                        if g == T::zero() {
                            continue;
                        }
                        for ci in 0..c {
                            dw[co * c + ci] += g * sd[lines.offset(line, t - 1, ci)];
                        }
                    }
                }
                std::mem::swap(&mut dnext, &mut dpre);
            }
            (dx, dw)
        })
        .collect();

    let mut dx = Tensor4::zeros(states.dims());
    let mut dw = Tensor4::zeros(w_hh.dims());
    {
        let dxd = dx.data_mut();
        for (line, (lx, _)) in per_line.iter().enumerate() {
            for t in 0..len {
                for ch in 0..c {
                    dxd[lines.offset(line, t, ch)] = lx[t * c + ch];
                }
            }
        }
    }
    for (_, lw) in &per_line {
        for (a, &b) in dw.data_mut().iter_mut().zip(lw) {
            *a += b;
        }
    }
    Ok((dx, dw))
}

/// `c × c` identity stored as a `(c, c, 1, 1)` tensor.
pub fn identity<T: Scalar>(c: usize) -> Tensor4<T> {
    Tensor4::from_fn([c, c, 1, 1], |[i, j, _, _]| {
        if i == j {
            T::one()
        } else {
            T::zero()
        }
    })
}
