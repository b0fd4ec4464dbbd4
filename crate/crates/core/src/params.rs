//! Parameter containers.
//!
//! Weight structs are generic over their slot type: `Tensor4<T>` for stored
//! weights and [`Var`] once bound onto a tape for one forward/backward pass.
//! [`ParamTree`] walks the slots with stable dotted names, which is what
//! checkpoints, optimizers and gradient extraction key on.

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

pub trait ParamTree<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<V, P: ParamTree<V>> ParamTree<V> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A single tensor slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<V>(pub V);

impl<V> ParamTree<V> for Leaf<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        f(prefix.to_string(), &self.0);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        f(prefix.to_string(), &mut self.0);
    }
}

/// Convolution (or dense) weights: kernel `(c_out, c_in, k, k)` plus a
/// length-`c_out` bias stored as `(1, c_out, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<V> {
    pub weight: V,
    pub bias: V,
}

impl<V> ConvWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> ConvWeights<W> {
        ConvWeights {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<V> ParamTree<V> for ConvWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> ConvWeights<Tensor4<T>> {
    /// Kernel uniform in `±sqrt(6 / fan_in)`, bias zero.
    pub fn init(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Self {
            weight: Tensor4::uniform([c_out, c_in, k, k], -bound, bound, rng),
            bias: Tensor4::zeros([1, c_out, 1, 1]),
        }
    }

    /// Dense layer `fan_in → out`, stored as `(out, fan_in, 1, 1)`.
    pub fn init_dense(fan_in: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self::init(fan_in, out, 1, rng)
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            weight: Tensor4::zeros([c_out, c_in, k, k]),
            bias: Tensor4::zeros([1, c_out, 1, 1]),
        }
    }

    /// 1×1 kernel copying input channel `i` to output channel `i` for
    /// `i < min(c_in, c_out)`.
    pub fn identity_1x1(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor4::from_fn([c_out, c_in, 1, 1], |[o, i, _, _]| {
                if o == i {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            bias: Tensor4::zeros([1, c_out, 1, 1]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.c()
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ConvWeights<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

/// Binds every slot of a stored tree as a trainable tape leaf, returning
/// the `(name, var)` list in visit order.
pub fn bind_all<T: Scalar, P: ParamTree<Tensor4<T>>>(
    tape: &mut Tape<T>,
    params: &P,
) -> Vec<(String, Var)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name, tape.param(t.clone()))));
    out
}

pub fn count_params<T: Scalar, P: ParamTree<Tensor4<T>>>(params: &P) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, t| n += t.len());
    n
}

pub fn param_names<V, P: ParamTree<V>>(params: &P) -> Vec<String> {
    let mut names = Vec::new();
    params.visit("", &mut |name, _| names.push(name));
    names
}
