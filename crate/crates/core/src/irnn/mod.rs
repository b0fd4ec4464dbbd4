//! Spatial recurrent context module.
//!
//! One round projects the input with a 1×1 convolution, sweeps the same
//! projected map with four identity-initialized ReLU recurrences (right,
//! left, down, up), concatenates the four hidden-state maps in that order
//! and mixes them with a second 1×1 convolution. After one round every
//! location has seen its full row and column; after two rounds it has seen
//! the whole map.

pub mod scan;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ConvWeights, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

pub use scan::{identity, scan_backward, scan_forward, Direction};

/// Weights of one round. `w_hh` is indexed in [`Direction::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct IrnnWeights<V> {
    pub w_hh: [V; 4],
    pub input_proj: ConvWeights<V>,
    pub mix_proj: ConvWeights<V>,
}

impl<V> IrnnWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> IrnnWeights<W> {
        IrnnWeights {
            w_hh: [
                f(&self.w_hh[0]),
                f(&self.w_hh[1]),
                f(&self.w_hh[2]),
                f(&self.w_hh[3]),
            ],
            input_proj: self.input_proj.map(f),
            mix_proj: self.mix_proj.map(f),
        }
    }
}

impl<V> ParamTree<V> for IrnnWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        for (d, w) in Direction::ALL.iter().zip(&self.w_hh) {
            f(join(prefix, &format!("w_hh.{}", d.name())), w);
        }
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        self.mix_proj.visit(&join(prefix, "mix_proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        for (d, w) in Direction::ALL.iter().zip(self.w_hh.iter_mut()) {
            f(join(prefix, &format!("w_hh.{}", d.name())), w);
        }
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        self.mix_proj.visit_mut(&join(prefix, "mix_proj"), f);
    }
}

impl<T: Scalar> IrnnWeights<Tensor4<T>> {
    /// Recurrent matrices start as exact identities; projections use the
    /// default uniform fan-in initialization.
    pub fn init(c_in: usize, c_hid: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_hh: std::array::from_fn(|_| identity(c_hid)),
            input_proj: ConvWeights::init(c_in, c_hid, 1, rng),
            mix_proj: ConvWeights::init(4 * c_hid, c_out, 1, rng),
        }
    }

    /// Identity recurrences, identity input projection, and a mix that sums
    /// the four direction maps channel-wise. Used by receptive-field probes.
    pub fn identity_like(c: usize) -> Self {
        let mix = Tensor4::from_fn([c, 4 * c, 1, 1], |[o, i, _, _]| {
            if i % c == o {
                T::one()
            } else {
                T::zero()
            }
        });
        Self {
            w_hh: std::array::from_fn(|_| identity(c)),
            input_proj: ConvWeights::identity_1x1(c, c),
            mix_proj: ConvWeights {
                weight: mix,
                bias: Tensor4::zeros([1, c, 1, 1]),
            },
        }
    }

    pub fn c_hid(&self) -> usize {
        self.w_hh[0].n()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> IrnnWeights<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrnnConfig {
    pub rounds: usize,
    pub c_hid: usize,
    pub c_out: usize,
}

impl SrnnConfig {
    pub fn new(rounds: usize, c_hid: usize, c_out: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::invalid("srnn", "rounds must be at least 1"));
        }
        Ok(Self {
            rounds,
            c_hid,
            c_out,
        })
    }

    /// Independent weights per round; round `r > 0` consumes the previous
    /// round's `c_out` channels.
    pub fn init_weights<T: Scalar>(
        &self,
        c_in: usize,
        rng: &mut impl Rng,
    ) -> Vec<IrnnWeights<Tensor4<T>>> {
        (0..self.rounds)
            .map(|r| {
                let cin = if r == 0 { c_in } else { self.c_out };
                IrnnWeights::init(cin, self.c_hid, self.c_out, rng)
            })
            .collect()
    }
}

/// One projection → four scans → concat → mix round.
pub fn srnn_round<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &IrnnWeights<Var>) -> Result<Var> {
    let hidden = tape.conv(x, w.input_proj.weight, w.input_proj.bias, 1)?;
    let mut outs = Vec::with_capacity(4);
    for (dir, &w_hh) in Direction::ALL.iter().zip(&w.w_hh) {
        outs.push(tape.scan(hidden, w_hh, *dir)?);
    }
    let cat = tape.concat_channels(&outs)?;
    tape.conv(cat, w.mix_proj.weight, w.mix_proj.bias, 1)
}

pub fn srnn_module<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &SrnnConfig,
    weights: &[IrnnWeights<Var>],
) -> Result<Var> {
    if weights.len() != cfg.rounds {
        return Err(Error::invalid(
            "srnn_module",
            format!("{} weight sets for {} rounds", weights.len(), cfg.rounds),
        ));
    }
    let mut h = x;
    for (r, w) in weights.iter().enumerate() {
        h = srnn_round(tape, h, w).map_err(|e| e.context(format!("srnn round {}", r + 1)))?;
    }
    Ok(h)
}

/// Forward-only evaluation on stored weights.
pub fn srnn_forward<T: Scalar>(
    x: &Tensor4<T>,
    cfg: &SrnnConfig,
    weights: &[IrnnWeights<Tensor4<T>>],
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound: Vec<_> = weights.iter().map(|w| w.bind(&mut tape)).collect();
    let y = srnn_module(&mut tape, xv, cfg, &bound)?;
    Ok(tape.value(y).clone())
}
