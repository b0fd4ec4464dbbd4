//! Central-difference gradient checking in 64-bit mode.
//!
//! The graph under test is rebuilt from scratch for every perturbation, so
//! the numeric side never touches the backward code it is checking.

use rand::seq::index::sample;
use rand::Rng;

pub mod suite;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Per input, at most this many coordinates are probed (chosen at
    /// random); `None` probes all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: Some(48),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    /// `(input name, max relative error)` per checked input.
    pub per_input: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor4<f64>)], cotangent: &Tensor4<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_checked(true);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(cotangent.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Checks `f`'s backward pass for every input against central differences
/// of `⟨r, f(x)⟩` with a random cotangent `r` (or `r = 1` for scalars).
///
/// Error is `max |g_analytic − g_numeric| / max(1, |g_numeric|)`.
pub fn grad_check<F>(
    name: &str,
    inputs: &[(String, Tensor4<f64>)],
    f: F,
    opts: &GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(name, inputs, f, opts, rng, |_| {})
}

/// As [`grad_check`], with a hook to configure the analytic tape (used for
/// fault injection).
pub fn grad_check_with<F>(
    name: &str,
    inputs: &[(String, Tensor4<f64>)],
    f: F,
    opts: &GradCheckOptions,
    rng: &mut impl Rng,
    configure: impl Fn(&mut Tape<f64>),
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_checked(true);
    configure(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_dims = tape.dims(out);
    let cotangent = if out_dims == [1, 1, 1, 1] {
        Tensor4::scalar(1.0)
    } else {
        Tensor4::uniform(out_dims, -1.0, 1.0, rng)
    };
    tape.backward_with(out, cotangent.clone())?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, (input_name, tensor)) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(tensor.dims()));
        if !analytic.all_finite() {
            return Err(Error::NonFinite {
                op: "grad_check: analytic gradient",
            })
            .map_err(|e| e.context(format!("{name}/{input_name}")));
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if tensor.len() > m => {
                let mut c = sample(rng, tensor.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..tensor.len()).collect(),
        };
        let mut err = 0.0f64;
        for i in coords {
            let orig = tensor.data()[i];
            probe[k].1.data_mut()[i] = orig + opts.step;
            let plus = evaluate(&f, &probe, &cotangent)?;
            probe[k].1.data_mut()[i] = orig - opts.step;
            let minus = evaluate(&f, &probe, &cotangent)?;
            probe[k].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    op: "grad_check: numeric gradient",
                })
                .map_err(|e| e.context(format!("{name}/{input_name}")));
            }
            let e = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            err = err.max(e);
        }
        worst = worst.max(err);
        per_input.push((input_name.clone(), err));
    }
    Ok(GradReport {
        op: name.to_string(),
        per_input,
        max_rel_error: worst,
        tolerance: opts.tolerance,
    })
}
