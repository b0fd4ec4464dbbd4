//! Toy training loop: SGD with momentum over a handful of images.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::detect::total::LossBreakdown;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelConfig, ModelWeights, TrainSample};
use crate::params::ParamTree;
use crate::tensor::{Scalar, Tensor4};

pub const CSV_HEADER: &str = "step,total,objectness,anchor,class,bbox,mask";

/// SGD with classical momentum and global-norm gradient clipping.
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    velocity: Vec<Tensor4<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, clip: f64) -> Self {
        Self {
            lr,
            momentum,
            clip,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ v + g`, `w ← w − lr v`, with `g` rescaled to norm `clip` when
    /// larger. Returns the pre-clip gradient norm.
    pub fn step<P: ParamTree<Tensor4<T>>>(&mut self, weights: &mut P, grads: &P) -> f64 {
        let mut g: Vec<&Tensor4<T>> = Vec::new();
        grads.visit("", &mut |_, t| g.push(t));
        let norm = g
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        if self.velocity.is_empty() {
            self.velocity = g.iter().map(|t| t.zeroed_like()).collect();
        }
        let (mu, lr, s) = (T::of(self.momentum), T::of(self.lr), T::of(scale));
        let mut i = 0;
        let velocity = &mut self.velocity;
        weights.visit_mut("", &mut |_, w| {
            let v = &mut velocity[i];
            for ((wv, vv), gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g[i].data()) {
                *vv = mu * *vv + s * *gv;
                *wv -= lr * *vv;
            }
            i += 1;
        });
        norm
    }
}

fn add_into<T: Scalar, P: ParamTree<Tensor4<T>>>(acc: &mut P, other: &P) {
    let mut o: Vec<&Tensor4<T>> = Vec::new();
    other.visit("", &mut |_, t| o.push(t));
    let mut i = 0;
    acc.visit_mut("", &mut |_, t| {
        t.data_mut().iter_mut().zip(o[i].data()).for_each(|(a, b)| *a += *b);
        i += 1;
    });
}

fn scale_all<T: Scalar, P: ParamTree<Tensor4<T>>>(p: &mut P, s: T) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
}

pub struct TrainResult<T> {
    pub weights: ModelWeights<Tensor4<T>>,
    pub initial: ModelWeights<Tensor4<T>>,
    pub history: Vec<(usize, LossBreakdown)>,
    /// Step at which the loss became non-finite; `weights` are those after
    /// the last finite step.
    pub diverged_at: Option<usize>,
}

impl<T> TrainResult<T> {
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (step, b) in &self.history {
            let _ = writeln!(s, "{step},{}", b.csv_row());
        }
        s
    }
}

/// Initial weights for a run: a pure function of the seed and config.
pub fn init_weights<T: Scalar>(run: &RunConfig, model: &ModelConfig) -> Result<ModelWeights<Tensor4<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    ModelWeights::init(model, &mut rng)
}

/// Runs `run.max_steps` steps; each epoch visits the images in a fresh
/// seeded order, `batch_size` images per step with averaged gradients.
pub fn train<T: Scalar>(
    run: &RunConfig,
    samples: &[TrainSample<T>],
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainResult<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("train", "no training images"));
    }
    let model = run.model_config()?;
    let initial = init_weights::<T>(run, &model)?;
    let mut weights = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(run.learning_rate, run.momentum, run.grad_clip);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(run.max_steps);
    for step in 1..=run.max_steps {
        let mut acc: Option<ModelWeights<Tensor4<T>>> = None;
        let mut mean = LossBreakdown::default();
        for _ in 0..run.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let (b, g) = loss_and_grad(&model, &weights, &samples[idx], &mut rng)
                .map_err(|e| e.context(format!("step {step}")))?;
            let n = run.batch_size as f64;
            mean.objectness += b.objectness / n;
            mean.anchor += b.anchor / n;
            mean.class += b.class / n;
            mean.bbox += b.bbox / n;
            mean.mask += b.mask / n;
            mean.total += b.total / n;
            match acc.as_mut() {
                Some(a) => add_into(a, &g),
                None => acc = Some(g),
            }
        }
        if !mean.total.is_finite() {
            log::error!("loss is not finite at step {step}; stopping");
            return Ok(TrainResult {
                weights,
                initial,
                history,
                diverged_at: Some(step),
            });
        }
        let mut grads = acc.expect("batch_size >= 1");
        if run.batch_size > 1 {
            scale_all(&mut grads, T::of(1.0 / run.batch_size as f64));
        }
        opt.step(&mut weights, &grads);
        on_step(step, &mean);
        history.push((step, mean));
    }
    Ok(TrainResult {
        weights,
        initial,
        history,
        diverged_at: None,
    })
}

/// Centered moving average of the total loss with window `w`.
pub fn smoothed_totals(history: &[(usize, LossBreakdown)], w: usize) -> Vec<f64> {
    let t: Vec<f64> = history.iter().map(|(_, b)| b.total).collect();
    (0..t.len())
        .map(|i| {
            let lo = i.saturating_sub(w / 2);
            let hi = (i + w / 2 + 1).min(t.len());
            t[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ConvWeights;

    #[test]
    fn sgd_momentum_and_clipping() {
        let mut w = vec![ConvWeights {
            weight: Tensor4::<f64>::scalar(1.0),
            bias: Tensor4::scalar(0.0),
        }];
        let g = vec![ConvWeights {
            weight: Tensor4::<f64>::scalar(2.0),
            bias: Tensor4::scalar(0.0),
        }];
        let mut opt = Sgd::new(0.1, 0.5, 100.0);
        opt.step(&mut w, &g);
        assert!((w[0].weight.data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut w, &g);
        // v = 0.5 * 2 + 2 = 3
        assert!((w[0].weight.data()[0] - 0.5).abs() < 1e-15);
        let mut clipped = Sgd::new(1.0, 0.0, 1.0);
        let norm = clipped.step(&mut w, &g);
        assert_eq!(norm, 2.0);
        assert!((w[0].weight.data()[0] - -0.5).abs() < 1e-15);
    }

    #[test]
    fn smoothing_window() {
        let h: Vec<_> = (0..5)
            .map(|i| {
                (
                    i,
                    LossBreakdown {
                        total: i as f64,
                        ..Default::default()
                    },
                )
            })
            .collect();
        assert_eq!(smoothed_totals(&h, 3), vec![0.5, 1.0, 2.0, 3.0, 3.5]);
    }
}
