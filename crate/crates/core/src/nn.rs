//! Small building blocks shared by the transformer and the actor-critic nets.

use dsr_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("standard deviation is finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("element count matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights drawn from N(0, std²), zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal_tensor(rng, vec![fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, 1e-5)?)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0, |acc, x| acc + x * x)
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// Index of the largest entry among `allowed`, lowest index on ties.
pub fn masked_argmax(values: &[f64], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in values.iter().zip(allowed).enumerate() {
        if ok && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Softmax over `allowed` entries only; disallowed entries get probability 0.
pub fn masked_softmax(values: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = values
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .zip(allowed)
        .map(|(&v, &ok)| if ok { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Draws an index from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_respects_mask_and_ties() {
        assert_eq!(masked_argmax(&[5.0, 1.0, 3.0], &[false, true, true]), Some(2));
        assert_eq!(masked_argmax(&[2.0, 2.0], &[true, true]), Some(0));
        assert_eq!(masked_argmax(&[1.0], &[false]), None);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let p = masked_softmax(&[0.0, 100.0, 0.0], &[true, false, true]);
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn clipping_scales_to_bound() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
