//! Multilayer perceptrons, parameter binding, Adam and gradient clipping.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A learnable array and its most recent gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters in a fixed order.
pub trait Module {
    /// Parameters with stable dotted names, in construction order.
    fn named_params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn params(&self) -> Vec<&Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }
}

/// A tape plus the mapping from model parameters to their tape leaves.
///
/// Parameters are keyed by address, so the model must stay borrowed (and
/// unmoved) between the forward pass and [`Trace::backward_into`].
#[derive(Debug)]
pub struct Trace {
    pub tape: Tape,
    bound: HashMap<usize, Var>,
    trainable: bool,
}

impl Trace {
    /// Parameters become differentiable leaves.
    pub fn training() -> Self {
        Trace {
            tape: Tape::new(),
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Parameters become constants; nothing is differentiated.
    pub fn inference() -> Self {
        Trace {
            tape: Tape::new(),
            bound: HashMap::new(),
            trainable: false,
        }
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        let key = p as *const Param as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = if self.trainable {
            self.tape.param(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(key, v);
        v
    }

    /// Runs backward from `output` and stores a gradient on every parameter.
    /// Parameters that were never bound receive zeros.
    pub fn backward_into<'a>(
        &self,
        output: Var,
        params: impl IntoIterator<Item = &'a mut Param>,
    ) -> Result<()> {
        let mut grads = self.tape.backward(output)?;
        for p in params {
            let key = p as *const Param as usize;
            let grad = match self.bound.get(&key) {
                Some(&v) => Tensor::new(p.value.shape(), grads.take(v))?,
                None => Tensor::zeros(p.value.shape()),
            };
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, bias: bool, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (6.0 / (inp + out) as f64).sqrt();
        let data = (0..inp * out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: Param::new(Tensor::new(&[inp, out], data).expect("weight shape")),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out]))),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, trace: &mut Trace, x: Var) -> Result<Var> {
        let w = trace.bind(&self.weight);
        let y = trace.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = trace.bind(b);
                trace.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Construction options beyond the width list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpOptions {
    pub final_activation: bool,
    pub final_bias: bool,
    /// Multiplies the Glorot bound of the last layer.
    pub final_gain: f64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            final_activation: false,
            final_bias: true,
            final_gain: 1.0,
        }
    }
}

/// Affine layers with SiLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// Seeded construction from the parameter-initialization stream.
    pub fn new(widths: &[usize], final_activation: bool, seed: u64) -> Result<Self> {
        let opts = MlpOptions {
            final_activation,
            ..MlpOptions::default()
        };
        Self::with_options(widths, opts, &mut stream_rng(seed, Stream::Init))
    }

    pub fn with_options(widths: &[usize], opts: MlpOptions, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output width, got {widths:?}"
            )));
        }
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut activations = Vec::with_capacity(n);
        for (i, pair) in widths.windows(2).enumerate() {
            let last = i + 1 == n;
            let (bias, gain) = if last {
                (opts.final_bias, opts.final_gain)
            } else {
                (true, 1.0)
            };
            layers.push(Linear::new(pair[0], pair[1], bias, gain, rng));
            activations.push(if !last || opts.final_activation {
                Activation::Silu
            } else {
                Activation::Identity
            });
        }
        Ok(Mlp {
            layers,
            activations,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_width()
    }

    pub fn forward(&self, trace: &mut Trace, x: Var) -> Result<Var> {
        let shape = trace.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.in_width(), self.out_width()],
            });
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(trace, h)?;
            if *act == Activation::Silu {
                h = trace.tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn named_params_with(&self, prefix: &str) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &layer.weight));
            if let Some(b) = &layer.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
        }
        out
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.named_params_with("mlp")
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            if let Some(b) = &mut layer.bias {
                out.push(b);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Param], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter; gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Layout(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(format!("#{i}")));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().expect("checked above");
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every gradient entry.
pub fn global_grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate for `epoch` of `total` epochs.
    pub fn lr_at(self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(params: &[&mut Param]) -> Vec<f64> {
        params
            .iter()
            .flat_map(|p| p.grad.as_ref().unwrap().data().to_vec())
            .collect()
    }

    #[test]
    fn widths_chain() {
        let m = Mlp::new(&[4, 64, 64, 8], false, 0).unwrap();
        let shapes: Vec<_> = m.layers.iter().map(|l| l.weight.value.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 64], vec![64, 64], vec![64, 8]]);
        assert_eq!(m.activations.last(), Some(&Activation::Identity));
        assert!(Mlp::new(&[4], false, 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(Mlp::new(&[3, 5, 2], true, 9).unwrap(), Mlp::new(&[3, 5, 2], true, 9).unwrap());
        assert_ne!(Mlp::new(&[3, 5, 2], true, 9).unwrap(), Mlp::new(&[3, 5, 2], true, 10).unwrap());
    }

    #[test]
    fn init_within_glorot_bound() {
        let m = Mlp::new(&[64, 64, 1], false, 3).unwrap();
        let bound = (6.0f64 / 128.0).sqrt();
        let w = &m.layers[0].weight.value;
        assert!(w.max_abs() <= bound);
        // a 4096-sample uniform draw should use most of its range
        assert!(w.max_abs() > 0.9 * bound);
        assert!(m.layers[0].bias.as_ref().unwrap().value.max_abs() == 0.0);
    }

    #[test]
    fn linear_param_count() {
        let m = Mlp::new(&[4, 8], false, 0).unwrap();
        assert_eq!(m.param_count(), 40);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = Mlp::new(&[3, 6, 2], false, 1).unwrap();
        for p in m.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut trace = Trace::inference();
        let x = trace.tape.constant(Tensor::randn(&[5, 3], 0));
        let y = m.forward(&mut trace, x).unwrap();
        assert_eq!(trace.tape.value(y).max_abs(), 0.0);
    }

    #[test]
    fn single_layer_is_affine() {
        let m = Mlp::new(&[3, 2], false, 1).unwrap();
        let x = Tensor::randn(&[4, 3], 5);
        let mut trace = Trace::inference();
        let xv = trace.tape.constant(x.clone());
        let y = m.forward(&mut trace, xv).unwrap();
        let w = &m.layers[0].weight.value;
        for r in 0..4 {
            for c in 0..2 {
                let expected: f64 = (0..3).map(|k| x.at(&[r, k]) * w.at(&[k, c])).sum();
                assert!((trace.tape.value(y).at(&[r, c]) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn width_mismatch_is_error() {
        let m = Mlp::new(&[3, 2], false, 1).unwrap();
        let mut trace = Trace::inference();
        let x = trace.tape.constant(Tensor::zeros(&[2, 4]));
        assert!(m.forward(&mut trace, x).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Param::new(Tensor::randn(&[3], 1));
        let before = p.value.clone();
        let mut adam = AdamState::new(&[&p], AdamConfig::with_lr(0.1));
        p.grad = Some(Tensor::zeros(&[3]));
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
        assert!(p.grad.is_none());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Param::new(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = AdamState::new(&[&p], cfg);
        let g = [0.3, -4.0];
        p.grad = Some(Tensor::new(&[2], g.to_vec()).unwrap());
        adam.step(&mut [&mut p]).unwrap();
        for (i, (&w0, &gi)) in [1.0, -2.0].iter().zip(&g).enumerate() {
            let m = (1.0 - cfg.beta1) * gi;
            let v = (1.0 - cfg.beta2) * gi * gi;
            let mhat = m / (1.0 - cfg.beta1);
            let vhat = v / (1.0 - cfg.beta2);
            let expected = w0 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            assert!((p.value.data()[i] - expected).abs() < 1e-15);
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_missing_grad_is_error() {
        let mut p = Param::new(Tensor::zeros(&[1]));
        let mut adam = AdamState::new(&[&p], AdamConfig::with_lr(0.1));
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut p = Param::new(Tensor::randn(&[5], 4));
        let mut adam = AdamState::new(&[&p], AdamConfig::with_lr(1e-2));
        let mut converged_at = None;
        for step in 0..2000 {
            let g: Vec<f64> = p.value.data().iter().map(|w| 2.0 * w).collect();
            p.grad = Some(Tensor::new(&[5], g).unwrap());
            adam.step(&mut [&mut p]).unwrap();
            let norm = p.value.data().iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm < 1e-3 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not reach |w| < 1e-3");
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut p = Param::new(Tensor::zeros(&[2]));
        p.grad = Some(Tensor::new(&[2], vec![0.3, 0.4]).unwrap());
        let mut params = [&mut p];
        let norm = clip_global_norm(&mut params, 1.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(grads_of(&params), vec![0.3, 0.4]);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut a = Param::new(Tensor::zeros(&[2]));
        let mut b = Param::new(Tensor::zeros(&[1]));
        a.grad = Some(Tensor::new(&[2], vec![6.0, 0.0]).unwrap());
        b.grad = Some(Tensor::new(&[1], vec![8.0]).unwrap());
        let mut params = [&mut a, &mut b];
        let before = grads_of(&params);
        let norm = clip_global_norm(&mut params, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        let after = grads_of(&params);
        assert!((global_grad_norm(&params) - 1.0).abs() < 1e-12);
        let dot: f64 = before.iter().zip(&after).map(|(x, y)| x * y).sum();
        let nb = before.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (nb * na) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.lr_at(1.0, 0, 10), 1.0);
        assert!(LrSchedule::Cosine.lr_at(1.0, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.5, 7, 10), 0.5);
    }

    proptest::proptest! {
        #[test]
        fn clipping_caps_and_never_raises_the_norm(
            grads in proptest::collection::vec(-10.0f64..10.0, 1..40),
            max_norm in 1e-3f64..20.0,
        ) {
            let mut a = Param::new(Tensor::zeros(&[grads.len()]));
            a.grad = Some(Tensor::new(&[grads.len()], grads.clone()).unwrap());
            let mut params = vec![&mut a];
            let before = clip_global_norm(&mut params, max_norm);
            let after = global_grad_norm(&params);
            proptest::prop_assert!(after <= before + 1e-12);
            proptest::prop_assert!(after <= max_norm * (1.0 + 1e-12));
            if before <= max_norm {
                proptest::prop_assert_eq!(params[0].grad.as_ref().unwrap().data(), &grads[..]);
            }
        }
    }
}
