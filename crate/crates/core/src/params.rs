//! Parameter containers and the per-forward [`Session`] that binds them to a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{update_running, BatchStats, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::tensor::{Scalar, Tensor};
use crate::tnsr::Bundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other state that the optimizer never touches.
    Buffer,
}

/// Structured parameter sets expose their tensors under stable dotted names.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    fn named(&self) -> IndexMap<String, (Tensor<T>, ParamKind)> {
        let mut out = IndexMap::new();
        self.visit("", &mut |name, t, kind| {
            out.insert(name.to_string(), (t.clone(), kind));
        });
        out
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.len();
            }
        });
        n
    }

    /// Overwrites every tensor from `source`, checking names and shapes.
    fn load_named(&mut self, source: &IndexMap<String, Tensor<T>>) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        self.visit_mut("", &mut |name, t, _| match source.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => mismatched.push(format!("{name}: {:?} vs {:?}", t.shape(), src.shape())),
            None => missing.push(name.to_string()),
        });
        let mut known = std::collections::HashSet::new();
        self.visit("", &mut |name, _, _| {
            known.insert(name.to_string());
        });
        let unexpected: Vec<&String> = source.keys().filter(|k| !known.contains(*k)).collect();
        if !missing.is_empty() || !mismatched.is_empty() || !unexpected.is_empty() {
            return Err(Error::Config(format!(
                "parameter set mismatch; missing {missing:?}, wrong shape {mismatched:?}, unexpected {unexpected:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn key<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

/// Binds parameter tensors to a fresh tape for one forward/backward pass.
///
/// Parameters are keyed by address, so the structure they live in must stay
/// borrowed (and unmoved) until gradients and statistics have been collected.
pub struct Session<T: Scalar> {
    pub tape: Tape<T>,
    mode: NormMode,
    trainable: bool,
    bound: HashMap<usize, Var>,
    stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Session<T> {
    /// Training session: batch-norm uses batch statistics, parameters track gradients.
    pub fn train() -> Self {
        Self::with_mode(NormMode::Train, true)
    }

    /// Inference session: running statistics, no gradients.
    pub fn eval() -> Self {
        Self::with_mode(NormMode::Eval, false)
    }

    pub fn with_mode(mode: NormMode, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            trainable,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let k = key(t);
        if let Some(&v) = self.bound.get(&k) {
            return v;
        }
        let v = self.tape.leaf(t.clone(), self.trainable);
        self.bound.insert(k, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn conv(&mut self, x: Var, layer: &ConvParams<T>, padding: Padding) -> Result<Var> {
        let w = self.param(&layer.weight);
        let b = self.param(&layer.bias);
        self.tape.conv(x, w, Some(b), 1, padding)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormParams<T>) -> Result<Var> {
        let g = self.param(&bn.gamma);
        let b = self.param(&bn.beta);
        let (y, stats) = self
            .tape
            .batch_norm(x, g, b, (&bn.running_mean, &bn.running_var), self.mode)?;
        if let Some(stats) = stats {
            self.stats.push((key(&bn.running_mean), stats));
        }
        Ok(y)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of all trainable parameters of `params`, by name. Parameters
    /// that did not take part in the forward pass get zero gradients.
    pub fn gradients<P: Parameters<T> + ?Sized>(&self, params: &P) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        params.visit("", &mut |name, t, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let g = self
                .bound
                .get(&key(t))
                .and_then(|&v| self.tape.grad(v))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.to_string(), g);
        });
        out
    }

    /// Batch statistics observed during the forward pass, keyed by the running
    /// mean buffer's name. Several entries per layer are possible.
    pub fn batch_stats<P: Parameters<T> + ?Sized>(&self, params: &P) -> Vec<(String, BatchStats<T>)> {
        let mut names = HashMap::new();
        params.visit("", &mut |name, t, _| {
            names.insert(key(t), name.to_string());
        });
        self.stats
            .iter()
            .filter_map(|(k, s)| names.get(k).map(|n| (n.clone(), s.clone())))
            .collect()
    }
}

/// Applies statistics collected by [`Session::batch_stats`] in recording order.
pub fn apply_batch_stats<T: Scalar, P: Parameters<T> + HasBatchNorms<T> + ?Sized>(
    params: &mut P,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) {
    for (name, s) in stats {
        if let Some(bn) = params.batch_norm_mut(name) {
            update_running(&mut bn.running_mean, &mut bn.running_var, s, momentum);
        }
    }
}

/// Packs every tensor of `params` (trainable and buffers) into a bundle.
pub fn to_bundle<T: Scalar, P: Parameters<T> + ?Sized>(params: &P, header: serde_json::Value) -> Bundle {
    let mut bundle = Bundle::new(header);
    params.visit("", &mut |name, t, _| bundle.insert(name, t));
    bundle
}

/// Restores `params` from a bundle written by [`to_bundle`].
pub fn load_bundle<T: Scalar, P: Parameters<T> + ?Sized>(params: &mut P, bundle: &Bundle) -> Result<()> {
    params.load_named(&bundle.floats())
}

/// Lookup of batch-norm layers by the name of their running-mean buffer.
pub trait HasBatchNorms<T: Scalar> {
    fn batch_norm_mut(&mut self, running_mean_name: &str) -> Option<&mut BatchNormParams<T>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[C_out, C_in, k..]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)` for weight and bias.
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: &[usize]) -> Self {
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound))),
            bias: Tensor::from_fn(&[c_out], |_| T::from_f64(rng.gen_range(-bound..bound))),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Scalar> Parameters<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

impl<T: Scalar> Parameters<T> for BatchNormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}
