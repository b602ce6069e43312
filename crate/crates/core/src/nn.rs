//! Parameter storage, layers and the Adam optimizer.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

/// A named, ordered collection of `f64` parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    /// Copies every parameter of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// The parameters whose names start with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { params }
    }

    /// Places every parameter into `g`, as variables when `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable { g.variable(t) } else { g.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// A view of the parameters named `prefix*`, addressed without the prefix.
    pub fn with_prefix(&self, prefix: &str) -> Bound {
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, &v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v)))
            .collect();
        Bound { vars }
    }

    /// Gradients of every bound parameter, converted to `f64`. Parameters that the loss does
    /// not depend on get zeros.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>, grads: &Grads<T>) -> BTreeMap<String, Tensor<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = match grads.get(v) {
                    Some(t) => t.cast::<f64>(),
                    None => Tensor::zeros(g.shape(v)),
                };
                (k.clone(), t)
            })
            .collect()
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// 2-D convolution layer, `k×k` kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization of weights and bias.
    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let bound = 1.0 / libm::sqrt((self.in_ch * self.kernel * self.kernel) as f64);
        ps.insert(self.w(), uniform_tensor(&[self.out_ch, self.in_ch, self.kernel, self.kernel], bound, rng));
        ps.insert(self.b(), uniform_tensor(&[self.out_ch], bound, rng));
    }

    pub fn init_zero(&self, ps: &mut ParamSet) {
        ps.insert(self.w(), Tensor::zeros(&[self.out_ch, self.in_ch, self.kernel, self.kernel]));
        ps.insert(self.b(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let (w, b) = (p.var(&self.w()), p.var(&self.b()));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let bound = 1.0 / libm::sqrt(self.fan_in as f64);
        ps.insert(self.w(), uniform_tensor(&[self.fan_out, self.fan_in], bound, rng));
        ps.insert(self.b(), uniform_tensor(&[self.fan_out], bound, rng));
    }

    pub fn init_zero(&self, ps: &mut ParamSet) {
        ps.insert(self.w(), Tensor::zeros(&[self.fan_out, self.fan_in]));
        ps.insert(self.b(), Tensor::zeros(&[self.fan_out]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let (w, b) = (p.var(&self.w()), p.var(&self.b()));
        g.linear(x, w, Some(b))
    }
}

pub const LEAK: f64 = 0.2;

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &BTreeMap<String, Tensor<f64>>) {
        self.t += 1;
        for (name, grad) in grads {
            if let Some(p) = ps.get_mut(name) {
                Self::update(
                    self.lr, self.beta1, self.beta2, self.eps, self.t,
                    self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]),
                    self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]),
                    p.data_mut(),
                    grad.data(),
                    None,
                );
            }
        }
    }

    /// Updates a free-standing variable. Rows whose `active` flag is false are left untouched,
    /// so a batch behaves like independent per-row optimizations.
    pub fn step_rows(&mut self, key: &str, x: &mut [f64], grad: &[f64], active: Option<&[bool]>) {
        self.t += 1;
        Self::update(
            self.lr, self.beta1, self.beta2, self.eps, self.t,
            self.m.entry(key.to_string()).or_insert_with(|| vec![0.0; grad.len()]),
            self.v.entry(key.to_string()).or_insert_with(|| vec![0.0; grad.len()]),
            x,
            grad,
            active,
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        t: u64,
        m: &mut [f64],
        v: &mut [f64],
        x: &mut [f64],
        grad: &[f64],
        active: Option<&[bool]>,
    ) {
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        let row = active.map_or(x.len(), |a| x.len() / a.len().max(1));
        for i in 0..x.len() {
            if let Some(a) = active {
                if !a[i / row] {
                    continue;
                }
            }
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            x[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
        }
    }
}

/// Per-epoch progress passed to training observers.
pub struct EpochLog<'a> {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub params: &'a ParamSet,
}

/// Mini-batch schedule shared by every trainer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decay the learning rate exponentially to a tenth over the run.
    pub decay: bool,
}

/// Runs `epochs` passes of Adam over `n` items in shuffled mini-batches.
///
/// `loss` builds the batch objective in a fresh `f32` graph with the parameters bound as
/// variables. Returns the per-epoch mean loss. A non-finite loss or parameter aborts with
/// [`Error::TrainingDiverged`] carrying the last finite parameters.
pub fn train_loop<F>(
    params: &mut ParamSet,
    n: usize,
    schedule: &Schedule,
    stage: &'static str,
    rng: &mut StreamRng,
    mut loss: F,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<f64>>
where
    F: FnMut(&[usize], &mut StreamRng, &mut Graph<f32>, &Bound) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(schedule.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good = params.clone();
    let mut curve = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        if schedule.decay {
            opt.lr = decayed_lr(schedule.lr, epoch, schedule.epochs);
        }
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(schedule.batch.max(1)) {
            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g, true);
            let l = loss(idx, rng, &mut g, &bound)?;
            let value = g.item(l).as_f64();
            if !value.is_finite() {
                return Err(diverged(stage, epoch, last_good));
            }
            let grads = g.backward(l);
            opt.step(params, &bound.grads(&g, &grads));
            total += value * idx.len() as f64;
        }
        if !params.is_finite() {
            return Err(diverged(stage, epoch, last_good));
        }
        last_good.clone_from(params);
        let mean = total / n as f64;
        curve.push(mean);
        on_epoch(&EpochLog {
            stage,
            epoch,
            loss: mean,
            params,
        });
    }
    Ok(curve)
}

fn diverged(stage: &'static str, epoch: usize, last_good: ParamSet) -> Error {
    Error::TrainingDiverged {
        stage,
        epoch,
        last_good: Some(Box::new(last_good)),
    }
}

/// Learning rate decayed exponentially to a tenth over the run.
pub fn decayed_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * libm::pow(0.1, epoch as f64 / epochs.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.map(|v| 2.0 * (v - 0.5)));
            opt.step(&mut ps, &grads);
        }
        for &v in ps.get("x").unwrap().data() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut x = vec![0.0, 0.0];
        let mut opt = Adam::new(0.1);
        opt.step_rows("x", &mut x, &[3.0, -1e-3], None);
        assert!((x[0] + 0.1).abs() < 1e-6);
        assert!((x[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn frozen_rows_do_not_move() {
        let mut x = vec![1.0, 1.0, 2.0, 2.0];
        let mut opt = Adam::new(0.1);
        opt.step_rows("x", &mut x, &[1.0, 1.0, 1.0, 1.0], Some(&[true, false]));
        assert_eq!(&x[2..], &[2.0, 2.0]);
        assert!(x[0] < 1.0);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let layer = Conv2d::new("c", 3, 4, 3, 2);
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        layer.init(&mut a, &mut ChaCha8Rng::seed_from_u64(1));
        layer.init(&mut b, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let bound = 1.0 / 27f64.sqrt();
        assert!(a.get("c.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.numel(), 4 * 27 + 4);
    }

    #[test]
    fn subset_round_trip() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0));
        let mut all = ParamSet::new();
        all.extend_prefixed("enc.", &ps);
        assert_eq!(all.subset("enc."), ps);
        assert!(all.subset("dec.").is_empty());
    }

    #[test]
    fn decayed_lr_endpoints() {
        assert_eq!(decayed_lr(1.0, 0, 10), 1.0);
        assert!((decayed_lr(1.0, 10, 10) - 0.1).abs() < 1e-12);
    }
}
