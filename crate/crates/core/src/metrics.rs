//! Reconstruction quality (PSNR, MS-SSIM, perceptual distance) and identity leakage (FPESR)
//! measured with a locally trained identity model.

use alloc::vec;
use alloc::vec::Vec;

use core::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Bound, Conv2d, Linear, ParamSet, LEAK};
use crate::rng::{normal, stream};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Per-row PSNR of two `[B, ...]` batches.
pub fn psnr_rows(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<f64>> {
    check_same(x, y)?;
    let n = x.row_len();
    x.data().chunks(n).zip(y.data().chunks(n)).map(|(a, b)| psnr(a, b)).collect()
}

fn check_same(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::InvalidShape {
            expected: x.numel(),
            actual: y.numel(),
        });
    }
    Ok(())
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = win.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| win[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane at one scale.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> (f64, f64) {
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, win);
    let (mu_b, _, _) = filter_valid(b, h, w, win);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, win);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, win);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, win);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let csv = (2.0 * cov + c2) / (va + vb + c2);
        cs += csv;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * csv;
    }
    (ssim / n, cs / n)
}

/// 2×2 average pooling (odd trailing rows/columns are dropped).
fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25 * (p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

static SCALE_WARNED: AtomicBool = AtomicBool::new(false);

/// Number of pyramid scales an `h×w` image supports, at most five.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut s = 0;
    let m = h.min(w);
    while s < MS_SSIM_WEIGHTS.len() && m >> s >= SSIM_WINDOW {
        s += 1;
    }
    s
}

/// Multi-scale SSIM of two `[C, H, W]` images with values in `[0, 1]`.
///
/// Gaussian window 11 taps, σ = 1.5, `K1 = 0.01`, `K2 = 0.03`, canonical five-scale
/// weights. Each channel is scored separately and the channel scores are averaged. Images
/// too small for five scales use the first weights renormalized to sum to one.
pub fn ms_ssim(x: &[f64], y: &[f64], shape: [usize; 3]) -> Result<f64> {
    let [c, h, w] = shape;
    if x.len() != c * h * w || y.len() != c * h * w {
        return Err(Error::InvalidShape {
            expected: c * h * w,
            actual: x.len().max(y.len()),
        });
    }
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(Error::InvalidShape {
            expected: SSIM_WINDOW * SSIM_WINDOW,
            actual: h * w,
        });
    }
    if scales < MS_SSIM_WEIGHTS.len() && !SCALE_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("ms_ssim: {h}x{w} image supports only {scales} scales");
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let win = gaussian_window();
    let plane = h * w;
    let mut acc = 0.0;
    for ch in 0..c {
        let (mut a, mut b) = (x[ch * plane..(ch + 1) * plane].to_vec(), y[ch * plane..(ch + 1) * plane].to_vec());
        let (mut hh, mut ww) = (h, w);
        let mut score = 1.0;
        for s in 0..scales {
            let (ssim, cs) = ssim_plane(&a, &b, hh, ww, &win);
            let weight = MS_SSIM_WEIGHTS[s] / total;
            let term = if s + 1 == scales { ssim } else { cs };
            score *= libm::pow(term.max(0.0), weight);
            if s + 1 < scales {
                let (na, nh, nw) = downsample(&a, hh, ww);
                b = downsample(&b, hh, ww).0;
                a = na;
                hh = nh;
                ww = nw;
            }
        }
        acc += score;
    }
    Ok(acc / c as f64)
}

/// Per-row MS-SSIM of two `[B, C, H, W]` batches.
pub fn ms_ssim_rows(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<f64>> {
    check_same(x, y)?;
    let s = x.shape();
    let shape = [s[1], s[2], s[3]];
    let n = x.row_len();
    x.data().chunks(n).zip(y.data().chunks(n)).map(|(a, b)| ms_ssim(a, b, shape)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecisionRule {
    NearestClass,
    /// Same identity when the embedding cosine similarity is at least `tau`.
    CosineThreshold { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityConfig {
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training images get Gaussian noise with amplitude drawn from `U[0, noise_aug]`.
    pub noise_aug: f64,
    pub gate: f64,
    pub use_cosine_rule: bool,
    /// Target true-positive rate on clean pairs for the cosine threshold.
    pub cosine_tpr: f64,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            embed_dim: 32,
            epochs: 60,
            batch: 32,
            lr: 1e-3,
            noise_aug: 0.3,
            gate: 0.9,
            use_cosine_rule: false,
            cosine_tpr: 0.95,
        }
    }
}

/// Convolutional identity classifier. Its conv stack doubles as the perceptual feature
/// extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityModel {
    pub params: ParamSet,
    pub image_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub n_ids: usize,
    pub rule: DecisionRule,
    /// Held-out accuracy measured at training time.
    pub accuracy: f64,
}

impl IdentityModel {
    /// Untrained model with seeded initialization.
    pub fn init(image_shape: [usize; 3], widths: &[usize], embed_dim: usize, n_ids: usize, seed: u64) -> Self {
        let mut m = Self {
            params: ParamSet::new(),
            image_shape,
            widths: widths.to_vec(),
            embed_dim,
            n_ids,
            rule: DecisionRule::NearestClass,
            accuracy: 0.0,
        };
        let mut rng = stream(seed, "identity-init");
        for c in m.convs() {
            c.init(&mut m.params, &mut rng);
        }
        m.fc().init(&mut m.params, &mut rng);
        m.head().init(&mut m.params, &mut rng);
        m
    }

    fn convs(&self) -> Vec<Conv2d> {
        let mut prev = self.image_shape[0];
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(alloc::format!("c{}", i + 1), prev, w, 3, 2);
                prev = w;
                c
            })
            .collect()
    }

    fn flat_dim(&self) -> usize {
        let (mut h, mut w) = (self.image_shape[1], self.image_shape[2]);
        for c in self.convs() {
            h = c.out_size(h);
            w = c.out_size(w);
        }
        self.widths.last().copied().unwrap_or(self.image_shape[0]) * h * w
    }

    fn fc(&self) -> Linear {
        Linear::new("fc", self.flat_dim(), self.embed_dim)
    }

    fn head(&self) -> Linear {
        Linear::new("head", self.embed_dim, self.n_ids)
    }

    /// Activations after every conv layer.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Vec<Var> {
        let mut h = x;
        self.convs()
            .iter()
            .map(|c| {
                let y = c.forward(g, p, h);
                h = g.leaky_relu(y, LEAK);
                h
            })
            .collect()
    }

    fn embed_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let f = *self.features(g, p, x).last().expect("at least one conv");
        let b = g.value(f).batch();
        let flat = g.reshape(f, &[b, self.flat_dim()]);
        let e = self.fc().forward(g, p, flat);
        g.leaky_relu(e, LEAK)
    }

    fn logits_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let e = self.embed_graph(g, p, x);
        self.head().forward(g, p, e)
    }

    /// Layer-averaged, channel-normalized squared feature distance, averaged over the batch.
    /// `y` is typically a constant target.
    pub fn perceptual_loss<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, y: Var) -> Var {
        let fx = self.features(g, p, x);
        let fy = self.features(g, p, y);
        let layers = fx.len() as f64;
        let mut total: Option<Var> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let s = g.shape(a).to_vec();
            let an = g.channel_unit_norm(a);
            let bn = g.channel_unit_norm(b);
            let d = g.sq_dist(an, bn);
            let d = g.scale(d, 1.0 / (layers * (s[0] * s[2] * s[3]) as f64));
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        total.expect("at least one layer")
    }

    fn eval<T: Scalar, R>(&self, x: &Tensor<f64>, f: impl FnOnce(&mut Graph<T>, &Bound, Var) -> R) -> R {
        let mut g = Graph::<T>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.cast());
        f(&mut g, &p, xv)
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.eval::<f32, _>(x, |g, p, xv| {
            let l = self.logits_graph(g, p, xv);
            g.value(l).cast()
        })
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Vec<usize> {
        let l = self.logits(x);
        l.data()
            .chunks(self.n_ids)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn embed(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.eval::<f32, _>(x, |g, p, xv| {
            let e = self.embed_graph(g, p, xv);
            g.value(e).cast()
        })
    }

    /// Per-sample perceptual distance between two `[B, C, H, W]` batches.
    pub fn perceptual_distance(&self, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<f64>> {
        check_same(x, y)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let fx = self.features(&mut g, &p, xv);
        let fy = self.features(&mut g, &p, yv);
        let layers = fx.len() as f64;
        let mut out = vec![0.0; x.batch()];
        for (a, b) in fx.into_iter().zip(fy) {
            let s = g.shape(a).to_vec();
            let an = g.channel_unit_norm(a);
            let bn = g.channel_unit_norm(b);
            let n = g.value(an).row_len();
            let hw = (s[2] * s[3]) as f64;
            for (o, (ra, rb)) in out.iter_mut().zip(g.value(an).data().chunks(n).zip(g.value(bn).data().chunks(n))) {
                *o += ra.iter().zip(rb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / (hw * layers);
            }
        }
        Ok(out)
    }

    /// Whether each pair is judged to show the same person under the decision rule.
    pub fn same_identity(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Vec<bool>> {
        if a.batch() != b.batch() {
            return Err(Error::LengthMismatch {
                left: a.batch(),
                right: b.batch(),
            });
        }
        Ok(match self.rule {
            DecisionRule::NearestClass => self.predict(a).into_iter().zip(self.predict(b)).map(|(p, q)| p == q).collect(),
            DecisionRule::CosineThreshold { tau } => cosine_rows(&self.embed(a), &self.embed(b)).into_iter().map(|c| c >= tau).collect(),
        })
    }
}

fn cosine_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = a.row_len();
    a.data()
        .chunks(n)
        .zip(b.data().chunks(n))
        .map(|(u, v)| {
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            let nu = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
            let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                dot / (nu * nv)
            }
        })
        .collect()
}

/// Fraction of reconstructions judged to show the same person as their original.
pub fn fpesr(recons: &Tensor<f64>, originals: &Tensor<f64>, model: &IdentityModel) -> Result<f64> {
    let same = model.same_identity(recons, originals)?;
    if same.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(same.iter().filter(|&&s| s).count() as f64 / same.len() as f64)
}

/// Nearest-class accuracy against ground-truth labels.
pub fn accuracy(model: &IdentityModel, data: &Dataset) -> f64 {
    let pred = model.predict(&data.images);
    pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len().max(1) as f64
}

/// Trains the identity classifier and checks the accuracy gate on `held_out`.
///
/// A dataset with fewer than two identities cannot demonstrate identification and fails
/// the gate with accuracy 0.
pub fn train_identity_model(
    train: &Dataset,
    held_out: &Dataset,
    cfg: &IdentityConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<IdentityModel> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_ids = train.n_ids.max(held_out.n_ids);
    if n_ids < 2 {
        return Err(Error::GateNotMet {
            accuracy: 0.0,
            required: cfg.gate,
        });
    }
    let mut model = IdentityModel::init(train.image_shape(), &cfg.widths, cfg.embed_dim, n_ids, seed);
    let mut rng = stream(seed, "identity-train");
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_good = model.params.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch) {
            let mut x = train.batch(idx);
            let row = x.row_len();
            for r in x.data_mut().chunks_mut(row) {
                let amp = rng.random_range(0.0..=cfg.noise_aug);
                for v in r.iter_mut() {
                    *v = (*v + amp * normal(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(x.cast());
            let logits = model.logits_graph(&mut g, &p, xv);
            let loss = g.cross_entropy(logits, &labels);
            let grads = g.backward(loss);
            opt.step(&mut model.params, &p.grads(&g, &grads));
            total += g.item(loss).as_f64() * idx.len() as f64;
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() || !model.params.is_finite() {
            return Err(Error::TrainingDiverged {
                stage: "identity",
                epoch,
                last_good: Some(alloc::boxed::Box::new(last_good)),
            });
        }
        last_good.clone_from(&model.params);
        on_epoch(epoch, mean);
    }
    model.accuracy = accuracy(&model, held_out);
    if model.accuracy < cfg.gate {
        return Err(Error::GateNotMet {
            accuracy: model.accuracy,
            required: cfg.gate,
        });
    }
    if cfg.use_cosine_rule {
        model.rule = DecisionRule::CosineThreshold {
            tau: calibrate_tau(&model, held_out, cfg.cosine_tpr),
        };
    }
    Ok(model)
}

/// Threshold at which `tpr` of clean same-identity pairs are accepted.
pub fn calibrate_tau(model: &IdentityModel, data: &Dataset, tpr: f64) -> f64 {
    let emb = model.embed(&data.images);
    let n = emb.row_len();
    let rows: Vec<&[f64]> = emb.data().chunks(n).collect();
    let mut sims = Vec::new();
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            if data.labels[i] == data.labels[j] {
                let a = Tensor::new(&[1, n], rows[i].to_vec()).expect("row");
                let b = Tensor::new(&[1, n], rows[j].to_vec()).expect("row");
                sims.push(cosine_rows(&a, &b)[0]);
            }
        }
    }
    if sims.is_empty() {
        return 1.0;
    }
    sims.sort_by(|a, b| a.total_cmp(b));
    let idx = (((1.0 - tpr) * sims.len() as f64) as usize).min(sims.len() - 1);
    sims[idx]
}

/// Per-sample metrics of one evaluation cell plus their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub perceptual: Vec<f64>,
    pub same_identity: Vec<bool>,
    pub fpesr: f64,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var) }
    }
}

impl MetricReport {
    /// Scores `recons` against `targets`.
    pub fn compute(recons: &Tensor<f64>, targets: &Tensor<f64>, model: &IdentityModel) -> Result<Self> {
        let same = model.same_identity(recons, targets)?;
        let n = same.len();
        Ok(Self {
            psnr: psnr_rows(targets, recons)?,
            ms_ssim: ms_ssim_rows(targets, recons)?,
            perceptual: model.perceptual_distance(targets, recons)?,
            fpesr: same.iter().filter(|&&s| s).count() as f64 / n.max(1) as f64,
            same_identity: same,
            n_samples: n,
        })
    }

    pub fn psnr_summary(&self) -> Summary {
        Summary::of(&self.psnr)
    }

    pub fn ms_ssim_summary(&self) -> Summary {
        Summary::of(&self.ms_ssim)
    }

    pub fn perceptual_summary(&self) -> Summary {
        Summary::of(&self.perceptual)
    }

    /// FPESR recomputed from the per-sample rows.
    pub fn recomputed_fpesr(&self) -> f64 {
        self.same_identity.iter().filter(|&&s| s).count() as f64 / self.n_samples.max(1) as f64
    }
}
