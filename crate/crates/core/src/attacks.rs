//! Eavesdropping attacks on a learned transmitter: glass-box model inversion, closed-box
//! inverse networks trained from API queries, and both again with a generative prior.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, ConvDecoder, LatentGrid};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Var};
use crate::nn::{train_loop, Adam, Bound, EpochLog, Linear, ParamSet, Schedule, LEAK};
use crate::rng::{derive_seed, normals, stream, StreamRng};
use crate::signal::{equalize_rows, transmit_rows, ChannelDraw, ChannelSpec};
use crate::tensor::{Scalar, Tensor};

/// Query-only access to Alice's encoder. Closed-box attacks receive nothing else.
pub trait EncoderApi {
    fn image_shape(&self) -> [usize; 3];
    /// Length of the real channel signal, `2k`.
    fn signal_len(&self) -> usize;
    /// Clean channel inputs for a batch of images.
    fn evaluate(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Full access to a differentiable encoder.
pub trait GlassBoxEncoder {
    fn image_shape(&self) -> [usize; 3];
    fn signal_len(&self) -> usize;
    fn params(&self) -> &ParamSet;
    /// Images `[B, C, H, W]` to signals `[B, 2k]`.
    fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var;
}

impl EncoderApi for Codec {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn signal_len(&self) -> usize {
        2 * self.k()
    }

    fn evaluate(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.encode(x)
    }
}

impl GlassBoxEncoder for Codec {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn signal_len(&self) -> usize {
        2 * self.k()
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        Codec::encode_graph(self, g, p, x)
    }
}

/// `E(x) = A·x` on flattened images, without power normalization. Its inversion problem has
/// a closed-form least-squares answer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    params: ParamSet,
    image_shape: [usize; 3],
}

impl LinearEncoder {
    /// `a` is `[2k, C·H·W]`.
    pub fn new(a: Tensor<f64>, image_shape: [usize; 3]) -> Result<Self> {
        let n: usize = image_shape.iter().product();
        if a.shape().len() != 2 || a.shape()[1] != n || !a.shape()[0].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                expected: n,
                actual: a.row_len(),
            });
        }
        let mut params = ParamSet::new();
        params.insert("a", a);
        Ok(Self { params, image_shape })
    }

    /// Gaussian entries scaled by `1/√N`.
    pub fn random<R: Rng + ?Sized>(k: usize, image_shape: [usize; 3], rng: &mut R) -> Self {
        let n: usize = image_shape.iter().product();
        let scale = 1.0 / libm::sqrt(n as f64);
        let a = normals(rng, 2 * k * n).into_iter().map(|v| v * scale).collect();
        Self::new(Tensor::new(&[2 * k, n], a).expect("matrix shape"), image_shape).expect("valid encoder")
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        self.params.get("a").expect("matrix present")
    }
}

impl GlassBoxEncoder for LinearEncoder {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn signal_len(&self) -> usize {
        self.matrix().shape()[0]
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let b = g.value(x).batch();
        let flat = g.reshape(x, &[b, self.image_shape.iter().product()]);
        g.linear(flat, p.var("a"), None)
    }
}

impl EncoderApi for LinearEncoder {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn signal_len(&self) -> usize {
        self.matrix().shape()[0]
    }

    fn evaluate(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = GlassBoxEncoder::encode_graph(self, &mut g, &p, xv);
        Ok(g.value(z).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Glass,
    Closed,
    GenaiGlass,
    GenaiClosed,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Glass, Strategy::Closed, Strategy::GenaiGlass, Strategy::GenaiClosed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Glass => "glass",
            Strategy::Closed => "closed",
            Strategy::GenaiGlass => "genai-glass",
            Strategy::GenaiClosed => "genai-closed",
        }
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Strategy::GenaiGlass | Strategy::GenaiClosed)
    }

    pub fn is_glass_box(self) -> bool {
        matches!(self, Strategy::Glass | Strategy::GenaiGlass)
    }

    /// The same access model without the prior.
    pub fn prior_free(self) -> Strategy {
        match self {
            Strategy::GenaiGlass => Strategy::Glass,
            Strategy::GenaiClosed => Strategy::Closed,
            s => s,
        }
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent.
    Gd,
}

/// How glass-box Eve uses her channel knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveCsi {
    /// Invert `h ⊙ E(x)` against the raw received signal.
    FoldIn,
    /// Equalize first, then invert `E(x)`.
    Equalize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Settings of the optimization-based attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Per-sample stop threshold on `‖ẑ − F(x)‖₂`.
    pub stop_eps: f64,
    /// Eve's noise variance for the prior-weighted objective. `None` uses the channel's.
    pub sigma_e2: Option<f64>,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Clamp pixels to `[0, 1]` after every step.
    pub clamp: bool,
    pub eve_csi: EveCsi,
    pub precision: Precision,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_iters: 1000,
            stop_eps: 1e-4,
            sigma_e2: None,
            seed: 0,
            optimizer: Optimizer::Adam,
            clamp: true,
            eve_csi: EveCsi::FoldIn,
            precision: Precision::F32,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_iters == 0 || !(self.stop_eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack needs lr > 0, max_iters >= 1 and stop_eps >= 0, got {}, {}, {}",
                self.lr, self.max_iters, self.stop_eps
            )));
        }
        if let Some(s) = self.sigma_e2 {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!("sigma_e2 must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// What Eve receives on her own link.
#[derive(Clone, Debug, PartialEq)]
pub struct Interception {
    /// `h_e ⊙ z + n_e`
    pub raw: Tensor<f64>,
    /// MMSE-equalized with Eve's CSI.
    pub equalized: Tensor<f64>,
    pub draw: ChannelDraw,
}

impl Interception {
    /// Target and fading the glass-box objective is built from.
    pub fn glass_box_view(&self, mode: EveCsi) -> (Tensor<f64>, Option<Tensor<f64>>) {
        match mode {
            EveCsi::FoldIn => (self.raw.clone(), Some(self.draw.h.clone())),
            EveCsi::Equalize => (self.equalized.clone(), None),
        }
    }
}

/// Passes clean signals `z` through an independent draw of Eve's channel.
pub fn intercept<R: Rng + ?Sized>(z: &Tensor<f64>, spec: &ChannelSpec, rng: &mut R) -> Result<Interception> {
    spec.validate()?;
    if !z.row_len().is_multiple_of(2) {
        return Err(Error::InvalidShape {
            expected: z.row_len() + 1,
            actual: z.row_len(),
        });
    }
    let draw = ChannelDraw::sample(spec, z.batch(), z.row_len() / 2, rng);
    let raw = transmit_rows(z, &draw);
    if !raw.is_finite() {
        return Err(Error::NumericalError("intercept"));
    }
    let equalized = equalize_rows(&raw, &draw)?;
    Ok(Interception { raw, equalized, draw })
}

/// `F(x) = h ⊙ E(x)` in the graph. `h = None` means all-ones fading.
pub fn forward_graph<T: Scalar, E: GlassBoxEncoder>(
    g: &mut Graph<T>,
    enc: &E,
    p: &Bound,
    x: Var,
    h: Option<&Tensor<f64>>,
) -> Var {
    let z = enc.encode_graph(g, p, x);
    match h {
        Some(h) => g.complex_mul(z, h.cast()),
        None => z,
    }
}

/// `F(x) = h ⊙ E(x)` for a batch of images.
pub fn forward_fn<E: GlassBoxEncoder>(x: &Tensor<f64>, h: Option<&Tensor<f64>>, enc: &E) -> Result<Tensor<f64>> {
    check_images(x, enc.image_shape())?;
    if let Some(h) = h {
        check_rows(h, x.batch(), enc.signal_len())?;
    }
    let mut g = Graph::<f64>::new();
    let p = enc.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let f = forward_graph(&mut g, enc, &p, xv, h);
    Ok(g.value(f).clone())
}

fn check_images(x: &Tensor<f64>, shape: [usize; 3]) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1..] != shape {
        return Err(Error::InvalidShape {
            expected: shape.iter().product(),
            actual: x.row_len(),
        });
    }
    Ok(())
}

fn check_rows(t: &Tensor<f64>, batch: usize, len: usize) -> Result<()> {
    if t.batch() != batch || t.row_len() != len {
        return Err(Error::InvalidShape {
            expected: batch * len,
            actual: t.numel(),
        });
    }
    Ok(())
}

/// Result of an optimization-based attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    /// Reconstructions in `[0, 1]`.
    pub images: Tensor<f64>,
    /// Batch-mean `½‖ẑ − F(x)‖²` before each iteration.
    pub residuals: Vec<f64>,
    /// Batch-mean objective before each iteration (equals `residuals` without a prior).
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    /// Final optimization variable: pixels, or latent codes with a prior.
    pub solution: Tensor<f64>,
}

struct Problem<'a, E> {
    enc: &'a E,
    target: &'a Tensor<f64>,
    h: Option<&'a Tensor<f64>>,
    /// Generator and data-term weight `1/(2σ²)`.
    prior: Option<(&'a Generator, f64)>,
}

impl<E: GlassBoxEncoder> Problem<'_, E> {
    /// Runs the descent from `init`. `None` signals a non-finite value.
    fn solve<T: Scalar>(&self, init: Tensor<f64>, cfg: &AttackConfig) -> Option<AttackOutcome> {
        let batch = init.batch();
        let mut v = init;
        let mut adam = Adam::new(cfg.lr);
        let mut active = vec![true; batch];
        let mut residuals = Vec::new();
        let mut objectives = Vec::new();
        let data_w = self.prior.map_or(0.5, |(_, w)| w);
        let mut iterations = 0;
        for _ in 0..cfg.max_iters {
            let mut g = Graph::<T>::new();
            let pe = self.enc.params().bind(&mut g, false);
            let vv = g.variable(v.cast());
            let x = match self.prior {
                Some((gen, _)) => {
                    let pg = gen.params.bind(&mut g, false);
                    gen.generate_graph(&mut g, &pg, vv, None)
                }
                None => vv,
            };
            let f = forward_graph(&mut g, self.enc, &pe, x, self.h);
            let t = g.constant(self.target.cast());
            let d = g.sq_dist(f, t);
            let mut loss = g.scale(d, data_w);
            if self.prior.is_some() {
                let s2 = g.sum_sq(vv);
                let s2 = g.scale(s2, 0.5);
                loss = g.add(loss, s2);
            }
            let obj = g.item(loss).as_f64();
            if !obj.is_finite() {
                return None;
            }
            let fv = g.value(f).data();
            let row = self.target.row_len();
            let mut half_sq = 0.0;
            for (i, (fr, tr)) in fv.chunks(row).zip(self.target.data().chunks(row)).enumerate() {
                let r2: f64 = fr.iter().zip(tr).map(|(a, b)| (a.as_f64() - b) * (a.as_f64() - b)).sum();
                half_sq += 0.5 * r2;
                if libm::sqrt(r2) < cfg.stop_eps {
                    active[i] = false;
                }
            }
            residuals.push(half_sq / batch as f64);
            objectives.push(obj / batch as f64);
            if !active.iter().any(|&a| a) {
                break;
            }
            let grads = g.backward(loss);
            let grad = grads.get(vv).map(|t| t.cast::<f64>()).unwrap_or_else(|| Tensor::zeros(v.shape()));
            match cfg.optimizer {
                Optimizer::Adam => adam.step_rows("v", v.data_mut(), grad.data(), Some(&active)),
                Optimizer::Gd => {
                    let rl = v.row_len();
                    for (i, (x, gr)) in v.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        if active[i / rl] {
                            *x -= cfg.lr * gr;
                        }
                    }
                }
            }
            if cfg.clamp && self.prior.is_none() {
                v.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            }
            iterations += 1;
            if !v.is_finite() {
                return None;
            }
        }
        let images = match self.prior {
            Some((gen, _)) => gen.generate(&v, None).ok()?,
            None => v.map(|x| x.clamp(0.0, 1.0)),
        };
        if !images.is_finite() {
            return None;
        }
        Some(AttackOutcome {
            images,
            residuals,
            objectives,
            iterations,
            restarts: 0,
            solution: v,
        })
    }

    fn solve_with_restart(&self, init: impl Fn(&mut StreamRng) -> Tensor<f64>, cfg: &AttackConfig) -> Result<AttackOutcome> {
        cfg.validate()?;
        for restart in 0..2 {
            let tag = if restart == 0 { "attack-init" } else { "attack-restart" };
            let mut rng = stream(cfg.seed, tag);
            let x0 = init(&mut rng);
            let out = match cfg.precision {
                Precision::F32 => self.solve::<f32>(x0, cfg),
                Precision::F64 => self.solve::<f64>(x0, cfg),
            };
            if let Some(mut out) = out {
                out.restarts = restart;
                return Ok(out);
            }
            log::warn!("attack optimization produced a non-finite value (attempt {})", restart + 1);
        }
        Err(Error::AttackDiverged)
    }
}

fn check_target<E: GlassBoxEncoder>(target: &Tensor<f64>, h: Option<&Tensor<f64>>, enc: &E) -> Result<()> {
    if target.row_len() != enc.signal_len() || target.batch() == 0 {
        return Err(Error::InvalidShape {
            expected: enc.signal_len(),
            actual: target.row_len(),
        });
    }
    if let Some(h) = h {
        check_rows(h, target.batch(), enc.signal_len())?;
    }
    Ok(())
}

fn uniform_images(rng: &mut StreamRng, batch: usize, shape: [usize; 3]) -> Tensor<f64> {
    let n = batch * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(&[batch, shape[0], shape[1], shape[2]], data).expect("image shape")
}

/// Glass-box inversion: descent on `½‖ẑ_e − h_e ⊙ E(x)‖²` over pixels from a uniform random
/// start, one restart on a non-finite value.
pub fn glassbox_invert<E: GlassBoxEncoder>(
    zhat: &Tensor<f64>,
    h: Option<&Tensor<f64>>,
    enc: &E,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_target(zhat, h, enc)?;
    let problem = Problem { enc, target: zhat, h, prior: None };
    let shape = enc.image_shape();
    problem.solve_with_restart(|rng| uniform_images(rng, zhat.batch(), shape), cfg)
}

/// [`glassbox_invert`] from a given starting image batch.
pub fn glassbox_invert_from<E: GlassBoxEncoder>(
    zhat: &Tensor<f64>,
    h: Option<&Tensor<f64>>,
    enc: &E,
    x0: &Tensor<f64>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_target(zhat, h, enc)?;
    check_images(x0, enc.image_shape())?;
    let problem = Problem { enc, target: zhat, h, prior: None };
    problem.solve_with_restart(|_| x0.clone(), cfg)
}

/// Weight `1/(2σ_e²)` of the data term.
fn data_weight(cfg: &AttackConfig, sigma_e2: f64) -> Result<f64> {
    let s = cfg.sigma_e2.unwrap_or(sigma_e2);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidConfig(format!("the prior-weighted objective needs 0 < sigma_e2 < inf, got {s}")));
    }
    Ok(0.5 / s)
}

/// Glass-box inversion through the generator: descent on
/// `‖ẑ_e − h_e ⊙ E(G(s))‖²/(2σ_e²) + ½‖s‖²` from `s ~ N(0, I)`, returning `G(s*)`.
/// `channel_noise_var` is used when the config does not fix `sigma_e2`.
pub fn genai_glassbox_invert<E: GlassBoxEncoder>(
    zhat: &Tensor<f64>,
    h: Option<&Tensor<f64>>,
    enc: &E,
    gen: &Generator,
    channel_noise_var: f64,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_target(zhat, h, enc)?;
    if gen.image_shape != enc.image_shape() {
        return Err(Error::InvalidConfig(String::from("generator and encoder image shapes differ")));
    }
    let w = data_weight(cfg, channel_noise_var)?;
    let problem = Problem {
        enc,
        target: zhat,
        h,
        prior: Some((gen, w)),
    };
    problem.solve_with_restart(|rng| gen.sample_latents(zhat.batch(), rng), cfg)
}

/// [`genai_glassbox_invert`] from given latent codes.
pub fn genai_glassbox_invert_from<E: GlassBoxEncoder>(
    zhat: &Tensor<f64>,
    h: Option<&Tensor<f64>>,
    enc: &E,
    gen: &Generator,
    s0: &Tensor<f64>,
    channel_noise_var: f64,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_target(zhat, h, enc)?;
    check_rows(s0, zhat.batch(), gen.d_s)?;
    let w = data_weight(cfg, channel_noise_var)?;
    let problem = Problem {
        enc,
        target: zhat,
        h,
        prior: Some((gen, w)),
    };
    problem.solve_with_restart(|_| s0.clone(), cfg)
}

/// Closed-box training data: probe images, the clean API outputs and one simulated channel
/// realization of them.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryDataset {
    pub images: Tensor<f64>,
    pub clean: Tensor<f64>,
    /// Equalized outputs of Eve's simulated channel.
    pub received: Tensor<f64>,
    pub spec: ChannelSpec,
}

impl QueryDataset {
    /// Number of query pairs `M`.
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn signal_len(&self) -> usize {
        self.clean.row_len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

/// Queries the API once per probe image and simulates Eve's channel on each answer. Failed
/// queries are skipped with a warning.
pub fn collect_query_dataset<R: Rng + ?Sized>(
    api: &dyn EncoderApi,
    probes: &Tensor<f64>,
    spec: &ChannelSpec,
    rng: &mut R,
) -> Result<QueryDataset> {
    spec.validate()?;
    check_images(probes, api.image_shape())?;
    let row = probes.row_len();
    let mut kept = Vec::new();
    let mut clean = Vec::new();
    for i in 0..probes.batch() {
        let x = probes.rows(i, 1);
        match api.evaluate(&x) {
            Ok(z) if z.numel() == api.signal_len() && z.is_finite() => {
                kept.push(i);
                clean.extend_from_slice(z.data());
            }
            Ok(_) => log::warn!("query {i} returned a malformed signal, skipped"),
            Err(e) => log::warn!("query {i} failed: {e}"),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if kept.len() < probes.batch() {
        log::warn!("query dataset is partial: {} of {} probes", kept.len(), probes.batch());
    }
    let m = kept.len();
    let images = probes.gather_rows(&kept);
    debug_assert_eq!(images.numel(), m * row);
    let clean = Tensor::new(&[m, api.signal_len()], clean)?;
    let draw = ChannelDraw::sample(spec, m, api.signal_len() / 2, rng);
    let received = equalize_rows(&transmit_rows(&clean, &draw), &draw)?;
    Ok(QueryDataset {
        images,
        clean,
        received,
        spec: spec.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    Image,
    LatentPlusNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseNetConfig {
    /// Widths of the image-mode decoder.
    pub widths: [usize; 2],
    /// Hidden width of the latent-mode head.
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Draw a fresh simulated channel for every pair in every epoch.
    pub resample_channel: bool,
}

impl Default for InverseNetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 16],
            hidden: 256,
            epochs: 200,
            batch: 20,
            lr: 1e-3,
            resample_channel: true,
        }
    }
}

/// Eve's inverse network `D̃(z̃; φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseNet {
    pub mode: OutputMode,
    pub params: ParamSet,
    pub image_shape: [usize; 3],
    pub signal_len: usize,
    pub widths: [usize; 2],
    pub hidden: usize,
    pub d_s: usize,
    pub d_n: usize,
    /// Mean squared image error on a fresh channel draw over the query set.
    pub validation_mse: f64,
}

impl InverseNet {
    fn new(mode: OutputMode, image_shape: [usize; 3], signal_len: usize, cfg: &InverseNetConfig, dims: (usize, usize), seed: u64) -> Result<Self> {
        let mut net = Self {
            mode,
            params: ParamSet::new(),
            image_shape,
            signal_len,
            widths: cfg.widths,
            hidden: cfg.hidden,
            d_s: dims.0,
            d_n: dims.1,
            validation_mse: f64::NAN,
        };
        let mut rng = stream(seed, "inverse-init");
        match mode {
            OutputMode::Image => net.decoder()?.init(&mut net.params, &mut rng),
            OutputMode::LatentPlusNoise => {
                let (a, b) = net.head();
                a.init(&mut net.params, &mut rng);
                b.init(&mut net.params, &mut rng);
            }
        }
        Ok(net)
    }

    fn decoder(&self) -> Result<ConvDecoder> {
        Ok(ConvDecoder {
            prefix: String::from("inv."),
            grid: LatentGrid::for_signal(self.image_shape, self.signal_len)?,
            widths: self.widths,
            out_ch: self.image_shape[0],
        })
    }

    fn head(&self) -> (Linear, Linear) {
        (
            Linear::new("inv.fc1", self.signal_len, self.hidden),
            Linear::new("inv.fc2", self.hidden, self.d_s + self.d_n),
        )
    }

    /// Images in image mode, `[B, d_s + d_n]` latent rows otherwise.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        match self.mode {
            OutputMode::Image => self.decoder().expect("grid validated at construction").forward(g, p, z),
            OutputMode::LatentPlusNoise => {
                let (a, b) = self.head();
                let h = a.forward(g, p, z);
                let h = g.leaky_relu(h, LEAK);
                b.forward(g, p, h)
            }
        }
    }

    /// `(s, n)` from latent-mode output rows.
    pub fn split_latent(&self, out: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        check_rows(out, out.batch(), self.d_s + self.d_n)?;
        let (mut s, mut n) = (Vec::new(), Vec::new());
        for row in out.data().chunks(self.d_s + self.d_n) {
            s.extend_from_slice(&row[..self.d_s]);
            n.extend_from_slice(&row[self.d_s..]);
        }
        Ok((Tensor::new(&[out.batch(), self.d_s], s)?, Tensor::new(&[out.batch(), self.d_n], n)?))
    }

    /// Raw network output for signals `[B, 2k]`.
    pub fn infer(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        check_rows(z, z.batch(), self.signal_len)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, &p, zv);
        Ok(g.value(out).clone())
    }
}

/// Signals for rows `idx`: a fresh simulated channel or the stored realization.
fn training_signals(qd: &QueryDataset, idx: &[usize], resample: bool, rng: &mut StreamRng) -> Result<Tensor<f64>> {
    if resample {
        let clean = qd.clean.gather_rows(idx);
        let draw = ChannelDraw::sample(&qd.spec, idx.len(), qd.signal_len() / 2, rng);
        equalize_rows(&transmit_rows(&clean, &draw), &draw)
    } else {
        Ok(qd.received.gather_rows(idx))
    }
}

fn train_inverse(
    qd: &QueryDataset,
    gen: Option<&Generator>,
    cfg: &InverseNetConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(InverseNet, Vec<f64>)> {
    if qd.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mode, dims) = match gen {
        Some(g) => {
            if g.image_shape != qd.image_shape() {
                return Err(Error::InvalidConfig(String::from("generator and query images differ in shape")));
            }
            (OutputMode::LatentPlusNoise, (g.d_s, g.d_n()))
        }
        None => (OutputMode::Image, (0, 0)),
    };
    let mut net = InverseNet::new(mode, qd.image_shape(), qd.signal_len(), cfg, dims, seed)?;
    let template = net.clone();
    let stage = if gen.is_some() { "genai-inverse" } else { "inverse" };
    let schedule = Schedule {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        decay: false,
    };
    let mut rng = stream(seed, "inverse-train");
    let curve = train_loop(
        &mut net.params,
        qd.len(),
        &schedule,
        stage,
        &mut rng,
        |idx, rng, g, p| {
            let z = training_signals(qd, idx, cfg.resample_channel, rng)?;
            let zv = g.constant(z.cast());
            let x = g.constant(qd.images.gather_rows(idx).cast());
            let out = template.forward_graph(g, p, zv);
            let xhat = match gen {
                Some(gen) => {
                    let pg = gen.params.bind(g, false);
                    let s = g.slice_cols(out, 0, template.d_s);
                    let n = g.slice_cols(out, template.d_s, template.d_n);
                    gen.generate_graph(g, &pg, s, Some(n))
                }
                None => out,
            };
            Ok(g.mse(xhat, x))
        },
        on_epoch,
    )?;
    let mut vrng = stream(seed, "inverse-validation");
    let all: Vec<usize> = (0..qd.len()).collect();
    let z = training_signals(qd, &all, true, &mut vrng)?;
    let recon = match gen {
        Some(gen) => genai_closedbox_invert(&z, &net, gen)?,
        None => closedbox_invert(&z, &net)?,
    };
    let n = recon.numel() as f64;
    net.validation_mse = recon.data().iter().zip(qd.images.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    log::info!("{stage} network validation mse {:.5}", net.validation_mse);
    Ok((net, curve))
}

/// Fits an image-output inverse network to the query pairs by pixel MSE.
pub fn train_inverse_network(
    qd: &QueryDataset,
    cfg: &InverseNetConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(InverseNet, Vec<f64>)> {
    train_inverse(qd, None, cfg, seed, on_epoch)
}

/// Fits a latent-plus-noise inverse network through the frozen generator.
pub fn train_genai_inverse_network(
    qd: &QueryDataset,
    gen: &Generator,
    cfg: &InverseNetConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(InverseNet, Vec<f64>)> {
    train_inverse(qd, Some(gen), cfg, seed, on_epoch)
}

/// One forward pass of an image-mode inverse network.
pub fn closedbox_invert(z: &Tensor<f64>, net: &InverseNet) -> Result<Tensor<f64>> {
    if net.mode != OutputMode::Image {
        return Err(Error::InvalidConfig(String::from("closed-box inversion needs an image-mode network")));
    }
    net.infer(z)
}

/// `G(D̃(z̃; φ))` for a latent-mode inverse network.
pub fn genai_closedbox_invert(z: &Tensor<f64>, net: &InverseNet, gen: &Generator) -> Result<Tensor<f64>> {
    if net.mode != OutputMode::LatentPlusNoise || net.d_s != gen.d_s || net.d_n != gen.d_n() {
        return Err(Error::InvalidConfig(String::from("network output does not match the generator's (d_s, d_n)")));
    }
    let out = net.infer(z)?;
    let (s, n) = net.split_latent(&out)?;
    gen.generate(&s, Some(&n))
}

/// A per-cell seed for attack runs.
pub fn attack_seed(base: u64, strategy: Strategy, spec: &ChannelSpec) -> u64 {
    derive_seed(base, &format!("{}-{:?}-{}", strategy.name(), spec.family, spec.snr_db))
}
