//! Signal-level steganography with an invertible coupling network: a private image's channel
//! signal is hidden inside a host image's signal, and only the container is transmitted.
//!
//! Each block maps `(z_h, z_p)` to
//! `z_h' = z_h + Φ(z_p)`, `z_p' = z_p ⊙ exp(α·tanh(ρ(z_h'))) + η(z_h')`,
//! which is inverted exactly whatever the sub-networks compute.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sample_training_spec, Codec, LatentGrid};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{train_loop, Bound, Conv2d, EpochLog, ParamSet, Schedule, LEAK};
use crate::rng::{normals, stream, StreamRng};
use crate::signal::{ChannelDraw, ChannelFamily};
use crate::tensor::{Scalar, Tensor};

/// Stand-in for the lost information at the receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LhatMode {
    ZeroConstant,
    /// A fresh standard-normal draw per batch.
    GaussianSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StegLossConfig {
    /// Container, lost-information, private-signal, host-signal and private-image weights.
    pub lambdas: [f64; 5],
    pub lhat_mode: LhatMode,
}

impl Default for StegLossConfig {
    fn default() -> Self {
        Self {
            lambdas: [0.3, 2.0, 2.0, 1.0, 3.0],
            lhat_mode: LhatMode::ZeroConstant,
        }
    }
}

impl StegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) || self.lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "steganography loss weights must be finite, non-negative and not all zero, got {:?}",
                self.lambdas
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StegConfig {
    pub blocks: usize,
    /// Channel width inside Φ, ρ and η.
    pub hidden: usize,
    pub clamp_alpha: f64,
    pub loss: StegLossConfig,
    /// Number of (host, private) training pairs.
    pub pairs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub families: Vec<ChannelFamily>,
}

impl Default for StegConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            hidden: 16,
            clamp_alpha: 2.0,
            loss: StegLossConfig::default(),
            pairs: 1000,
            epochs: 150,
            batch: 32,
            lr: 2e-3,
            snr_min: 0.0,
            snr_max: 20.0,
            families: vec![ChannelFamily::Awgn],
        }
    }
}

/// The coupling network `𝒮(·; ψ)`. Its parameter file is the shared secret between Alice and
/// Bob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegModule {
    pub params: ParamSet,
    pub grid: LatentGrid,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp_alpha: f64,
    pub pbar: f64,
}

/// What Alice holds after embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct StegPacket {
    /// Container normalized to the transmit power.
    pub z_c: Tensor<f64>,
    /// Container as produced by the last block.
    pub z_c_raw: Tensor<f64>,
    /// Lost information, kept local.
    pub l: Tensor<f64>,
}

const SUBNETS: [&str; 3] = ["phi", "rho", "eta"];

impl StegModule {
    /// Every sub-network's output layer starts at zero, so the module starts as the identity.
    pub fn init(grid: LatentGrid, blocks: usize, hidden: usize, clamp_alpha: f64, pbar: f64, seed: u64) -> Result<Self> {
        if blocks == 0 || hidden == 0 || !(clamp_alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "steganography needs blocks >= 1, hidden >= 1 and clamp_alpha > 0, got {blocks}, {hidden}, {clamp_alpha}"
            )));
        }
        let mut m = Self {
            params: ParamSet::new(),
            grid,
            blocks,
            hidden,
            clamp_alpha,
            pbar,
        };
        let mut rng = stream(seed, "steg-init");
        for b in 0..blocks {
            for name in SUBNETS {
                let [c1, c2] = m.subnet(b, name);
                c1.init(&mut m.params, &mut rng);
                c2.init_zero(&mut m.params);
            }
        }
        Ok(m)
    }

    /// Re-draws every parameter uniformly in `±scale`, for invertibility checks.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let names: Vec<String> = self.params.iter().map(|(k, _)| k.clone()).collect();
        for k in names {
            if let Some(t) = self.params.get_mut(&k) {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..=scale));
            }
        }
    }

    pub fn signal_len(&self) -> usize {
        self.grid.reals()
    }

    fn subnet(&self, block: usize, name: &str) -> [Conv2d; 2] {
        let c = self.grid.c;
        [
            Conv2d::new(format!("b{block}.{name}.c1"), c, self.hidden, 3, 1),
            Conv2d::new(format!("b{block}.{name}.c2"), self.hidden, c, 3, 1),
        ]
    }

    fn apply_subnet<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, block: usize, name: &str, x: Var) -> Var {
        let [c1, c2] = self.subnet(block, name);
        let h = c1.forward(g, p, x);
        let h = g.leaky_relu(h, LEAK);
        c2.forward(g, p, h)
    }

    /// `exp(α·tanh(ρ(v)))` and its reciprocal's exponent sign is chosen by `sign`.
    fn scale_factor<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, block: usize, v: Var, sign: f64) -> Var {
        let r = self.apply_subnet(g, p, block, "rho", v);
        let t = g.tanh(r);
        let a = g.scale(t, sign * self.clamp_alpha);
        g.exp(a)
    }

    /// One forward block on grid-shaped `[B, C', H', W']` nodes.
    pub fn block_forward_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, block: usize, zh: Var, zp: Var) -> (Var, Var) {
        let phi = self.apply_subnet(g, p, block, "phi", zp);
        let zh_next = g.add(zh, phi);
        let s = self.scale_factor(g, p, block, zh_next, 1.0);
        let scaled = g.mul(zp, s);
        let eta = self.apply_subnet(g, p, block, "eta", zh_next);
        let zp_next = g.add(scaled, eta);
        (zh_next, zp_next)
    }

    /// Exact inverse of [`Self::block_forward_graph`].
    pub fn block_backward_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, block: usize, zh_next: Var, zp_next: Var) -> (Var, Var) {
        let eta = self.apply_subnet(g, p, block, "eta", zh_next);
        let d = g.sub(zp_next, eta);
        let s = self.scale_factor(g, p, block, zh_next, -1.0);
        let zp = g.mul(d, s);
        let phi = self.apply_subnet(g, p, block, "phi", zp);
        let zh = g.sub(zh_next, phi);
        (zh, zp)
    }

    fn to_grid<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Var {
        let b = g.value(z).batch();
        g.reshape(z, &self.grid.shape(b))
    }

    fn to_rows<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Var {
        let b = g.value(z).batch();
        g.reshape(z, &[b, self.signal_len()])
    }

    /// `(z_c_raw, l)` rows `[B, 2k]` from host and private rows.
    pub fn embed_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, zh: Var, zp: Var) -> (Var, Var) {
        let (mut a, mut b) = (self.to_grid(g, zh), self.to_grid(g, zp));
        for i in 0..self.blocks {
            (a, b) = self.block_forward_graph(g, p, i, a, b);
        }
        (self.to_rows(g, a), self.to_rows(g, b))
    }

    /// `(ẑ_h, ẑ_p)` rows from a received container and a lost-information estimate.
    pub fn extract_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, zc: Var, lhat: Var) -> (Var, Var) {
        let (mut a, mut b) = (self.to_grid(g, zc), self.to_grid(g, lhat));
        for i in (0..self.blocks).rev() {
            (a, b) = self.block_backward_graph(g, p, i, a, b);
        }
        (self.to_rows(g, a), self.to_rows(g, b))
    }

    fn check_pair(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::LengthMismatch {
                left: a.numel(),
                right: b.numel(),
            });
        }
        if a.row_len() != self.signal_len() {
            return Err(Error::InvalidShape {
                expected: self.signal_len(),
                actual: a.row_len(),
            });
        }
        Ok(())
    }

    fn run_pair<T: Scalar>(
        &self,
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        f: impl FnOnce(&Self, &mut Graph<T>, &Bound, Var, Var) -> (Var, Var),
    ) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.check_pair(a, b)?;
        let mut g = Graph::<T>::new();
        let p = self.params.bind(&mut g, false);
        let av = g.constant(a.cast());
        let bv = g.constant(b.cast());
        let (x, y) = f(self, &mut g, &p, av, bv);
        let (x, y) = (g.value(x).cast::<f64>(), g.value(y).cast::<f64>());
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NumericalError("steganography block"));
        }
        Ok((x.reshape(a.shape())?, y.reshape(a.shape())?))
    }

    /// One forward block on signal rows, computed in `T`.
    pub fn inn_block_forward<T: Scalar>(&self, block: usize, zh: &Tensor<f64>, zp: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.check_block(block)?;
        self.run_pair::<T>(zh, zp, |m, g, p, a, b| {
            let (a, b) = (m.to_grid(g, a), m.to_grid(g, b));
            m.block_forward_graph(g, p, block, a, b)
        })
    }

    /// One inverse block on signal rows, computed in `T`.
    pub fn inn_block_backward<T: Scalar>(&self, block: usize, zh_next: &Tensor<f64>, zp_next: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.check_block(block)?;
        self.run_pair::<T>(zh_next, zp_next, |m, g, p, a, b| {
            let (a, b) = (m.to_grid(g, a), m.to_grid(g, b));
            m.block_backward_graph(g, p, block, a, b)
        })
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.blocks {
            return Err(Error::InvalidConfig(format!("block {block} of {}", self.blocks)));
        }
        Ok(())
    }

    /// Hides `zp` in `zh`, computed in `T`.
    pub fn embed_in<T: Scalar>(&self, zh: &Tensor<f64>, zp: &Tensor<f64>) -> Result<StegPacket> {
        let (z_c_raw, l) = self.run_pair::<T>(zh, zp, |m, g, p, a, b| m.embed_graph(g, p, a, b))?;
        let z_c = crate::signal::power_normalize_rows(&z_c_raw, self.pbar)?;
        Ok(StegPacket { z_c, z_c_raw, l })
    }

    /// Recovers `(ẑ_h, ẑ_p)`, computed in `T`.
    pub fn extract_in<T: Scalar>(&self, zc_hat: &Tensor<f64>, lhat: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.run_pair::<T>(zc_hat, lhat, |m, g, p, a, b| m.extract_graph(g, p, a, b))
    }

    pub fn embed(&self, zh: &Tensor<f64>, zp: &Tensor<f64>) -> Result<StegPacket> {
        self.embed_in::<f64>(zh, zp)
    }

    pub fn extract(&self, zc_hat: &Tensor<f64>, lhat: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.extract_in::<f64>(zc_hat, lhat)
    }
}

/// `l̂` for a batch of `rows` signals of length `len`.
pub fn sample_lhat<R: Rng + ?Sized>(mode: LhatMode, rows: usize, len: usize, rng: &mut R) -> Tensor<f64> {
    match mode {
        LhatMode::ZeroConstant => Tensor::zeros(&[rows, len]),
        LhatMode::GaussianSample => Tensor::new(&[rows, len], normals(rng, rows * len)).expect("lhat shape"),
    }
}

/// The loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StegLosses {
    pub forward: f64,
    pub backward: f64,
    pub privacy: f64,
    pub total: f64,
}

/// Graph nodes of the loss terms, each a batch mean of per-sample squared-error sums.
pub struct StegLossVars {
    pub forward: Var,
    pub backward: Var,
    pub privacy: Var,
    pub total: Var,
}

/// One batch of the training objective: embed, normalize, pass the container through
/// `draw`, extract with `lhat`, decode the private signal with the frozen decoder.
#[allow(clippy::too_many_arguments)]
pub fn steg_losses_graph<T: Scalar>(
    g: &mut Graph<T>,
    module: &StegModule,
    p: &Bound,
    codec: &Codec,
    codec_params: &Bound,
    zh: Var,
    zp: Var,
    xp: Var,
    draw: &ChannelDraw,
    lhat: &Tensor<f64>,
    cfg: &StegLossConfig,
) -> Result<StegLossVars> {
    let [l1, l2, l3, l4, l5] = cfg.lambdas;
    let b = g.value(zh).batch() as f64;
    let (zc_raw, l) = module.embed_graph(g, p, zh, zp);
    let zc = g.power_normalize(zc_raw, module.pbar);
    let lh = g.constant(lhat.cast());
    let t1 = g.sq_dist(zc, zh);
    let t2 = g.sq_dist(l, lh);
    let forward = weighted(g, &[(t1, l1), (t2, l2)], b);
    let zc_hat = draw.apply(g, zc, true)?;
    let (zh_hat, zp_hat) = module.extract_graph(g, p, zc_hat, lh);
    let t3 = g.sq_dist(zp, zp_hat);
    let t4 = g.sq_dist(zh, zh_hat);
    let backward = weighted(g, &[(t3, l3), (t4, l4)], b);
    let xp_hat = codec.decode_graph(g, codec_params, zp_hat);
    let t5 = g.sq_dist(xp, xp_hat);
    let privacy = weighted(g, &[(t5, l5)], b);
    let total = g.add(forward, backward);
    let total = g.add(total, privacy);
    Ok(StegLossVars {
        forward,
        backward,
        privacy,
        total,
    })
}

fn weighted<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, f64)], batch: f64) -> Var {
    let mut acc = g.scale(terms[0].0, terms[0].1 / batch);
    for &(t, w) in &terms[1..] {
        let s = g.scale(t, w / batch);
        acc = g.add(acc, s);
    }
    acc
}

/// Loss values for host/private signal rows and private images.
#[allow(clippy::too_many_arguments)]
pub fn steg_losses(
    module: &StegModule,
    codec: &Codec,
    zh: &Tensor<f64>,
    zp: &Tensor<f64>,
    xp: &Tensor<f64>,
    draw: &ChannelDraw,
    lhat: &Tensor<f64>,
    cfg: &StegLossConfig,
) -> Result<StegLosses> {
    module.check_pair(zh, zp)?;
    module.check_pair(zh, lhat)?;
    let mut g = Graph::<f64>::new();
    let p = module.params.bind(&mut g, false);
    let cp = codec.params.bind(&mut g, false);
    let (a, b, x) = (g.constant(zh.clone()), g.constant(zp.clone()), g.constant(xp.clone()));
    let v = steg_losses_graph(&mut g, module, &p, codec, &cp, a, b, x, draw, lhat, cfg)?;
    Ok(StegLosses {
        forward: g.item(v.forward),
        backward: g.item(v.backward),
        privacy: g.item(v.privacy),
        total: g.item(v.total),
    })
}

/// `count` index pairs `(host, private)` whose identities differ.
pub fn sample_pairs<R: Rng + ?Sized>(data: &Dataset, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if data.labels.first().is_none_or(|&f| data.labels.iter().all(|&l| l == f)) {
        return Err(Error::InvalidConfig(String::from("host/private pairs need at least two identities")));
    }
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let h = rng.random_range(0..data.len());
        let p = rng.random_range(0..data.len());
        if data.labels[h] != data.labels[p] {
            pairs.push((h, p));
        }
    }
    Ok(pairs)
}

/// Trains ψ with the codec frozen and channel noise in the loop. Returns the module and its
/// per-epoch loss curve.
pub fn train_steganography(
    train: &Dataset,
    codec: &Codec,
    cfg: &StegConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(StegModule, Vec<f64>)> {
    cfg.loss.validate()?;
    if cfg.families.is_empty() {
        return Err(Error::InvalidConfig(String::from("steganography training needs at least one channel family")));
    }
    let mut module = StegModule::init(codec.grid, cfg.blocks, cfg.hidden, cfg.clamp_alpha, codec.pbar, seed)?;
    let template = module.clone();
    let mut rng = stream(seed, "steg-pairs");
    let pairs = sample_pairs(train, cfg.pairs, &mut rng)?;
    let hosts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let privs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let zh_all = codec.encode(&train.batch(&hosts))?;
    let xp_all = train.batch(&privs);
    let zp_all = codec.encode(&xp_all)?;
    let codec_params = codec.params.clone();
    let len = module.signal_len();
    let schedule = Schedule {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        decay: true,
    };
    let mut rng: StreamRng = stream(seed, "steg-train");
    let curve = train_loop(
        &mut module.params,
        pairs.len(),
        &schedule,
        "steganography",
        &mut rng,
        |idx, rng, g, p| {
            let spec = sample_training_spec(&cfg.families, cfg.snr_min, cfg.snr_max, codec.pbar, rng);
            let draw = ChannelDraw::sample(&spec, idx.len(), len / 2, rng);
            let lhat = sample_lhat(cfg.loss.lhat_mode, idx.len(), len, rng);
            let cp = codec_params.bind(g, false);
            let zh = g.constant(zh_all.gather_rows(idx).cast());
            let zp = g.constant(zp_all.gather_rows(idx).cast());
            let xp = g.constant(xp_all.gather_rows(idx).cast());
            let v = steg_losses_graph(g, &template, p, codec, &cp, zh, zp, xp, &draw, &lhat, &cfg.loss)?;
            Ok(v.total)
        },
        on_epoch,
    )?;
    Ok((module, curve))
}
