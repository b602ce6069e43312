//! Convolutional semantic encoder/decoder trained end to end through a noisy channel.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::IdentityModel;
use crate::nn::{train_loop, Bound, Conv2d, EpochLog, ParamSet, Schedule, LEAK};
use crate::rng::stream;
use crate::signal::{ChannelDraw, ChannelFamily, ChannelSpec};
use crate::tensor::{Scalar, Tensor};

/// Pixel and perceptual weights of the reconstruction objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecLossConfig {
    pub lambda_pix: f64,
    pub lambda_perc: f64,
}

impl Default for CodecLossConfig {
    fn default() -> Self {
        Self {
            lambda_pix: 1.0,
            lambda_perc: 0.1,
        }
    }
}

impl CodecLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pix < 0.0 || self.lambda_perc < 0.0 || self.lambda_pix + self.lambda_perc <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "codec loss weights must be non-negative with a positive sum, got {} and {}",
                self.lambda_pix, self.lambda_perc
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Bandwidth compression ratio `k/N`.
    pub bcr: f64,
    pub enc_widths: [usize; 2],
    pub dec_widths: [usize; 2],
    pub loss: CodecLossConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    /// Channel families sampled per training batch.
    pub families: Vec<ChannelFamily>,
    pub pbar: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            bcr: 1.0 / 12.0,
            enc_widths: [16, 32],
            dec_widths: [32, 16],
            loss: CodecLossConfig::default(),
            epochs: 150,
            batch: 32,
            lr: 2e-3,
            snr_min: 0.0,
            snr_max: 20.0,
            families: vec![ChannelFamily::Awgn],
            pbar: 1.0,
        }
    }
}

/// Geometry of the latent grid the channel signal is reshaped from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentGrid {
    pub fn reals(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn k(&self) -> usize {
        self.reals() / 2
    }

    pub fn shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.c, self.h, self.w]
    }

    /// Grid at a quarter of the image resolution holding `signal_len` reals.
    pub fn for_signal(image: [usize; 3], signal_len: usize) -> Result<Self> {
        let (lh, lw) = (image[1] / 4, image[2] / 4);
        if lh == 0 || lw == 0 || !image[1].is_multiple_of(4) || !image[2].is_multiple_of(4) || !signal_len.is_multiple_of(lh * lw) || signal_len == 0 {
            return Err(Error::InvalidConfig(format!(
                "{signal_len} reals do not tile a {lh}x{lw} grid for a {}x{} image",
                image[1], image[2]
            )));
        }
        Ok(Self {
            c: signal_len / (lh * lw),
            h: lh,
            w: lw,
        })
    }

    /// Grid for `round(N·bcr)` symbols after two stride-2 stages.
    pub fn for_bcr(image: [usize; 3], bcr: f64) -> Result<Self> {
        let [c, h, w] = image;
        let n = c * h * w;
        let k = libm::round(n as f64 * bcr) as usize;
        if k == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidConfig(format!("bcr {bcr} gives k = {k} for a {c}x{h}x{w} image")));
        }
        let (lh, lw) = (h / 4, w / 4);
        if !(2 * k).is_multiple_of(lh * lw) {
            return Err(Error::InvalidConfig(format!(
                "2k = {} real values do not tile the {lh}x{lw} latent grid",
                2 * k
            )));
        }
        Ok(Self {
            c: 2 * k / (lh * lw),
            h: lh,
            w: lw,
        })
    }
}

/// Mirror-of-encoder decoder: conv, upsample, conv, upsample, conv, sigmoid. Also the
/// architecture of the closed-box inverse network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvDecoder {
    pub prefix: String,
    pub grid: LatentGrid,
    pub widths: [usize; 2],
    pub out_ch: usize,
}

impl ConvDecoder {
    fn layers(&self) -> [Conv2d; 3] {
        let p = &self.prefix;
        [
            Conv2d::new(format!("{p}c1"), self.grid.c, self.widths[0], 3, 1),
            Conv2d::new(format!("{p}c2"), self.widths[0], self.widths[1], 3, 1),
            Conv2d::new(format!("{p}c3"), self.widths[1], self.out_ch, 3, 1),
        ]
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        for l in self.layers() {
            l.init(ps, rng);
        }
    }

    /// `z: [B, 2k]` to images `[B, C, 4h, 4w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let b = g.value(z).batch();
        let [c1, c2, c3] = self.layers();
        let h = g.reshape(z, &self.grid.shape(b));
        let h = c1.forward(g, p, h);
        let h = g.leaky_relu(h, LEAK);
        let h = g.upsample2x(h);
        let h = c2.forward(g, p, h);
        let h = g.leaky_relu(h, LEAK);
        let h = g.upsample2x(h);
        let h = c3.forward(g, p, h);
        g.sigmoid(h)
    }
}

/// A trained (or initialized) encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    /// Encoder parameters under `enc.`, decoder parameters under `dec.`.
    pub params: ParamSet,
    pub image_shape: [usize; 3],
    pub grid: LatentGrid,
    pub enc_widths: [usize; 2],
    pub decoder: ConvDecoder,
    pub pbar: f64,
}

impl Codec {
    pub fn init(image_shape: [usize; 3], cfg: &CodecConfig, seed: u64) -> Result<Self> {
        let grid = LatentGrid::for_bcr(image_shape, cfg.bcr)?;
        let mut codec = Self {
            params: ParamSet::new(),
            image_shape,
            grid,
            enc_widths: cfg.enc_widths,
            decoder: ConvDecoder {
                prefix: String::from("dec."),
                grid,
                widths: cfg.dec_widths,
                out_ch: image_shape[0],
            },
            pbar: cfg.pbar,
        };
        let mut rng = stream(seed, "codec-init");
        for l in codec.enc_layers() {
            l.init(&mut codec.params, &mut rng);
        }
        codec.decoder.init(&mut codec.params, &mut rng);
        Ok(codec)
    }

    /// Number of complex channel symbols.
    pub fn k(&self) -> usize {
        self.grid.k()
    }

    fn enc_layers(&self) -> [Conv2d; 3] {
        let [w1, w2] = self.enc_widths;
        [
            Conv2d::new("enc.c1", self.image_shape[0], w1, 3, 2),
            Conv2d::new("enc.c2", w1, w2, 3, 2),
            Conv2d::new("enc.c3", w2, self.grid.c, 3, 1),
        ]
    }

    /// Images `[B, C, H, W]` to power-normalized signals `[B, 2k]`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let b = g.value(x).batch();
        let [c1, c2, c3] = self.enc_layers();
        let h = c1.forward(g, p, x);
        let h = g.leaky_relu(h, LEAK);
        let h = c2.forward(g, p, h);
        let h = g.leaky_relu(h, LEAK);
        let h = c3.forward(g, p, h);
        let flat = g.reshape(h, &[b, self.grid.reals()]);
        g.power_normalize(flat, self.pbar)
    }

    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        self.decoder.forward(g, p, z)
    }

    fn check_images(&self, x: &Tensor<f64>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.image_shape {
            return Err(Error::InvalidShape {
                expected: self.image_shape.iter().product(),
                actual: x.row_len(),
            });
        }
        Ok(())
    }

    fn check_signals(&self, z: &Tensor<f64>) -> Result<()> {
        if z.row_len() != self.grid.reals() {
            return Err(Error::InvalidShape {
                expected: self.grid.reals(),
                actual: z.row_len(),
            });
        }
        Ok(())
    }

    /// Power-normalized channel input for each image.
    pub fn encode(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_images(x)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xv);
        let out = g.value(z).clone();
        if !out.is_finite() {
            return Err(Error::NumericalError("encode"));
        }
        Ok(out)
    }

    /// Reconstructions in `[0, 1]`.
    pub fn decode(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_signals(z)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, &p, zv);
        Ok(g.value(x).clone())
    }

    /// Encode, transmit over `draw` with MMSE equalization, decode.
    pub fn transmit(&self, x: &Tensor<f64>, draw: &ChannelDraw) -> Result<Tensor<f64>> {
        let z = self.encode(x)?;
        let received = crate::signal::transmit_rows(&z, draw);
        self.decode(&crate::signal::equalize_rows(&received, draw)?)
    }
}

/// `λ_pix·MSE + λ_perc·perceptual` averaged over the batch.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    xhat: Var,
    cfg: &CodecLossConfig,
    feature_net: &IdentityModel,
    feature_params: &Bound,
) -> Var {
    let pix = g.mse(xhat, x);
    let pix = g.scale(pix, cfg.lambda_pix);
    if cfg.lambda_perc == 0.0 {
        return pix;
    }
    let perc = feature_net.perceptual_loss(g, feature_params, xhat, x);
    let perc = g.scale(perc, cfg.lambda_perc);
    g.add(pix, perc)
}

/// Value of [`composite_loss`] for two image batches.
pub fn composite_loss_value(x: &Tensor<f64>, xhat: &Tensor<f64>, cfg: &CodecLossConfig, feature_net: &IdentityModel) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::InvalidShape {
            expected: x.numel(),
            actual: xhat.numel(),
        });
    }
    let mut g = Graph::<f64>::new();
    let fp = feature_net.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let yv = g.constant(xhat.clone());
    let l = composite_loss(&mut g, xv, yv, cfg, feature_net, &fp);
    Ok(g.item(l))
}

/// Samples the training channel of one batch: SNR uniform in `[snr_min, snr_max]` dB and a
/// uniformly chosen family.
pub fn sample_training_spec<R: Rng + ?Sized>(families: &[ChannelFamily], snr_min: f64, snr_max: f64, pbar: f64, rng: &mut R) -> ChannelSpec {
    let snr = snr_min + (snr_max - snr_min) * rng.random::<f64>();
    let family = families[rng.random_range(0..families.len())];
    let mut spec = ChannelSpec::new(family, snr);
    spec.pbar = pbar;
    spec
}

/// Trains encoder and decoder jointly through the channel. Returns the codec and its
/// per-epoch loss curve.
pub fn train_codec(
    train: &Dataset,
    feature_net: &IdentityModel,
    cfg: &CodecConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Codec, Vec<f64>)> {
    cfg.loss.validate()?;
    if cfg.families.is_empty() {
        return Err(Error::InvalidConfig(String::from("codec training needs at least one channel family")));
    }
    let mut codec = Codec::init(train.image_shape(), cfg, seed)?;
    let template = codec.clone();
    let mut rng = stream(seed, "codec-train");
    let schedule = Schedule {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        decay: true,
    };
    let feat = feature_net.params.clone();
    let curve = train_loop(
        &mut codec.params,
        train.len(),
        &schedule,
        "codec",
        &mut rng,
        |idx, rng, g, p| {
            let spec = sample_training_spec(&cfg.families, cfg.snr_min, cfg.snr_max, cfg.pbar, rng);
            let draw = ChannelDraw::sample(&spec, idx.len(), template.k(), rng);
            let fp = feat.bind(g, false);
            let x = g.constant(train.batch(idx).cast());
            let z = template.encode_graph(g, p, x);
            let zt = draw.apply(g, z, true)?;
            let xhat = template.decode_graph(g, p, zt);
            Ok(composite_loss(g, x, xhat, &cfg.loss, feature_net, &fp))
        },
        on_epoch,
    )?;
    Ok((codec, curve))
}
