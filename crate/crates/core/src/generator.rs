//! Generative image prior `G(s, n)` with a standard-normal latent `s` and additive
//! per-layer noise maps `n`, trained as the decoder of a variational autoencoder.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{train_loop, Bound, Conv2d, EpochLog, Linear, ParamSet, Schedule, LEAK};
use crate::rng::{normals, stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_s: usize,
    pub base_ch: usize,
    pub base_res: usize,
    /// Channel width after each upsampling stage.
    pub stage_widths: Vec<usize>,
    pub noise_init: f64,
    pub enc_widths: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the KL term.
    pub beta: f64,
    /// Standard deviation of the Gaussian pixel likelihood.
    pub recon_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_s: 64,
            base_ch: 64,
            base_res: 4,
            stage_widths: vec![64, 32, 32],
            noise_init: 0.05,
            enc_widths: vec![16, 32, 32],
            epochs: 150,
            batch: 32,
            lr: 2e-3,
            beta: 1.0,
            recon_sigma: 0.1,
        }
    }
}

/// The generator network and its latent/noise dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub params: ParamSet,
    pub image_shape: [usize; 3],
    pub d_s: usize,
    pub base_ch: usize,
    pub base_res: usize,
    pub stage_widths: Vec<usize>,
}

impl Generator {
    pub fn init(image_shape: [usize; 3], cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let res = cfg.base_res << cfg.stage_widths.len();
        if res != image_shape[1] || res != image_shape[2] || cfg.d_s == 0 {
            return Err(Error::InvalidConfig(format!(
                "generator with base {} and {} stages makes {res}x{res} images, need {}x{}",
                cfg.base_res,
                cfg.stage_widths.len(),
                image_shape[1],
                image_shape[2]
            )));
        }
        let mut g = Self {
            params: ParamSet::new(),
            image_shape,
            d_s: cfg.d_s,
            base_ch: cfg.base_ch,
            base_res: cfg.base_res,
            stage_widths: cfg.stage_widths.clone(),
        };
        let mut rng = stream(seed, "generator-init");
        g.fc().init(&mut g.params, &mut rng);
        for (i, c) in g.convs().iter().enumerate() {
            c.init(&mut g.params, &mut rng);
            if i < g.stage_widths.len() {
                g.params.insert(format!("ns{i}"), Tensor::full(&[c.out_ch], cfg.noise_init));
            }
        }
        Ok(g)
    }

    fn fc(&self) -> Linear {
        Linear::new("fc", self.d_s, self.base_ch * self.base_res * self.base_res)
    }

    /// Stage convolutions followed by the output convolution.
    fn convs(&self) -> Vec<Conv2d> {
        let mut prev = self.base_ch;
        let mut v: Vec<Conv2d> = self
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(format!("c{}", i + 1), prev, w, 3, 1);
                prev = w;
                c
            })
            .collect();
        v.push(Conv2d::new("out", prev, self.image_shape[0], 3, 1));
        v
    }

    /// Side length of each per-layer noise map.
    pub fn noise_sizes(&self) -> Vec<usize> {
        (1..=self.stage_widths.len()).map(|i| self.base_res << i).collect()
    }

    pub fn d_n(&self) -> usize {
        self.noise_sizes().iter().map(|r| r * r).sum()
    }

    /// `s: [B, d_s]`, `n: [B, d_n]` to images `[B, C, H, W]`. `None` injects no noise.
    pub fn generate_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: Var, n: Option<Var>) -> Var {
        let b = g.value(s).batch();
        let h = self.fc().forward(g, p, s);
        let h = g.leaky_relu(h, LEAK);
        let mut h = g.reshape(h, &[b, self.base_ch, self.base_res, self.base_res]);
        let convs = self.convs();
        let mut offset = 0;
        for (i, r) in self.noise_sizes().into_iter().enumerate() {
            h = g.upsample2x(h);
            h = convs[i].forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
            if let Some(n) = n {
                let ni = g.slice_cols(n, offset, r * r);
                let ni = g.reshape(ni, &[b, 1, r, r]);
                h = g.noise_inject(h, p.var(&format!("ns{i}")), ni);
            }
            offset += r * r;
        }
        let out = convs.last().expect("output conv").forward(g, p, h);
        g.sigmoid(out)
    }

    /// Images for latent rows `s` and optional noise rows `n`.
    pub fn generate(&self, s: &Tensor<f64>, n: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        if s.row_len() != self.d_s {
            return Err(Error::InvalidShape {
                expected: self.d_s,
                actual: s.row_len(),
            });
        }
        if let Some(n) = n {
            if n.row_len() != self.d_n() || n.batch() != s.batch() {
                return Err(Error::InvalidShape {
                    expected: self.d_n() * s.batch(),
                    actual: n.numel(),
                });
            }
        }
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let sv = g.constant(s.clone().reshape(&[s.batch(), self.d_s])?);
        let nv = n.map(|n| g.constant(n.clone()));
        let x = self.generate_graph(&mut g, &p, sv, nv);
        Ok(g.value(x).clone())
    }

    /// `[count, d_s]` draws from the prior.
    pub fn sample_latents<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Tensor<f64> {
        Tensor::new(&[count, self.d_s], normals(rng, count * self.d_s)).expect("latent shape")
    }
}

/// One standard-normal latent code.
pub fn sample_latent<R: Rng + ?Sized>(d_s: usize, rng: &mut R) -> Vec<f64> {
    normals(rng, d_s)
}

/// Prior log-density up to a constant, `-½‖s‖²`.
pub fn prior_log_density(s: &[f64]) -> f64 {
    -0.5 * s.iter().map(|v| v * v).sum::<f64>()
}

struct VaeEncoder {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl VaeEncoder {
    fn new(image_shape: [usize; 3], widths: &[usize], d_s: usize) -> Self {
        let mut prev = image_shape[0];
        let (mut h, mut w) = (image_shape[1], image_shape[2]);
        let convs: Vec<Conv2d> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(format!("venc.c{}", i + 1), prev, c, 3, 2);
                h = conv.out_size(h);
                w = conv.out_size(w);
                prev = c;
                conv
            })
            .collect();
        Self {
            fc: Linear::new("venc.fc", prev * h * w, 2 * d_s),
            convs,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let b = g.value(x).batch();
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
        }
        let flat = g.reshape(h, &[b, self.fc.fan_in]);
        self.fc.forward(g, p, flat)
    }
}

/// Trains the generator as a VAE decoder with random noise maps injected. Returns the
/// generator (encoder discarded) and the per-epoch loss curve.
pub fn train_generator(
    train: &Dataset,
    cfg: &GeneratorConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Generator, Vec<f64>)> {
    let gen = Generator::init(train.image_shape(), cfg, seed)?;
    let enc = VaeEncoder::new(train.image_shape(), &cfg.enc_widths, cfg.d_s);
    let mut params = ParamSet::new();
    params.extend_prefixed("gen.", &gen.params);
    {
        let mut enc_params = ParamSet::new();
        let mut rng = stream(seed, "vae-encoder-init");
        for c in &enc.convs {
            c.init(&mut enc_params, &mut rng);
        }
        enc.fc.init(&mut enc_params, &mut rng);
        params.extend_prefixed("", &enc_params);
    }
    let d_s = cfg.d_s;
    let d_n = gen.d_n();
    let numel = train.images.row_len() as f64;
    let rec_w = 1.0 / (2.0 * cfg.recon_sigma * cfg.recon_sigma);
    let mut rng = stream(seed, "generator-train");
    let schedule = Schedule {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        decay: true,
    };
    let curve = train_loop(
        &mut params,
        train.len(),
        &schedule,
        "generator",
        &mut rng,
        |idx, rng, g, p| {
            let b = idx.len();
            let x = g.constant(train.batch(idx).cast());
            let stats = enc.forward(g, p, x);
            let mean = g.slice_cols(stats, 0, d_s);
            let logvar = g.slice_cols(stats, d_s, d_s);
            let half = g.scale(logvar, 0.5);
            let sd = g.exp(half);
            let eps = g.constant(Tensor::from_f64(&[b, d_s], &normals(rng, b * d_s))?);
            let noise = g.mul(sd, eps);
            let s = g.add(mean, noise);
            let n = g.constant(Tensor::from_f64(&[b, d_n], &normals(rng, b * d_n))?);
            let xh = generate_prefixed(&gen, g, p, s, Some(n));
            let rec = g.sq_dist(xh, x);
            let rec = g.scale(rec, rec_w);
            // KL(q || N(0, I)) = ½ Σ (m² + e^lv − 1 − lv)
            let m2 = g.sum_sq(mean);
            let var = g.exp(logvar);
            let ev = g.sum(var);
            let lv = g.sum(logvar);
            let kl = g.add(m2, ev);
            let kl = g.sub(kl, lv);
            let kl = g.affine(kl, 0.5 * cfg.beta, -0.5 * cfg.beta * (b * d_s) as f64);
            let total = g.add(rec, kl);
            Ok(g.scale(total, 1.0 / (b as f64 * numel)))
        },
        on_epoch,
    )?;
    let mut trained = gen;
    trained.params = params.subset("gen.");
    Ok((trained, curve))
}

/// Runs the generator with parameters bound under the `gen.` prefix.
fn generate_prefixed<T: Scalar>(gen: &Generator, g: &mut Graph<T>, p: &Bound, s: Var, n: Option<Var>) -> Var {
    let view = p.with_prefix("gen.");
    gen.generate_graph(g, &view, s, n)
}

/// Names of every generator parameter, for freeze checks.
pub fn parameter_names(gen: &Generator) -> Vec<String> {
    gen.params.iter().map(|(k, _)| k.clone()).collect()
}
