//! Channel signals, power normalization and the AWGN / Rayleigh channel simulators.
//!
//! A signal of `k` complex symbols is stored as `2k` interleaved reals `(re, im)`.
//! Noise variance is per complex symbol: each real component gets `σ²/2`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::normal;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFamily {
    Awgn,
    Rayleigh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Csi {
    #[default]
    Perfect,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub family: ChannelFamily,
    /// `f64::INFINITY` selects the noiseless channel.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    #[serde(default = "default_pbar")]
    pub pbar: f64,
    #[serde(default)]
    pub csi: Csi,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_pbar() -> f64 {
    1.0
}

impl ChannelSpec {
    pub fn new(family: ChannelFamily, snr_db: f64) -> Self {
        Self {
            family,
            snr_db,
            pbar: 1.0,
            csi: Csi::Perfect,
            rng_seed: 0,
        }
    }

    pub fn awgn(snr_db: f64) -> Self {
        Self::new(ChannelFamily::Awgn, snr_db)
    }

    pub fn rayleigh(snr_db: f64) -> Self {
        Self::new(ChannelFamily::Rayleigh, snr_db)
    }

    pub fn noiseless() -> Self {
        Self::awgn(f64::INFINITY)
    }

    /// `σ² = P̄ / 10^(snr/10)`, zero for the noiseless sentinel.
    pub fn noise_var(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            self.pbar / libm::pow(10.0, self.snr_db / 10.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pbar > 0.0 && self.pbar.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("pbar must be positive, got {}", self.pbar)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig(String::from("snr_db must be a number or +inf")));
        }
        Ok(())
    }
}

mod snr_serde {
    use alloc::string::String;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(alloc::format!("invalid snr_db {s:?}"))),
        }
    }
}

/// A length-`k` complex channel signal in interleaved real form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSignal {
    values: Vec<f64>,
}

impl ChannelSignal {
    pub fn from_reals(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(Error::InvalidShape {
                expected: values.len() + 1,
                actual: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn from_complex(symbols: &[Complex64]) -> Self {
        Self {
            values: unpair_complex(symbols),
        }
    }

    pub fn k(&self) -> usize {
        self.values.len() / 2
    }

    pub fn as_reals(&self) -> &[f64] {
        &self.values
    }

    pub fn into_reals(self) -> Vec<f64> {
        self.values
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.values.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect()
    }

    /// `(1/k)·Σ|z_i|²`
    pub fn avg_power(&self) -> f64 {
        avg_power(&self.values)
    }
}

pub fn avg_power(reals: &[f64]) -> f64 {
    reals.iter().map(|v| v * v).sum::<f64>() / (reals.len() / 2).max(1) as f64
}

pub fn pair_complex(reals: &[f64]) -> Result<Vec<Complex64>> {
    Ok(ChannelSignal::from_reals(reals.to_vec())?.to_complex())
}

pub fn unpair_complex(symbols: &[Complex64]) -> Vec<f64> {
    symbols.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Scales `z` to average symbol power `pbar`.
pub fn power_normalize(z: &ChannelSignal, pbar: f64) -> Result<ChannelSignal> {
    let mut values = z.values.clone();
    normalize_in_place(&mut values, pbar)?;
    Ok(ChannelSignal { values })
}

fn normalize_in_place(values: &mut [f64], pbar: f64) -> Result<()> {
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalError("power_normalize"));
    }
    let norm = libm::sqrt(values.iter().map(|v| v * v).sum::<f64>());
    if norm == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let f = libm::sqrt((values.len() / 2) as f64 * pbar) / norm;
    for v in values.iter_mut() {
        *v *= f;
    }
    Ok(())
}

/// Row-wise [`power_normalize`] of a `[B, 2k]` batch.
pub fn power_normalize_rows(z: &Tensor<f64>, pbar: f64) -> Result<Tensor<f64>> {
    let row = z.row_len();
    let mut out = z.clone();
    for r in out.data_mut().chunks_mut(row) {
        normalize_in_place(r, pbar)?;
    }
    Ok(out)
}

/// One channel realization for a batch: fading coefficients, noise and the MMSE
/// equalizer, all in interleaved form of shape `[B, 2k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub family: ChannelFamily,
    pub h: Tensor<f64>,
    pub noise: Tensor<f64>,
    pub noise_var: f64,
    pub pbar: f64,
}

impl ChannelDraw {
    /// Draws `h` and `n` for every symbol. Per row the stream order is all `h` symbols,
    /// then all noise symbols.
    pub fn sample<R: Rng + ?Sized>(spec: &ChannelSpec, batch: usize, k: usize, rng: &mut R) -> Self {
        let sig2 = spec.noise_var();
        let sd = libm::sqrt(sig2 / 2.0);
        let mut h = Vec::with_capacity(batch * 2 * k);
        let mut noise = Vec::with_capacity(batch * 2 * k);
        for _ in 0..batch {
            match spec.family {
                ChannelFamily::Awgn => h.extend((0..k).flat_map(|_| [1.0, 0.0])),
                ChannelFamily::Rayleigh => h.extend((0..2 * k).map(|_| normal(rng) * core::f64::consts::FRAC_1_SQRT_2)),
            }
            if sig2 > 0.0 {
                noise.extend((0..2 * k).map(|_| normal(rng) * sd));
            } else {
                noise.extend(core::iter::repeat_n(0.0, 2 * k));
            }
        }
        Self {
            family: spec.family,
            h: Tensor::new(&[batch, 2 * k], h).expect("draw shape"),
            noise: Tensor::new(&[batch, 2 * k], noise).expect("draw shape"),
            noise_var: sig2,
            pbar: spec.pbar,
        }
    }

    /// Rows `start..start + len` of the realization.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        Self {
            family: self.family,
            h: self.h.rows(start, len),
            noise: self.noise.rows(start, len),
            noise_var: self.noise_var,
            pbar: self.pbar,
        }
    }

    /// Per-symbol MMSE coefficients `conj(h) / (|h|² + σ²/P̄)`.
    pub fn equalizer(&self) -> Result<Tensor<f64>> {
        let s = self.noise_var / self.pbar;
        let mut c = self.h.clone();
        for (i, hc) in c.data_mut().chunks_mut(2).enumerate() {
            let den = hc[0] * hc[0] + hc[1] * hc[1] + s;
            if den == 0.0 {
                return Err(Error::SingularChannel(i));
            }
            hc[0] /= den;
            hc[1] = -hc[1] / den;
        }
        Ok(c)
    }

    /// `h ⊙ z + n` (and MMSE equalization when `equalize`) inside a graph.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, z: Var, equalize: bool) -> Result<Var> {
        let faded = match self.family {
            ChannelFamily::Awgn => z,
            ChannelFamily::Rayleigh => g.complex_mul(z, self.h.cast()),
        };
        let received = if self.noise_var > 0.0 {
            let n = g.constant(self.noise.cast());
            g.add(faded, n)
        } else {
            faded
        };
        if !equalize {
            return Ok(received);
        }
        let c = self.equalizer()?;
        Ok(g.complex_mul(received, c.cast()))
    }
}

/// Received signal with the CSI needed by its consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub received: ChannelSignal,
    /// Interleaved `h`; all ones (real part) for AWGN.
    pub coefficients: ChannelSignal,
    pub noise_var: f64,
}

/// Sends one signal through the channel.
pub fn transmit<R: Rng + ?Sized>(z: &ChannelSignal, spec: &ChannelSpec, rng: &mut R) -> Result<ChannelOutput> {
    if !z.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalError("transmit"));
    }
    spec.validate()?;
    let draw = ChannelDraw::sample(spec, 1, z.k(), rng);
    let zt = Tensor::new(&[1, z.values.len()], z.values.clone())?;
    let received = transmit_rows(&zt, &draw);
    Ok(ChannelOutput {
        received: ChannelSignal::from_reals(received.into_data())?,
        coefficients: ChannelSignal::from_reals(draw.h.into_data())?,
        noise_var: draw.noise_var,
    })
}

/// `h ⊙ z + n` over a batch with a given realization.
pub fn transmit_rows(z: &Tensor<f64>, draw: &ChannelDraw) -> Tensor<f64> {
    let mut out = z.clone();
    for ((y, h), n) in out.data_mut().chunks_mut(2).zip(draw.h.data().chunks(2)).zip(draw.noise.data().chunks(2)) {
        let (re, im) = (y[0], y[1]);
        y[0] = h[0] * re - h[1] * im + n[0];
        y[1] = h[0] * im + h[1] * re + n[1];
    }
    out
}

/// MMSE equalization `conj(h)·ẑ / (|h|² + σ²/P̄)`.
pub fn equalize(out: &ChannelOutput, pbar: f64) -> Result<ChannelSignal> {
    let s = out.noise_var / pbar;
    let mut values = vec![0.0; out.received.values.len()];
    for (i, ((o, y), h)) in values
        .chunks_mut(2)
        .zip(out.received.values.chunks(2))
        .zip(out.coefficients.values.chunks(2))
        .enumerate()
    {
        let den = h[0] * h[0] + h[1] * h[1] + s;
        if den == 0.0 {
            return Err(Error::SingularChannel(i));
        }
        o[0] = (h[0] * y[0] + h[1] * y[1]) / den;
        o[1] = (h[0] * y[1] - h[1] * y[0]) / den;
    }
    ChannelSignal::from_reals(values)
}

/// Equalizes a `[B, 2k]` batch received over `draw`.
pub fn equalize_rows(received: &Tensor<f64>, draw: &ChannelDraw) -> Result<Tensor<f64>> {
    let c = draw.equalizer()?;
    let mut out = received.clone();
    for (y, c) in out.data_mut().chunks_mut(2).zip(c.data().chunks(2)) {
        let (re, im) = (y[0], y[1]);
        y[0] = c[0] * re - c[1] * im;
        y[1] = c[0] * im + c[1] * re;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn pairing_examples() {
        assert_eq!(pair_complex(&[0.0; 4]).unwrap(), vec![Complex64::new(0.0, 0.0); 2]);
        assert_eq!(
            pair_complex(&[1.0, 0.0, 0.0, 1.0]).unwrap(),
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]
        );
        assert!(matches!(pair_complex(&[1.0, 2.0, 3.0]), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn normalization_examples() {
        let z = ChannelSignal::from_reals(vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let out = power_normalize(&z, 1.0).unwrap();
        assert!((out.as_reals()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((out.avg_power() - 1.0).abs() < 1e-15);
        let unit = ChannelSignal::from_reals(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(power_normalize(&unit, 1.0).unwrap(), unit);
        let zero = ChannelSignal::from_reals(vec![0.0; 4]).unwrap();
        assert!(matches!(power_normalize(&zero, 1.0), Err(Error::DegenerateSignal)));
    }

    #[test]
    fn noiseless_awgn_is_identity() {
        let z = power_normalize(&ChannelSignal::from_reals(vec![0.3, -1.0, 2.0, 0.5]).unwrap(), 1.0).unwrap();
        let out = transmit(&z, &ChannelSpec::noiseless(), &mut stream(0, "t")).unwrap();
        assert_eq!(out.received, z);
        assert_eq!(out.noise_var, 0.0);
        assert_eq!(equalize(&out, 1.0).unwrap(), z);
    }

    #[test]
    fn zero_forcing_limit() {
        let out = ChannelOutput {
            received: ChannelSignal::from_reals(vec![4.0, 0.0]).unwrap(),
            coefficients: ChannelSignal::from_reals(vec![2.0, 0.0]).unwrap(),
            noise_var: 0.0,
        };
        assert_eq!(equalize(&out, 1.0).unwrap().as_reals(), &[2.0, 0.0]);
        let dead = ChannelOutput {
            coefficients: ChannelSignal::from_reals(vec![0.0, 0.0]).unwrap(),
            ..out
        };
        assert!(matches!(equalize(&dead, 1.0), Err(Error::SingularChannel(0))));
    }

    #[test]
    fn mmse_shrinks() {
        let mut rng = stream(1, "mmse");
        let spec = ChannelSpec::rayleigh(3.0);
        let z = power_normalize(&ChannelSignal::from_reals(crate::rng::normals(&mut rng, 64)).unwrap(), 1.0).unwrap();
        let out = transmit(&z, &spec, &mut rng).unwrap();
        let eq = equalize(&out, 1.0).unwrap();
        for ((e, y), h) in eq.to_complex().iter().zip(out.received.to_complex()).zip(out.coefficients.to_complex()) {
            assert!(e.norm() <= y.norm() / h.norm() + 1e-12);
        }
    }

    #[test]
    fn noise_variance_matches_snr() {
        let mut rng = stream(2, "var");
        let spec = ChannelSpec::awgn(10.0);
        let k = 1_000_000;
        let draw = ChannelDraw::sample(&spec, 1, k, &mut rng);
        let emp = draw.noise.data().iter().map(|v| v * v).sum::<f64>() / k as f64;
        assert!((emp / 0.1 - 1.0).abs() < 0.02, "{emp}");
    }

    #[test]
    fn transmit_is_deterministic() {
        let z = power_normalize(&ChannelSignal::from_reals(vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0).unwrap();
        let spec = ChannelSpec::rayleigh(5.0);
        let a = transmit(&z, &spec, &mut stream(9, "d")).unwrap();
        let b = transmit(&z, &spec, &mut stream(9, "d")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.received.k(), z.k());
        assert_eq!(a.coefficients.k(), z.k());
    }

    #[test]
    fn non_finite_input_rejected() {
        let z = ChannelSignal::from_reals(vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(transmit(&z, &ChannelSpec::awgn(5.0), &mut stream(0, "n")), Err(Error::NumericalError(_))));
    }

    #[test]
    fn graph_channel_matches_direct_path() {
        let mut rng = stream(4, "g");
        let z = power_normalize_rows(&Tensor::new(&[2, 8], crate::rng::normals(&mut rng, 16)).unwrap(), 1.0).unwrap();
        let draw = ChannelDraw::sample(&ChannelSpec::rayleigh(7.0), 2, 4, &mut rng);
        let direct = equalize_rows(&transmit_rows(&z, &draw), &draw).unwrap();
        let mut g = Graph::<f64>::new();
        let zv = g.constant(z);
        let out = draw.apply(&mut g, zv, true).unwrap();
        for (a, b) in g.value(out).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_round_trips_through_serde() {
        let spec = ChannelSpec::noiseless();
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"inf\""));
        let back: ChannelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let five: ChannelSpec = serde_json::from_str(r#"{"family":"rayleigh","snr_db":5}"#).unwrap();
        assert_eq!(five, ChannelSpec::rayleigh(5.0));
    }
}
