//! Checks against independently computed answers: finite differences, closed-form
//! least squares and hand-rolled channel arithmetic.

#![allow(clippy::needless_range_loop)]

use num_complex::Complex64;

use semcloak_core::attacks::{
    collect_query_dataset, forward_fn, genai_glassbox_invert_from, glassbox_invert_from, intercept, train_inverse_network,
    AttackConfig, EncoderApi, GlassBoxEncoder, InverseNetConfig, LinearEncoder, Optimizer, Precision,
};
use semcloak_core::codec::{Codec, CodecConfig, LatentGrid};
use semcloak_core::generator::{Generator, GeneratorConfig};
use semcloak_core::rng::{normals, stream};
use semcloak_core::signal::{ChannelFamily, ChannelSpec};
use semcloak_core::steg::StegModule;
use semcloak_core::{Graph, Tensor, Var};

fn tensor(shape: &[usize], seed: u64, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, normals(&mut stream(seed, "t"), n).into_iter().map(f).collect()).unwrap()
}

/// Compares the tape gradient of `Σ w ⊙ build(x)` with central differences at a spread
/// of coordinates.
fn check_grad(x: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let loss_of = |g: &mut Graph<f64>, xv: Var| {
        let y = build(g, xv);
        let w = tensor(g.shape(y), 99, |v| v);
        let wv = g.constant(w);
        let m = g.mul(y, wv);
        g.sum(m)
    };
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let l = loss_of(&mut g, xv);
    let grad = g.backward(l).take(xv).expect("input gradient");

    let value = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let l = loss_of(&mut g, xv);
        g.item(l)
    };
    let h = 1e-5;
    let step = (x.numel() / 12).max(1);
    let mut worst: f64 = 0.0;
    for i in (0..x.numel()).step_by(step) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (value(xp) - value(xm)) / (2.0 * h);
        let an = grad.data()[i];
        worst = worst.max((fd - an).abs() / (1e-3 + fd.abs().max(an.abs())));
    }
    assert!(worst < 1e-4, "gradient mismatch, worst relative error {worst}");
}

fn tiny_codec() -> Codec {
    let cfg = CodecConfig {
        enc_widths: [4, 4],
        dec_widths: [4, 4],
        ..CodecConfig::default()
    };
    Codec::init([3, 8, 8], &cfg, 1).unwrap()
}

fn tiny_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        d_s: 4,
        base_ch: 4,
        base_res: 2,
        stage_widths: vec![4, 3],
        ..GeneratorConfig::default()
    };
    Generator::init([3, 8, 8], &cfg, seed).unwrap()
}

/// Solves `m·y = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut y = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * y[k]).sum();
        y[r] = (b[r] - s) / m[r][r];
    }
    y
}

fn rows_of(a: &Tensor<f64>) -> Vec<Vec<f64>> {
    a.data().chunks(a.row_len()).map(<[f64]>::to_vec).collect()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

fn gd(lr: f64, iters: usize) -> AttackConfig {
    AttackConfig {
        lr,
        max_iters: iters,
        stop_eps: 0.0,
        optimizer: Optimizer::Gd,
        clamp: false,
        precision: Precision::F64,
        ..AttackConfig::default()
    }
}

#[test]
fn codec_encoder_gradient_matches_finite_differences() {
    let codec = tiny_codec();
    let x = tensor(&[2, 3, 8, 8], 1, |v| 0.5 + 0.2 * v);
    check_grad(&x, |g, xv| {
        let p = codec.params.bind(g, false);
        codec.encode_graph(g, &p, xv)
    });
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let gen = tiny_generator(3);
    let s = tensor(&[2, gen.d_s], 2, |v| v);
    let n = tensor(&[2, gen.d_n()], 3, |v| v);
    check_grad(&s, |g, sv| {
        let p = gen.params.bind(g, false);
        let nv = g.constant(n.clone());
        gen.generate_graph(g, &p, sv, Some(nv))
    });
}

#[test]
fn steg_block_gradient_matches_finite_differences() {
    let grid = LatentGrid { c: 4, h: 2, w: 2 };
    let mut m = StegModule::init(grid, 1, 4, 2.0, 1.0, 5).unwrap();
    m.randomize(0.4, &mut stream(5, "r"));
    let zp = tensor(&[2, 4, 2, 2], 4, |v| v);
    let zh = tensor(&[2, 4, 2, 2], 6, |v| v);
    // Both outputs of the block, differentiated with respect to each input.
    check_grad(&zh, |g, hv| {
        let p = m.params.bind(g, false);
        let pv = g.constant(zp.clone());
        let (a, b) = m.block_forward_graph(g, &p, 0, hv, pv);
        g.add(a, b)
    });
    check_grad(&zp, |g, pv| {
        let p = m.params.bind(g, false);
        let hv = g.constant(zh.clone());
        let (_, b) = m.block_forward_graph(g, &p, 0, hv, pv);
        b
    });
}

#[test]
fn forward_fn_matches_hand_computed_fading() {
    let mut rng = stream(7, "enc");
    let enc = LinearEncoder::random(6, [1, 2, 2], &mut rng);
    let x = tensor(&[2, 1, 2, 2], 8, |v| v);
    let h = tensor(&[2, 12], 9, |v| v);
    let out = forward_fn(&x, Some(&h), &enc).unwrap();
    let a = rows_of(enc.matrix());
    for b in 0..2 {
        let z = matvec(&a, &x.data()[4 * b..4 * b + 4]);
        for i in 0..6 {
            let zc = Complex64::new(z[2 * i], z[2 * i + 1]);
            let hc = Complex64::new(h.data()[12 * b + 2 * i], h.data()[12 * b + 2 * i + 1]);
            let want = hc * zc;
            assert!((out.data()[12 * b + 2 * i] - want.re).abs() < 1e-12);
            assert!((out.data()[12 * b + 2 * i + 1] - want.im).abs() < 1e-12);
        }
    }
    check_grad(&x, |g, xv| {
        let p = enc.params().bind(g, false);
        semcloak_core::attacks::forward_graph(g, &enc, &p, xv, Some(&h))
    });
}

#[test]
fn overdetermined_inversion_reaches_least_squares() {
    let enc = LinearEncoder::random(12, [3, 2, 2], &mut stream(11, "enc"));
    let a = rows_of(enc.matrix());
    let x_true: Vec<f64> = (0..12).map(|i| 0.2 + 0.05 * i as f64).collect();
    let noise = normals(&mut stream(12, "n"), 24);
    let z: Vec<f64> = matvec(&a, &x_true).iter().zip(&noise).map(|(v, n)| v + 0.01 * n).collect();
    // (AᵀA) x = Aᵀ z
    let ata: Vec<Vec<f64>> = (0..12).map(|i| (0..12).map(|j| a.iter().map(|r| r[i] * r[j]).sum()).collect()).collect();
    let atz: Vec<f64> = (0..12).map(|i| a.iter().zip(&z).map(|(r, v)| r[i] * v).sum()).collect();
    let oracle = solve(ata, atz);

    let target = Tensor::new(&[1, 24], z).unwrap();
    let x0 = Tensor::full(&[1, 3, 2, 2], 0.5);
    let out = glassbox_invert_from(&target, None, &enc, &x0, &gd(0.2, 3000)).unwrap();
    for (got, want) in out.solution.data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(out.residuals.windows(2).all(|w| w[1] <= w[0] + 1e-15), "GD on a convex quadratic must not ascend");
}

#[test]
fn underdetermined_inversion_reaches_the_nearest_solution() {
    let enc = LinearEncoder::random(3, [3, 2, 2], &mut stream(13, "enc"));
    let a = rows_of(enc.matrix());
    let x_true: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 / 12.0).collect();
    let z = matvec(&a, &x_true);
    let x0 = vec![0.5; 12];
    // x0 + Aᵀ (AAᵀ)⁻¹ (z − A x0)
    let aat: Vec<Vec<f64>> = a.iter().map(|r| a.iter().map(|q| r.iter().zip(q).map(|(p, q)| p * q).sum()).collect()).collect();
    let resid: Vec<f64> = z.iter().zip(matvec(&a, &x0)).map(|(p, q)| p - q).collect();
    let y = solve(aat, resid);
    let oracle: Vec<f64> = (0..12).map(|j| x0[j] + a.iter().zip(&y).map(|(r, yi)| r[j] * yi).sum::<f64>()).collect();

    let target = Tensor::new(&[1, 6], z).unwrap();
    let out = glassbox_invert_from(&target, None, &enc, &Tensor::new(&[1, 3, 2, 2], x0).unwrap(), &gd(0.5, 4000)).unwrap();
    for (got, want) in out.solution.data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn planted_latent_is_recovered_through_the_generator() {
    let gen = tiny_generator(21);
    let enc = LinearEncoder::random(96, [3, 8, 8], &mut stream(22, "enc"));
    let s_true = tensor(&[2, gen.d_s], 23, |v| 0.5 * v);
    let x_true = gen.generate(&s_true, None).unwrap();
    let z = EncoderApi::evaluate(&enc, &x_true).unwrap();
    let s0 = tensor(&[2, gen.d_s], 24, |v| 0.5 * v);
    let cfg = AttackConfig {
        lr: 2e-2,
        max_iters: 3000,
        stop_eps: 0.0,
        sigma_e2: Some(1e-10),
        precision: Precision::F64,
        ..AttackConfig::default()
    };
    let out = genai_glassbox_invert_from(&z, None, &enc, &gen, &s0, 1.0, &cfg).unwrap();
    let err = |x: &Tensor<f64>| x.data().iter().zip(x_true.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let start = err(&gen.generate(&s0, None).unwrap());
    let end = err(&out.images);
    assert!(end < 1e-3 * start, "image error {start} -> {end}");
    // The prior pulls s toward 0 by O(σ²); the planted code is recovered up to that.
    for (got, want) in out.solution.data().iter().zip(s_true.data()) {
        assert!((got - want).abs() < 0.05, "{got} vs {want}");
    }
}

#[test]
fn mmse_equalizer_matches_hand_computation() {
    let z = tensor(&[3, 16], 31, |v| v);
    for (family, snr) in [(ChannelFamily::Awgn, 5.0), (ChannelFamily::Rayleigh, 5.0), (ChannelFamily::Rayleigh, 60.0)] {
        let spec = ChannelSpec::new(family, snr);
        let ic = intercept(&z, &spec, &mut stream(32, "eve")).unwrap();
        let sig2 = 10f64.powf(-snr / 10.0);
        for i in 0..z.numel() / 2 {
            let h = Complex64::new(ic.draw.h.data()[2 * i], ic.draw.h.data()[2 * i + 1]);
            let n = Complex64::new(ic.draw.noise.data()[2 * i], ic.draw.noise.data()[2 * i + 1]);
            let x = Complex64::new(z.data()[2 * i], z.data()[2 * i + 1]);
            let y = h * x + n;
            assert!((ic.raw.data()[2 * i] - y.re).abs() < 1e-12);
            let want = h.conj() * y / (h.norm_sqr() + sig2);
            let got = Complex64::new(ic.equalized.data()[2 * i], ic.equalized.data()[2 * i + 1]);
            assert!((got - want).norm() < 1e-10);
            if snr > 50.0 {
                // Zero-forcing limit: y / h.
                assert!((got - y / h).norm() < 1e-4 * (1.0 + (y / h).norm()));
            }
        }
    }
}

#[test]
fn inverse_network_memorizes_a_single_probe() {
    let codec = tiny_codec();
    let probe = tensor(&[1, 3, 8, 8], 41, |v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let spec = ChannelSpec::noiseless();
    let qd = collect_query_dataset(&codec, &probe, &spec, &mut stream(42, "q")).unwrap();
    assert_eq!(qd.len(), 1);
    let cfg = InverseNetConfig {
        widths: [8, 8],
        epochs: 400,
        batch: 1,
        lr: 1e-2,
        ..InverseNetConfig::default()
    };
    let (net, curve) = train_inverse_network(&qd, &cfg, 43, &mut |_| {}).unwrap();
    let var = probe.data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / probe.numel() as f64;
    assert!(net.validation_mse < 0.05 * var, "mse {} vs variance {var}", net.validation_mse);
    assert!(curve.last().unwrap() < &curve[0]);
}
