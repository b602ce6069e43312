//! Invariants checked over random inputs.

use num_complex::Complex64;
use proptest::prelude::*;

use semcloak_core::codec::LatentGrid;
use semcloak_core::data::{split, Dataset, SplitSpec};
use semcloak_core::metrics::{ms_ssim, psnr, PSNR_CAP};
use semcloak_core::rng::stream;
use semcloak_core::signal::{
    avg_power, equalize_rows, pair_complex, power_normalize, power_normalize_rows, transmit_rows, unpair_complex,
    ChannelDraw, ChannelFamily, ChannelSignal, ChannelSpec,
};
use semcloak_core::steg::StegModule;
use semcloak_core::Tensor;

fn even_reals(max_pairs: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_pairs).prop_flat_map(|k| prop::collection::vec(-10.0..10.0f64, 2 * k))
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-12
}

fn steg(seed: u64) -> StegModule {
    let grid = LatentGrid { c: 4, h: 2, w: 2 };
    let mut m = StegModule::init(grid, 3, 4, 2.0, 1.0, seed).unwrap();
    m.randomize(0.3, &mut stream(seed, "randomize"));
    m
}

fn gaussian_rows(rows: usize, len: usize, seed: u64) -> Tensor<f64> {
    Tensor::new(&[rows, len], semcloak_core::rng::normals(&mut stream(seed, "rows"), rows * len)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairing_round_trips(v in even_reals(32)) {
        let c = pair_complex(&v).unwrap();
        prop_assert_eq!(c.len(), v.len() / 2);
        prop_assert_eq!(c[0], Complex64::new(v[0], v[1]));
        prop_assert_eq!(unpair_complex(&c), v);
    }

    #[test]
    fn odd_lengths_do_not_pair(v in prop::collection::vec(-1.0..1.0f64, 1..20).prop_filter("odd", |v| v.len() % 2 == 1)) {
        prop_assert!(pair_complex(&v).is_err());
    }

    #[test]
    fn normalization_hits_the_power_and_ignores_scale(
        v in even_reals(32).prop_filter("nonzero", |v| nonzero(v)),
        pbar in 0.1..10.0f64,
        c in 0.01..100.0f64,
    ) {
        let z = ChannelSignal::from_reals(v.clone()).unwrap();
        let n = power_normalize(&z, pbar).unwrap();
        prop_assert!((n.avg_power() - pbar).abs() < 1e-9 * pbar);
        let scaled = ChannelSignal::from_reals(v.iter().map(|x| c * x).collect()).unwrap();
        let m = power_normalize(&scaled, pbar).unwrap();
        for (a, b) in n.as_reals().iter().zip(m.as_reals()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn row_normalization_is_per_row(rows in 1usize..5, k in 1usize..10, seed in any::<u64>()) {
        let z = gaussian_rows(rows, 2 * k, seed);
        let n = power_normalize_rows(&z, 2.0).unwrap();
        for r in n.data().chunks(2 * k) {
            prop_assert!((avg_power(r) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_variance_follows_the_snr(snr in -10.0..30.0f64, pbar in 0.1..4.0f64) {
        let spec = ChannelSpec { pbar, ..ChannelSpec::awgn(snr) };
        let expected = pbar * (-snr * std::f64::consts::LN_10 / 10.0).exp();
        prop_assert!((spec.noise_var() - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn draws_are_reproducible(seed in any::<u64>(), snr in 0.0..20.0f64) {
        let spec = ChannelSpec::rayleigh(snr);
        let a = ChannelDraw::sample(&spec, 2, 8, &mut stream(seed, "draw"));
        let b = ChannelDraw::sample(&spec, 2, 8, &mut stream(seed, "draw"));
        prop_assert_eq!(&a, &b);
        let c = ChannelDraw::sample(&spec, 2, 8, &mut stream(seed.wrapping_add(1), "draw"));
        prop_assert_ne!(a.h, c.h);
    }

    #[test]
    fn noiseless_equalization_inverts_fading(seed in any::<u64>(), k in 1usize..16) {
        for family in [ChannelFamily::Awgn, ChannelFamily::Rayleigh] {
            let spec = ChannelSpec::new(family, f64::INFINITY);
            let z = gaussian_rows(3, 2 * k, seed);
            let draw = ChannelDraw::sample(&spec, 3, k, &mut stream(seed, "fade"));
            let back = equalize_rows(&transmit_rows(&z, &draw), &draw).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn inn_round_trips(seed in any::<u64>(), rows in 1usize..4) {
        let m = steg(seed);
        let zh = gaussian_rows(rows, 16, seed ^ 1);
        let zp = gaussian_rows(rows, 16, seed ^ 2);
        let packet = m.embed(&zh, &zp).unwrap();
        let (h, p) = m.extract(&packet.z_c_raw, &packet.l).unwrap();
        for (a, b) in h.data().iter().zip(zh.data()).chain(p.data().iter().zip(zp.data())) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for block in 0..m.blocks {
            let (a, b) = m.inn_block_forward::<f64>(block, &zh, &zp).unwrap();
            let (h, p) = m.inn_block_backward::<f64>(block, &a, &b).unwrap();
            for (x, y) in h.data().iter().zip(zh.data()).chain(p.data().iter().zip(zp.data())) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn container_carries_the_transmit_power(seed in any::<u64>()) {
        let m = steg(seed);
        let packet = m.embed(&gaussian_rows(2, 16, seed), &gaussian_rows(2, 16, !seed)).unwrap();
        for r in packet.z_c.data().chunks(16) {
            prop_assert!((avg_power(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_decreases_with_distortion(
        x in prop::collection::vec(0.0..1.0f64, 48),
        d in prop::collection::vec(-1.0..1.0f64, 48),
        a in 0.01..0.5f64,
        b in 0.01..0.5f64,
    ) {
        prop_assume!(nonzero(&d) && (a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let near: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + lo * d).collect();
        let far: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + hi * d).collect();
        prop_assert!(psnr(&x, &near).unwrap() > psnr(&x, &far).unwrap());
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        prop_assert_eq!(psnr(&x, &near).unwrap(), psnr(&near, &x).unwrap());
    }

    #[test]
    fn ms_ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = stream(seed, "img");
        let n = 3 * 16 * 16;
        let x: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + 0.2 * rand::Rng::random::<f64>(&mut rng)).min(1.0)).collect();
        let a = ms_ssim(&x, &y, [3, 16, 16]).unwrap();
        let b = ms_ssim(&y, &x, [3, 16, 16]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
        prop_assert!((ms_ssim(&x, &x, [3, 16, 16]).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_partitions_the_data(n in 1usize..200, seed in any::<u64>(), tr in 1usize..20, te in 1usize..5) {
        // Each row is tagged by its first pixel, so the halves can be matched back.
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let data = Dataset::new(images, vec![0; n]).unwrap();
        let spec = SplitSpec { train_parts: tr, test_parts: te };
        let (train, test) = split(&data, spec, seed).unwrap();
        prop_assert_eq!(test.len(), spec.test_count(n));
        let mut all: Vec<f64> = train.images.data().iter().chain(test.images.data()).copied().collect();
        all.sort_by(f64::total_cmp);
        prop_assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
    }
}
