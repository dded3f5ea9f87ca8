//! Property tests for the stated invariants of every module.

use std::collections::BTreeSet;
use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spic_ssdu::cg::{cg_normal, cg_sense};
use spic_ssdu::data::{
    build_dataset, load_dataset, save_dataset, simulate_coils, simulate_phantom, support_of, KSpace, NoiseSpec,
};
use spic_ssdu::encoding::{forward, EncodingOperator};
use spic_ssdu::harness::ExperimentConfig;
use spic_ssdu::image::BoolImage;
use spic_ssdu::losses::{draw, loss_value, FixedCgSense, LossConfig, Method, Reconstructor, Sample};
use spic_ssdu::metrics::{psnr, ssim};
use spic_ssdu::net::{init_params, UnrolledConfig, UnrolledNet};
use spic_ssdu::perturbation::{
    estimate_perturbation, generate_perturbation, generate_perturbation_within, perturb_measurements, verify_no_overlap,
};
use spic_ssdu::sampling::{equidistant_mask, shifted_patterns, ssdu_split};
use spic_ssdu::sparsity::weighted_l1;
use spic_ssdu::wavelet::{wavelet_forward, wavelet_inverse, WaveletKind};
use spic_ssdu::{ComplexImage, C64};

fn random_image(rows: usize, cols: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexImage::from_fn(rows, cols, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn random_kspace(coils: usize, rows: usize, cols: usize, seed: u64) -> KSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..coils * rows * cols)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    KSpace::new(coils, rows, cols, data).unwrap()
}

fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn coil_maps_are_normalized_on_support_and_zero_off_it(
        rows in 16usize..48, cols in 16usize..48, coils in 1usize..9, seed in any::<u64>()
    ) {
        let support = support_of(&simulate_phantom(rows, cols, seed).unwrap());
        let s = simulate_coils(rows, cols, coils, &support).unwrap();
        prop_assert!(s.normalization_error() < 1e-6);
        for c in 0..coils {
            for (i, v) in s.map(c).iter().enumerate() {
                if !support.data[i] {
                    prop_assert_eq!(*v, C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn encoding_is_linear_and_mask_idempotent(
        rows in 4usize..24, cols in 4usize..24, coils in 1usize..5, r in 1usize..4, seed in any::<u64>()
    ) {
        let s = simulate_coils(rows, cols, coils, &BoolImage::filled(rows, cols, true)).unwrap();
        let m = equidistant_mask(rows, cols, r, 0).unwrap();
        let (x1, x2) = (random_image(rows, cols, seed), random_image(rows, cols, seed ^ 1));
        let (a, b) = (C64::new(0.7, -1.3), C64::new(-0.2, 0.4));
        let combo = ComplexImage::from_fn(rows, cols, |i, j| a * x1.get(i, j) + b * x2.get(i, j));
        let lhs = forward(&combo, &s, &m).unwrap();
        let (y1, y2) = (forward(&x1, &s, &m).unwrap(), forward(&x2, &s, &m).unwrap());
        let rhs: Vec<C64> = y1.data().iter().zip(y2.data()).map(|(u, v)| a * u + b * v).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) < 1e-12);
        prop_assert_eq!(lhs.masked(&m), lhs);
    }

    #[test]
    fn ssdu_splits_partition_omega_and_keep_acs(
        r in 2usize..5, acs in 0usize..9, rho in 0.2f64..0.6, k in 1usize..4, seed in any::<u64>()
    ) {
        let omega = equidistant_mask(64, 32, r, acs).unwrap();
        let split = ssdu_split(&omega, rho, k, seed).unwrap();
        prop_assert_eq!(split.k(), k);
        for pair in &split.pairs {
            prop_assert_eq!(pair.theta.intersection_count(&pair.lambda), 0);
            prop_assert!(pair.theta.union(&pair.lambda).unwrap().same_points(&omega));
            for row in omega.acs_rows() {
                for col in 0..32 {
                    prop_assert!(pair.theta.is_sampled(row, col));
                }
            }
            let ratio = pair.lambda.count() as f64 / pair.theta.count() as f64;
            prop_assert!((ratio / rho - 1.0).abs() <= 0.05, "ratio {} vs rho {}", ratio, rho);
        }
        prop_assert_eq!(ssdu_split(&omega, rho, k, seed).unwrap(), split);
    }

    #[test]
    fn shifted_patterns_keep_acs_and_mask_cardinality_holds(
        n_pe in 16usize..80, r in 2usize..7, acs in 0usize..9, seed in any::<u64>()
    ) {
        let bare = equidistant_mask(n_pe, 8, r, 0).unwrap();
        prop_assert_eq!(bare.sampled_rows().len(), n_pe.div_ceil(r));
        let omega = equidistant_mask(n_pe, 8, r, acs.min(n_pe)).unwrap();
        for delta in shifted_patterns(&omega, r - 1, seed).unwrap() {
            prop_assert_eq!(delta.acceleration(), r);
            for row in omega.acs_rows() {
                prop_assert!(delta.is_sampled(row, 0));
            }
        }
    }

    #[test]
    fn wavelet_reconstructs_and_counts_coefficients(levels in 1usize..4, seed in any::<u64>(), dtcwt in any::<bool>()) {
        let kind = if dtcwt { WaveletKind::Dtcwt } else { WaveletKind::Dwt };
        let x = random_image(32, 64, seed);
        let c = wavelet_forward(&x, levels, kind).unwrap();
        let sizes: usize = c.real.lowpass.len()
            + c.real.levels.iter().flat_map(|l| l.bands.iter()).map(Vec::len).sum::<usize>();
        prop_assert_eq!(c.count(), sizes);
        let back = wavelet_inverse(&c).unwrap();
        prop_assert!(max_diff(back.data(), x.data()) < 1e-10);
    }

    #[test]
    fn weighted_l1_is_absolutely_homogeneous(a in 0.0f64..10.0, seed in any::<u64>()) {
        let p_true = random_image(32, 32, seed);
        let p_est = random_image(32, 32, seed ^ 7);
        let base = weighted_l1(&p_est, &p_true, 2, WaveletKind::Dtcwt, 1e-4).unwrap();
        let scaled = weighted_l1(&p_est.scale(a), &p_true, 2, WaveletKind::Dtcwt, 1e-4).unwrap();
        assert_relative_eq!(scaled, a * base, max_relative = 1e-12, epsilon = 1e-300);
    }

    #[test]
    fn metrics_are_scale_invariant_and_ssim_is_one_on_identity(a in 0.01f64..100.0, seed in any::<u64>()) {
        let x = simulate_phantom(32, 32, seed).unwrap();
        let noisy = x.add(&random_image(32, 32, seed).scale(0.05)).unwrap();
        assert_relative_eq!(psnr(&x, &noisy).unwrap(), psnr(&x.scale(a), &noisy.scale(a)).unwrap(), max_relative = 1e-10);
        let worse = x.add(&random_image(32, 32, seed).scale(0.1)).unwrap();
        prop_assert!(psnr(&x, &worse).unwrap() < psnr(&x, &noisy).unwrap());
        assert_relative_eq!(ssim(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softplus_weight_is_positive(raw in -700.0f64..700.0) {
        let cfg = UnrolledConfig::tiny();
        let mut p = init_params(&cfg, 1).unwrap();
        let i = p.layout().mu_index();
        p.values_mut()[i] = raw;
        prop_assert!(p.mu() > 0.0 && p.mu().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_perturbations_are_alias_free_and_scale_exactly(
        r in 2usize..7, features in 1usize..5, amplitude in 0.01f64..2.0, seed in any::<u64>()
    ) {
        let p = generate_perturbation(64, 48, r, features, amplitude, seed).unwrap();
        prop_assert!(verify_no_overlap(&p, r, 64).disjoint);
        let rows: BTreeSet<usize> = (0..64).filter(|&i| (0..48).any(|j| p.p.get(i, j) != C64::new(0.0, 0.0))).collect();
        prop_assert!(rows.is_subset(&p.support_rows));
        let doubled = generate_perturbation(64, 48, r, features, 2.0 * amplitude, seed).unwrap();
        prop_assert_eq!(doubled.p.data().to_vec(), p.p.scale(2.0).data().to_vec());
    }

    // CG step sizes depend on the residual, so a fixed-iteration solve is
    // linear in the data only once it has converged.
    #[test]
    fn converged_cg_is_linear_and_recovers_its_own_perturbation_response(seed in any::<u64>()) {
        let ds = build_dataset(1, 32, 32, 4, NoiseSpec { sigma: 0.01, seed }, seed).unwrap();
        let s = &ds.slices[0];
        let m = equidistant_mask(32, 32, 2, 4).unwrap();
        let op = Arc::new(EncodingOperator::new(s.coils.clone(), m.clone()).unwrap());
        let f = FixedCgSense { iters: 200 };
        let y = s.full_kspace.masked(&m);
        let p = generate_perturbation_within(s.coils.support(), 2, 2, 0.5, seed).unwrap();
        let q = perturb_measurements(&KSpace::zeros(4, 32, 32), &p, &s.coils, &m).unwrap();
        let via_difference = estimate_perturbation(
            &f.reconstruct(&perturb_measurements(&y, &p, &s.coils, &m).unwrap(), &op).unwrap(),
            &f.reconstruct(&y, &op).unwrap(),
        ).unwrap();
        let direct = f.reconstruct(&q, &op).unwrap();
        prop_assert!(via_difference.relative_error(&direct).unwrap() < 1e-8);
        let y2 = random_kspace(4, 32, 32, seed ^ 3).masked(&m);
        let (a, b) = (0.6, -1.7);
        let combo = KSpace::new(4, 32, 32, y.data().iter().zip(y2.data()).map(|(u, v)| u * a + v * b).collect()).unwrap();
        let lhs = cg_sense(&combo, &s.coils, &m, 200, 0.0).unwrap();
        let (r1, r2) = (cg_sense(&y, &s.coils, &m, 200, 0.0).unwrap(), cg_sense(&y2, &s.coils, &m, 200, 0.0).unwrap());
        let rhs = r1.scale(a).add(&r2.scale(b)).unwrap();
        prop_assert!(lhs.relative_error(&rhs).unwrap() < 1e-8);
    }

    #[test]
    fn losses_are_nonnegative_and_reproducible(seed in any::<u64>(), which in 0usize..6) {
        let method = Method::ALL[which];
        let ds = build_dataset(1, 16, 16, 2, NoiseSpec { sigma: 0.003, seed }, seed).unwrap();
        let sample = Sample::from_slice(&ds.slices[0], &equidistant_mask(16, 16, 2, 4).unwrap()).unwrap();
        let cfg = UnrolledConfig::tiny();
        let net = UnrolledNet::new(cfg.clone(), init_params(&cfg, seed).unwrap()).unwrap();
        let lc = LossConfig { levels: 2, ..LossConfig::for_method(method) };
        let draws = draw(&sample, &lc, seed).unwrap();
        let a = loss_value(&net, &sample, &draws, &lc).unwrap();
        prop_assert!(a.total >= 0.0 && a.data_term >= 0.0 && a.secondary_term >= 0.0);
        let b = loss_value(&net, &sample, &draw(&sample, &lc, seed).unwrap(), &lc).unwrap();
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
}

/// CG minimizes the energy-norm error over growing Krylov spaces, so
/// `‖x_k − x*‖_A` never increases, while the residual norm may.
#[test]
fn cg_energy_error_is_monotone() {
    let mut residual_increases = 0;
    for seed in 0..4 {
        let ds = build_dataset(1, 32, 32, 4, NoiseSpec { sigma: 0.01, seed }, seed).unwrap();
        let s = &ds.slices[0];
        let m = equidistant_mask(32, 32, 2, 4).unwrap();
        let op = EncodingOperator::new(s.coils.clone(), m.clone()).unwrap();
        let y = s.full_kspace.masked(&m);
        let z = random_image(32, 32, seed);
        for mu in [0.0, 0.05, 1.0] {
            let solve = |iters| cg_normal(&y, &s.coils, &m, mu, Some(&z), iters, 0.0, None).unwrap();
            let exact = cg_normal(&y, &s.coils, &m, mu, Some(&z), 500, 1e-14, None).unwrap().image;
            let energy = |x: &ComplexImage| {
                let e: Vec<C64> = x.data().iter().zip(exact.data()).map(|(a, b)| a - b).collect();
                let ae = op.normal_vec(&e);
                e.iter().zip(&ae).map(|(u, v)| (u.conj() * (v + u * mu)).re).sum::<f64>()
            };
            let errors: Vec<f64> = (1..=15).map(|k| energy(&solve(k).image)).collect();
            for (k, w) in errors.windows(2).enumerate() {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-24, "seed {seed} mu {mu} step {k}: {} > {}", w[1], w[0]);
            }
            let r = solve(15).residual_norms;
            residual_increases += r.windows(2).filter(|w| w[1] > w[0]).count();
        }
    }
    eprintln!("residual-norm increases across seeded solves: {residual_increases}");
}

#[test]
fn datasets_are_deterministic_and_persist_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [0, 17, 99] {
        let a = build_dataset(2, 16, 16, 3, NoiseSpec { sigma: 0.01, seed }, seed).unwrap();
        let b = build_dataset(2, 16, 16, 3, NoiseSpec { sigma: 0.01, seed }, seed).unwrap();
        assert_eq!(a, b);
        let path = dir.path().join(format!("d{seed}"));
        save_dataset(&a, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), a);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(ExperimentConfig::from_json(r#"{"optim": {"steps": 3, "learning_rate": 1e-3}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"seed": 1, "sede": 2}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"seed": 1}"#).is_ok());
}

#[test]
fn truncated_cg_is_not_linear_in_the_data() {
    let ds = build_dataset(1, 32, 32, 4, NoiseSpec { sigma: 0.01, seed: 5 }, 5).unwrap();
    let s = &ds.slices[0];
    let m = equidistant_mask(32, 32, 4, 4).unwrap();
    let (y1, y2) = (s.full_kspace.masked(&m), random_kspace(4, 32, 32, 6).masked(&m));
    let sum = KSpace::new(4, 32, 32, y1.data().iter().zip(y2.data()).map(|(u, v)| u + v).collect()).unwrap();
    let x = |y: &KSpace| cg_sense(y, &s.coils, &m, 2, 0.0).unwrap();
    let split = x(&y1).add(&x(&y2)).unwrap();
    assert!(x(&sum).relative_error(&split).unwrap() > 1e-6);
}
