mod common;

use common::*;
use mqf2::model::{reference_draws, LN_2PI};
use mqf2::picnn::grad_potential;
use mqf2::rng::{stream, Stream};
use mqf2::training::nll_loss;
use mqf2::{Error, Mode, PicnnConfig, QuantileModel};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn unit_model(n: usize, gamma: f64) -> QuantileModel {
    let picnn = PicnnConfig::new(n, 4, 3, 2);
    let mut m = QuantileModel::new(picnn.clone(), small_encoder(2, 0), Mode::Ml, 0).unwrap();
    m.params = small_encoder(2, 0).zero_params();
    m.params.extend(picnn.zero_params());
    m.params.insert("picnn.raw_gamma", Array2::from_elem((1, 1), picnn.raw_gamma_for(gamma)));
    m
}

#[test]
fn affine_gradient_inverts_in_closed_form() {
    // G(z) = c·z + (γ/2) z², so g⁻¹(y) = (y − c) / γ.
    let mut m = unit_model(1, 3.0);
    m.params.insert("picnn.l2.b_alpha", array![[1.0]]);
    m.params.insert("picnn.l2.w_alpha", array![[0.5]]);
    let h = Array1::zeros(4);
    for y in [-4.0, -1.0, 0.0, 0.5, 6.0] {
        let z = m.invert(&array![y], &h).unwrap()[0];
        assert!((z - (y - 0.5) / 3.0).abs() < 1e-8, "{y}: {z}");
    }
}

#[test]
fn one_dimensional_identity_nll() {
    let m = unit_model(1, 1.0);
    let h = Array1::zeros(4);
    let at0 = nll_loss(&m, &array![0.0], &h).unwrap();
    let at3 = nll_loss(&m, &array![3.0], &h).unwrap();
    assert!((at0 - 0.918_938_533_204_672_7).abs() < 1e-12);
    assert!((at3 - (0.5 * LN_2PI + 4.5)).abs() < 1e-12);
}

#[test]
fn round_trip_on_random_models() {
    for seed in 0..10u64 {
        let n = 2 + (seed % 2) as usize;
        let (m, h) = random_model(n, Mode::Ml, 500 + seed);
        let alphas = reference_draws(&mut stream(seed, Stream::Sampling), 100, n);
        let ys = m.map(&alphas, &h).unwrap();
        let mut inv = m.inverter(&h).unwrap();
        for (a, y) in alphas.rows().into_iter().zip(ys.rows()) {
            let back = inv.invert(&y.to_owned()).unwrap();
            assert!(inf_norm(&(&back - &a)) <= 1e-4, "seed {seed}");
        }
    }
}

#[test]
fn log_density_matches_change_of_variables() {
    let mut rng = stream(21, Stream::Data);
    for trial in 0..50u64 {
        let n = 1 + (trial % 3) as usize;
        let (m, h) = random_model(n, Mode::Ml, 700 + trial);
        let z = normal_vector(n, &mut rng);
        let g = grad_potential(&m.picnn, &m.params, &z, &h).unwrap();
        let jac = fd_jacobian(&z, 1e-5, |x| grad_potential(&m.picnn, &m.params, x, &h).unwrap());
        let expected = -0.5 * g.dot(&g) - 0.5 * n as f64 * LN_2PI + log_abs_det(&jac);
        let got = m.log_density(&z, &h).unwrap();
        assert!(rel_err(got, expected) <= 1e-4, "trial {trial}: {got} vs {expected}");
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    for seed in 0..5u64 {
        let (m, h) = random_model(1, Mode::Ml, 900 + seed);
        let q = |y: f64| m.invert(&array![y], &h).unwrap()[0];
        let mu = q(0.0);
        let sigma = 0.5 * (q(1.0) - q(-1.0));
        let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let k = 4000;
        let zs = Array2::from_shape_fn((k + 1, 1), |(i, _)| lo + (hi - lo) * i as f64 / k as f64);
        let hs = Array2::from_shape_fn((k + 1, h.len()), |(_, j)| h[j]);
        let dens = m.log_density_batch(&zs, &hs).unwrap().mapv(f64::exp);
        let dx = (hi - lo) / k as f64;
        let mass = dx * (dens.sum() - 0.5 * (dens[0] + dens[k]));
        assert!((mass - 1.0).abs() <= 0.01, "seed {seed}: {mass}");
    }
}

#[test]
fn inverse_jacobian_is_symmetric_positive_semidefinite() {
    for seed in 0..6u64 {
        let n = 2 + (seed % 2) as usize;
        let (m, h) = random_model(n, Mode::Ml, 1100 + seed);
        let ys = reference_draws(&mut stream(seed, Stream::Sampling), 20, n);
        let report = m.check_inverse_monotone(&ys, &h).unwrap();
        assert_eq!(report.points.len(), 20);
        assert!(report.passed(), "seed {seed}: {} {}", report.max_symmetry_error(), report.min_eigenvalue());
    }
}

#[test]
fn forward_sampling_is_seeded() {
    let (m, h) = random_model(3, Mode::Es, 4);
    let a = m.sample_forward(&h, 50, 9).unwrap();
    let b = m.sample_forward(&h, 50, 9).unwrap();
    let c = m.sample_forward(&h, 50, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn inversion_reports_the_residual_when_capped() {
    let (m, h) = random_model(3, Mode::Ml, 3);
    let mut inv = m.inverter(&h).unwrap();
    inv.config.max_iterations = 1;
    inv.config.tolerance = 1e-300;
    match inv.invert_abs(&array![3.0, -2.0, 1.0]) {
        Err(Error::NonConvergence { residual, iterations }) => {
            assert!(residual > 0.0 && residual.is_finite());
            assert_eq!(iterations, 1);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_map_never_crosses(seed in 0u64..200, a1 in prop::collection::vec(-4.0f64..4.0, 2), a2 in prop::collection::vec(-4.0f64..4.0, 2)) {
        let (m, h) = random_model(2, Mode::Es, seed);
        let alphas = Array2::from_shape_vec((2, 2), [a1.clone(), a2.clone()].concat()).unwrap();
        let g = m.map(&alphas, &h).unwrap();
        let d: f64 = (0..2).map(|i| (g[[0, i]] - g[[1, i]]) * (a1[i] - a2[i])).sum();
        prop_assert!(d >= -1e-6);
    }

    #[test]
    fn inversion_round_trips(seed in 0u64..200, y in prop::collection::vec(-3.0f64..3.0, 3)) {
        let (m, h) = random_model(3, Mode::Ml, seed);
        let y = Array1::from(y);
        let z = m.invert(&y, &h).unwrap();
        let back = grad_potential(&m.picnn, &m.params, &z, &h).unwrap();
        prop_assert!(inf_norm(&(&back - &y)) <= 1e-6 * (1.0 + inf_norm(&y)));
    }
}
