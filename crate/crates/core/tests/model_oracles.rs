//! Independent oracles for the forward pass, the gradient and one GD step.

use featlearn::config::ExperimentConfig;
use featlearn::datagen::{generate_train, Dataset, SignalSlot, TestSampler, sample_test};
use featlearn::model::{batch_gradient, empirical_loss, forward, FilterBanks, ModelWeights};
use featlearn::trainer::gd_step;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FD_STEP: f64 = 1e-6;

fn gauss(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_instance(d: usize, n: usize, m: usize, seed: u64) -> (FilterBanks, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = gauss(&mut rng, d, 1.0);
    let noise: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, d, 1.0)).collect();
    let ys: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let y_obs: Vec<i8> = ys.iter().map(|&y| if rng.random::<f64>() < 0.3 { -y } else { y }).collect();
    let slots: Vec<SignalSlot> = (0..n).map(|_| if rng.random::<bool>() { SignalSlot::A } else { SignalSlot::B }).collect();
    let ds = Dataset::from_parts(mu, 1.0, noise, &ys, &y_obs, &slots).unwrap();
    let w = FilterBanks::from_banks(m, d, gauss(&mut rng, m * d, 0.5), gauss(&mut rng, m * d, 0.5));
    (w, ds)
}

/// Plain double loop with naive summation.
fn brute_forward(w: &FilterBanks, a: &[f64], b: &[f64]) -> f64 {
    let m = w.m();
    let mut total = 0.0;
    for (bank, sign) in [(0usize, 1.0), (1, -1.0)] {
        for r in 0..m {
            let f = w.filter(bank, r);
            for x in [a, b] {
                let mut z = 0.0;
                for k in 0..x.len() {
                    z += f[k] * x[k];
                }
                if z > 0.0 {
                    total += sign * z / m as f64;
                }
            }
        }
    }
    total
}

fn min_abs_preactivation(w: &FilterBanks, ds: &Dataset) -> f64 {
    let mut lo = f64::INFINITY;
    for s in ds.samples() {
        for bank in 0..2 {
            for r in 0..w.m() {
                for x in [&s.patch_a, &s.patch_b] {
                    let z: f64 = w.filter(bank, r).iter().zip(x.iter()).map(|(p, q)| p * q).sum();
                    lo = lo.min(z.abs());
                }
            }
        }
    }
    lo
}

fn fd_gradient(w: &FilterBanks, ds: &Dataset) -> FilterBanks {
    let mut g = FilterBanks::zeros(w.m(), w.d());
    for bank in 0..2 {
        for k in 0..w.m() * w.d() {
            let mut plus = w.clone();
            plus.bank_mut(bank)[k] += FD_STEP;
            let mut minus = w.clone();
            minus.bank_mut(bank)[k] -= FD_STEP;
            g.bank_mut(bank)[k] = (empirical_loss(&plus, ds) - empirical_loss(&minus, ds)) / (2.0 * FD_STEP);
        }
    }
    g
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    // The absolute floor sits well above the rounding error of a central
    // difference of an O(1) loss with step 1e-6.
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
}

#[test]
fn forward_matches_double_loop() {
    for seed in 0..20 {
        let (w, ds) = random_instance(5, 3, 3, seed);
        for s in ds.samples() {
            let got = forward(&w, &s.patch_a, &s.patch_b);
            let want = brute_forward(&w, &s.patch_a, &s.patch_b);
            assert!((got - want).abs() < 1e-14, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn gradient_matches_finite_differences_small_case() {
    let mut seed = 0;
    let (w, ds) = loop {
        let inst = random_instance(4, 2, 2, seed);
        if min_abs_preactivation(&inst.0, &inst.1) > 1e-3 {
            break inst;
        }
        seed += 1;
    };
    let an = batch_gradient(&w, &ds);
    let fd = fd_gradient(&w, &ds);
    for (a, b) in an.iter_all().zip(fd.iter_all()) {
        assert!(rel_close(*a, *b, 1e-4), "analytic {a} fd {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, max_global_rejects: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn gradient_matches_finite_differences(d in 1usize..=8, n in 1usize..=4, m in 1usize..=3, seed in any::<u64>()) {
        let (w, ds) = random_instance(d, n, m, seed);
        prop_assume!(min_abs_preactivation(&w, &ds) > 1e-3);
        let an = batch_gradient(&w, &ds);
        let fd = fd_gradient(&w, &ds);
        for (a, b) in an.iter_all().zip(fd.iter_all()) {
            prop_assert!(rel_close(*a, *b, 1e-4), "analytic {} fd {}", a, b);
        }
    }

    #[test]
    fn forward_is_patch_order_invariant(seed in any::<u64>()) {
        let (w, ds) = random_instance(6, 3, 2, seed);
        for s in ds.samples() {
            prop_assert_eq!(forward(&w, &s.patch_a, &s.patch_b), forward(&w, &s.patch_b, &s.patch_a));
        }
    }
}

/// Least-squares residual of `v` against the columns of `basis`, relative to `‖v‖`.
fn span_residual(basis: &[Vec<f64>], v: &[f64]) -> f64 {
    let d = v.len();
    let a = DMatrix::from_fn(d, basis.len(), |i, j| basis[j][i]);
    let b = DVector::from_column_slice(v);
    let x = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    let r = &a * x - &b;
    let norm = b.norm();
    if norm == 0.0 { r.norm() } else { r.norm() / norm }
}

#[test]
fn gradient_lies_in_data_span() {
    for seed in 0..5 {
        let (w, ds) = random_instance(30, 5, 3, seed);
        let g = batch_gradient(&w, &ds);
        let mut basis = vec![ds.mu().to_vec()];
        basis.extend(ds.samples().iter().map(|s| s.noise().to_vec()));
        for bank in 0..2 {
            for r in 0..3 {
                let res = span_residual(&basis, g.filter(bank, r));
                assert!(res < 1e-10, "seed {seed} filter ({bank},{r}) residual {res}");
            }
        }
        let outside: Vec<f64> = (0..30).map(|k| if k == 7 { 1.0 } else { 0.0 }).collect();
        assert!(span_residual(&basis, &outside) > 0.1);
    }
}

#[test]
fn one_step_matches_finite_difference_descent() {
    let mut seed = 100;
    let (w, ds) = loop {
        let inst = random_instance(4, 2, 1, seed);
        if min_abs_preactivation(&inst.0, &inst.1) > 1e-3 {
            break inst;
        }
        seed += 1;
    };
    let eta = 0.1;
    let fd = fd_gradient(&w, &ds);
    let mut weights = ModelWeights::from_init(w.clone(), 0.5, 0);
    gd_step(&mut weights, &ds, eta).unwrap();
    for ((next, w0), g) in weights.live.iter_all().zip(w.iter_all()).zip(fd.iter_all()) {
        let want = w0 - eta * g;
        assert!(rel_close(*next, want, 1e-4), "{next} vs {want}");
    }
}

#[test]
fn first_test_draw_is_golden() {
    let cfg = ExperimentConfig { d: 4, n: 2, m: 1, ..Default::default() };
    let ds = generate_train(&cfg);
    let sampler = TestSampler::new(&ds, 1.0, 11);
    let first = &sample_test(&sampler, 1)[0];
    let again = &sample_test(&sampler, 1)[0];
    assert_eq!(first, again);
    let bits: Vec<u64> = first.patch_b.iter().map(|x| x.to_bits()).collect();
    assert_eq!((first.y, first.source), GOLDEN_LABEL_SOURCE);
    assert_eq!(bits, GOLDEN_BITS);
}

// Recorded once from this implementation.
const GOLDEN_LABEL_SOURCE: (i8, usize) = (-1, 0);
const GOLDEN_BITS: [u64; 4] = [4605647549066120030, 4600917222044060668, 4612228372914040104, 13817711443362632377];
