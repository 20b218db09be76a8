//! Monte-Carlo checks of the training distribution, label flipping and
//! initialization concentration.

use featlearn::config::{ExperimentConfig, FlipMode, DEFAULT_DELTA};
use featlearn::datagen::{flip_labels, flip_labels_with, generate_train, init_geometry_report};
use featlearn::model::init_weights;

#[test]
fn noise_norms_concentrate() {
    let d = 2000.0;
    for seed in 0..200 {
        let cfg = ExperimentConfig::default().with_seed(seed);
        let ds = generate_train(&cfg);
        let norms: Vec<f64> = (0..ds.n()).map(|i| ds.noise_norm_sq(i)).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64 / d;
        assert!((0.97..=1.03).contains(&mean), "seed {seed}: mean {mean}");
        assert!(norms.iter().all(|&v| v > d / 2.0 && v < 1.5 * d), "seed {seed}");
    }
}

#[test]
fn flipped_count_matches_binomial_mean() {
    let cfg = ExperimentConfig { d: 2, ..Default::default() };
    let ds = generate_train(&cfg);
    let total: usize = (0..1000u64)
        .map(|seed| flip_labels(ds.clone(), 0.1, 0.1, seed).unwrap().noisy_idx().len())
        .sum();
    let mean = total as f64 / 1000.0;
    assert!((9.4..=10.6).contains(&mean), "mean {mean}");
}

#[test]
fn exact_count_flips_floor_per_class() {
    let cfg = ExperimentConfig { d: 2, ..Default::default() };
    let ds = generate_train(&cfg);
    for seed in 0..20 {
        let f = flip_labels_with(ds.clone(), 0.1, 0.25, seed, FlipMode::ExactCount).unwrap();
        let pos = f.noisy_idx().iter().filter(|&&i| f.samples()[i].y == 1).count();
        let neg = f.noisy_idx().len() - pos;
        assert_eq!((pos, neg), (5, 12));
    }
}

#[test]
fn activation_sets_are_large_at_wide_width() {
    let mut ok = 0;
    for seed in 0..100 {
        let cfg = ExperimentConfig { d: 500, m: 1000, ..Default::default() }.with_seed(seed);
        let ds = generate_train(&cfg);
        let w = init_weights(&cfg);
        let rep = init_geometry_report(&ds, w.init(), cfg.sigma_0);
        assert_eq!(rep.activation_set_sizes.len(), 100);
        ok += usize::from(rep.activation_bound_holds);
    }
    assert!(ok >= 99, "{ok}/100 seeds");
}

#[test]
fn noise_inner_products_respect_bound() {
    let n = 100.0f64;
    let bound = 2.0 * (2000.0 * (6.0 * n * n / DEFAULT_DELTA).ln()).sqrt();
    for seed in 0..50 {
        let cfg = ExperimentConfig::default().with_seed(seed);
        let ds = generate_train(&cfg);
        let mut worst = 0.0f64;
        for i in 0..ds.n() {
            for k in (i + 1)..ds.n() {
                let v: f64 = ds.samples()[i].noise().iter().zip(ds.samples()[k].noise()).map(|(a, b)| a * b).sum();
                worst = worst.max(v.abs());
            }
        }
        assert!(worst <= bound, "seed {seed}: {worst} > {bound}");
        let w = init_weights(&cfg);
        let rep = init_geometry_report(&ds, w.init(), cfg.sigma_0);
        assert!((rep.noise_inner_bound - bound).abs() < 1e-9 * bound);
        assert!((rep.max_noise_inner - worst).abs() < 1e-9 * worst);
    }
}
