//! Signal-noise training data, label flipping and the spurious-feature test
//! distribution.
//!
//! Each sample is two patches: one equals `y·μ` exactly, the other is a
//! Gaussian noise vector `ξ ~ N(0, σ_ξ² I_d)`. Test inputs are `[yμ, ξ_U + ζ]`
//! where `ξ_U` is a uniformly chosen training noise patch and `ζ` fresh
//! Gaussian noise.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, FlipMode};
use crate::model::{bank_index, dot, FilterBanks};
use crate::rng::{sci, stream, STREAM_DATA, STREAM_FLIP, STREAM_TEST_BASE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("flip probability {name} = {value} outside [0, 0.5)")]
    FlipProbability { name: &'static str, value: f64 },
    #[error("dataset text line {0}: {1}")]
    Parse(usize, String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalSlot {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch_a: Vec<f64>,
    pub patch_b: Vec<f64>,
    pub y: i8,
    pub y_obs: i8,
    pub signal_slot: SignalSlot,
}

impl Sample {
    pub fn signal(&self) -> &[f64] {
        match self.signal_slot {
            SignalSlot::A => &self.patch_a,
            SignalSlot::B => &self.patch_b,
        }
    }

    pub fn noise(&self) -> &[f64] {
        match self.signal_slot {
            SignalSlot::A => &self.patch_b,
            SignalSlot::B => &self.patch_a,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.y == self.y_obs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    mu: Vec<f64>,
    sigma_xi: f64,
    clean_idx: Vec<usize>,
    noisy_idx: Vec<usize>,
    mu_norm_sq: f64,
    noise_norms_sq: Vec<f64>,
}

impl Dataset {
    /// Assembles a dataset from noise patches and labels. The signal patch of
    /// sample `i` is `ys[i]·μ`.
    pub fn from_parts(
        mu: Vec<f64>,
        sigma_xi: f64,
        noise: Vec<Vec<f64>>,
        ys: &[i8],
        y_obs: &[i8],
        slots: &[SignalSlot],
    ) -> Result<Self, DataError> {
        let n = noise.len();
        if ys.len() != n || y_obs.len() != n || slots.len() != n {
            return Err(DataError::Inconsistent("label and slot counts must match the sample count".into()));
        }
        let mut samples = Vec::with_capacity(n);
        for (i, xi) in noise.into_iter().enumerate() {
            if xi.len() != mu.len() {
                return Err(DataError::Inconsistent(format!("noise patch {i} has wrong dimension")));
            }
            for &l in [ys[i], y_obs[i]].iter() {
                if l != 1 && l != -1 {
                    return Err(DataError::Inconsistent(format!("label {l} of sample {i} is not ±1")));
                }
            }
            let signal: Vec<f64> = mu.iter().map(|&x| ys[i] as f64 * x).collect();
            let (patch_a, patch_b) = match slots[i] {
                SignalSlot::A => (signal, xi),
                SignalSlot::B => (xi, signal),
            };
            samples.push(Sample { patch_a, patch_b, y: ys[i], y_obs: y_obs[i], signal_slot: slots[i] });
        }
        Ok(Self::assemble(samples, mu, sigma_xi))
    }

    fn assemble(samples: Vec<Sample>, mu: Vec<f64>, sigma_xi: f64) -> Self {
        let mu_norm_sq = dot(&mu, &mu);
        let noise_norms_sq = samples.iter().map(|s| dot(s.noise(), s.noise())).collect();
        let mut ds =
            Self { samples, mu, sigma_xi, clean_idx: Vec::new(), noisy_idx: Vec::new(), mu_norm_sq, noise_norms_sq };
        ds.repartition();
        ds
    }

    fn repartition(&mut self) {
        self.clean_idx.clear();
        self.noisy_idx.clear();
        for (i, s) in self.samples.iter().enumerate() {
            if s.is_clean() {
                self.clean_idx.push(i);
            } else {
                self.noisy_idx.push(i);
            }
        }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_xi(&self) -> f64 {
        self.sigma_xi
    }

    /// Indices with `ỹ = y`.
    pub fn clean_idx(&self) -> &[usize] {
        &self.clean_idx
    }

    /// Indices with `ỹ ≠ y`.
    pub fn noisy_idx(&self) -> &[usize] {
        &self.noisy_idx
    }

    pub fn mu_norm_sq(&self) -> f64 {
        self.mu_norm_sq
    }

    pub fn noise_norm_sq(&self, i: usize) -> f64 {
        self.noise_norms_sq[i]
    }

    pub fn is_noisy(&self, i: usize) -> bool {
        !self.samples[i].is_clean()
    }
}

fn signal_vector(cfg: &ExperimentConfig) -> Vec<f64> {
    match &cfg.signal_direction {
        None => {
            let mut mu = vec![0.0; cfg.d];
            mu[0] = cfg.mu_mag;
            mu
        }
        Some(dir) => {
            let norm = dot(dir, dir).sqrt();
            dir.iter().map(|x| cfg.mu_mag * x / norm).collect()
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Draws a balanced training set with clean observed labels.
///
/// `cfg` is assumed valid (even `n`).
pub fn generate_train(cfg: &ExperimentConfig) -> Dataset {
    let mut rng = stream(cfg.seed_data, STREAM_DATA);
    let mu = signal_vector(cfg);
    let mut labels: Vec<i8> = (0..cfg.n).map(|i| if i < cfg.n / 2 { 1 } else { -1 }).collect();
    labels.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(cfg.n);
    for &y in &labels {
        let slot = if rng.random::<bool>() { SignalSlot::A } else { SignalSlot::B };
        let xi = gaussian_vec(&mut rng, cfg.d, cfg.sigma_xi);
        let signal: Vec<f64> = mu.iter().map(|&x| y as f64 * x).collect();
        let (patch_a, patch_b) = match slot {
            SignalSlot::A => (signal, xi),
            SignalSlot::B => (xi, signal),
        };
        samples.push(Sample { patch_a, patch_b, y, y_obs: y, signal_slot: slot });
    }
    Dataset::assemble(samples, mu, cfg.sigma_xi)
}

/// Bernoulli label flipping: `ỹ = −y` with probability `τ₊` when `y = +1`
/// and `τ₋` when `y = −1`.
pub fn flip_labels(ds: Dataset, tau_plus: f64, tau_minus: f64, seed: u64) -> Result<Dataset, DataError> {
    flip_labels_with(ds, tau_plus, tau_minus, seed, FlipMode::Bernoulli)
}

/// Observed labels are always recomputed from the true labels, so patches and
/// `y` are untouched and a zero-probability flip restores `ỹ = y`.
pub fn flip_labels_with(
    mut ds: Dataset,
    tau_plus: f64,
    tau_minus: f64,
    seed: u64,
    mode: FlipMode,
) -> Result<Dataset, DataError> {
    for (name, value) in [("tau_plus", tau_plus), ("tau_minus", tau_minus)] {
        if !(0.0..0.5).contains(&value) {
            return Err(DataError::FlipProbability { name, value });
        }
    }
    let mut rng = stream(seed, STREAM_FLIP);
    let n = ds.n();
    let mut flipped = vec![false; n];
    match mode {
        FlipMode::Bernoulli => {
            for (i, s) in ds.samples.iter().enumerate() {
                let tau = if s.y > 0 { tau_plus } else { tau_minus };
                let u: f64 = rng.random();
                flipped[i] = u < tau;
            }
        }
        FlipMode::ExactCount => {
            for (class, tau) in [(1i8, tau_plus), (-1i8, tau_minus)] {
                let mut idx: Vec<usize> = (0..n).filter(|&i| ds.samples[i].y == class).collect();
                idx.shuffle(&mut rng);
                let count = (tau * n as f64 / 2.0).floor() as usize;
                for &i in idx.iter().take(count) {
                    flipped[i] = true;
                }
            }
        }
    }
    for (s, f) in ds.samples.iter_mut().zip(flipped) {
        s.y_obs = if f { -s.y } else { s.y };
    }
    ds.repartition();
    Ok(ds)
}

/// Draws from the spurious-feature test distribution.
#[derive(Debug, Clone, Copy)]
pub struct TestSampler<'a> {
    pub dataset: &'a Dataset,
    pub sigma_xi: f64,
    pub seed_test: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    /// `y·μ`.
    pub patch_a: Vec<f64>,
    /// `ξ_U + ζ`.
    pub patch_b: Vec<f64>,
    pub y: i8,
    /// Index `U` of the reused training noise patch.
    pub source: usize,
}

impl<'a> TestSampler<'a> {
    pub fn new(dataset: &'a Dataset, sigma_xi: f64, seed_test: u64) -> Self {
        Self { dataset, sigma_xi, seed_test }
    }

    /// Independent generator for Monte-Carlo shard `index`.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        stream(self.seed_test, STREAM_TEST_BASE + index)
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> TestSample {
        let ds = self.dataset;
        let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let u = rng.random_range(0..ds.n());
        let xi = ds.samples[u].noise();
        let patch_b = xi
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(rng);
                x + self.sigma_xi * z
            })
            .collect();
        let patch_a = ds.mu.iter().map(|&m| y as f64 * m).collect();
        TestSample { patch_a, patch_b, y, source: u }
    }
}

/// `count` draws from stream 0.
pub fn sample_test(sampler: &TestSampler<'_>, count: usize) -> Vec<TestSample> {
    let mut rng = sampler.stream(0);
    (0..count).map(|_| sampler.draw(&mut rng)).collect()
}

/// Concentration diagnostics for data and initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitGeometry {
    pub delta: f64,
    /// `|S_i⁽⁰⁾| = |{r : ⟨w_{ỹ_i,r}⁽⁰⁾, ξ_i⟩ > 0}|` per sample.
    pub activation_set_sizes: Vec<usize>,
    pub min_activation_set: usize,
    /// Whether every `|S_i⁽⁰⁾| ≥ 0.4 m`.
    pub activation_bound_holds: bool,
    /// `min_{j,r} |{i : ỹ_i = j, ⟨w_{j,r}⁽⁰⁾, ξ_i⟩ > 0}|` against `n/8`.
    pub min_filter_activation: usize,
    pub filter_activation_bound_holds: bool,
    pub noise_norm_sq_min: f64,
    pub noise_norm_sq_max: f64,
    /// `[σ_ξ² d / 2, 3 σ_ξ² d / 2]`.
    pub noise_norm_bracket: (f64, f64),
    pub max_noise_inner: f64,
    pub min_noise_inner: f64,
    /// `2 σ_ξ² sqrt(d log(6n²/δ))`.
    pub noise_inner_bound: f64,
    pub max_noise_mu_inner: f64,
    pub noise_mu_bound: f64,
    pub max_init_mu_inner: f64,
    pub init_mu_bound: f64,
    pub max_init_noise_inner: f64,
    pub init_noise_bound: f64,
    pub init_norm_sq_min: f64,
    pub init_norm_sq_max: f64,
    pub init_norm_bracket: (f64, f64),
    pub all_brackets_hold: bool,
}

pub fn init_geometry_report(ds: &Dataset, w0: &FilterBanks, sigma_0: f64) -> InitGeometry {
    let delta = crate::config::DEFAULT_DELTA;
    let n = ds.n();
    let m = w0.m();
    let d = ds.d() as f64;
    let sx2 = ds.sigma_xi * ds.sigma_xi;

    let mut sizes = vec![0usize; n];
    let mut per_filter = [vec![0usize; m], vec![0usize; m]];
    let mut max_init_noise = 0.0f64;
    for (i, s) in ds.samples.iter().enumerate() {
        let own = bank_index(s.y_obs);
        for b in 0..2 {
            for r in 0..m {
                let v = dot(w0.filter(b, r), s.noise());
                max_init_noise = max_init_noise.max(v.abs());
                if b == own && v > 0.0 {
                    sizes[i] += 1;
                    per_filter[b][r] += 1;
                }
            }
        }
    }
    let min_set = sizes.iter().copied().min().unwrap_or(0);
    let min_filter = per_filter.iter().flatten().copied().min().unwrap_or(0);

    let norms: Vec<f64> = (0..n).map(|i| ds.noise_norm_sq(i)).collect();
    let nmin = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let nmax = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut max_inner = 0.0f64;
    let mut min_inner = f64::INFINITY;
    for i in 0..n {
        for k in (i + 1)..n {
            let v = dot(ds.samples[i].noise(), ds.samples[k].noise()).abs();
            max_inner = max_inner.max(v);
            min_inner = min_inner.min(v);
        }
    }
    if n < 2 {
        min_inner = 0.0;
    }
    let max_noise_mu = ds.samples.iter().map(|s| dot(s.noise(), &ds.mu).abs()).fold(0.0, f64::max);
    let mu_norm = ds.mu_norm_sq.sqrt();
    let max_init_mu = (0..2)
        .flat_map(|b| (0..m).map(move |r| (b, r)))
        .map(|(b, r)| dot(w0.filter(b, r), &ds.mu).abs())
        .fold(0.0, f64::max);
    let init_norms: Vec<f64> = (0..2)
        .flat_map(|b| (0..m).map(move |r| (b, r)))
        .map(|(b, r)| dot(w0.filter(b, r), w0.filter(b, r)))
        .collect();
    let inmin = init_norms.iter().copied().fold(f64::INFINITY, f64::min);
    let inmax = init_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let nf = n as f64;
    let mf = m as f64;
    let noise_bracket = (sx2 * d / 2.0, 1.5 * sx2 * d);
    let noise_inner_bound = 2.0 * sx2 * (d * (6.0 * nf * nf / delta).ln()).sqrt();
    let noise_mu_bound = mu_norm * ds.sigma_xi * (2.0 * (6.0 * nf / delta).ln()).sqrt();
    let init_mu_bound = (2.0 * (12.0 * mf / delta).ln()).sqrt() * sigma_0 * mu_norm;
    let init_noise_bound = 2.0 * (12.0 * mf * nf / delta).ln().sqrt() * sigma_0 * ds.sigma_xi * d.sqrt();
    let init_bracket = (sigma_0 * sigma_0 * d / 2.0, 1.5 * sigma_0 * sigma_0 * d);

    let activation_ok = (min_set as f64) >= 0.4 * mf;
    let filter_ok = (min_filter as f64) >= nf / 8.0;
    let all = nmin >= noise_bracket.0
        && nmax <= noise_bracket.1
        && max_inner <= noise_inner_bound
        && max_noise_mu <= noise_mu_bound
        && max_init_mu <= init_mu_bound
        && max_init_noise <= init_noise_bound
        && inmin >= init_bracket.0
        && inmax <= init_bracket.1;

    InitGeometry {
        delta,
        activation_set_sizes: sizes,
        min_activation_set: min_set,
        activation_bound_holds: activation_ok,
        min_filter_activation: min_filter,
        filter_activation_bound_holds: filter_ok,
        noise_norm_sq_min: nmin,
        noise_norm_sq_max: nmax,
        noise_norm_bracket: noise_bracket,
        max_noise_inner: max_inner,
        min_noise_inner: min_inner,
        noise_inner_bound,
        max_noise_mu_inner: max_noise_mu,
        noise_mu_bound,
        max_init_mu_inner: max_init_mu,
        init_mu_bound,
        max_init_noise_inner: max_init_noise,
        init_noise_bound,
        init_norm_sq_min: inmin,
        init_norm_sq_max: inmax,
        init_norm_bracket: init_bracket,
        all_brackets_hold: all,
    }
}

impl Dataset {
    /// Text format. Header: `d n sigma_xi mu_1 … mu_d`. One line per sample:
    /// `y y_obs slot a_1 … a_d b_1 … b_d`, all reals at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write!(s, "{} {} {}", self.d(), self.n(), sci(self.sigma_xi)).unwrap();
        for &x in &self.mu {
            write!(s, " {}", sci(x)).unwrap();
        }
        s.push('\n');
        for smp in &self.samples {
            let slot = match smp.signal_slot {
                SignalSlot::A => 'A',
                SignalSlot::B => 'B',
            };
            write!(s, "{} {} {}", smp.y, smp.y_obs, slot).unwrap();
            for &x in smp.patch_a.iter().chain(&smp.patch_b) {
                write!(s, " {}", sci(x)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let perr = |l: usize, msg: String| DataError::Parse(l + 1, msg);
        let (_, header) = lines.next().ok_or_else(|| perr(0, "empty input".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(perr(0, "header needs d n sigma_xi mu…".into()));
        }
        let d: usize = toks[0].parse().map_err(|e| perr(0, format!("{e}")))?;
        let n: usize = toks[1].parse().map_err(|e| perr(0, format!("{e}")))?;
        let sigma_xi: f64 = toks[2].parse().map_err(|e| perr(0, format!("{e}")))?;
        if toks.len() != 3 + d {
            return Err(perr(0, format!("expected {d} signal entries, got {}", toks.len() - 3)));
        }
        let mu = toks[3..].iter().map(|t| t.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| perr(0, format!("{e}")))?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| perr(0, format!("expected {n} samples")))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 + 2 * d {
                return Err(perr(ln, format!("expected {} fields, got {}", 3 + 2 * d, toks.len())));
            }
            let y: i8 = toks[0].parse().map_err(|e| perr(ln, format!("{e}")))?;
            let y_obs: i8 = toks[1].parse().map_err(|e| perr(ln, format!("{e}")))?;
            let signal_slot = match toks[2] {
                "A" => SignalSlot::A,
                "B" => SignalSlot::B,
                other => return Err(perr(ln, format!("bad slot {other:?}"))),
            };
            let vals = toks[3..].iter().map(|t| t.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| perr(ln, format!("{e}")))?;
            let (a, b) = vals.split_at(d);
            samples.push(Sample { patch_a: a.to_vec(), patch_b: b.to_vec(), y, y_obs, signal_slot });
        }
        Ok(Dataset::assemble(samples, mu, sigma_xi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize, d: usize) -> ExperimentConfig {
        ExperimentConfig { n, d, ..Default::default() }
    }

    #[test]
    fn balanced_labels() {
        let ds = generate_train(&small_cfg(4, 8));
        let mut ys: Vec<i8> = ds.samples().iter().map(|s| s.y).collect();
        ys.sort();
        assert_eq!(ys, vec![-1, -1, 1, 1]);
        assert!(ds.noisy_idx().is_empty());
        assert_eq!(ds.clean_idx(), &[0, 1, 2, 3]);
    }

    #[test]
    fn signal_patch_is_exact() {
        let ds = generate_train(&ExperimentConfig { n: 10, ..Default::default() });
        for s in ds.samples() {
            let sig = s.signal();
            assert_eq!(sig[0], 20.0 * s.y as f64);
            assert!(sig[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn flip_errors_and_identity() {
        let ds = generate_train(&small_cfg(20, 4));
        assert!(flip_labels(ds.clone(), 0.5, 0.1, 0).is_err());
        assert!(flip_labels(ds.clone(), 0.1, -0.1, 0).is_err());
        let same = flip_labels(ds.clone(), 0.0, 0.0, 3).unwrap();
        assert_eq!(same, ds);
        assert!(same.noisy_idx().is_empty());
    }

    #[test]
    fn exact_count_mode() {
        let ds = generate_train(&small_cfg(100, 4));
        let f = flip_labels_with(ds, 0.1, 0.2, 9, FlipMode::ExactCount).unwrap();
        let pos = f.noisy_idx().iter().filter(|&&i| f.samples()[i].y == 1).count();
        let neg = f.noisy_idx().iter().filter(|&&i| f.samples()[i].y == -1).count();
        assert_eq!((pos, neg), (5, 10));
    }

    #[test]
    fn test_sampler_edge_cases() {
        let ds = generate_train(&small_cfg(2, 5));
        let s = TestSampler::new(&ds, 1.0, 4);
        assert!(sample_test(&s, 0).is_empty());
        let a = sample_test(&s, 3);
        let b = sample_test(&s, 3);
        assert_eq!(a, b);

        // One training sample, no fresh noise: the test noise patch is ξ_1.
        let one = Dataset::from_parts(vec![1.0, 0.0], 1.0, vec![vec![0.3, -0.7]], &[1], &[1], &[SignalSlot::B]).unwrap();
        let s = TestSampler::new(&one, 0.0, 1);
        for draw in sample_test(&s, 5) {
            assert_eq!(draw.patch_b, vec![0.3, -0.7]);
            assert_eq!(draw.patch_a, vec![draw.y as f64, 0.0]);
        }
    }

    #[test]
    fn zero_weights_have_empty_activation_sets() {
        let ds = generate_train(&small_cfg(6, 10));
        let rep = init_geometry_report(&ds, &FilterBanks::zeros(3, 10), 0.0);
        assert!(rep.activation_set_sizes.iter().all(|&k| k == 0));
    }

    #[test]
    fn text_roundtrip() {
        let ds = flip_labels(generate_train(&small_cfg(6, 3)), 0.3, 0.3, 1).unwrap();
        let back = Dataset::from_text(&ds.to_text()).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::from_text("3 1 1.0 1 0").is_err());
    }
}
