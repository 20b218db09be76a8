//! Two-layer ReLU CNN with a fixed `±1/m` second layer.
//!
//! `f(W, x) = (1/m) Σ_r Σ_p σ(⟨w_{+1,r}, x_p⟩) − (1/m) Σ_r Σ_p σ(⟨w_{−1,r}, x_p⟩)`
//! where `p` ranges over the two patches. The ReLU derivative at zero is 0,
//! so a pre-activation that is exactly zero counts as inactive.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::datagen::Dataset;
use crate::rng::{sci, stream, STREAM_INIT};

/// Output sign of each bank: index 0 is the positive class, 1 the negative.
pub const BANK_SIGNS: [f64; 2] = [1.0, -1.0];

pub fn bank_index(label: i8) -> usize {
    if label > 0 {
        0
    } else {
        1
    }
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
pub fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Dot product with a fixed four-lane accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Two banks of `m` filters of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBanks {
    m: usize,
    d: usize,
    banks: [Vec<f64>; 2],
}

impl FilterBanks {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self { m, d, banks: [vec![0.0; m * d], vec![0.0; m * d]] }
    }

    pub fn from_banks(m: usize, d: usize, pos: Vec<f64>, neg: Vec<f64>) -> Self {
        assert_eq!(pos.len(), m * d, "positive bank must hold m*d entries");
        assert_eq!(neg.len(), m * d, "negative bank must hold m*d entries");
        Self { m, d, banks: [pos, neg] }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `w_{+1,·}` as an `m × d` row-major slice.
    pub fn w_pos(&self) -> &[f64] {
        &self.banks[0]
    }

    pub fn w_neg(&self) -> &[f64] {
        &self.banks[1]
    }

    pub fn bank(&self, b: usize) -> &[f64] {
        &self.banks[b]
    }

    pub fn bank_mut(&mut self, b: usize) -> &mut [f64] {
        &mut self.banks[b]
    }

    pub fn filter(&self, b: usize, r: usize) -> &[f64] {
        &self.banks[b][r * self.d..(r + 1) * self.d]
    }

    pub fn filter_mut(&mut self, b: usize, r: usize) -> &mut [f64] {
        let d = self.d;
        &mut self.banks[b][r * d..(r + 1) * d]
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &f64> {
        self.banks[0].iter().chain(self.banks[1].iter())
    }

    pub fn is_finite(&self) -> bool {
        self.iter_all().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.iter_all().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &FilterBanks) -> f64 {
        assert_eq!((self.m, self.d), (other.m, other.d));
        self.iter_all().zip(other.iter_all()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> FilterBanks {
        let mut out = self.clone();
        for b in 0..2 {
            out.banks[b].iter_mut().for_each(|x| *x *= c);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub live: FilterBanks,
    init: FilterBanks,
    pub sigma_0: f64,
    pub seed_init: u64,
}

impl ModelWeights {
    pub fn from_init(init: FilterBanks, sigma_0: f64, seed_init: u64) -> Self {
        Self { live: init.clone(), init, sigma_0, seed_init }
    }

    /// Frozen copy of the initialization `W⁽⁰⁾`.
    pub fn init(&self) -> &FilterBanks {
        &self.init
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> f64 {
        forward(&self.live, a, b)
    }
}

/// Draws both banks i.i.d. from `N(0, σ₀²)` using the `seed_init` stream.
pub fn init_weights(cfg: &ExperimentConfig) -> ModelWeights {
    let mut rng = stream(cfg.seed_init, STREAM_INIT);
    let mut banks = FilterBanks::zeros(cfg.m, cfg.d);
    for b in 0..2 {
        for x in banks.bank_mut(b) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = cfg.sigma_0 * z;
        }
    }
    ModelWeights::from_init(banks, cfg.sigma_0, cfg.seed_init)
}

/// Network output on a two-patch input.
///
/// Panics if a patch length differs from the filter dimension.
pub fn forward(w: &FilterBanks, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), w.d, "patch dimension mismatch");
    assert_eq!(b.len(), w.d, "patch dimension mismatch");
    let mut sums = [0.0f64; 2];
    for (bank, sum) in sums.iter_mut().enumerate() {
        for r in 0..w.m {
            let f = w.filter(bank, r);
            *sum += relu(dot(f, a)) + relu(dot(f, b));
        }
    }
    bank_output(sums, w.m)
}

#[inline]
fn bank_output(sums: [f64; 2], m: usize) -> f64 {
    let m = m as f64;
    sums[0] / m - sums[1] / m
}

/// `log(1 + exp(−f·ỹ))`, stable for large arguments.
pub fn logistic_loss(f: f64, y_obs: i8) -> f64 {
    let z = -f * y_obs as f64;
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ℓ' = −1 / (1 + exp(ỹ·f))`. Lies strictly in `(−1, 0)` whenever
/// `|f| ≤ 30`; beyond that it saturates to the endpoints in `f64`.
pub fn loss_derivative(f: f64, y_obs: i8) -> f64 {
    -1.0 / (1.0 + (y_obs as f64 * f).exp())
}

/// Every per-sample quantity a GD step depends on, computed once.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub n: usize,
    pub m: usize,
    /// `⟨w_{b,r}, ξ_i⟩` at index `r * n + i`.
    pub noise_pre: [Vec<f64>; 2],
    /// `⟨w_{b,r}, y_i μ⟩` at index `r * n + i`.
    pub signal_pre: [Vec<f64>; 2],
    pub outputs: Vec<f64>,
    /// `ỹ_i f(W, x_i)`.
    pub margins: Vec<f64>,
    pub losses: Vec<f64>,
    pub derivs: Vec<f64>,
}

pub fn evaluate(w: &FilterBanks, ds: &Dataset) -> Evaluation {
    assert_eq!(w.d, ds.d(), "weight and data dimensions differ");
    let n = ds.n();
    let m = w.m;
    let mut noise_pre = [vec![0.0; m * n], vec![0.0; m * n]];
    let mut signal_pre = [vec![0.0; m * n], vec![0.0; m * n]];
    for b in 0..2 {
        for r in 0..m {
            let f = w.filter(b, r);
            let along_mu = dot(f, ds.mu());
            for (i, s) in ds.samples().iter().enumerate() {
                noise_pre[b][r * n + i] = dot(f, s.noise());
                signal_pre[b][r * n + i] = s.y as f64 * along_mu;
            }
        }
    }
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut sums = [0.0f64; 2];
        for (b, sum) in sums.iter_mut().enumerate() {
            for r in 0..m {
                *sum += relu(signal_pre[b][r * n + i]) + relu(noise_pre[b][r * n + i]);
            }
        }
        outputs.push(bank_output(sums, m));
    }
    let mut margins = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    let mut derivs = Vec::with_capacity(n);
    for (s, &f) in ds.samples().iter().zip(&outputs) {
        margins.push(s.y_obs as f64 * f);
        losses.push(logistic_loss(f, s.y_obs));
        derivs.push(loss_derivative(f, s.y_obs));
    }
    Evaluation { n, m, noise_pre, signal_pre, outputs, margins, losses, derivs }
}

/// Full-batch gradient of `L_S` assembled from an evaluation:
/// `(1/nm) Σ_i ℓ'_i [σ'(⟨w, ξ_i⟩) j ỹ_i ξ_i + σ'(⟨w, y_i μ⟩) j y_i ỹ_i μ]`.
pub fn gradient_from(eval: &Evaluation, ds: &Dataset, d: usize) -> FilterBanks {
    let n = eval.n;
    let m = eval.m;
    let scale = 1.0 / (n as f64 * m as f64);
    let mut grad = FilterBanks::zeros(m, d);
    for b in 0..2 {
        let j = BANK_SIGNS[b];
        for r in 0..m {
            let g = grad.filter_mut(b, r);
            let mut mu_coef = 0.0;
            for (i, s) in ds.samples().iter().enumerate() {
                let lp = eval.derivs[i];
                let y_obs = s.y_obs as f64;
                let a = lp * relu_grad(eval.noise_pre[b][r * n + i]) * j * y_obs;
                if a != 0.0 {
                    for (gk, xk) in g.iter_mut().zip(s.noise()) {
                        *gk += a * xk;
                    }
                }
                mu_coef += lp * relu_grad(eval.signal_pre[b][r * n + i]) * j * s.y as f64 * y_obs;
            }
            for (gk, mk) in g.iter_mut().zip(ds.mu()) {
                *gk = scale * (*gk + mu_coef * mk);
            }
        }
    }
    grad
}

pub fn batch_gradient(w: &FilterBanks, ds: &Dataset) -> FilterBanks {
    gradient_from(&evaluate(w, ds), ds, w.d)
}

/// `(1/n) Σ ℓ(f(W, x_i), ỹ_i)` evaluated through [`forward`] on the stored
/// patches, independently of [`evaluate`].
pub fn empirical_loss(w: &FilterBanks, ds: &Dataset) -> f64 {
    let total: f64 = ds
        .samples()
        .iter()
        .map(|s| logistic_loss(forward(w, &s.patch_a, &s.patch_b), s.y_obs))
        .sum();
    total / ds.n() as f64
}

#[derive(Debug, Error)]
pub enum WeightsFormatError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("truncated weights file")]
    Truncated,
}

impl ModelWeights {
    /// Text format: a header `m d sigma_0 seed_init`, then `2m` filter lines
    /// (positive bank first), each with `d` values at 17 significant digits.
    /// Only the live weights are written.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {} {}", self.live.m, self.live.d, sci(self.sigma_0), self.seed_init).unwrap();
        for b in 0..2 {
            for r in 0..self.live.m {
                let row: Vec<String> = self.live.filter(b, r).iter().map(|&x| sci(x)).collect();
                writeln!(s, "{}", row.join(" ")).unwrap();
            }
        }
        s
    }

    /// Parses [`Self::to_text`] output; the parsed weights become their own
    /// initialization.
    pub fn from_text(text: &str) -> Result<Self, WeightsFormatError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(WeightsFormatError::Truncated)?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 {
            return Err(WeightsFormatError::Parse(1, "header needs m d sigma_0 seed_init".into()));
        }
        let perr = |l: usize, e: &dyn std::fmt::Display| WeightsFormatError::Parse(l, e.to_string());
        let m: usize = h[0].parse().map_err(|e| perr(1, &e))?;
        let d: usize = h[1].parse().map_err(|e| perr(1, &e))?;
        let sigma_0: f64 = h[2].parse().map_err(|e| perr(1, &e))?;
        let seed_init: u64 = h[3].parse().map_err(|e| perr(1, &e))?;
        let mut banks = FilterBanks::zeros(m, d);
        for b in 0..2 {
            for r in 0..m {
                let (ln, line) = lines.next().ok_or(WeightsFormatError::Truncated)?;
                let row = banks.filter_mut(b, r);
                let mut count = 0;
                for (slot, tok) in row.iter_mut().zip(line.split_whitespace()) {
                    *slot = tok.parse().map_err(|e| perr(ln + 1, &e))?;
                    count += 1;
                }
                if count != d {
                    return Err(WeightsFormatError::Parse(ln + 1, format!("expected {d} values, got {count}")));
                }
            }
        }
        Ok(ModelWeights::from_init(banks, sigma_0, seed_init))
    }
}
