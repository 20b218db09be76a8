//! Signal-noise decomposition of the filters:
//!
//! `w_{j,r}⁽ᵗ⁾ = w_{j,r}⁽⁰⁾ + j γ_{j,r} ‖μ‖⁻² μ + Σ_i (ρ̄_{j,r,i} + ρ̲_{j,r,i}) ‖ξ_i‖⁻² ξ_i`.
//!
//! Two independent routes compute the coefficients. [`iterate_coeffs`]
//! advances them with the recorded loss derivatives and activation
//! indicators of each GD step. [`GramSolver`] recovers them from the weights
//! alone by least squares against the basis `{μ, ξ_1, …, ξ_n}`. Because the
//! decomposition is unique whenever the basis is linearly independent, the
//! two must agree up to rounding.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::model::{bank_index, dot, FilterBanks, BANK_SIGNS};
use crate::rng::sci;
use crate::trainer::StepRecord;

/// Gram matrices with a larger condition number are treated as degenerate.
pub const MAX_GRAM_CONDITION: f64 = 1e8;

#[derive(Debug, Error)]
pub enum DecompError {
    #[error("basis Gram matrix is ill-conditioned (condition number {0:.3e}); the dataset is degenerate")]
    IllConditioned(f64),
    #[error("basis Gram matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("coefficient CSV line {0}: {1}")]
    Parse(usize, String),
}

/// Coefficients at one iteration. Noise coefficients are stored densely at
/// index `r * n + i` for each bank; entries that the indicator structure
/// forces to zero are kept as exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffState {
    pub gamma: [Vec<f64>; 2],
    pub rho_bar: [Vec<f64>; 2],
    pub rho_under: [Vec<f64>; 2],
}

impl CoeffState {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            gamma: [vec![0.0; m], vec![0.0; m]],
            rho_bar: [vec![0.0; m * n], vec![0.0; m * n]],
            rho_under: [vec![0.0; m * n], vec![0.0; m * n]],
        }
    }

    /// `ρ = ρ̄ + ρ̲`.
    pub fn rho(&self, b: usize, r: usize, i: usize, n: usize) -> f64 {
        self.rho_bar[b][r * n + i] + self.rho_under[b][r * n + i]
    }
}

/// Coefficient history for every iteration `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTable {
    pub m: usize,
    pub n: usize,
    pub states: Vec<CoeffState>,
}

impl CoeffTable {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n, states: vec![CoeffState::zeros(m, n)] }
    }

    pub fn at(&self, t: usize) -> &CoeffState {
        &self.states[t]
    }

    pub fn last(&self) -> &CoeffState {
        self.states.last().expect("table always holds t = 0")
    }

    /// Index of the last recorded iteration.
    pub fn t_max(&self) -> usize {
        self.states.len() - 1
    }

    pub fn push_step(&mut self, rec: &StepRecord, ds: &Dataset) {
        let next = iterate_coeffs(self.last(), rec, ds);
        self.states.push(next);
    }
}

/// Advances the coefficients by one GD step using exactly the loss
/// derivatives and activation indicators recorded by the trainer.
pub fn iterate_coeffs(state: &CoeffState, rec: &StepRecord, ds: &Dataset) -> CoeffState {
    let n = ds.n();
    let m = state.gamma[0].len();
    let scale = rec.eta / (n as f64 * m as f64);
    let mu_sq = ds.mu_norm_sq();
    let mut next = state.clone();
    for b in 0..2 {
        let j = BANK_SIGNS[b];
        for r in 0..m {
            let mut acc = 0.0;
            for (i, s) in ds.samples().iter().enumerate() {
                let k = r * n + i;
                if rec.signal_active[b][k] {
                    acc += rec.derivs[i] * (s.y as f64 * s.y_obs as f64);
                }
                if rec.noise_active[b][k] {
                    let inc = scale * rec.derivs[i] * ds.noise_norm_sq(i);
                    if s.y_obs as f64 == j {
                        next.rho_bar[b][k] -= inc;
                    } else {
                        next.rho_under[b][k] += inc;
                    }
                }
            }
            next.gamma[b][r] -= scale * acc * mu_sq;
        }
    }
    next
}

/// Factorized Gram matrix of the basis `{μ/‖μ‖², ξ_1/‖ξ_1‖², …}`, shared by
/// every filter.
#[derive(Debug, Clone)]
pub struct GramSolver {
    basis: Vec<Vec<f64>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    condition: f64,
}

impl GramSolver {
    pub fn new(ds: &Dataset) -> Result<Self, DecompError> {
        let mut basis = Vec::with_capacity(ds.n() + 1);
        let mu_sq = ds.mu_norm_sq();
        basis.push(ds.mu().iter().map(|x| x / mu_sq).collect::<Vec<f64>>());
        for (i, s) in ds.samples().iter().enumerate() {
            let nsq = ds.noise_norm_sq(i);
            basis.push(s.noise().iter().map(|x| x / nsq).collect());
        }
        let k = basis.len();
        let mut g = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let v = dot(&basis[a], &basis[b]);
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(g.clone()).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition < MAX_GRAM_CONDITION) {
            return Err(DecompError::IllConditioned(condition));
        }
        let chol = g.cholesky().ok_or(DecompError::NotPositiveDefinite)?;
        Ok(Self { basis, chol, condition })
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Least-squares coefficients `c` with `v ≈ Σ_k c_k basis_k`; entry 0 is
    /// the `μ` coefficient.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let rhs = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|b| dot(b, v)));
        self.chol.solve(&rhs).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedCoeffs {
    pub gamma: [Vec<f64>; 2],
    /// `ρ̂_{b,r,i}` at `r * n + i`.
    pub rho: [Vec<f64>; 2],
}

/// Projects `w⁽ᵗ⁾ − w⁽⁰⁾` onto the basis for every filter.
pub fn solve_coeffs(w_t: &FilterBanks, w_0: &FilterBanks, solver: &GramSolver) -> SolvedCoeffs {
    let m = w_t.m();
    let n = solver.basis.len() - 1;
    let mut gamma = [vec![0.0; m], vec![0.0; m]];
    let mut rho = [vec![0.0; m * n], vec![0.0; m * n]];
    for b in 0..2 {
        for r in 0..m {
            let diff: Vec<f64> = w_t.filter(b, r).iter().zip(w_0.filter(b, r)).map(|(a, c)| a - c).collect();
            let c = solver.solve(&diff);
            gamma[b][r] = BANK_SIGNS[b] * c[0];
            rho[b][r * n..(r + 1) * n].copy_from_slice(&c[1..]);
        }
    }
    SolvedCoeffs { gamma, rho }
}

/// Largest elementwise gap between solved and iterated coefficients.
pub fn max_solver_disagreement(solved: &SolvedCoeffs, state: &CoeffState) -> f64 {
    let mut worst = 0.0f64;
    for b in 0..2 {
        for (g, h) in solved.gamma[b].iter().zip(&state.gamma[b]) {
            worst = worst.max((g - h).abs());
        }
        for (k, r) in solved.rho[b].iter().enumerate() {
            worst = worst.max((r - (state.rho_bar[b][k] + state.rho_under[b][k])).abs());
        }
    }
    worst
}

/// Rebuilds the filters from the initialization and a coefficient state.
pub fn reconstruct(w_0: &FilterBanks, state: &CoeffState, ds: &Dataset) -> FilterBanks {
    let n = ds.n();
    let m = w_0.m();
    let mu_sq = ds.mu_norm_sq();
    let mut out = w_0.clone();
    for b in 0..2 {
        let j = BANK_SIGNS[b];
        for r in 0..m {
            let f = out.filter_mut(b, r);
            let cm = j * state.gamma[b][r] / mu_sq;
            if cm != 0.0 {
                for (x, m_k) in f.iter_mut().zip(ds.mu()) {
                    *x += cm * m_k;
                }
            }
            for (i, s) in ds.samples().iter().enumerate() {
                let c = (state.rho_bar[b][r * n + i] + state.rho_under[b][r * n + i]) / ds.noise_norm_sq(i);
                if c != 0.0 {
                    for (x, xi) in f.iter_mut().zip(s.noise()) {
                        *x += c * xi;
                    }
                }
            }
        }
    }
    out
}

/// `‖live − rec‖_F / ‖live‖_F`.
pub fn reconstruction_residual(live: &FilterBanks, rec: &FilterBanks) -> f64 {
    let norm = live.frobenius_norm();
    let dist = live.distance(rec);
    if norm == 0.0 {
        dist
    } else {
        dist / norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Clean,
    Noisy,
}

/// Coefficient proxy for `ỹ_i f(W, x_i)`.
///
/// Clean: `(1/m) Σ_r (γ_{ỹ_i,r} + ρ̄_{ỹ_i,r,i})`.
/// Noisy: `(1/m) Σ_r (ρ̄_{ỹ_i,r,i} − γ_{−ỹ_i,r})`.
pub fn margin_proxy(state: &CoeffState, ds: &Dataset, i: usize, side: Side) -> f64 {
    let n = ds.n();
    let m = state.gamma[0].len();
    let own = bank_index(ds.samples()[i].y_obs);
    let other = 1 - own;
    let sum: f64 = (0..m)
        .map(|r| {
            let rb = state.rho_bar[own][r * n + i];
            match side {
                Side::Clean => state.gamma[own][r] + rb,
                Side::Noisy => rb - state.gamma[other][r],
            }
        })
        .sum();
    sum / m as f64
}

/// Proxy on the side matching sample `i`'s membership.
pub fn margin_proxy_auto(state: &CoeffState, ds: &Dataset, i: usize) -> f64 {
    let side = if ds.is_noisy(i) { Side::Noisy } else { Side::Clean };
    margin_proxy(state, ds, i, side)
}

/// Writes coefficient rows for the given iterations. Columns:
/// `t,j,r,i,gamma,rho_bar,rho_under`; `i` is blank on γ rows.
pub fn coeffs_csv(table: &CoeffTable, times: &[usize]) -> String {
    let mut s = String::from("t,j,r,i,gamma,rho_bar,rho_under\n");
    let n = table.n;
    for &t in times {
        let st = table.at(t);
        for b in 0..2 {
            let j = BANK_SIGNS[b] as i32;
            for r in 0..table.m {
                writeln!(s, "{t},{j},{r},,{},,", sci(st.gamma[b][r])).unwrap();
                for i in 0..n {
                    let k = r * n + i;
                    writeln!(s, "{t},{j},{r},{i},,{},{}", sci(st.rho_bar[b][k]), sci(st.rho_under[b][k])).unwrap();
                }
            }
        }
    }
    s
}

/// Parses [`coeffs_csv`] output into `(t, state)` pairs in file order.
pub fn parse_coeffs_csv(text: &str, m: usize, n: usize) -> Result<Vec<(usize, CoeffState)>, DecompError> {
    let mut out: Vec<(usize, CoeffState)> = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DecompError::Parse(ln + 1, msg);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", f.len())));
        }
        let t: usize = f[0].parse().map_err(|e| err(format!("t: {e}")))?;
        let j: i8 = f[1].parse().map_err(|e| err(format!("j: {e}")))?;
        let r: usize = f[2].parse().map_err(|e| err(format!("r: {e}")))?;
        if r >= m || (j != 1 && j != -1) {
            return Err(err("index out of range".into()));
        }
        if out.last().map(|(tt, _)| *tt) != Some(t) {
            out.push((t, CoeffState::zeros(m, n)));
        }
        let st = &mut out.last_mut().unwrap().1;
        let b = bank_index(j);
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        if f[3].is_empty() {
            st.gamma[b][r] = num(f[4])?;
        } else {
            let i: usize = f[3].parse().map_err(|e| err(format!("i: {e}")))?;
            if i >= n {
                return Err(err("sample index out of range".into()));
            }
            st.rho_bar[b][r * n + i] = num(f[5])?;
            st.rho_under[b][r * n + i] = num(f[6])?;
        }
    }
    Ok(out)
}
