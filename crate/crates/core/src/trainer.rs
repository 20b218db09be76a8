//! Full-batch gradient descent with per-iteration metrics.
//!
//! Accuracy is measured against observed labels; a sample counts as correct
//! only when `ỹ f > 0`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::datagen::{flip_labels_with, generate_train, Dataset};
use crate::decomposition::{CoeffState, CoeffTable};
use crate::model::{bank_index, evaluate, gradient_from, init_weights, Evaluation, FilterBanks, ModelWeights};
use crate::rng::sci;

/// Loss growth factor between consecutive iterations that triggers a warning.
pub const LOSS_JUMP_WARNING: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
}

/// Everything one GD step consumed, recorded before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub eta: f64,
    pub margins: Vec<f64>,
    pub losses: Vec<f64>,
    pub derivs: Vec<f64>,
    /// `σ'(⟨w_{b,r}, ξ_i⟩)` at `r * n + i`.
    pub noise_active: [Vec<bool>; 2],
    /// `σ'(⟨w_{b,r}, y_i μ⟩)` at `r * n + i`.
    pub signal_active: [Vec<bool>; 2],
}

impl StepRecord {
    fn from_eval(eval: &Evaluation, eta: f64, t: usize) -> Self {
        let ind = |v: &Vec<f64>| v.iter().map(|&z| z > 0.0).collect::<Vec<bool>>();
        Self {
            t,
            eta,
            margins: eval.margins.clone(),
            losses: eval.losses.clone(),
            derivs: eval.derivs.clone(),
            noise_active: [ind(&eval.noise_pre[0]), ind(&eval.noise_pre[1])],
            signal_active: [ind(&eval.signal_pre[0]), ind(&eval.signal_pre[1])],
        }
    }
}

/// One step `W ← W − η ∇L_S(W)`. Returns the record of the pre-step
/// quantities. Non-finite weights after the update are reported as
/// divergence at iteration 0; [`train`] substitutes the real index.
pub fn gd_step(w: &mut ModelWeights, ds: &Dataset, eta: f64) -> Result<StepRecord, TrainError> {
    let eval = evaluate(&w.live, ds);
    let grad = gradient_from(&eval, ds, ds.d());
    for b in 0..2 {
        for (x, g) in w.live.bank_mut(b).iter_mut().zip(grad.bank(b)) {
            *x -= eta * g;
        }
    }
    if !w.live.is_finite() {
        return Err(TrainError::Divergence { iteration: 0, detail: "non-finite weights after update".into() });
    }
    Ok(StepRecord::from_eval(&eval, eta, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub t: usize,
    pub train_loss: f64,
    pub acc_all: f64,
    pub acc_clean: Option<f64>,
    pub acc_noisy: Option<f64>,
    pub correct_all: usize,
    pub correct_clean: usize,
    pub correct_noisy: usize,
    pub min_clean_margin: Option<f64>,
    pub max_noisy_margin: Option<f64>,
    pub max_gamma: f64,
    pub max_rho_clean: Option<f64>,
    pub max_rho_noisy: Option<f64>,
    pub min_urho: f64,
    /// `ỹ_i f(W⁽ᵗ⁾, x_i)`.
    pub margins: Vec<f64>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<IterRecord>,
    pub n_clean: usize,
    pub n_noisy: usize,
}

impl Trajectory {
    pub fn at(&self, t: usize) -> &IterRecord {
        &self.records[t]
    }

    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("trajectory holds t = 0")
    }

    pub fn t_max(&self) -> usize {
        self.records.len() - 1
    }
}

fn fraction(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn fold_opt(acc: Option<f64>, v: f64, pick: fn(f64, f64) -> f64) -> Option<f64> {
    Some(acc.map_or(v, |a| pick(a, v)))
}

/// `(max γ, max ρ over clean i, max ρ over noisy i, min ρ̲)`, with
/// `ρ = ρ̄ + ρ̲` and maxima over `(j, r)`.
pub fn coeff_extrema(state: &CoeffState, ds: &Dataset) -> (f64, Option<f64>, Option<f64>, f64) {
    let n = ds.n();
    let m = state.gamma[0].len();
    let max_gamma = state.gamma.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_urho = state.rho_under.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let mut max_clean = None;
    let mut max_noisy = None;
    for i in 0..n {
        let best = (0..2)
            .flat_map(|b| (0..m).map(move |r| (b, r)))
            .map(|(b, r)| state.rho(b, r, i, n))
            .fold(f64::NEG_INFINITY, f64::max);
        if ds.is_noisy(i) {
            max_noisy = fold_opt(max_noisy, best, f64::max);
        } else {
            max_clean = fold_opt(max_clean, best, f64::max);
        }
    }
    (max_gamma, max_clean, max_noisy, min_urho)
}

pub fn iter_record(t: usize, margins: &[f64], losses: &[f64], ds: &Dataset, state: &CoeffState) -> IterRecord {
    let n = ds.n();
    let train_loss = losses.iter().sum::<f64>() / n as f64;
    let mut correct_clean = 0;
    let mut correct_noisy = 0;
    let mut min_clean = None;
    let mut max_noisy = None;
    for (i, &mg) in margins.iter().enumerate() {
        if ds.is_noisy(i) {
            correct_noisy += (mg > 0.0) as usize;
            max_noisy = fold_opt(max_noisy, mg, f64::max);
        } else {
            correct_clean += (mg > 0.0) as usize;
            min_clean = fold_opt(min_clean, mg, f64::min);
        }
    }
    let n_noisy = ds.noisy_idx().len();
    let n_clean = n - n_noisy;
    let (max_gamma, max_rho_clean, max_rho_noisy, min_urho) = coeff_extrema(state, ds);
    IterRecord {
        t,
        train_loss,
        acc_all: (correct_clean + correct_noisy) as f64 / n as f64,
        acc_clean: fraction(correct_clean, n_clean),
        acc_noisy: fraction(correct_noisy, n_noisy),
        correct_all: correct_clean + correct_noisy,
        correct_clean,
        correct_noisy,
        min_clean_margin: min_clean,
        max_noisy_margin: max_noisy,
        max_gamma,
        max_rho_clean,
        max_rho_noisy,
        min_urho,
        margins: margins.to_vec(),
        losses: losses.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    pub weights: FilterBanks,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub weights: ModelWeights,
    pub trajectory: Trajectory,
    pub coeffs: CoeffTable,
    /// Every `snapshot_stride`-th iterate plus the final one.
    pub snapshots: Vec<Snapshot>,
    pub warnings: Vec<String>,
    /// Times a filter left an initial activation set `S_i⁽⁰⁾`, summed over
    /// `(t, i, r)`.
    pub activation_shrink_events: usize,
    /// Smallest `|ℓ'|` and largest `|ℓ'|` seen over all steps.
    pub deriv_range: (f64, f64),
}

impl TrainOutput {
    pub fn snapshot_times(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

/// Data generation, label flipping, initialization, then `T` GD steps with
/// the coefficient tracker advanced in lockstep.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let ds = generate_train(cfg);
    let ds = flip_labels_with(ds, cfg.tau_plus, cfg.tau_minus, cfg.seed_data, cfg.flip_mode)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let weights = init_weights(cfg);
    train_from(cfg, ds, weights)
}

/// Runs the GD loop on a prepared dataset and initialization.
pub fn train_from(cfg: &ExperimentConfig, ds: Dataset, mut weights: ModelWeights) -> Result<TrainOutput, TrainError> {
    let n = ds.n();
    let m = weights.live.m();
    let mut coeffs = CoeffTable::new(m, n);
    let mut records = Vec::with_capacity(cfg.t_max + 1);
    let mut snapshots = Vec::new();
    let mut warnings = Vec::new();
    let mut initial_sets: Option<Vec<bool>> = None;
    let mut shrink = 0usize;
    let mut deriv_range = (f64::INFINITY, 0.0f64);

    let mut track_sets = |noise_active: &[Vec<bool>; 2], initial: &mut Option<Vec<bool>>| {
        let own: Vec<bool> = (0..m * n)
            .map(|k| noise_active[bank_index(ds.samples()[k % n].y_obs)][k])
            .collect();
        match initial {
            None => *initial = Some(own),
            Some(init) => {
                shrink += init.iter().zip(&own).filter(|(a, b)| **a && !**b).count();
            }
        }
    };

    for t in 0..cfg.t_max {
        if t % cfg.snapshot_stride == 0 {
            snapshots.push(Snapshot { t, weights: weights.live.clone() });
        }
        let mut rec = gd_step(&mut weights, &ds, cfg.eta).map_err(|e| match e {
            TrainError::Divergence { detail, .. } => TrainError::Divergence { iteration: t, detail },
            other => other,
        })?;
        rec.t = t;
        for &lp in &rec.derivs {
            deriv_range.0 = deriv_range.0.min(lp.abs());
            deriv_range.1 = deriv_range.1.max(lp.abs());
        }
        track_sets(&rec.noise_active, &mut initial_sets);
        records.push(iter_record(t, &rec.margins, &rec.losses, &ds, coeffs.last()));
        if t > 0 {
            let prev = records[t - 1].train_loss;
            let cur = records[t].train_loss;
            if cur > LOSS_JUMP_WARNING * prev {
                warnings.push(format!("train loss jumped from {prev:.4e} to {cur:.4e} at iteration {t}"));
            }
        }
        coeffs.push_step(&rec, &ds);
    }

    let t = cfg.t_max;
    let eval = evaluate(&weights.live, &ds);
    let final_rec = StepRecord::from_eval(&eval, cfg.eta, t);
    track_sets(&final_rec.noise_active, &mut initial_sets);
    records.push(iter_record(t, &eval.margins, &eval.losses, &ds, coeffs.last()));
    snapshots.push(Snapshot { t, weights: weights.live.clone() });

    let n_noisy = ds.noisy_idx().len();
    Ok(TrainOutput {
        config: cfg.clone(),
        trajectory: Trajectory { records, n_clean: n - n_noisy, n_noisy },
        dataset: ds,
        weights,
        coeffs,
        snapshots,
        warnings,
        activation_shrink_events: shrink,
        deriv_range,
    })
}

pub const TRAJECTORY_COLUMNS: &str = "t,train_loss,acc_all,acc_clean,acc_noisy,min_clean_margin,max_noisy_margin,max_gamma,max_rho_clean,max_rho_noisy,min_urho";

fn opt(v: Option<f64>) -> String {
    v.map(sci).unwrap_or_default()
}

/// CSV export; undefined entries (for example noisy accuracy without noisy
/// samples) are left blank.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from(TRAJECTORY_COLUMNS);
    s.push('\n');
    for r in &traj.records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            sci(r.train_loss),
            sci(r.acc_all),
            opt(r.acc_clean),
            opt(r.acc_noisy),
            opt(r.min_clean_margin),
            opt(r.max_noisy_margin),
            sci(r.max_gamma),
            opt(r.max_rho_clean),
            opt(r.max_rho_noisy),
            sci(r.min_urho)
        )
        .unwrap();
    }
    s
}
