//! Empirical checkers for the two-stage dynamics.
//!
//! Every checker is a pure function of recorded trajectories, coefficient
//! tables and weights, so reports can be recomputed from stored artifacts.
//! Reports serialize to JSON with a `schema_version` field.
//!
//! Conventions:
//! - The Stage-I window is the longest contiguous run of iterations where
//!   all clean margins are `≥ 0`, all noisy margins are `≤ 0`, and
//!   `γ_{j,r} > ρ̄_{ỹ_i,r,i}` for every `j, r, i` (strict). Ties go to the
//!   earliest run.
//! - The crossover is the first iteration where some noisy sample has
//!   `(1/m) Σ_r ρ̄_{ỹ_i,r,i} > (1/m) Σ_r γ_{−ỹ_i,r}`.
//! - The convergence iteration reported by [`loss_convergence_find`] is the
//!   first `t` with `L_S ≤ ε`; it need not coincide with any particular
//!   iterate singled out by the asymptotic analysis.
//! - Test error counts `y f < 0` as a mistake, so `f = 0` is correct.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, TestSampler};
use crate::decomposition::{margin_proxy_auto, CoeffState, CoeffTable};
use crate::model::{bank_index, forward, FilterBanks};
use crate::trainer::{Snapshot, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// Fixed shard count for Monte-Carlo test error, independent of thread count.
pub const TEST_SHARDS: u64 = 16;
/// Losses within this distance of the selection threshold are flagged.
pub const NEAR_THRESHOLD: f64 = 1e-3;
/// Reporting band for the per-filter `γ / Σρ̄` ratio relative to `SNR²`.
pub const SNR_RATIO_BAND: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("noiseless diagnostics require a run without flipped labels ({0} noisy samples present)")]
    NotNoiseless(usize),
    #[error("test-error estimation needs at least one draw")]
    EmptyCount,
    #[error("early-stopping comparison needs at least two snapshots, got {0}")]
    TooFewSnapshots(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub t: usize,
    pub clean_fit: bool,
    pub noisy_antifit: bool,
    pub gamma_dominance: bool,
}

impl StageTrace {
    pub fn holds(&self) -> bool {
        self.clean_fit && self.noisy_antifit && self.gamma_dominance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub schema_version: u32,
    pub t1_window: Option<(usize, usize)>,
    pub trace: Vec<StageTrace>,
    pub crossover_t: Option<usize>,
}

impl StageReport {
    pub fn window_end(&self) -> Option<usize> {
        self.t1_window.map(|w| w.1)
    }
}

/// `∀ r, j: γ_{j,r} > max_i ρ̄_{ỹ_i,r,i}`.
pub fn gamma_dominance(state: &CoeffState, ds: &Dataset) -> bool {
    let n = ds.n();
    let m = state.gamma[0].len();
    (0..m).all(|r| {
        let min_gamma = state.gamma[0][r].min(state.gamma[1][r]);
        ds.samples()
            .iter()
            .enumerate()
            .all(|(i, s)| min_gamma > state.rho_bar[bank_index(s.y_obs)][r * n + i])
    })
}

fn longest_run(flags: impl Iterator<Item = bool>) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    let close = |s: usize, e: usize, best: &mut Option<(usize, usize)>| {
        if best.is_none_or(|(bs, be)| e - s > be - bs) {
            *best = Some((s, e));
        }
    };
    let mut last = 0;
    for (t, f) in flags.enumerate() {
        last = t;
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                close(s, t - 1, &mut best);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        close(s, last, &mut best);
    }
    best
}

pub fn detect_stage1(traj: &Trajectory, coeffs: &CoeffTable, ds: &Dataset) -> StageReport {
    let horizon = traj.records.len().min(coeffs.states.len());
    let trace: Vec<StageTrace> = (0..horizon)
        .map(|t| {
            let margins = &traj.records[t].margins;
            let clean_fit = ds.clean_idx().iter().all(|&i| margins[i] >= 0.0);
            let noisy_antifit = ds.noisy_idx().iter().all(|&i| margins[i] <= 0.0);
            StageTrace { t, clean_fit, noisy_antifit, gamma_dominance: gamma_dominance(coeffs.at(t), ds) }
        })
        .collect();
    let t1_window = longest_run(trace.iter().map(StageTrace::holds));
    StageReport { schema_version: SCHEMA_VERSION, t1_window, trace, crossover_t: detect_crossover(coeffs, ds).first_t }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub schema_version: u32,
    pub first_t: Option<usize>,
    /// Noisy samples satisfying the inequality at the last iteration.
    pub count_at_final: usize,
    /// `count_at_final / n`.
    pub tau_prime: f64,
}

fn crossed(state: &CoeffState, ds: &Dataset, i: usize) -> bool {
    let n = ds.n();
    let m = state.gamma[0].len();
    let own = bank_index(ds.samples()[i].y_obs);
    let rho: f64 = (0..m).map(|r| state.rho_bar[own][r * n + i]).sum::<f64>() / m as f64;
    let gamma: f64 = state.gamma[1 - own].iter().sum::<f64>() / m as f64;
    rho > gamma
}

pub fn detect_crossover(coeffs: &CoeffTable, ds: &Dataset) -> CrossoverReport {
    let noisy = ds.noisy_idx();
    let first_t = coeffs.states.iter().position(|st| noisy.iter().any(|&i| crossed(st, ds, i)));
    let count_at_final = noisy.iter().filter(|&&i| crossed(coeffs.last(), ds, i)).count();
    CrossoverReport {
        schema_version: SCHEMA_VERSION,
        first_t,
        count_at_final,
        tau_prime: count_at_final as f64 / ds.n() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub threshold: f64,
    pub t: Option<usize>,
    pub losses: Vec<f64>,
    pub clean_below: usize,
    pub clean_above: usize,
    pub noisy_below: usize,
    pub noisy_above: usize,
    pub accuracy: f64,
    /// Of the samples predicted clean, the fraction that are clean.
    pub precision: Option<f64>,
    /// Of the clean samples, the fraction predicted clean.
    pub recall: Option<f64>,
    /// Samples with `|ℓ_i − threshold| < 1e-3`.
    pub near_threshold: usize,
}

/// Predicts clean iff `ℓ_i ≤ threshold`.
pub fn small_loss_select(losses: &[f64], clean: &[usize], noisy: &[usize], threshold: f64) -> SelectionReport {
    let below = |i: &usize| losses[*i] <= threshold;
    let clean_below = clean.iter().filter(|i| below(i)).count();
    let noisy_below = noisy.iter().filter(|i| below(i)).count();
    let clean_above = clean.len() - clean_below;
    let noisy_above = noisy.len() - noisy_below;
    let total = clean.len() + noisy.len();
    let predicted_clean = clean_below + noisy_below;
    SelectionReport {
        schema_version: SCHEMA_VERSION,
        threshold,
        t: None,
        losses: losses.to_vec(),
        clean_below,
        clean_above,
        noisy_below,
        noisy_above,
        accuracy: if total == 0 { 1.0 } else { (clean_below + noisy_above) as f64 / total as f64 },
        precision: (predicted_clean > 0).then(|| clean_below as f64 / predicted_clean as f64),
        recall: (!clean.is_empty()).then(|| clean_below as f64 / clean.len() as f64),
        near_threshold: losses.iter().filter(|l| (*l - threshold).abs() < NEAR_THRESHOLD).count(),
    }
}

/// Wilson score interval for `errors` successes out of `count`.
pub fn wilson_interval(errors: usize, count: usize, z: f64) -> (f64, f64) {
    if count == 0 {
        return (0.0, 1.0);
    }
    let n = count as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub schema_version: u32,
    pub t: usize,
    pub estimate: f64,
    pub errors: usize,
    pub count: usize,
    pub interval: (f64, f64),
    /// `0.5 · min{τ₊, τ₋}`, the lower bound expected once training converges.
    pub converged_lower_bound: f64,
    /// Whether `estimate ≥ lower bound − 2 · half-width`.
    pub meets_lower_bound: bool,
}

impl GeneralizationReport {
    pub fn half_width(&self) -> f64 {
        (self.interval.1 - self.interval.0) / 2.0
    }
}

/// Monte-Carlo estimate of `P(y f(W, x) < 0)` on the test distribution.
///
/// Draws are split over [`TEST_SHARDS`] fixed generator streams and summed in
/// shard order, so the result depends only on the seed and `count`.
pub fn estimate_test_error(
    w: &FilterBanks,
    sampler: &TestSampler<'_>,
    count: usize,
    t: usize,
    tau_min: f64,
) -> Result<GeneralizationReport, AnalysisError> {
    if count == 0 {
        return Err(AnalysisError::EmptyCount);
    }
    let per = count as u64 / TEST_SHARDS;
    let extra = count as u64 % TEST_SHARDS;
    let shard_errors: Vec<usize> = (0..TEST_SHARDS)
        .into_par_iter()
        .map(|s| {
            let draws = per + u64::from(s < extra);
            let mut rng = sampler.stream(s);
            (0..draws)
                .filter(|_| {
                    let x = sampler.draw(&mut rng);
                    x.y as f64 * forward(w, &x.patch_a, &x.patch_b) < 0.0
                })
                .count()
        })
        .collect();
    let errors: usize = shard_errors.iter().sum();
    let estimate = errors as f64 / count as f64;
    let interval = wilson_interval(errors, count, Z95);
    let lb = 0.5 * tau_min;
    let half = (interval.1 - interval.0) / 2.0;
    Ok(GeneralizationReport {
        schema_version: SCHEMA_VERSION,
        t,
        estimate,
        errors,
        count,
        interval,
        converged_lower_bound: lb,
        meets_lower_bound: estimate >= lb - 2.0 * half,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStoppingRecord {
    pub schema_version: u32,
    pub stage_end: Option<usize>,
    /// Snapshot iteration actually evaluated for the early stop.
    pub evaluated_t: Option<usize>,
    /// `evaluated_t − stage_end`.
    pub offset: Option<i64>,
    pub early: Option<GeneralizationReport>,
    pub final_report: GeneralizationReport,
    pub intervals_disjoint: bool,
    pub improved: bool,
    pub verdict: String,
}

/// Test error at the Stage-I window end versus the final snapshot. When no
/// snapshot sits exactly at the window end, the nearest one is used and the
/// offset is reported.
pub fn early_stopping_compare(
    stage: &StageReport,
    snapshots: &[Snapshot],
    sampler: &TestSampler<'_>,
    count: usize,
    tau_min: f64,
) -> Result<EarlyStoppingRecord, AnalysisError> {
    if snapshots.len() < 2 {
        return Err(AnalysisError::TooFewSnapshots(snapshots.len()));
    }
    let last = snapshots.iter().max_by_key(|s| s.t).expect("nonempty");
    let final_report = estimate_test_error(&last.weights, sampler, count, last.t, tau_min)?;
    let Some(end) = stage.window_end() else {
        return Ok(EarlyStoppingRecord {
            schema_version: SCHEMA_VERSION,
            stage_end: None,
            evaluated_t: None,
            offset: None,
            early: None,
            final_report,
            intervals_disjoint: false,
            improved: false,
            verdict: "no Stage-I window detected".into(),
        });
    };
    let nearest = snapshots
        .iter()
        .min_by_key(|s| ((s.t as i64 - end as i64).abs(), s.t))
        .expect("nonempty");
    let early = estimate_test_error(&nearest.weights, sampler, count, nearest.t, tau_min)?;
    let disjoint = early.interval.1 < final_report.interval.0 || final_report.interval.1 < early.interval.0;
    let improved = disjoint && early.estimate < final_report.estimate;
    let verdict = match (disjoint, improved) {
        (true, true) => "improvement",
        (true, false) => "harm",
        (false, _) => "no-harm",
    };
    Ok(EarlyStoppingRecord {
        schema_version: SCHEMA_VERSION,
        stage_end: Some(end),
        evaluated_t: Some(nearest.t),
        offset: Some(nearest.t as i64 - end as i64),
        early: Some(early),
        final_report,
        intervals_disjoint: disjoint,
        improved,
        verdict: verdict.into(),
    })
}

/// First `t` with `L_S(W⁽ᵗ⁾) ≤ ε`.
pub fn loss_convergence_find(traj: &Trajectory, epsilon: f64) -> Option<usize> {
    traj.records.iter().find(|r| r.train_loss <= epsilon).map(|r| r.t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiselessDiagnostics {
    pub schema_version: u32,
    /// `max_i |ℓ'_i| / min_k |ℓ'_k|` per iteration.
    pub deriv_ratio: Vec<f64>,
    pub max_deriv_ratio: f64,
    /// `max_{i,k} (1/m) Σ_r (ρ̄_{y_i,r,i} + γ_{y_i,r} − ρ̄_{y_k,r,k} − γ_{y_k,r})` per iteration.
    pub kappa_gap: Vec<f64>,
    pub max_kappa_gap: f64,
    pub snr2: f64,
    /// Per iteration, min and max over filters of `(γ_{j,r} / Σ_i ρ̄_{j,r,i}) / SNR²`;
    /// `None` while some filter has no noise memorization yet.
    pub snr_ratio_range: Vec<Option<(f64, f64)>>,
    /// Final per-filter ratio, bank `+1` first.
    pub final_snr_ratio: Vec<f64>,
    /// Filters whose final ratio lies in `[1/10, 10]`.
    pub final_in_band: usize,
}

pub fn noiseless_diagnostics(
    traj: &Trajectory,
    coeffs: &CoeffTable,
    ds: &Dataset,
    snr2: f64,
) -> Result<NoiselessDiagnostics, AnalysisError> {
    if !ds.noisy_idx().is_empty() {
        return Err(AnalysisError::NotNoiseless(ds.noisy_idx().len()));
    }
    let n = ds.n();
    let m = coeffs.m;
    let deriv_ratio: Vec<f64> = traj
        .records
        .iter()
        .map(|r| {
            let mags = r.margins.iter().map(|&mg| 1.0 / (1.0 + mg.exp()));
            let (lo, hi) = mags.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi / lo
        })
        .collect();
    let kappa_gap: Vec<f64> = coeffs
        .states
        .iter()
        .map(|st| {
            let vals = ds.samples().iter().enumerate().map(|(i, s)| {
                let b = bank_index(s.y);
                (0..m).map(|r| st.rho_bar[b][r * n + i] + st.gamma[b][r]).sum::<f64>() / m as f64
            });
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .collect();
    let filter_ratios = |st: &CoeffState| -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * m);
        for b in 0..2 {
            for r in 0..m {
                let sum: f64 = st.rho_bar[b][r * n..(r + 1) * n].iter().sum();
                if sum <= 0.0 {
                    return None;
                }
                out.push(st.gamma[b][r] / sum / snr2);
            }
        }
        Some(out)
    };
    let snr_ratio_range = coeffs
        .states
        .iter()
        .map(|st| {
            filter_ratios(st).map(|v| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))))
        })
        .collect();
    let final_snr_ratio = filter_ratios(coeffs.last()).unwrap_or_default();
    let final_in_band =
        final_snr_ratio.iter().filter(|&&x| (1.0 / SNR_RATIO_BAND..=SNR_RATIO_BAND).contains(&x)).count();
    Ok(NoiselessDiagnostics {
        schema_version: SCHEMA_VERSION,
        max_deriv_ratio: deriv_ratio.iter().copied().fold(0.0, f64::max),
        deriv_ratio,
        max_kappa_gap: kappa_gap.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        kappa_gap,
        snr2,
        snr_ratio_range,
        final_snr_ratio,
        final_in_band,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyDeviation {
    pub schema_version: u32,
    /// `max_{t,i} |ỹ_i f(W⁽ᵗ⁾, x_i) − proxy_i⁽ᵗ⁾|`, the empirical `1/C₁`.
    pub max_abs: f64,
    pub at_t: usize,
    pub at_i: usize,
}

pub fn margin_proxy_deviation(traj: &Trajectory, coeffs: &CoeffTable, ds: &Dataset) -> ProxyDeviation {
    let mut best = ProxyDeviation { schema_version: SCHEMA_VERSION, max_abs: 0.0, at_t: 0, at_i: 0 };
    for (t, rec) in traj.records.iter().enumerate().take(coeffs.states.len()) {
        for (i, &mg) in rec.margins.iter().enumerate() {
            let dev = (mg - margin_proxy_auto(coeffs.at(t), ds, i)).abs();
            if dev > best.max_abs {
                best.max_abs = dev;
                best.at_t = t;
                best.at_i = i;
            }
        }
    }
    best
}

/// Some iteration fits every clean sample and no noisy sample, and at the end
/// all clean samples are fitted with at least 80% of noisy samples fitted.
pub fn two_stage_accuracy_pattern(traj: &Trajectory) -> bool {
    let dip = traj.records.iter().any(|r| r.acc_clean == Some(1.0) && r.acc_noisy == Some(0.0));
    let last = traj.last();
    dip && last.acc_clean == Some(1.0) && last.acc_noisy.is_some_and(|a| a >= 0.8)
}

/// `max_{j,r} γ > max_{j,r,i} ρ̄` at one iteration.
pub fn max_signal_dominates(state: &CoeffState) -> bool {
    let g = state.gamma.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = state.rho_bar.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    g > r
}

/// After the first iteration with perfect training accuracy, accuracy never
/// drops again. `None` if perfect accuracy is never reached.
pub fn accuracy_never_regresses(traj: &Trajectory) -> Option<bool> {
    let first = traj.records.iter().position(|r| r.acc_all == 1.0)?;
    Some(traj.records[first..].iter().all(|r| r.acc_all == 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_train, SignalSlot};
    use crate::config::ExperimentConfig;
    use crate::trainer::IterRecord;

    fn traj_from_margins(margins: Vec<Vec<f64>>) -> Trajectory {
        let records = margins
            .into_iter()
            .enumerate()
            .map(|(t, mg)| IterRecord {
                t,
                train_loss: 0.0,
                acc_all: 0.0,
                acc_clean: None,
                acc_noisy: None,
                correct_all: 0,
                correct_clean: 0,
                correct_noisy: 0,
                min_clean_margin: None,
                max_noisy_margin: None,
                max_gamma: 0.0,
                max_rho_clean: None,
                max_rho_noisy: None,
                min_urho: 0.0,
                losses: vec![0.0; mg.len()],
                margins: mg,
            })
            .collect();
        Trajectory { records, n_clean: 0, n_noisy: 0 }
    }

    fn two_sample_ds(noisy: bool) -> Dataset {
        let y_obs = if noisy { [1, 1] } else { [1, -1] };
        Dataset::from_parts(
            vec![1.0, 0.0, 0.0],
            1.0,
            vec![vec![0.0, 1.0, 0.2], vec![0.1, -0.3, 1.0]],
            &[1, -1],
            &y_obs,
            &[SignalSlot::A, SignalSlot::B],
        )
        .unwrap()
    }

    #[test]
    fn zero_state_fails_dominance() {
        let ds = two_sample_ds(false);
        let coeffs = CoeffTable::new(2, 2);
        let traj = traj_from_margins(vec![vec![0.0, 0.0]]);
        let rep = detect_stage1(&traj, &coeffs, &ds);
        assert!(rep.trace[0].clean_fit && rep.trace[0].noisy_antifit);
        assert!(!rep.trace[0].gamma_dominance);
        assert_eq!(rep.t1_window, None);
    }

    #[test]
    fn noiseless_window_starts_at_first_fit() {
        let ds = two_sample_ds(false);
        let mut coeffs = CoeffTable::new(1, 2);
        for g in [0.0, 1.0, 2.0, 3.0] {
            let mut st = CoeffState::zeros(1, 2);
            st.gamma = [vec![g], vec![g]];
            coeffs.states.push(st);
        }
        coeffs.states.remove(0);
        let traj = traj_from_margins(vec![vec![-0.1, 0.2], vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]);
        let rep = detect_stage1(&traj, &coeffs, &ds);
        assert!(rep.trace.iter().all(|s| s.noisy_antifit));
        assert_eq!(rep.t1_window, Some((1, 3)));
        assert_eq!(detect_crossover(&coeffs, &ds).first_t, None);
    }

    #[test]
    fn longest_run_prefers_longest_then_earliest() {
        let f = [false, true, true, false, true, true, true, false, true];
        assert_eq!(longest_run(f.iter().copied()), Some((4, 6)));
        assert_eq!(longest_run([true, false, true].iter().copied()), Some((0, 0)));
        assert_eq!(longest_run([false, false].iter().copied()), None);
        assert_eq!(longest_run([false, true].iter().copied()), Some((1, 1)));
    }

    #[test]
    fn crossover_never_fires_under_large_gamma() {
        let ds = two_sample_ds(true);
        let mut st = CoeffState::zeros(2, 2);
        st.gamma = [vec![10.0; 2], vec![10.0; 2]];
        st.rho_bar[0] = vec![1.0; 4];
        let coeffs = CoeffTable { m: 2, n: 2, states: vec![st] };
        let rep = detect_crossover(&coeffs, &ds);
        assert_eq!(rep.first_t, None);
        assert_eq!(rep.count_at_final, 0);
    }

    #[test]
    fn selection_edge_cases() {
        let rep = small_loss_select(&[0.0; 4], &[0, 1], &[2, 3], std::f64::consts::LN_2);
        assert_eq!(rep.clean_below, 2);
        assert_eq!(rep.noisy_below, 2);
        assert_eq!(rep.recall, Some(1.0));
        assert_eq!(rep.accuracy, 0.5);

        let ln2 = std::f64::consts::LN_2;
        let rep = small_loss_select(&[ln2, ln2 + 1e-4, ln2 - 1e-4], &[0, 1], &[2], ln2);
        assert_eq!(rep.near_threshold, 3);
        assert_eq!(rep.clean_below, 1);
        assert_eq!(rep.clean_below + rep.clean_above + rep.noisy_below + rep.noisy_above, 3);
    }

    #[test]
    fn wilson_properties() {
        let (lo, hi) = wilson_interval(0, 10, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.35);
        let (lo1, hi1) = wilson_interval(50, 1000, Z95);
        let (lo2, hi2) = wilson_interval(100, 2000, Z95);
        assert!(lo1 <= 0.05 && 0.05 <= hi1);
        assert!(hi2 - lo2 < hi1 - lo1);
    }

    #[test]
    fn test_error_of_zero_weights_and_single_draw() {
        let cfg = ExperimentConfig { d: 20, n: 4, m: 2, ..Default::default() };
        let ds = generate_train(&cfg);
        let sampler = TestSampler::new(&ds, 1.0, 3);
        let rep = estimate_test_error(&FilterBanks::zeros(2, 20), &sampler, 50, 0, 0.1).unwrap();
        assert_eq!(rep.estimate, 0.0);
        let w = crate::model::init_weights(&ExperimentConfig { sigma_0: 1.0, ..cfg });
        let one = estimate_test_error(&w.live, &sampler, 1, 0, 0.1).unwrap();
        assert!(one.estimate == 0.0 || one.estimate == 1.0);
        assert!(estimate_test_error(&w.live, &sampler, 0, 0, 0.1).is_err());
        let again = estimate_test_error(&w.live, &sampler, 1, 0, 0.1).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn convergence_thresholds() {
        let mut traj = traj_from_margins(vec![vec![0.0], vec![1.0], vec![2.0]]);
        for (r, l) in traj.records.iter_mut().zip([0.69, 0.3, 0.1]) {
            r.train_loss = l;
        }
        assert_eq!(loss_convergence_find(&traj, 1.0), Some(0));
        assert_eq!(loss_convergence_find(&traj, 0.2), Some(2));
        assert_eq!(loss_convergence_find(&traj, 1e-300), None);
    }

    #[test]
    fn noiseless_rejects_noisy_runs() {
        let ds = two_sample_ds(true);
        let traj = traj_from_margins(vec![vec![0.0, 0.0]]);
        assert!(noiseless_diagnostics(&traj, &CoeffTable::new(1, 2), &ds, 0.2).is_err());
        let ds = two_sample_ds(false);
        let rep = noiseless_diagnostics(&traj, &CoeffTable::new(1, 2), &ds, 0.2).unwrap();
        assert_eq!(rep.deriv_ratio, vec![1.0]);
    }
}
