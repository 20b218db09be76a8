//! One full experiment: training followed by every analysis.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    detect_crossover, detect_stage1, early_stopping_compare, loss_convergence_find,
    margin_proxy_deviation, noiseless_diagnostics, small_loss_select, AnalysisError, CrossoverReport,
    EarlyStoppingRecord, GeneralizationReport, NoiselessDiagnostics, ProxyDeviation, SelectionReport, StageReport,
    SCHEMA_VERSION,
};
use crate::checks::{run_checks, CheckReport};
use crate::config::{validate_condition_with, ConditionReport, ExperimentConfig, DEFAULT_EPSILON};
use crate::datagen::{init_geometry_report, InitGeometry, TestSampler};
use crate::decomposition::reconstruct;
use crate::trainer::{train, Snapshot, TrainError, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub epsilon: f64,
    /// Constant `C` used when evaluating the parameter condition.
    pub condition_c: f64,
    /// Small-loss selection threshold.
    pub threshold: f64,
    pub run_checks: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, condition_c: 1.0, threshold: std::f64::consts::LN_2, run_checks: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub epsilon: f64,
    /// First iteration with training loss at most `ε`.
    pub t_epsilon: Option<usize>,
    /// `η⁻¹ ε⁻¹ m n d⁻¹ σ_ξ⁻²`.
    pub t_star: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub train: TrainOutput,
    pub condition: ConditionReport,
    pub stage: StageReport,
    pub crossover: CrossoverReport,
    /// Small-loss selection at the Stage-I window end, if a window exists.
    pub selection: Option<SelectionReport>,
    pub early_stop: EarlyStoppingRecord,
    pub generalization: GeneralizationReport,
    pub convergence: ConvergenceReport,
    pub noiseless: Option<NoiselessDiagnostics>,
    pub init_geometry: InitGeometry,
    pub proxy: ProxyDeviation,
    pub checks: Option<CheckReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    let out = train(cfg)?;
    analyze(out, opts)
}

/// Runs every analysis on a finished training output.
pub fn analyze(out: TrainOutput, opts: &RunOptions) -> Result<RunResult, RunError> {
    let cfg = &out.config;
    let ds = &out.dataset;
    let condition = validate_condition_with(cfg, opts.condition_c, opts.epsilon);
    let stage = detect_stage1(&out.trajectory, &out.coeffs, ds);
    let crossover = detect_crossover(&out.coeffs, ds);
    let tau_min = cfg.tau_plus.min(cfg.tau_minus);
    let sampler = TestSampler::new(ds, cfg.sigma_xi, cfg.seed_test);

    let selection = stage.window_end().map(|end| {
        let mut rep = small_loss_select(&out.trajectory.at(end).losses, ds.clean_idx(), ds.noisy_idx(), opts.threshold);
        rep.t = Some(end);
        rep
    });

    // The weights at the window end are rebuilt exactly from the tracked
    // coefficients, so the comparison never depends on the snapshot stride.
    let last = out.snapshots.last().expect("training always records the final iterate").clone();
    let mut candidates = vec![last.clone()];
    if let Some(end) = stage.window_end() {
        let w = if end == last.t { last.weights.clone() } else { reconstruct(out.weights.init(), out.coeffs.at(end), ds) };
        candidates.insert(0, Snapshot { t: end, weights: w });
    } else {
        candidates.insert(0, out.snapshots[0].clone());
    }
    let early_stop = early_stopping_compare(&stage, &candidates, &sampler, cfg.n_test, tau_min)?;
    let generalization = early_stop.final_report.clone();

    let convergence = ConvergenceReport {
        schema_version: SCHEMA_VERSION,
        epsilon: opts.epsilon,
        t_epsilon: loss_convergence_find(&out.trajectory, opts.epsilon),
        t_star: condition.t_star_sigma2,
        final_loss: out.trajectory.last().train_loss,
    };
    let noiseless = if ds.noisy_idx().is_empty() {
        Some(noiseless_diagnostics(&out.trajectory, &out.coeffs, ds, condition.snr * condition.snr)?)
    } else {
        None
    };
    let init_geometry = init_geometry_report(ds, out.weights.init(), cfg.sigma_0);
    let proxy = margin_proxy_deviation(&out.trajectory, &out.coeffs, ds);
    let checks = opts.run_checks.then(|| run_checks(&out));

    Ok(RunResult {
        condition,
        stage,
        crossover,
        selection,
        early_stop,
        generalization,
        convergence,
        noiseless,
        init_geometry,
        proxy,
        checks,
        train: out,
    })
}

impl RunResult {
    /// Clean samples fitted while noisy ones are not at some iteration, and
    /// at the end all clean and at least 80% of noisy samples are fitted.
    pub fn accuracy_pattern(&self) -> bool {
        crate::analysis::two_stage_accuracy_pattern(&self.train.trajectory)
    }

    /// A crossover occurs within the horizon, and at the Stage-I window end
    /// the largest signal coefficient exceeds every noise coefficient.
    pub fn crossover_pattern(&self) -> bool {
        let Some(end) = self.stage.window_end() else { return false };
        self.crossover.first_t.is_some_and(|t| t <= self.train.config.t_max)
            && crate::analysis::max_signal_dominates(self.train.coeffs.at(end))
    }
}
