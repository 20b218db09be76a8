//! Runtime invariant checks on a finished training run.
//!
//! Each check yields a named value and tolerance. Failures are reported, not
//! panicked on, so the CLI can map them to its exit code.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::decomposition::{
    max_solver_disagreement, reconstruct, reconstruction_residual, solve_coeffs, CoeffState, GramSolver,
};
use crate::model::{bank_index, batch_gradient, empirical_loss, forward, FilterBanks};
use crate::trainer::TrainOutput;

pub const RECONSTRUCTION_TOL: f64 = 1e-8;
pub const SOLVER_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;
/// Coordinates probed by the finite-difference spot check.
pub const FD_PROBES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub note: String,
}

impl CheckItem {
    fn at_most(name: &str, value: f64, tolerance: f64, note: impl Into<String>) -> Self {
        Self { name: name.into(), value, tolerance, pass: value <= tolerance, note: note.into() }
    }

    fn flag(name: &str, ok: bool, note: impl Into<String>) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(!ok)), tolerance: 0.0, pass: ok, note: note.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub schema_version: u32,
    pub items: Vec<CheckItem>,
    pub all_pass: bool,
}

impl CheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|c| !c.pass)
    }
}

fn coeff_scale(out: &TrainOutput, t: usize) -> f64 {
    let st = out.coeffs.at(t);
    st.gamma
        .iter()
        .chain(&st.rho_bar)
        .chain(&st.rho_under)
        .flatten()
        .fold(1.0f64, |a, x| a.max(x.abs()))
}

pub fn run_checks(out: &TrainOutput) -> CheckReport {
    let ds = &out.dataset;
    let w0 = out.weights.init();
    let n = ds.n();
    let mut items = Vec::new();

    let mut worst = 0.0f64;
    for s in &out.snapshots {
        let rec = reconstruct(w0, out.coeffs.at(s.t), ds);
        worst = worst.max(reconstruction_residual(&s.weights, &rec));
    }
    items.push(CheckItem::at_most("reconstruction_residual", worst, RECONSTRUCTION_TOL, "relative Frobenius, snapshots"));

    match GramSolver::new(ds) {
        Ok(solver) => {
            let mut worst = 0.0f64;
            for s in &out.snapshots {
                let solved = solve_coeffs(&s.weights, w0, &solver);
                worst = worst.max(max_solver_disagreement(&solved, out.coeffs.at(s.t)) / coeff_scale(out, s.t));
            }
            items.push(CheckItem::at_most(
                "tracker_vs_solver",
                worst,
                SOLVER_TOL,
                format!("scaled by max(1, |coeff|); Gram condition {:.3e}", solver.condition_number()),
            ));
        }
        Err(e) => items.push(CheckItem::flag("tracker_vs_solver", false, e.to_string())),
    }

    let states: Vec<&CoeffState> = out.coeffs.states.iter().collect();
    items.extend(coeff_structure_checks(&states, ds));

    let (lo, hi) = out.deriv_range;
    items.push(CheckItem::flag(
        "loss_derivative_range",
        out.trajectory.records.len() <= 1 || (lo > 0.0 && hi < 1.0),
        format!("|l'| in [{lo:.3e}, {hi:.3e}]"),
    ));

    let w = &out.weights.live;
    let swap_ok = ds.samples().iter().take(8).all(|s| forward(w, &s.patch_a, &s.patch_b) == forward(w, &s.patch_b, &s.patch_a));
    items.push(CheckItem::flag("patch_order_invariance", swap_ok, "f(a, b) == f(b, a) on training points"));

    let traj = &out.trajectory;
    let ident_ok = traj.records.len() == out.config.t_max + 1
        && traj.records.iter().enumerate().all(|(t, r)| {
            r.t == t
                && r.correct_all == r.correct_clean + r.correct_noisy
                && r.correct_clean <= traj.n_clean
                && r.correct_noisy <= traj.n_noisy
                && (r.acc_all - r.correct_all as f64 / n as f64).abs() < 1e-15
        });
    items.push(CheckItem::flag("trajectory_identities", ident_ok, "record count, t index, correct counts"));

    let fd = fd_spot_check(w, ds);
    items.push(CheckItem::at_most("gradient_fd", fd, FD_TOL, "central difference at final weights"));

    CheckReport::from_items(items)
}

/// Worst relative gap between the analytic gradient and a central
/// difference of the empirical loss over a few fixed coordinates.
pub fn fd_spot_check(w: &FilterBanks, ds: &Dataset) -> f64 {
    let g = batch_gradient(w, ds);
    let m = w.m();
    let d = w.d();
    let mut worst = 0.0f64;
    for p in 0..FD_PROBES {
        let b = p % 2;
        let r = (p * 7) % m;
        let k = (p * 131) % d;
        let mut plus = w.clone();
        plus.filter_mut(b, r)[k] += FD_STEP;
        let mut minus = w.clone();
        minus.filter_mut(b, r)[k] -= FD_STEP;
        let fd = (empirical_loss(&plus, ds) - empirical_loss(&minus, ds)) / (2.0 * FD_STEP);
        let an = g.filter(b, r)[k];
        let scale = an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((an - fd).abs() / scale);
    }
    worst
}

/// Sign, zero-pattern and monotonicity checks over a time-ordered sequence
/// of coefficient states. A sequence of length one passes the monotonicity
/// checks vacuously.
pub fn coeff_structure_checks(states: &[&CoeffState], ds: &Dataset) -> Vec<CheckItem> {
    let n = ds.n();
    let m = states.first().map_or(0, |s| s.gamma[0].len());
    let mut sign_ok = true;
    let mut zero_ok = true;
    let mut mono_ok = true;
    for (t, st) in states.iter().enumerate() {
        for b in 0..2 {
            for k in 0..m * n {
                let own = bank_index(ds.samples()[k % n].y_obs) == b;
                let (rb, ru) = (st.rho_bar[b][k], st.rho_under[b][k]);
                sign_ok &= rb >= 0.0 && ru <= 0.0;
                zero_ok &= if own { ru == 0.0 } else { rb == 0.0 };
                if t > 0 {
                    let prev = states[t - 1];
                    mono_ok &= rb >= prev.rho_bar[b][k] && ru <= prev.rho_under[b][k];
                }
            }
        }
    }
    let mut items = vec![
        CheckItem::flag("rho_signs", sign_ok, "rho_bar >= 0, rho_under <= 0"),
        CheckItem::flag("rho_zero_pattern", zero_ok, "rho_bar vanishes off the observed-label bank, rho_under on it"),
        CheckItem::flag("rho_monotone", mono_ok, "rho_bar nondecreasing, rho_under nonincreasing"),
    ];
    if ds.noisy_idx().is_empty() {
        let gamma_ok = states.windows(2).all(|w| {
            (0..2).all(|b| w[1].gamma[b].iter().zip(&w[0].gamma[b]).all(|(a, p)| a >= p && *a >= 0.0))
        });
        items.push(CheckItem::flag("gamma_monotone_noiseless", gamma_ok, "gamma nondecreasing without flips"));
    }
    items
}

/// Compares coefficient states read back from disk against the snapshots of
/// a regenerated run: solver agreement and reconstruction at every stored
/// iteration, plus the structural checks on the stored sequence.
pub fn stored_coeff_checks(out: &TrainOutput, stored: &[(usize, CoeffState)]) -> Vec<CheckItem> {
    let ds = &out.dataset;
    let w0 = out.weights.init();
    let mut items = Vec::new();
    let expected = out.snapshot_times();
    let times: Vec<usize> = stored.iter().map(|(t, _)| *t).collect();
    items.push(CheckItem::flag("stored_times", times == expected, format!("{} stored iterations", times.len())));
    let lookup = |t: usize| out.snapshots.iter().find(|s| s.t == t);

    let mut worst_rec = 0.0f64;
    let mut missing = 0usize;
    for (t, st) in stored {
        match lookup(*t) {
            Some(s) => worst_rec = worst_rec.max(reconstruction_residual(&s.weights, &reconstruct(w0, st, ds))),
            None => missing += 1,
        }
    }
    items.push(CheckItem::at_most(
        "stored_reconstruction_residual",
        if missing > 0 { f64::INFINITY } else { worst_rec },
        RECONSTRUCTION_TOL,
        format!("{missing} iterations without a snapshot"),
    ));
    match GramSolver::new(ds) {
        Ok(solver) => {
            let mut worst = 0.0f64;
            for (t, st) in stored {
                if let Some(s) = lookup(*t) {
                    let scale = st.gamma.iter().chain(&st.rho_bar).chain(&st.rho_under).flatten().fold(1.0f64, |a, x| a.max(x.abs()));
                    worst = worst.max(max_solver_disagreement(&solve_coeffs(&s.weights, w0, &solver), st) / scale);
                }
            }
            if missing > 0 {
                worst = f64::INFINITY;
            }
            items.push(CheckItem::at_most("stored_tracker_vs_solver", worst, SOLVER_TOL, "stored coefficients against solved"));
        }
        Err(e) => items.push(CheckItem::flag("stored_tracker_vs_solver", false, e.to_string())),
    }
    let refs: Vec<&CoeffState> = stored.iter().map(|(_, s)| s).collect();
    for mut c in coeff_structure_checks(&refs, ds) {
        c.name = format!("stored_{}", c.name);
        items.push(c);
    }
    items
}

impl CheckReport {
    pub fn from_items(items: Vec<CheckItem>) -> Self {
        let all_pass = items.iter().all(|c| c.pass);
        Self { schema_version: crate::analysis::SCHEMA_VERSION, items, all_pass }
    }

    /// Plain-text table, one check per line.
    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>6} {:>12} {:>12}  note\n", "check", "status", "value", "tolerance");
        for c in &self.items {
            s.push_str(&format!(
                "{:<34} {:>6} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.value,
                c.tolerance,
                c.note
            ));
        }
        s
    }
}
