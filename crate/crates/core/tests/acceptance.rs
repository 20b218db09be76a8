//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Seeds 0..=7 on the default configuration unless a criterion says
//! otherwise.

use std::fs;
use std::process::{Command, ExitCode};

use featlearn::analysis::{accuracy_never_regresses, loss_convergence_find, max_signal_dominates};
use featlearn::checks::{coeff_structure_checks, RECONSTRUCTION_TOL, SOLVER_TOL};
use featlearn::cli::{grid_csv, summarize, GridRow};
use featlearn::config::ExperimentConfig;
use featlearn::datagen::{Dataset, SignalSlot};
use featlearn::decomposition::{
    max_solver_disagreement, reconstruct, reconstruction_residual, solve_coeffs, CoeffState, GramSolver,
};
use featlearn::model::{batch_gradient, empirical_loss, forward, loss_derivative, FilterBanks};
use featlearn::pipeline::{run_experiment, RunOptions, RunResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: std::ops::RangeInclusive<u64> = 0..=7;
const GRID_TAUS: [f64; 4] = [0.1, 0.15, 0.2, 0.25];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn runs(tau: f64) -> Vec<RunResult> {
    SEEDS
        .map(|seed| {
            let cfg = ExperimentConfig { tau_plus: tau, tau_minus: tau, ..Default::default() }.with_seed(seed);
            run_experiment(&cfg, &RunOptions::default()).expect("default configuration trains")
        })
        .collect()
}

fn count(rs: &[RunResult], pred: impl Fn(&RunResult) -> bool) -> usize {
    rs.iter().filter(|r| pred(r)).count()
}

fn c1(r: &RunResult) -> bool {
    r.accuracy_pattern()
}

fn c2(r: &RunResult) -> bool {
    r.crossover_pattern()
}

fn c4(r: &RunResult) -> bool {
    r.selection.as_ref().is_some_and(|s| s.accuracy >= 0.95)
}

fn c5(r: &RunResult) -> bool {
    let Some(early) = &r.early_stop.early else { return false };
    let fin = &r.early_stop.final_report;
    early.estimate < fin.estimate && r.early_stop.intervals_disjoint && fin.estimate >= 0.03
}

fn c6(r: &RunResult) -> bool {
    accuracy_never_regresses(&r.train.trajectory) == Some(true) && r.generalization.estimate <= 0.05
}

/// Worst reconstruction residual and worst absolute tracker-vs-solver gap
/// over all snapshots of a run.
fn exactness(r: &RunResult) -> (f64, f64) {
    let out = &r.train;
    let w0 = out.weights.init();
    let solver = GramSolver::new(&out.dataset).expect("well-conditioned basis");
    let mut res = 0.0f64;
    let mut gap = 0.0f64;
    for s in &out.snapshots {
        let st = out.coeffs.at(s.t);
        res = res.max(reconstruction_residual(&s.weights, &reconstruct(w0, st, &out.dataset)));
        gap = gap.max(max_solver_disagreement(&solve_coeffs(&s.weights, w0, &solver), st));
    }
    (res, gap)
}

/// Number of structural violations in one run.
fn structural_violations(r: &RunResult) -> usize {
    let out = &r.train;
    let ds = &out.dataset;
    let states: Vec<&CoeffState> = out.coeffs.states.iter().collect();
    let mut bad = coeff_structure_checks(&states, ds)
        .iter()
        .filter(|c| c.name.starts_with("rho") && !c.pass)
        .count();
    let (lo, hi) = out.deriv_range;
    if out.config.t_max > 0 && !(lo > 0.0 && hi < 1.0) {
        bad += 1;
    }
    for s in &out.snapshots {
        for x in ds.samples() {
            let f = forward(&s.weights, &x.patch_a, &x.patch_b);
            if f != forward(&s.weights, &x.patch_b, &x.patch_a) {
                bad += 1;
            }
            let lp = loss_derivative(f, x.y_obs);
            if !(lp > -1.0 && lp < 0.0) {
                bad += 1;
            }
        }
    }
    bad
}

fn gauss(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn kink_free(w: &FilterBanks, ds: &Dataset) -> bool {
    ds.samples().iter().all(|s| {
        (0..2).all(|b| {
            (0..w.m()).all(|r| {
                [&s.patch_a, &s.patch_b].iter().all(|x| {
                    let z: f64 = w.filter(b, r).iter().zip(x.iter()).map(|(p, q)| p * q).sum();
                    z.abs() > 1e-3
                })
            })
        })
    })
}

/// 100 random kink-free instances with d ≤ 8, n ≤ 4, m ≤ 3; returns the
/// number of instances with some coordinate off by more than 1e-4 relative.
fn gradient_suite() -> (usize, usize, f64) {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut accepted = 0;
    let mut failed = 0;
    let mut worst = 0.0f64;
    while accepted < 100 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let mu = gauss(&mut rng, d, 1.0);
        let noise: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, d, 1.0)).collect();
        let ys: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let y_obs: Vec<i8> = ys.iter().map(|&y| if rng.random::<f64>() < 0.25 { -y } else { y }).collect();
        let slots: Vec<SignalSlot> = (0..n).map(|_| if rng.random::<bool>() { SignalSlot::A } else { SignalSlot::B }).collect();
        let ds = Dataset::from_parts(mu, 1.0, noise, &ys, &y_obs, &slots).unwrap();
        let w = FilterBanks::from_banks(m, d, gauss(&mut rng, m * d, 0.5), gauss(&mut rng, m * d, 0.5));
        if !kink_free(&w, &ds) {
            continue;
        }
        accepted += 1;
        let g = batch_gradient(&w, &ds);
        let mut bad = false;
        for b in 0..2 {
            for k in 0..m * d {
                let mut plus = w.clone();
                plus.bank_mut(b)[k] += h;
                let mut minus = w.clone();
                minus.bank_mut(b)[k] -= h;
                let fd = (empirical_loss(&plus, &ds) - empirical_loss(&minus, &ds)) / (2.0 * h);
                let an = g.bank(b)[k];
                let err = (an - fd).abs();
                let scale = an.abs().max(fd.abs());
                // Exactly-zero coordinates (filters inactive everywhere) compare absolutely.
                let rel = if scale > 1e-9 { err / scale } else { err };
                worst = worst.max(rel);
                bad |= rel >= 1e-4;
            }
        }
        failed += usize::from(bad);
    }
    (accepted, failed, worst)
}

fn determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_featlearn");
    let tmp = std::env::temp_dir().join(format!("featlearn-acceptance-{}", std::process::id()));
    let mut outputs = Vec::new();
    for rep in 0..2 {
        let out = tmp.join(rep.to_string());
        let status = Command::new(bin)
            .args(["run", "--preset", "fig1-noisy", "--seed", "5", "--n-test", "2000", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run exited with {:?}", status.status.code()));
        }
        let hash = fs::read_dir(&out).map_err(|e| e.to_string())?.next().ok_or("no output")?.map_err(|e| e.to_string())?.path();
        let dir = hash.join("5");
        let read = |n: &str| fs::read(dir.join(n)).map_err(|e| e.to_string());
        outputs.push((read("trajectory.csv")?, read("coeffs.csv")?));
    }
    let _ = fs::remove_dir_all(&tmp);
    let same_traj = outputs[0].0 == outputs[1].0;
    let same_coeffs = outputs[0].1 == outputs[1].1;
    if same_traj && same_coeffs {
        Ok(format!("{} + {} bytes identical", outputs[0].0.len(), outputs[0].1.len()))
    } else {
        Err(format!("trajectory identical: {same_traj}, coeffs identical: {same_coeffs}"))
    }
}

fn main() -> ExitCode {
    let noisy = runs(0.1);
    let clean = runs(0.0);
    let mut grid: Vec<(f64, Vec<RunResult>)> = Vec::new();
    for &tau in &GRID_TAUS[1..] {
        grid.push((tau, runs(tau)));
    }

    let mut out = Vec::new();
    let n = noisy.len();

    let k = count(&noisy, c1);
    out.push(Outcome { id: 1, name: "two-stage accuracy pattern", pass: k >= 7, detail: format!("{k}/{n} seeds") });

    let k = count(&noisy, c2);
    let xs: Vec<String> = noisy.iter().map(|r| r.crossover.first_t.map_or("-".into(), |t| t.to_string())).collect();
    out.push(Outcome {
        id: 2,
        name: "coefficient crossover",
        pass: k >= 7,
        detail: format!("{k}/{n} seeds; crossover t = [{}]", xs.join(", ")),
    });

    let k = count(&noisy, |r| r.stage.t1_window.is_some());
    let ws: Vec<String> = noisy
        .iter()
        .map(|r| r.stage.t1_window.map_or("-".into(), |(a, b)| format!("{a}..{b}")))
        .collect();
    out.push(Outcome { id: 3, name: "Stage-I fit pattern", pass: k >= 7, detail: format!("{k}/{n} seeds; windows [{}]", ws.join(", ")) });

    let k = count(&noisy, c4);
    let conf: Vec<String> = noisy
        .iter()
        .map(|r| {
            r.selection.as_ref().map_or("-".into(), |s| {
                format!("{}/{}/{}/{}", s.clean_below, s.clean_above, s.noisy_below, s.noisy_above)
            })
        })
        .collect();
    out.push(Outcome {
        id: 4,
        name: "small-loss selection at Stage-I end",
        pass: k >= 7,
        detail: format!("{k}/{n} seeds >= 0.95; clean<=|clean>|noisy<=|noisy> = [{}]", conf.join(", ")),
    });

    let k = count(&noisy, c5);
    let errs: Vec<String> = noisy
        .iter()
        .map(|r| {
            format!(
                "{:.4}->{:.4}",
                r.early_stop.early.as_ref().map_or(f64::NAN, |e| e.estimate),
                r.early_stop.final_report.estimate
            )
        })
        .collect();
    out.push(Outcome {
        id: 5,
        name: "early stopping helps, final error >= 0.03",
        pass: k >= 7,
        detail: format!("{k}/{n} seeds; early->final [{}]", errs.join(", ")),
    });

    let k = count(&clean, c6);
    let errs: Vec<String> = clean.iter().map(|r| format!("{:.4}", r.generalization.estimate)).collect();
    out.push(Outcome {
        id: 6,
        name: "noiseless baseline",
        pass: k >= 7,
        detail: format!("{k}/{n} seeds; test error [{}]", errs.join(", ")),
    });

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut grid_ok = true;
    for (tau, rs) in std::iter::once((0.1, &noisy)).chain(grid.iter().map(|(t, r)| (*t, r))) {
        let k = count(rs, |r| c1(r) && c2(r));
        grid_ok &= 2 * k > rs.len();
        cells.push(format!("tau {tau}: {k}/{}", rs.len()));
        for r in rs.iter() {
            rows.push(GridRow { mu: 20.0, tau, seed: r.train.config.seed_data, outcome: Ok(summarize(r)) });
        }
    }
    let csv = grid_csv(&rows);
    let csv_path = std::env::temp_dir().join("featlearn-acceptance-grid.csv");
    let csv_ok = fs::write(&csv_path, &csv).is_ok() && csv.lines().count() == rows.len() + 1;
    out.push(Outcome {
        id: 7,
        name: "grid replication at mu = 20",
        pass: grid_ok && csv_ok,
        detail: format!("{}; summary {}", cells.join(", "), csv_path.display()),
    });

    let all: Vec<&RunResult> = noisy.iter().chain(&clean).chain(grid.iter().flat_map(|(_, r)| r)).collect();
    let (mut res, mut gap) = (0.0f64, 0.0f64);
    for r in &all {
        let (a, b) = exactness(r);
        res = res.max(a);
        gap = gap.max(b);
    }
    out.push(Outcome {
        id: 8,
        name: "decomposition exactness",
        pass: res < RECONSTRUCTION_TOL && gap < SOLVER_TOL,
        detail: format!("{} runs; max residual {res:.3e}, max |solved - iterated| {gap:.3e}", all.len()),
    });

    let (accepted, failed, worst) = gradient_suite();
    out.push(Outcome {
        id: 9,
        name: "gradient matches finite differences",
        pass: failed == 0 && accepted == 100,
        detail: format!("{failed}/{accepted} instances off; worst relative error {worst:.3e}"),
    });

    let violations: usize = all.iter().map(|r| structural_violations(r)).sum();
    out.push(Outcome {
        id: 10,
        name: "structural invariants",
        pass: violations == 0,
        detail: format!("{violations} violations over {} runs", all.len()),
    });

    let det = determinism();
    out.push(Outcome {
        id: 11,
        name: "determinism of run artifacts",
        pass: det.is_ok(),
        detail: det.unwrap_or_else(|e| e),
    });

    println!();
    println!("acceptance criteria");
    for o in &out {
        println!("{} criterion {:>2}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }

    // Supporting checks on the same runs.
    let mut support = Vec::new();
    let k = count(&noisy, |r| r.stage.window_end().is_some_and(|e| e < r.train.config.t_max));
    support.push(("Stage-I window ends before T", k >= 7, format!("{k}/{n} seeds")));
    let k = count(&noisy, |r| loss_convergence_find(&r.train.trajectory, 0.05).is_some());
    let ts: Vec<String> = noisy
        .iter()
        .map(|r| loss_convergence_find(&r.train.trajectory, 0.05).map_or("-".into(), |t| t.to_string()))
        .collect();
    support.push(("training loss reaches 0.05 by T", k >= 7, format!("{k}/{n} seeds; t = [{}]", ts.join(", "))));
    let k = count(&noisy, |r| {
        let nn = r.train.dataset.n() as f64;
        let slack = 3.0 * (0.1 * 0.9 / nn).sqrt();
        r.crossover.first_t.is_some() && r.crossover.tau_prime > 0.0 && r.crossover.tau_prime <= 0.1 + slack
    });
    support.push(("0 < tau' <= (tau+ + tau-)/2 + 3 sigma", k == n, format!("{k}/{n} seeds")));
    let k = count(&noisy, |r| r.generalization.meets_lower_bound);
    support.push(("final test error >= 0.5 min tau - 2 half-widths", k == n, format!("{k}/{n} seeds")));
    let k = count(&clean, |r| r.early_stop.verdict == "no-harm");
    support.push(("noiseless early stop is no-harm", k >= 7, format!("{k}/{n} seeds")));
    println!("supporting checks");
    for (name, pass, detail) in &support {
        println!("{} {name} ({detail})", if *pass { "PASS" } else { "FAIL" });
    }

    // Supporting measurements, reported only.
    for r in &noisy {
        let ds = &r.train.dataset;
        let realized = ds.noisy_idx().len() as f64 / ds.n() as f64;
        println!(
            "info seed {}: final loss {:.4}, |S_f| = {}, tau' = {:.3} (realized flip rate {:.3}), t_eps(0.01) = {}, proxy max dev = {:.3e}, window-end max gamma > max rho: {}",
            r.train.config.seed_data,
            r.train.trajectory.last().train_loss,
            ds.noisy_idx().len(),
            r.crossover.tau_prime,
            realized,
            r.convergence.t_epsilon.map_or("-".into(), |t| t.to_string()),
            r.proxy.max_abs,
            r.stage.window_end().is_some_and(|e| max_signal_dominates(r.train.coeffs.at(e))),
        );
    }
    for r in &clean {
        if let Some(nd) = &r.noiseless {
            println!(
                "info noiseless seed {}: max |l'| ratio {:.3}, filters with gamma/sum(rho)/SNR^2 in [0.1, 10]: {}/{}, early-stop verdict {}",
                r.train.config.seed_data,
                nd.max_deriv_ratio,
                nd.final_in_band,
                nd.final_snr_ratio.len(),
                r.early_stop.verdict
            );
        }
    }

    let failed: Vec<usize> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let support_failed = support.iter().filter(|s| !s.1).count();
    if support_failed > 0 {
        println!("{support_failed} supporting checks failed (reported only; they do not gate the suite)");
    }
    if failed.is_empty() {
        println!("all {} criteria passed", out.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
