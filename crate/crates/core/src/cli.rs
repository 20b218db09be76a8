//! Command-line surface: single runs, grid sweeps and artifact checks.
//!
//! Run artifacts land in `<out>/<config-hash>/<seed>/`:
//! `run.json`, `trajectory.csv`, `coeffs.csv`, `reports/*.json`,
//! `plots/*.svg` (with `--plot`) and `run.log` (wall time, not compared for
//! determinism).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::SCHEMA_VERSION;
use crate::checks::{run_checks, stored_coeff_checks, CheckItem, CheckReport};
use crate::config::{parse_kv, ConditionReport, ConfigError, ExperimentConfig, DEFAULT_EPSILON};
use crate::decomposition::{coeffs_csv, parse_coeffs_csv};
use crate::pipeline::{run_experiment, RunError, RunOptions, RunResult};
use crate::rng::sci;
use crate::svg::{Plot, Series};
use crate::trainer::{train, trajectory_csv, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const DEFAULT_GRID_MU: [f64; 3] = [15.0, 20.0, 25.0];
pub const DEFAULT_GRID_TAU: [f64; 4] = [0.1, 0.15, 0.2, 0.25];

const PRESETS: [(&str, &str); 3] = [
    ("fig1-noisy", include_str!("../presets/fig1-noisy.cfg")),
    ("fig1-clean", include_str!("../presets/fig1-clean.cfg")),
    ("fig3-grid", include_str!("../presets/fig3-grid.cfg")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Parser)]
#[command(name = "featlearn", version, about = "Two-layer ReLU CNN feature-learning experiments under label noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration (optionally over several seeds) and write all artifacts.
    Run(RunArgs),
    /// Sweep signal strength and flip rate; writes a summary CSV.
    Grid(GridArgs),
    /// Re-verify the invariants of a stored run directory.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset: fig1-noisy, fig1-clean, fig3-grid.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long = "T")]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Signal magnitude; a comma list for `grid`.
    #[arg(long)]
    pub mu: Option<String>,
    /// Flip rate for both classes; a comma list for `grid`.
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long = "n-test")]
    pub n_test: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Loss level for the convergence finder and the T* scale.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Constant in the parameter condition.
    #[arg(long = "C", default_value_t = 1.0)]
    pub c: f64,
    /// Write SVG plots.
    #[arg(long)]
    pub plot: bool,
    /// Omit the timestamp from SVG output.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Seed for data, initialization and test draws.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed list: `A..B` (inclusive), `N`, or `a,b,c`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Also write the training set and initial weights.
    #[arg(long = "save-data")]
    pub save_data: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Seed list: `A..B` (inclusive), `N`, or `a,b,c`.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Run directory or its `run.json`.
    pub path: PathBuf,
}

/// Configuration plus the grid-only keys a config file may carry.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub grid_mu: Option<Vec<f64>>,
    pub grid_tau: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
}

fn bad_value(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, ConfigError> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| bad_value(key, s, "expected a comma list")))
        .collect()
}

/// `A..B` (inclusive), a single seed, or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = || bad_value("seeds", s, "expected A..B, N or a comma list");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let v = parse_list::<u64>("seeds", s)?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

pub fn load_config(args: &ConfigArgs) -> Result<LoadedConfig, ConfigError> {
    let mut pairs = BTreeMap::new();
    if let Some(name) = &args.preset {
        let text = preset_text(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?;
        pairs.extend(parse_kv(text)?);
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        pairs.extend(parse_kv(&text)?);
    }
    let grid_mu = pairs.remove("grid_mu").map(|v| parse_list("grid_mu", &v)).transpose()?;
    let grid_tau = pairs.remove("grid_tau").map(|v| parse_list("grid_tau", &v)).transpose()?;
    let seeds = pairs.remove("seeds").map(|v| parse_seeds(&v)).transpose()?;

    let mut cfg = ExperimentConfig::default();
    cfg.apply_pairs(&pairs)?;
    if let Some(t) = args.t_max {
        cfg.t_max = t;
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(s0) = args.sigma0 {
        cfg.sigma_0 = s0;
    }
    if let Some(nt) = args.n_test {
        cfg.n_test = nt;
    }
    Ok(LoadedConfig { config: cfg, grid_mu, grid_tau, seeds })
}

fn single(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.trim().parse().map_err(|_| bad_value(key, v, "expected a number"))
}

fn apply_mu_tau(cfg: &mut ExperimentConfig, mu: f64, tau: f64) {
    cfg.mu_mag = mu;
    cfg.tau_plus = tau;
    cfg.tau_minus = tau;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTriple {
    pub data: u64,
    pub init: u64,
    pub test: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub t1_window: Option<(usize, usize)>,
    pub crossover_t: Option<usize>,
    pub tau_prime: f64,
    pub early_error: Option<f64>,
    pub final_error: f64,
    pub early_stop_verdict: String,
    pub selection_accuracy: Option<f64>,
    pub t_epsilon: Option<usize>,
    pub accuracy_pattern: bool,
    pub crossover_pattern: bool,
    pub checks_pass: Option<bool>,
    /// Reported beside the early-stopped error; no bound is asserted.
    pub d_over_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    /// Config in the key-value file format; feeding it back reproduces the run.
    pub config_kv: String,
    pub config: ExperimentConfig,
    pub seeds: SeedTriple,
    pub epsilon: f64,
    pub condition_c: f64,
    pub condition: ConditionReport,
    pub trajectory_file: String,
    pub coeffs_file: String,
    pub reports: Vec<String>,
    pub plots: Vec<String>,
    pub summary: RunSummary,
    /// Settings the source leaves open, recorded so replications can diff them.
    pub notes: Vec<String>,
}

pub fn summarize(res: &RunResult) -> RunSummary {
    RunSummary {
        t1_window: res.stage.t1_window,
        crossover_t: res.crossover.first_t,
        tau_prime: res.crossover.tau_prime,
        early_error: res.early_stop.early.as_ref().map(|g| g.estimate),
        final_error: res.generalization.estimate,
        early_stop_verdict: res.early_stop.verdict.clone(),
        selection_accuracy: res.selection.as_ref().map(|s| s.accuracy),
        t_epsilon: res.convergence.t_epsilon,
        accuracy_pattern: res.accuracy_pattern(),
        crossover_pattern: res.crossover_pattern(),
        checks_pass: res.checks.as_ref().map(|c| c.all_pass),
        d_over_n: res.train.config.d as f64 / res.train.config.n as f64,
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}

pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(cfg.config_hash()).join(cfg.seed_data.to_string())
}

fn stage_rule(res: &RunResult) -> Option<(f64, String)> {
    res.stage.window_end().map(|t| (t as f64, "stage I end".to_string()))
}

/// Coefficient and accuracy panels, plus training loss on a log scale.
pub fn plots(res: &RunResult) -> Vec<(&'static str, Plot)> {
    let recs = &res.train.trajectory.records;
    let series = |name: &str, f: &dyn Fn(&crate::trainer::IterRecord) -> Option<f64>| -> Option<Series> {
        let points: Vec<(f64, f64)> = recs.iter().filter_map(|r| f(r).map(|v| (r.t as f64, v))).collect();
        (!points.is_empty()).then(|| Series { name: name.into(), points })
    };
    let coeffs = Plot {
        title: "signal and noise coefficients".into(),
        x_label: "iteration".into(),
        y_label: "coefficient".into(),
        series: [
            series("max gamma", &|r| Some(r.max_gamma)),
            series("max rho (clean)", &|r| r.max_rho_clean),
            series("max rho (noisy)", &|r| r.max_rho_noisy),
        ]
        .into_iter()
        .flatten()
        .collect(),
        v_rule: stage_rule(res),
        log_y: false,
    };
    let acc = Plot {
        title: "training accuracy".into(),
        x_label: "iteration".into(),
        y_label: "accuracy".into(),
        series: [
            series("all", &|r| Some(r.acc_all)),
            series("clean", &|r| r.acc_clean),
            series("noisy", &|r| r.acc_noisy),
        ]
        .into_iter()
        .flatten()
        .collect(),
        v_rule: stage_rule(res),
        log_y: false,
    };
    let loss = Plot {
        title: "training loss".into(),
        x_label: "iteration".into(),
        y_label: "loss (log10)".into(),
        series: series("train", &|r| Some(r.train_loss)).into_iter().collect(),
        v_rule: stage_rule(res),
        log_y: true,
    };
    vec![("coefficients.svg", coeffs), ("accuracy.svg", acc), ("loss.svg", loss)]
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix {secs}")
}

/// Writes every artifact of one run and returns its directory.
pub fn write_run(res: &RunResult, output: &OutputArgs, save_data: bool, wall: f64) -> std::io::Result<PathBuf> {
    let cfg = &res.train.config;
    let dir = run_dir(&output.out, cfg);
    fs::create_dir_all(&dir)?;
    write(&dir.join("trajectory.csv"), &trajectory_csv(&res.train.trajectory))?;
    write(&dir.join("coeffs.csv"), &coeffs_csv(&res.train.coeffs, &res.train.snapshot_times()))?;

    let mut reports: Vec<(&str, String)> = vec![
        ("condition.json", to_json(&res.condition)),
        ("stage.json", to_json(&res.stage)),
        ("crossover.json", to_json(&res.crossover)),
        ("generalization.json", to_json(&res.generalization)),
        ("early_stopping.json", to_json(&res.early_stop)),
        ("convergence.json", to_json(&res.convergence)),
        ("init_geometry.json", to_json(&res.init_geometry)),
        ("margin_proxy.json", to_json(&res.proxy)),
    ];
    if let Some(sel) = &res.selection {
        reports.push(("selection.json", to_json(sel)));
    }
    if let Some(nd) = &res.noiseless {
        reports.push(("noiseless.json", to_json(nd)));
    }
    if let Some(ch) = &res.checks {
        reports.push(("checks.json", to_json(ch)));
    }
    for (name, text) in &reports {
        write(&dir.join("reports").join(name), text)?;
    }

    let mut plot_files = Vec::new();
    if output.plot {
        let stamp = (!output.deterministic).then(timestamp);
        for (name, plot) in plots(res) {
            write(&dir.join("plots").join(name), &plot.render(stamp.as_deref()))?;
            plot_files.push(format!("plots/{name}"));
        }
    }
    if save_data {
        write(&dir.join("data.txt"), &res.train.dataset.to_text())?;
        let init = crate::model::ModelWeights::from_init(
            res.train.weights.init().clone(),
            cfg.sigma_0,
            cfg.seed_init,
        );
        write(&dir.join("init_weights.txt"), &init.to_text())?;
    }

    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash(),
        config_kv: cfg.to_kv_text(),
        config: cfg.clone(),
        seeds: SeedTriple { data: cfg.seed_data, init: cfg.seed_init, test: cfg.seed_test },
        epsilon: output.epsilon,
        condition_c: output.c,
        condition: res.condition.clone(),
        trajectory_file: "trajectory.csv".into(),
        coeffs_file: "coeffs.csv".into(),
        reports: reports.iter().map(|(n, _)| format!("reports/{n}")).collect(),
        plots: plot_files,
        summary: summarize(res),
        notes: run_notes(cfg),
    };
    write(&dir.join("run.json"), &to_json(&record))?;
    write(&dir.join("run.log"), &format!("wall_time_s = {wall:.3}\nwarnings = {}\n", res.train.warnings.len()))?;
    Ok(dir)
}

fn run_notes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = vec![
        format!("flip_mode = {}: the flipping scheme of the synthetic experiment is unstated", cfg.flip_mode),
        format!("m = {}, sigma_0 = {}: width and initialization scale of the synthetic experiment are unstated", cfg.m, cfg.sigma_0),
        "convergence.t_star uses the sigma_xi^-2 variant; the condition report lists both".into(),
        "t_epsilon is the first iteration with training loss <= epsilon".into(),
    ];
    if cfg.signal_direction.is_some() {
        notes.push("custom signal direction".into());
    }
    notes
}

fn run_error_code(e: &RunError) -> i32 {
    match e {
        RunError::Train(TrainError::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn options(output: &OutputArgs) -> RunOptions {
    RunOptions { epsilon: output.epsilon, condition_c: output.c, ..Default::default() }
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    let loaded = match load_config(&args.cfg) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut base = loaded.config;
    let overrides = || -> Result<(Option<f64>, Option<f64>), ConfigError> {
        Ok((
            args.cfg.mu.as_deref().map(|v| single("mu", v)).transpose()?,
            args.cfg.tau.as_deref().map(|v| single("tau", v)).transpose()?,
        ))
    };
    let seeds = match (&args.seeds, args.seed, overrides()) {
        (_, _, Err(e)) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
        (Some(s), _, Ok(_)) => parse_seeds(s),
        (None, Some(s), Ok(_)) => Ok(vec![s]),
        (None, None, Ok(_)) => Ok(loaded.seeds.unwrap_or_else(|| vec![base.seed_data])),
    };
    let (mu, tau) = overrides().unwrap_or_default();
    if let Some(mu) = mu {
        base.mu_mag = mu;
    }
    if let Some(tau) = tau {
        base.tau_plus = tau;
        base.tau_minus = tau;
    }
    let seeds = match seeds.and_then(|s| base.validate().map(|_| s)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };

    let mut code = EXIT_OK;
    for seed in seeds {
        let cfg = base.clone().with_seed(seed);
        let start = Instant::now();
        let res = match run_experiment(&cfg, &options(&args.output)) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                code = code.max(run_error_code(&e));
                continue;
            }
        };
        for w in &res.train.warnings {
            eprintln!("seed {seed}: warning: {w}");
        }
        let dir = match write_run(&res, &args.output, args.save_data, start.elapsed().as_secs_f64()) {
            Ok(d) => d,
            Err(e) => {
                eprintln!("seed {seed}: cannot write artifacts: {e}");
                code = code.max(EXIT_CONFIG);
                continue;
            }
        };
        let s = summarize(&res);
        println!(
            "seed {seed}: window {} crossover {} final_error {:.4} early_error {} checks {} -> {}",
            s.t1_window.map_or("none".into(), |(a, b)| format!("[{a},{b}]")),
            s.crossover_t.map_or("none".into(), |t| t.to_string()),
            s.final_error,
            s.early_error.map_or("n/a".into(), |e| format!("{e:.4}")),
            match s.checks_pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "skipped",
            },
            dir.display()
        );
        if let Some(ch) = &res.checks {
            if !ch.all_pass {
                for f in ch.failures() {
                    eprintln!("seed {seed}: check {} failed: value {:.3e} tolerance {:.3e}", f.name, f.value, f.tolerance);
                }
                code = code.max(EXIT_CHECK);
            }
        }
    }
    code
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub mu: f64,
    pub tau: f64,
    pub seed: u64,
    pub outcome: Result<RunSummary, String>,
}

pub const GRID_COLUMNS: &str = "mu,tau,seed,status,t1_start,t1_end,crossover_t,tau_prime,early_error,final_error,selection_accuracy,accuracy_pattern,crossover_pattern,checks_pass";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = format!("{GRID_COLUMNS}\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for row in rows {
        match &row.outcome {
            Ok(r) => writeln!(
                s,
                "{},{},{},ok,{},{},{},{},{},{},{},{},{},{}",
                sci(row.mu),
                sci(row.tau),
                row.seed,
                opt(r.t1_window.map(|w| w.0.to_string())),
                opt(r.t1_window.map(|w| w.1.to_string())),
                opt(r.crossover_t.map(|t| t.to_string())),
                sci(r.tau_prime),
                opt(r.early_error.map(sci)),
                sci(r.final_error),
                opt(r.selection_accuracy.map(sci)),
                r.accuracy_pattern,
                r.crossover_pattern,
                opt(r.checks_pass.map(|b| b.to_string())),
            )
            .unwrap(),
            Err(e) => writeln!(s, "{},{},{},error: {},,,,,,,,,,", sci(row.mu), sci(row.tau), row.seed, e.replace(',', ";")).unwrap(),
        }
    }
    s
}

/// Runs every `(μ, τ, seed)` cell in parallel and returns rows sorted by key.
pub fn run_grid(base: &ExperimentConfig, mus: &[f64], taus: &[f64], seeds: &[u64], opts: &RunOptions) -> Vec<GridRow> {
    let cells: Vec<(f64, f64, u64)> = mus
        .iter()
        .flat_map(|&mu| taus.iter().flat_map(move |&tau| seeds.iter().map(move |&s| (mu, tau, s))))
        .collect();
    let mut rows: Vec<GridRow> = cells
        .par_iter()
        .map(|&(mu, tau, seed)| {
            let mut cfg = base.clone().with_seed(seed);
            apply_mu_tau(&mut cfg, mu, tau);
            let outcome = run_experiment(&cfg, opts).map(|r| summarize(&r)).map_err(|e| e.to_string());
            GridRow { mu, tau, seed, outcome }
        })
        .collect();
    rows.sort_by(|a, b| a.mu.total_cmp(&b.mu).then(a.tau.total_cmp(&b.tau)).then(a.seed.cmp(&b.seed)));
    rows
}

pub fn cmd_grid(args: &GridArgs) -> i32 {
    let setup = || -> Result<_, ConfigError> {
        let loaded = load_config(&args.cfg)?;
        let mus = match &args.cfg.mu {
            Some(v) => parse_list("mu", v)?,
            None => loaded.grid_mu.unwrap_or_else(|| DEFAULT_GRID_MU.to_vec()),
        };
        let taus = match &args.cfg.tau {
            Some(v) => parse_list("tau", v)?,
            None => loaded.grid_tau.unwrap_or_else(|| DEFAULT_GRID_TAU.to_vec()),
        };
        let seeds = match &args.seeds {
            Some(s) => parse_seeds(s)?,
            None => loaded.seeds.unwrap_or_else(|| (0..8).collect()),
        };
        if mus.is_empty() || taus.is_empty() {
            return Err(ConfigError::Invalid("grid lists must be nonempty".into()));
        }
        for &mu in &mus {
            for &tau in &taus {
                let mut c = loaded.config.clone();
                apply_mu_tau(&mut c, mu, tau);
                c.validate()?;
            }
        }
        Ok((loaded.config, mus, taus, seeds))
    };
    let (base, mus, taus, seeds) = match setup() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let rows = run_grid(&base, &mus, &taus, &seeds, &options(&args.output));
    let path = args.output.out.join(format!("grid-{}", base.config_hash())).join("summary.csv");
    if let Err(e) = write(&path, &grid_csv(&rows)) {
        eprintln!("cannot write {}: {e}", path.display());
        return EXIT_CONFIG;
    }
    for &mu in &mus {
        for &tau in &taus {
            let cell: Vec<&GridRow> = rows.iter().filter(|r| r.mu == mu && r.tau == tau).collect();
            let both = cell
                .iter()
                .filter(|r| r.outcome.as_ref().is_ok_and(|s| s.accuracy_pattern && s.crossover_pattern))
                .count();
            let failed = cell.iter().filter(|r| r.outcome.is_err()).count();
            println!("mu {mu} tau {tau}: two-stage pattern on {both}/{} seeds, {failed} failed", cell.len());
        }
    }
    println!("summary: {}", path.display());
    if rows.iter().all(|r| r.outcome.is_err()) {
        EXIT_DIVERGENCE
    } else {
        EXIT_OK
    }
}

/// Regenerates a stored run from its recorded config and checks the stored
/// artifacts against it.
pub fn check_run(path: &Path) -> Result<CheckReport, (i32, String)> {
    let (dir, record_path) = if path.is_dir() { (path.to_path_buf(), path.join("run.json")) } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&record_path).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", record_path.display())))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", record_path.display())))?;
    let cfg = ExperimentConfig::from_kv_text(&record.config_kv).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let out = train(&cfg).map_err(|e| match e {
        TrainError::Divergence { .. } => (EXIT_DIVERGENCE, e.to_string()),
        _ => (EXIT_CONFIG, e.to_string()),
    })?;

    let mut items: Vec<CheckItem> = Vec::new();
    let flag = |name: &str, ok: bool, note: String| CheckItem {
        name: name.into(),
        value: f64::from(u8::from(!ok)),
        tolerance: 0.0,
        pass: ok,
        note,
    };
    match fs::read_to_string(dir.join(&record.trajectory_file)) {
        Ok(t) => items.push(flag("trajectory_reproduces", t == trajectory_csv(&out.trajectory), "stored bytes vs regenerated".into())),
        Err(e) => items.push(flag("trajectory_reproduces", false, format!("unreadable: {e}"))),
    }
    match fs::read_to_string(dir.join(&record.coeffs_file)) {
        Ok(t) => match parse_coeffs_csv(&t, cfg.m, cfg.n) {
            Ok(stored) => {
                items.push(flag("coeffs_parse", true, format!("{} iterations", stored.len())));
                items.extend(stored_coeff_checks(&out, &stored));
            }
            Err(e) => items.push(flag("coeffs_parse", false, e.to_string())),
        },
        Err(e) => items.push(flag("coeffs_parse", false, format!("unreadable: {e}"))),
    }
    items.extend(run_checks(&out).items);
    Ok(CheckReport::from_items(items))
}

pub fn cmd_check(args: &CheckArgs) -> i32 {
    match check_run(&args.path) {
        Err((code, msg)) => {
            eprintln!("check: {msg}");
            code
        }
        Ok(report) => {
            print!("{}", report.table());
            let dir = if args.path.is_dir() { args.path.clone() } else { args.path.parent().unwrap_or(Path::new(".")).to_path_buf() };
            if let Err(e) = write(&dir.join("reports").join("check.json"), &to_json(&report)) {
                eprintln!("cannot write check report: {e}");
            }
            if report.all_pass {
                EXIT_OK
            } else {
                EXIT_CHECK
            }
        }
    }
}

pub fn main_with(cli: Cli) -> i32 {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Check(a) => cmd_check(a),
    }
}
