//! Experiment configuration, derived scale quantities and the regime
//! condition report.
//!
//! Configurations are read from a flat `key = value` text file whose keys are
//! exactly the field names of [`ExperimentConfig`]. Lines starting with `#`
//! are comments. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Failure probability used inside the logarithms of the regime condition.
pub const DEFAULT_DELTA: f64 = 0.05;
/// Target training loss used to instantiate the iteration horizon `T*`.
pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (available: fig1-noisy, fig1-clean, fig3-grid)")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// How observed labels are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipMode {
    /// Independent Bernoulli flip per sample.
    Bernoulli,
    /// Exactly `floor(tau * n / 2)` flips per class.
    ExactCount,
}

impl fmt::Display for FlipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlipMode::Bernoulli => f.write_str("bernoulli"),
            FlipMode::ExactCount => f.write_str("exact-count"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dimension of one patch.
    pub d: usize,
    /// Number of training samples (even).
    pub n: usize,
    /// Filters per class bank.
    pub m: usize,
    /// Signal magnitude `‖μ‖₂`.
    pub mu_mag: f64,
    pub sigma_xi: f64,
    pub sigma_0: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub eta: f64,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_test: u64,
    pub n_test: usize,
    pub flip_mode: FlipMode,
    /// Weight snapshot stride; the final iterate is always kept.
    pub snapshot_stride: usize,
    /// Unit direction of the signal; `None` means the first basis vector.
    pub signal_direction: Option<Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 2000,
            n: 100,
            m: 20,
            mu_mag: 20.0,
            sigma_xi: 1.0,
            sigma_0: 0.01,
            tau_plus: 0.1,
            tau_minus: 0.1,
            eta: 0.1,
            t_max: 200,
            seed_data: 0,
            seed_init: 0,
            seed_test: 0,
            n_test: 10_000,
            flip_mode: FlipMode::Bernoulli,
            snapshot_stride: 10,
            signal_direction: None,
        }
    }
}

const KEYS: &[&str] = &[
    "d",
    "n",
    "m",
    "mu_mag",
    "sigma_xi",
    "sigma_0",
    "tau_plus",
    "tau_minus",
    "eta",
    "T",
    "seed_data",
    "seed_init",
    "seed_test",
    "n_test",
    "flip_mode",
    "snapshot_stride",
    "signal_direction",
];

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e.to_string()))
}

/// Parses a flat `key = value` document into ordered pairs. Duplicate keys
/// keep the last value.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: lineno + 1, text: raw.to_string() });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Checks every field invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |msg: String| Err(ConfigError::Invalid(msg));
        if self.d == 0 || self.m == 0 || self.n == 0 || self.n_test == 0 || self.snapshot_stride == 0 {
            return inv("d, n, m, n_test and snapshot_stride must be positive".into());
        }
        if self.n % 2 != 0 {
            return inv(format!("n must be even for a balanced training set, got {}", self.n));
        }
        for (name, v) in [("mu_mag", self.mu_mag), ("sigma_xi", self.sigma_xi), ("sigma_0", self.sigma_0), ("eta", self.eta)] {
            if !(v.is_finite() && v > 0.0) {
                return inv(format!("{name} must be finite and strictly positive, got {v}"));
            }
        }
        for (name, v) in [("tau_plus", self.tau_plus), ("tau_minus", self.tau_minus)] {
            if !(0.0..0.5).contains(&v) {
                return inv(format!("{name} must lie in [0, 0.5), got {v}"));
            }
        }
        if let Some(dir) = &self.signal_direction {
            if dir.len() != self.d {
                return inv(format!("signal_direction has {} entries, expected d = {}", dir.len(), self.d));
            }
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return inv("signal_direction must be a nonzero finite vector".into());
            }
        }
        Ok(())
    }

    /// Applies `key = value` pairs on top of `self`. Unknown keys are errors.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "d" => self.d = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "mu_mag" => self.mu_mag = parse_num(key, value)?,
            "sigma_xi" => self.sigma_xi = parse_num(key, value)?,
            "sigma_0" => self.sigma_0 = parse_num(key, value)?,
            "tau_plus" => self.tau_plus = parse_num(key, value)?,
            "tau_minus" => self.tau_minus = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "T" => self.t_max = parse_num(key, value)?,
            "seed_data" => self.seed_data = parse_num(key, value)?,
            "seed_init" => self.seed_init = parse_num(key, value)?,
            "seed_test" => self.seed_test = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "snapshot_stride" => self.snapshot_stride = parse_num(key, value)?,
            "flip_mode" => {
                self.flip_mode = match value {
                    "bernoulli" => FlipMode::Bernoulli,
                    "exact-count" | "exact_count" => FlipMode::ExactCount,
                    _ => return Err(bad(key, value, "expected bernoulli or exact-count")),
                }
            }
            "signal_direction" => {
                self.signal_direction = if value == "e1" || value.is_empty() {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|s| parse_num::<f64>(key, s.trim()))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a configuration document on top of the defaults and validates it.
    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_pairs(&parse_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_kv_text(&text)
    }

    /// Sets all three seeds at once; the generators use disjoint streams, so
    /// equal seeds do not correlate the data, initialization and test draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_data = seed;
        self.seed_init = seed;
        self.seed_test = seed;
        self
    }

    /// Serializes to the key-value format accepted by [`Self::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "d" => self.d.to_string(),
                "n" => self.n.to_string(),
                "m" => self.m.to_string(),
                "mu_mag" => format!("{:?}", self.mu_mag),
                "sigma_xi" => format!("{:?}", self.sigma_xi),
                "sigma_0" => format!("{:?}", self.sigma_0),
                "tau_plus" => format!("{:?}", self.tau_plus),
                "tau_minus" => format!("{:?}", self.tau_minus),
                "eta" => format!("{:?}", self.eta),
                "T" => self.t_max.to_string(),
                "seed_data" => self.seed_data.to_string(),
                "seed_init" => self.seed_init.to_string(),
                "seed_test" => self.seed_test.to_string(),
                "n_test" => self.n_test.to_string(),
                "flip_mode" => self.flip_mode.to_string(),
                "snapshot_stride" => self.snapshot_stride.to_string(),
                "signal_direction" => match &self.signal_direction {
                    None => "e1".to_string(),
                    Some(v) => v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
                },
                _ => unreachable!(),
            };
            s.push_str(&format!("{key} = {value}\n"));
        }
        s
    }

    /// Short content hash of every field except the seeds. Runs of the same
    /// configuration with different seeds share this key.
    pub fn config_hash(&self) -> String {
        let unseeded = Self { seed_data: 0, seed_init: 0, seed_test: 0, ..self.clone() };
        let digest = Sha256::digest(unseeded.to_kv_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_noiseless(&self) -> bool {
        self.tau_plus == 0.0 && self.tau_minus == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionItem {
    pub name: String,
    pub lhs: f64,
    /// `None` for informational items without a threshold.
    pub rhs: Option<f64>,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub snr: f64,
    pub n_snr2: f64,
    /// `n m / (η σ_ξ² d)`, the Stage-I horizon with unit constant.
    pub t1_estimate: f64,
    /// `n m / (η ε σ_ξ² d)`.
    pub t_star_sigma2: f64,
    /// `n m / (η ε σ_ξ d)`, the variant with a single power of `σ_ξ`.
    pub t_star_sigma1: f64,
    /// `None` when only the scales were derived.
    pub constant_c: Option<f64>,
    pub delta: f64,
    pub epsilon: f64,
    pub items: Vec<ConditionItem>,
    pub overall_pass: bool,
}

/// SNR, `n·SNR²` and horizon estimates. Pure arithmetic; does not require
/// the configuration to be valid.
pub fn derive_scales(cfg: &ExperimentConfig) -> ConditionReport {
    derive_scales_eps(cfg, DEFAULT_EPSILON)
}

fn derive_scales_eps(cfg: &ExperimentConfig, epsilon: f64) -> ConditionReport {
    let d = cfg.d as f64;
    let n = cfg.n as f64;
    let m = cfg.m as f64;
    let snr = cfg.mu_mag / (cfg.sigma_xi * d.sqrt());
    let t1 = n * m / (cfg.eta * cfg.sigma_xi * cfg.sigma_xi * d);
    ConditionReport {
        snr,
        n_snr2: n * snr * snr,
        t1_estimate: t1,
        t_star_sigma2: t1 / epsilon,
        t_star_sigma1: n * m / (cfg.eta * epsilon * cfg.sigma_xi * d),
        constant_c: None,
        delta: DEFAULT_DELTA,
        epsilon,
        items: Vec::new(),
        overall_pass: false,
    }
}

/// Evaluates the six regime clauses literally with constant `c`,
/// `δ = 0.05` and `T*` at `ε = 0.01` (the `σ_ξ⁻²` variant).
pub fn validate_condition(cfg: &ExperimentConfig, c: f64) -> ConditionReport {
    validate_condition_with(cfg, c, DEFAULT_EPSILON)
}

pub fn validate_condition_with(cfg: &ExperimentConfig, c: f64, epsilon: f64) -> ConditionReport {
    let mut rep = derive_scales_eps(cfg, epsilon);
    rep.constant_c = Some(c);
    let delta = rep.delta;
    let d = cfg.d as f64;
    let n = cfg.n as f64;
    let m = cfg.m as f64;
    let sx = cfg.sigma_xi;
    let mu = cfg.mu_mag;
    let log_tstar = rep.t_star_sigma2.max(1.0).ln();

    let mut items = Vec::with_capacity(6);

    let tau_ok = |t: f64| (0.0..0.5).contains(&t);
    items.push(ConditionItem {
        name: "1: n*SNR^2, tau = Theta(1)".into(),
        lhs: rep.n_snr2,
        rhs: None,
        pass: tau_ok(cfg.tau_plus) && tau_ok(cfg.tau_minus),
        note: format!(
            "informational: n*SNR^2 = {:.6}, tau_plus = {}, tau_minus = {}; pass checks only tau in [0, 1/2)",
            rep.n_snr2, cfg.tau_plus, cfg.tau_minus
        ),
    });

    let d_req = c * f64::max(
        n * n * (n * m / delta).ln() * log_tstar * log_tstar,
        n * mu / sx * (n / delta).ln().sqrt(),
    );
    items.push(ConditionItem {
        name: "2: d >= C max{n^2 log(nm/delta) log(T*)^2, n |mu| / sigma_xi sqrt(log(n/delta))}".into(),
        lhs: d,
        rhs: Some(d_req),
        pass: d >= d_req,
        note: String::new(),
    });

    let width_ratio = f64::min(m / (n / delta).ln(), n / (m / delta).ln());
    items.push(ConditionItem {
        name: "3: m >= C log(n/delta), n >= C log(m/delta)".into(),
        lhs: width_ratio,
        rhs: Some(c),
        pass: width_ratio >= c,
        note: "lhs = min(m / log(n/delta), n / log(m/delta))".into(),
    });

    let mu_req = c * sx * sx * (n / delta).ln();
    items.push(ConditionItem {
        name: "4: |mu|^2 >= C sigma_xi^2 log(n/delta)".into(),
        lhs: mu * mu,
        rhs: Some(mu_req),
        pass: mu * mu >= mu_req,
        note: String::new(),
    });

    let s0_max = f64::min(n.sqrt() / (sx * d), 1.0 / (mu * (m / delta).ln().sqrt())) / c;
    items.push(ConditionItem {
        name: "5: sigma_0 <= C^-1 min{sqrt(n) / (sigma_xi d), 1 / (|mu| sqrt(log(m/delta)))}".into(),
        lhs: cfg.sigma_0,
        rhs: Some(s0_max),
        pass: cfg.sigma_0 <= s0_max,
        note: String::new(),
    });

    let eta_max = f64::min(
        n * n * m * (n / delta).ln().sqrt() / (sx * sx * d.powf(1.5)),
        n / (sx * sx * d),
    ) / c;
    items.push(ConditionItem {
        name: "6: eta <= C^-1 min{n^2 m sqrt(log(n/delta)) / (sigma_xi^2 d^1.5), n / (sigma_xi^2 d)}".into(),
        lhs: cfg.eta,
        rhs: Some(eta_max),
        pass: cfg.eta <= eta_max,
        note: String::new(),
    });

    rep.overall_pass = items.iter().all(|i| i.pass);
    rep.items = items;
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn fig1_scales() {
        let rep = derive_scales(&ExperimentConfig::default());
        assert!(rel(rep.n_snr2, 20.0) < 1e-12);
        assert!(rep.items.is_empty());
        assert!(rel(rep.t1_estimate, 10.0) < 1e-12);
    }

    #[test]
    fn unit_case_and_hand_arithmetic() {
        let cfg = ExperimentConfig { d: 1, n: 1, mu_mag: 1.0, sigma_xi: 1.0, ..Default::default() };
        let rep = derive_scales(&cfg);
        assert_eq!(rep.snr, 1.0);
        assert_eq!(rep.n_snr2, 1.0);

        let cfg = ExperimentConfig { d: 400, n: 50, mu_mag: 4.0, sigma_xi: 0.5, ..Default::default() };
        let rep = derive_scales(&cfg);
        assert!(rel(rep.snr, 0.4) < 1e-12);
        assert!(rel(rep.n_snr2, 8.0) < 1e-12);
    }

    #[test]
    fn snr_identity_and_dimension_scaling() {
        for (d, mu, sx) in [(2000usize, 20.0, 1.0), (37, 0.3, 2.5), (10_000, 7.0, 0.1)] {
            let cfg = ExperimentConfig { d, mu_mag: mu, sigma_xi: sx, ..Default::default() };
            let r = derive_scales(&cfg);
            assert!(rel(r.snr * r.snr * d as f64 * sx * sx, mu * mu) < 1e-12);
            let r2 = derive_scales(&ExperimentConfig { d: 2 * d, ..cfg.clone() });
            assert!(rel(r2.snr * r2.snr, r.snr * r.snr / 2.0) < 1e-12);
            assert_eq!(derive_scales(&cfg), derive_scales(&cfg));
        }
    }

    #[test]
    fn clause_failures() {
        let cfg = ExperimentConfig { tau_plus: 0.6, ..Default::default() };
        assert!(!validate_condition(&cfg, 1.0).items[0].pass);

        let cfg = ExperimentConfig { d: 10, n: 100, ..Default::default() };
        let rep = validate_condition(&cfg, 1.0);
        assert_eq!(rep.items.len(), 6);
        assert!(!rep.items[1].pass);
        assert!(!rep.overall_pass);
    }

    #[test]
    fn fig1_report_is_numeric() {
        let rep = validate_condition(&ExperimentConfig::default(), 1.0);
        assert_eq!(rep.items.len(), 6);
        assert!(rep.items[0].pass);
        for item in &rep.items[1..] {
            assert!(item.lhs.is_finite() && item.rhs.is_some_and(f64::is_finite), "{item:?}");
        }
        assert!(rel(rep.t_star_sigma2, 1000.0) < 1e-12);
        assert!(rel(rep.t_star_sigma1, 1000.0) < 1e-12);
    }

    #[test]
    fn kv_roundtrip_and_unknown_key() {
        let cfg = ExperimentConfig { tau_plus: 0.15, flip_mode: FlipMode::ExactCount, ..Default::default() }
            .with_seed(7);
        let back = ExperimentConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(ExperimentConfig::from_kv_text("bogus = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::from_kv_text("n = 3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::from_kv_text("tau_plus = 0.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::from_kv_text("just words"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn hash_ignores_seeds() {
        let a = ExperimentConfig::default();
        assert_eq!(a.config_hash(), a.clone().with_seed(5).config_hash());
        assert_ne!(a.config_hash(), ExperimentConfig { eta: 0.2, ..a.clone() }.config_hash());
        assert_eq!(a.config_hash().len(), 12);
    }
}
