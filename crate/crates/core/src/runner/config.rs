//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! schema_version = 1
//! scenario = highway
//! n_rollouts = 100
//! q_safe_grid = 0.6, 0.7, 0.8
//! ```
//!
//! Unknown keys, duplicate keys and a missing or foreign `schema_version`
//! are rejected. Every key has a default except `schema_version`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::conformal::{EtaMode, ScoreKind, TrackerConfig};
use crate::error::{Error, Result};
use crate::highway::HighwayConfig;
use crate::policy::{BasePolicyConfig, GainState};
use crate::track::{TrackConfig, TrajectoryKind};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Highway,
    Track,
    Scorestream,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Highway => "highway",
            Scenario::Track => "track",
            Scenario::Scorestream => "scorestream",
        }
    }
}

/// Which controller drives a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Switching / gain modulation using the conformal quantile.
    Quantile,
    /// Same rule with the quantile forced to zero.
    NoQuantile,
    /// Pure safe base policy (highway).
    Safe,
    /// Pure speed base policy (highway).
    Speed,
    /// Per-episode random choice between the two base policies (data collection).
    Mixture,
    /// Constant gain (track data collection).
    Fixed,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Quantile => "quantile",
            Method::NoQuantile => "no_quantile",
            Method::Safe => "safe",
            Method::Speed => "speed",
            Method::Mixture => "mixture",
            Method::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "quantile" => Method::Quantile,
            "no_quantile" => Method::NoQuantile,
            "safe" => Method::Safe,
            "speed" => Method::Speed,
            "mixture" => Method::Mixture,
            "fixed" => Method::Fixed,
            _ => return None,
        })
    }

    pub fn switching(self) -> bool {
        matches!(self, Method::Quantile | Method::NoQuantile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Explicit rollout seeds; when empty, `n_rollouts` consecutive seeds from the root seed.
    pub seeds: Vec<u64>,
    pub n_rollouts: usize,
    pub methods: Vec<Method>,

    pub alpha: f64,
    pub eta_adaptive: bool,
    pub eta: f64,
    pub q_init: f64,
    /// Carry the tracked quantile from one rollout to the next (in seed order)
    /// instead of restarting every rollout at `q_init`.
    pub carry_quantile: bool,
    pub score_kind: ScoreKind,

    pub q_safe: f64,
    pub q_safe_grid: Vec<f64>,
    pub false_positive_limit: f64,

    pub v_min: f64,
    pub v_max: f64,
    /// Decision step at which the speed range widens to `shift_v_max`.
    pub shift_step: Option<usize>,
    pub shift_v_max: f64,
    pub safe_gap: f64,
    pub overtake_gap: f64,

    pub kp: f64,
    pub kp_min: f64,
    pub kp_max: f64,
    pub trajectory: TrajectoryKind,

    pub predictor: Option<PathBuf>,
    /// Models used by the `verify` audit rollouts; ridge forecasters are fitted when absent.
    pub highway_predictor: Option<PathBuf>,
    pub track_predictor: Option<PathBuf>,
    pub history: usize,
    pub horizon: usize,
    pub train_rollouts: usize,
    pub train_epochs: usize,
    pub train_batch: usize,
    pub zigzag_count: usize,
    pub model_kind: ModelKind,
    pub ridge: f64,

    pub window: usize,
    pub traces: Option<PathBuf>,

    pub verify_streams: usize,
    pub verify_len: usize,
    pub verify_eta: f64,
    pub verify_alpha: f64,
    /// Known bound B on |score|: seeds the adaptive step size and the verify-suite streams.
    pub score_bound: f64,
    pub audit_rollouts: usize,
    pub audit_k: usize,
    pub sabotage: bool,

    pub write_traces: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Linear,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Highway,
            seeds: Vec::new(),
            n_rollouts: 100,
            methods: vec![Method::Quantile],
            alpha: 0.1,
            eta_adaptive: true,
            eta: 0.1,
            q_init: 0.0,
            carry_quantile: false,
            score_kind: ScoreKind::Signed,
            q_safe: 0.8,
            q_safe_grid: Vec::new(),
            false_positive_limit: 1.1,
            v_min: 20.0,
            v_max: 30.0,
            shift_step: None,
            shift_v_max: 50.0,
            safe_gap: BasePolicyConfig::default().safe_gap,
            overtake_gap: BasePolicyConfig::default().overtake_gap,
            kp: 1.5,
            kp_min: 1.2,
            kp_max: 1.8,
            trajectory: TrajectoryKind::Hexagon,
            predictor: None,
            highway_predictor: None,
            track_predictor: None,
            history: 5,
            horizon: 3,
            train_rollouts: 300,
            train_epochs: 100,
            train_batch: 1,
            zigzag_count: 43,
            model_kind: ModelKind::Mlp,
            ridge: 1e-3,
            window: 5,
            traces: None,
            verify_streams: 1000,
            verify_len: 500,
            verify_eta: 0.1,
            verify_alpha: 0.1,
            score_bound: 1.0,
            audit_rollouts: 20,
            audit_k: 50,
            sabotage: false,
            write_traces: true,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::parse(line, format!("invalid value for {key}: {raw:?}")))
}

fn float(line: usize, key: &str, raw: &str) -> Result<f64> {
    let v: f64 = value(line, key, raw)?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{key} must be finite")));
    }
    Ok(v)
}

fn list<T>(line: usize, key: &str, raw: &str, f: impl Fn(usize, &str, &str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(line, key, s))
        .collect()
}

fn boolean(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::parse(line, format!("invalid boolean for {key}: {raw:?}"))),
    }
}

/// Parses `a..b` (half-open) or a comma list.
fn seeds(line: usize, raw: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = value(line, "seeds", a.trim())?;
        let b: u64 = value(line, "seeds", b.trim())?;
        if b <= a || b - a > 1_000_000 {
            return Err(Error::parse(line, format!("bad seed range {raw:?}")));
        }
        return Ok((a..b).collect());
    }
    list(line, "seeds", raw, |l, k, s| value(l, k, s))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut version = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(line, "expected `key = value`"))?;
            let (key, raw) = (key.trim(), raw.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(Error::parse(line, format!("duplicate key {key} (first at line {prev})")));
            }
            match key {
                "schema_version" => version = Some(value::<u32>(line, key, raw)?),
                "scenario" => {
                    cfg.scenario = match raw {
                        "highway" => Scenario::Highway,
                        "track" => Scenario::Track,
                        "scorestream" => Scenario::Scorestream,
                        _ => return Err(Error::parse(line, format!("unknown scenario {raw:?}"))),
                    }
                }
                "seeds" => cfg.seeds = seeds(line, raw)?,
                "n_rollouts" => cfg.n_rollouts = value(line, key, raw)?,
                "methods" | "method" => {
                    cfg.methods = list(line, key, raw, |l, _, s| {
                        Method::parse(s).ok_or_else(|| Error::parse(l, format!("unknown method {s:?}")))
                    })?
                }
                "alpha" => cfg.alpha = float(line, key, raw)?,
                "eta_mode" => {
                    cfg.eta_adaptive = match raw {
                        "adaptive" => true,
                        "fixed" => false,
                        _ => return Err(Error::parse(line, format!("unknown eta_mode {raw:?}"))),
                    }
                }
                "eta" => cfg.eta = float(line, key, raw)?,
                "q_init" => cfg.q_init = float(line, key, raw)?,
                "carry_quantile" => cfg.carry_quantile = boolean(line, key, raw)?,
                "score_kind" => {
                    cfg.score_kind = match raw {
                        "signed" => ScoreKind::Signed,
                        "absolute" => ScoreKind::Absolute,
                        _ => return Err(Error::parse(line, format!("unknown score_kind {raw:?}"))),
                    }
                }
                "q_safe" => cfg.q_safe = float(line, key, raw)?,
                "q_safe_grid" => cfg.q_safe_grid = list(line, key, raw, float)?,
                "false_positive_limit" => cfg.false_positive_limit = float(line, key, raw)?,
                "v_min" => cfg.v_min = float(line, key, raw)?,
                "v_max" => cfg.v_max = float(line, key, raw)?,
                "shift_step" => cfg.shift_step = Some(value(line, key, raw)?),
                "shift_v_max" => cfg.shift_v_max = float(line, key, raw)?,
                "safe_gap" => cfg.safe_gap = float(line, key, raw)?,
                "overtake_gap" => cfg.overtake_gap = float(line, key, raw)?,
                "kp" => cfg.kp = float(line, key, raw)?,
                "kp_min" => cfg.kp_min = float(line, key, raw)?,
                "kp_max" => cfg.kp_max = float(line, key, raw)?,
                "trajectory" => {
                    cfg.trajectory = TrajectoryKind::parse(raw)
                        .ok_or_else(|| Error::parse(line, format!("unknown trajectory {raw:?}")))?
                }
                "predictor" => cfg.predictor = Some(PathBuf::from(raw)),
                "highway_predictor" => cfg.highway_predictor = Some(PathBuf::from(raw)),
                "track_predictor" => cfg.track_predictor = Some(PathBuf::from(raw)),
                "history" => cfg.history = value(line, key, raw)?,
                "horizon" => cfg.horizon = value(line, key, raw)?,
                "train_rollouts" => cfg.train_rollouts = value(line, key, raw)?,
                "train_epochs" => cfg.train_epochs = value(line, key, raw)?,
                "train_batch" => cfg.train_batch = value(line, key, raw)?,
                "zigzag_count" => cfg.zigzag_count = value(line, key, raw)?,
                "model" => {
                    cfg.model_kind = match raw {
                        "mlp" => ModelKind::Mlp,
                        "linear" => ModelKind::Linear,
                        _ => return Err(Error::parse(line, format!("unknown model {raw:?}"))),
                    }
                }
                "ridge" => cfg.ridge = float(line, key, raw)?,
                "window" => cfg.window = value(line, key, raw)?,
                "traces" => cfg.traces = Some(PathBuf::from(raw)),
                "verify_streams" => cfg.verify_streams = value(line, key, raw)?,
                "verify_len" => cfg.verify_len = value(line, key, raw)?,
                "verify_eta" => cfg.verify_eta = float(line, key, raw)?,
                "verify_alpha" => cfg.verify_alpha = float(line, key, raw)?,
                "score_bound" => cfg.score_bound = float(line, key, raw)?,
                "audit_rollouts" => cfg.audit_rollouts = value(line, key, raw)?,
                "audit_k" => cfg.audit_k = value(line, key, raw)?,
                "sabotage" => cfg.sabotage = boolean(line, key, raw)?,
                "write_traces" => cfg.write_traces = boolean(line, key, raw)?,
                _ => return Err(Error::parse(line, format!("unknown key {key:?}"))),
            }
        }
        match version {
            None => return Err(Error::Config("missing schema_version".into())),
            Some(CONFIG_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version {v} not supported (expected {CONFIG_SCHEMA_VERSION})"
                )))
            }
        }
        cfg.apply_scenario_defaults(|k| seen.contains_key(k));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for `scenario`, as a config file naming only the scenario would give.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let mut cfg = Self {
            scenario,
            ..Self::default()
        };
        cfg.apply_scenario_defaults(|_| false);
        cfg
    }

    /// Track runs default to 80% coverage, a 2-step horizon and gain modulation.
    fn apply_scenario_defaults(&mut self, explicit: impl Fn(&str) -> bool) {
        if self.scenario != Scenario::Track {
            return;
        }
        if !explicit("alpha") {
            self.alpha = 0.2;
        }
        if !explicit("horizon") {
            self.horizon = 2;
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must be in (0,1), got {}", self.alpha));
        }
        if !(self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.methods.is_empty() {
            return fail("methods must be nonempty".into());
        }
        if self.seeds.is_empty() && self.n_rollouts == 0 {
            return fail("need at least one rollout".into());
        }
        if self.q_safe_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("q_safe_grid must be sorted strictly ascending".into());
        }
        for &q in self.q_safe_grid.iter().chain(std::iter::once(&self.q_safe)) {
            if !(q > 0.0 && q <= 1.5) {
                return fail(format!("q_safe {q} outside (0, 1.5]"));
            }
        }
        if !(self.v_min > 0.0 && self.v_max >= self.v_min && self.shift_v_max >= self.v_min) {
            return fail("speed range must satisfy 0 < v_min <= v_max, shift_v_max".into());
        }
        if !(self.kp_min > 0.0 && self.kp_min <= self.kp && self.kp <= self.kp_max) {
            return fail("gains must satisfy 0 < kp_min <= kp <= kp_max".into());
        }
        if self.history == 0 || self.window == 0 || self.audit_k == 0 || self.train_batch == 0 {
            return fail("history, window, audit_k and train_batch must be positive".into());
        }
        if !(self.score_bound > 0.0 && self.verify_eta > 0.0 && self.verify_alpha > 0.0 && self.verify_alpha < 1.0) {
            return fail("verify suite needs score_bound > 0, verify_eta > 0, verify_alpha in (0,1)".into());
        }
        Ok(())
    }

    /// Rollout seeds, defaulting to `n_rollouts` consecutive seeds from `root`.
    pub fn rollout_seeds(&self, root: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.n_rollouts as u64).map(|i| root.wrapping_add(i)).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Sweep grid, defaulting to the single `q_safe`.
    pub fn grid(&self) -> Vec<f64> {
        if self.q_safe_grid.is_empty() {
            vec![self.q_safe]
        } else {
            self.q_safe_grid.clone()
        }
    }

    pub fn tracker(&self) -> Result<TrackerConfig> {
        let mode = if self.eta_adaptive {
            EtaMode::Adaptive { factor: self.eta }
        } else {
            EtaMode::Fixed(self.eta)
        };
        let cfg = TrackerConfig::new(self.alpha, mode)?
            .with_q_init(self.q_init)
            .with_bound(self.score_bound)
            .with_score_kind(self.score_kind);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn highway(&self) -> Result<HighwayConfig> {
        let cfg = HighwayConfig::default().with_speed_range(self.v_min, self.v_max);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base_policy(&self) -> BasePolicyConfig {
        BasePolicyConfig {
            safe_gap: self.safe_gap,
            overtake_gap: self.overtake_gap,
            ..BasePolicyConfig::default()
        }
    }

    pub fn track(&self) -> TrackConfig {
        TrackConfig::default()
    }

    pub fn gains(&self) -> Result<GainState> {
        GainState::new(self.kp, self.kp_min, self.kp_max)
    }
}
