//! Online conformal quantile tracking.
//!
//! The tracker maintains a radius `q_t` for prediction sets of the form
//! `C_t = { y : s(x_t, y) <= q_t }` and corrects it after every observed
//! score with a proportional step:
//!
//! ```text
//! err_t   = 1{ s_t > q_t }
//! q_{t+1} = q_t + eta_t * (err_t - alpha)
//! ```
//!
//! No exchangeability is assumed. For scores in `[0, B]` and a fixed step
//! `eta`, every window of `W` consecutive steps satisfies
//!
//! ```text
//! (1/W) * sum err_t <= alpha + (B + eta) / (eta * W)
//! ```
//!
//! for every realization of the scores, adversarial ones included.
//! [`verify_theorem`] checks that inequality exhaustively over all windows of
//! a recorded run.

use serde::{Deserialize, Serialize};

use crate::error::{finite, Error, Result};

/// How residuals are turned into nonconformity scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreKind {
    /// `truth - prediction`; the set is the upper envelope `(-inf, f(x) + q]`.
    #[default]
    Signed,
    /// `|truth - prediction|`; the set is the band `[f(x) - q, f(x) + q]`.
    Absolute,
}

impl ScoreKind {
    pub fn score(self, prediction: f64, truth: f64) -> Result<f64> {
        finite("prediction", prediction)?;
        finite("truth", truth)?;
        Ok(match self {
            ScoreKind::Signed => truth - prediction,
            ScoreKind::Absolute => (truth - prediction).abs(),
        })
    }
}

/// Signed one-sided residual `truth - prediction`.
pub fn score_one_sided(prediction: f64, truth: f64) -> Result<f64> {
    ScoreKind::Signed.score(prediction, truth)
}

/// Step-size rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaMode {
    Fixed(f64),
    /// `eta_t = factor * b_hat_t`, with `b_hat_t` the running score bound.
    Adaptive { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Target miscoverage rate.
    pub alpha: f64,
    pub eta_mode: EtaMode,
    pub q_init: f64,
    /// Known upper bound `B` on score magnitudes, if any.
    pub score_bound_hint: Option<f64>,
    pub score_kind: ScoreKind,
}

impl TrackerConfig {
    pub fn new(alpha: f64, eta_mode: EtaMode) -> Result<Self> {
        let cfg = Self {
            alpha,
            eta_mode,
            q_init: 0.0,
            score_bound_hint: None,
            score_kind: ScoreKind::Signed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    #[must_use]
    pub fn with_q_init(mut self, q_init: f64) -> Self {
        self.q_init = q_init;
        self
    }

    #[must_use]
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.score_bound_hint = Some(bound);
        self
    }

    #[must_use]
    pub fn with_score_kind(mut self, kind: ScoreKind) -> Self {
        self.score_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::OutOfRange {
                what: "alpha",
                value: self.alpha,
                expected: "(0, 1)".into(),
            });
        }
        match self.eta_mode {
            EtaMode::Fixed(eta) if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::OutOfRange {
                    what: "eta",
                    value: eta,
                    expected: "> 0".into(),
                })
            }
            EtaMode::Adaptive { factor } if !(factor > 0.0 && factor.is_finite()) => {
                return Err(Error::OutOfRange {
                    what: "adaptive eta factor",
                    value: factor,
                    expected: "> 0".into(),
                })
            }
            _ => {}
        }
        finite("q_init", self.q_init)?;
        if let Some(b) = self.score_bound_hint {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::OutOfRange {
                    what: "score bound",
                    value: b,
                    expected: "finite and >= 0".into(),
                });
            }
        }
        Ok(())
    }
}

/// Live tracker state plus the full per-step history.
///
/// Entry `i` of every history vector describes step `i`: the score that
/// arrived, the quantile that was current when it arrived, the step size
/// used, the miscoverage bit, and the score bound after the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub q: f64,
    pub t: usize,
    pub b_hat: f64,
    pub q_init: f64,
    pub err_history: Vec<bool>,
    pub score_history: Vec<f64>,
    pub q_history: Vec<f64>,
    pub eta_history: Vec<f64>,
    pub b_hat_history: Vec<f64>,
}

/// What one call to [`TrackerState::update`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerStep {
    pub score: f64,
    /// Quantile that was current when the score arrived.
    pub q_before: f64,
    pub q_after: f64,
    pub eta: f64,
    pub err: bool,
}

pub(crate) type UpdateRule = fn(q: f64, eta: f64, err: bool, alpha: f64) -> f64;

pub(crate) fn standard_rule(q: f64, eta: f64, err: bool, alpha: f64) -> f64 {
    q + eta * (f64::from(u8::from(err)) - alpha)
}

impl TrackerState {
    pub fn new(config: &TrackerConfig) -> Self {
        Self {
            q: config.q_init,
            t: 0,
            b_hat: config.score_bound_hint.unwrap_or(0.0),
            q_init: config.q_init,
            err_history: Vec::new(),
            score_history: Vec::new(),
            q_history: Vec::new(),
            eta_history: Vec::new(),
            b_hat_history: Vec::new(),
        }
    }

    /// Feeds one score. A non-finite score is rejected and leaves the state untouched.
    pub fn update(&mut self, config: &TrackerConfig, score: f64) -> Result<TrackerStep> {
        self.update_with_rule(config, score, standard_rule)
    }

    pub(crate) fn update_with_rule(
        &mut self,
        config: &TrackerConfig,
        score: f64,
        rule: UpdateRule,
    ) -> Result<TrackerStep> {
        finite("score", score)?;
        let err = score > self.q;
        self.b_hat = self.b_hat.max(score.abs());
        let eta = match config.eta_mode {
            EtaMode::Fixed(eta) => eta,
            EtaMode::Adaptive { factor } => factor * self.b_hat,
        };
        let q_before = self.q;
        self.q = rule(q_before, eta, err, config.alpha);

        self.err_history.push(err);
        self.score_history.push(score);
        self.q_history.push(q_before);
        self.eta_history.push(eta);
        self.b_hat_history.push(self.b_hat);
        self.t += 1;

        Ok(TrackerStep {
            score,
            q_before,
            q_after: self.q,
            eta,
            err,
        })
    }

    /// Coverage statistics over steps `[t0, t0 + w)`.
    pub fn coverage_window(&self, alpha: f64, t0: usize, w: usize) -> Result<CoverageReport> {
        if w == 0 || t0.checked_add(w).is_none_or(|end| end > self.t) {
            return Err(Error::Window {
                t0,
                w,
                len: self.t,
            });
        }
        let range = t0..t0 + w;
        let misses = self.err_history[range.clone()].iter().filter(|&&e| e).count();
        let etas = &self.eta_history[range.clone()];
        let eta_min = etas.iter().copied().fold(f64::INFINITY, f64::min);
        let eta_max = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // b_hat is nondecreasing, so the window maximum is its last entry.
        let b_hat_max = self.b_hat_history[t0 + w - 1];
        Ok(CoverageReport {
            window_start: t0,
            window_len: w,
            misses,
            err_rate: misses as f64 / w as f64,
            bound: theorem_bound(alpha, b_hat_max + eta_max, eta_min, w),
        })
    }

    /// `q_T - q_0 - sum_t eta_t (err_t - alpha)`, summed directly over the log.
    pub fn telescoping_residual(&self, alpha: f64) -> f64 {
        let increments: f64 = self
            .eta_history
            .iter()
            .zip(&self.err_history)
            .map(|(eta, &err)| eta * (f64::from(u8::from(err)) - alpha))
            .sum();
        self.q - self.q_init - increments
    }

    /// Fraction of recorded steps that were covered.
    pub fn coverage(&self) -> f64 {
        if self.t == 0 {
            return 1.0;
        }
        1.0 - self.err_history.iter().filter(|&&e| e).count() as f64 / self.t as f64
    }
}

/// `alpha + span / (eta_min * w)`; infinite when `eta_min` is zero.
fn theorem_bound(alpha: f64, span: f64, eta_min: f64, w: usize) -> f64 {
    if eta_min <= 0.0 {
        return f64::INFINITY;
    }
    alpha + span / (eta_min * w as f64)
}

/// Owns a config and its state.
#[derive(Debug, Clone)]
pub struct QuantileTracker {
    config: TrackerConfig,
    state: TrackerState,
}

impl QuantileTracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let state = TrackerState::new(&config);
        Ok(Self { config, state })
    }

    pub fn quantile(&self) -> f64 {
        self.state.q
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn into_state(self) -> TrackerState {
        self.state
    }

    pub fn observe(&mut self, score: f64) -> Result<TrackerStep> {
        self.state.update(&self.config, score)
    }

    /// Scores `truth` against `prediction` with the configured score kind and updates.
    pub fn observe_pair(&mut self, prediction: f64, truth: f64) -> Result<TrackerStep> {
        let score = self.config.score_kind.score(prediction, truth)?;
        self.observe(score)
    }

    pub fn prediction_set(&self, center: f64) -> Result<PredictionSet> {
        PredictionSet::new(center, self.state.q, self.config.score_kind)
    }

    pub fn coverage_window(&self, t0: usize, w: usize) -> Result<CoverageReport> {
        self.state.coverage_window(self.config.alpha, t0, w)
    }
}

/// Pure-function form of one tracker step.
pub fn update_quantile(
    state: &TrackerState,
    config: &TrackerConfig,
    score: f64,
) -> Result<TrackerState> {
    let mut next = state.clone();
    next.update(config, score)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub center: f64,
    pub quantile: f64,
    pub kind: ScoreKind,
}

impl PredictionSet {
    pub fn new(center: f64, quantile: f64, kind: ScoreKind) -> Result<Self> {
        finite("center", center)?;
        finite("quantile", quantile)?;
        Ok(Self {
            center,
            quantile,
            kind,
        })
    }

    pub fn upper(&self) -> f64 {
        self.center + self.quantile
    }

    pub fn lower(&self) -> f64 {
        match self.kind {
            ScoreKind::Signed => f64::NEG_INFINITY,
            ScoreKind::Absolute => self.center - self.quantile,
        }
    }

    pub fn contains(&self, y: f64) -> Result<bool> {
        Ok(self.kind.score(self.center, y)? <= self.quantile)
    }
}

/// Membership of `y` in `set`.
pub fn set_membership(set: &PredictionSet, y: f64) -> Result<bool> {
    set.contains(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub window_start: usize,
    pub window_len: usize,
    pub misses: usize,
    pub err_rate: f64,
    pub bound: f64,
}

impl CoverageReport {
    pub fn slack(&self) -> f64 {
        self.bound - self.err_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCheck {
    pub passed: bool,
    pub windows_checked: usize,
    pub violations: usize,
    /// Window with the smallest slack, if any window exists.
    pub worst: Option<CoverageReport>,
    pub telescoping_residual: f64,
    pub state: TrackerState,
}

/// Runs the tracker over `scores` and checks the windowed miscoverage bound
/// for every `(t0, w)` with `t0 + w <= T`.
///
/// The scores must lie in `[0, B]` where `B` is `config.score_bound_hint`.
pub fn verify_theorem(scores: &[f64], config: &TrackerConfig) -> Result<TheoremCheck> {
    verify_theorem_with_rule(scores, config, standard_rule)
}

pub(crate) fn verify_theorem_with_rule(
    scores: &[f64],
    config: &TrackerConfig,
    rule: UpdateRule,
) -> Result<TheoremCheck> {
    config.validate()?;
    let bound = config
        .score_bound_hint
        .ok_or_else(|| Error::Config("theorem check needs a known score bound B".into()))?;
    for &s in scores {
        if !(0.0..=bound).contains(&s) {
            return Err(Error::OutOfRange {
                what: "score",
                value: s,
                expected: format!("[0, {bound}]"),
            });
        }
    }
    let mut state = TrackerState::new(config);
    for &s in scores {
        state.update_with_rule(config, s, rule)?;
    }
    Ok(check_windows(&state, config.alpha, bound))
}

/// Exhaustive window scan over a recorded run with score bound `bound`.
///
/// The quantile of a fixed-step tracker never leaves
/// `[min(q_0, -eta*alpha), max(q_0, B + eta*(1 - alpha))]`, so the span term
/// is the width of that interval. It equals `B + eta` whenever `q_0` starts
/// inside it (e.g. `q_0 = 0`).
pub fn check_windows(state: &TrackerState, alpha: f64, bound: f64) -> TheoremCheck {
    let n = state.t;
    let q0 = state.q_init;

    let mut windows_checked = 0;
    let mut violations = 0;
    let mut worst: Option<CoverageReport> = None;
    for t0 in 0..n {
        let mut misses = 0usize;
        let mut eta_min = f64::INFINITY;
        let mut eta_max = f64::NEG_INFINITY;
        for end in t0..n {
            misses += usize::from(state.err_history[end]);
            eta_min = eta_min.min(state.eta_history[end]);
            eta_max = eta_max.max(state.eta_history[end]);
            let w = end - t0 + 1;
            let span = q0.max(bound + eta_max * (1.0 - alpha)) - q0.min(-eta_max * alpha);
            let report = CoverageReport {
                window_start: t0,
                window_len: w,
                misses,
                err_rate: misses as f64 / w as f64,
                bound: theorem_bound(alpha, span, eta_min, w),
            };
            windows_checked += 1;
            if report.err_rate > report.bound {
                violations += 1;
            }
            if worst.is_none_or(|best| report.slack() < best.slack()) {
                worst = Some(report);
            }
        }
    }

    TheoremCheck {
        passed: violations == 0,
        windows_checked,
        violations,
        worst,
        telescoping_residual: state.telescoping_residual(alpha),
        state: state.clone(),
    }
}
