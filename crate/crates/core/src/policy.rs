//! Conformal switching policies and the eventually-safe auditor.

use serde::{Deserialize, Serialize};

use crate::error::{finite, Error, Result};
use crate::highway::{EgoAction, LaneGaps};
use crate::predictor::DangerSignal;

/// Which base policy is in control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Safe,
    Speed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Safe => "safe",
            Mode::Speed => "speed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub q_safe: f64,
    pub alpha: f64,
    /// `false` gives the No-Quantile baseline.
    pub use_quantile: bool,
}

impl SwitchConfig {
    pub fn new(q_safe: f64, alpha: f64, use_quantile: bool) -> Result<Self> {
        let cfg = Self {
            q_safe,
            alpha,
            use_quantile,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_safe > 0.0 && self.q_safe <= 1.5) {
            return Err(Error::OutOfRange {
                what: "q_safe",
                value: self.q_safe,
                expected: "(0, 1.5]".into(),
            });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::OutOfRange {
                what: "alpha",
                value: self.alpha,
                expected: "(0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// `Safe` iff `danger + quantile >= q_safe` (quantile dropped for the baseline).
pub fn switch_decide(danger: DangerSignal, quantile: f64, config: &SwitchConfig) -> Result<Mode> {
    finite("quantile", quantile)?;
    let buffer = if config.use_quantile { quantile } else { 0.0 };
    Ok(if danger.value() + buffer >= config.q_safe {
        Mode::Safe
    } else {
        Mode::Speed
    })
}

/// Proportional-gain state for the tracking controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainState {
    pub kp: f64,
    pub kp_min: f64,
    pub kp_max: f64,
    pub down_factor: f64,
    pub up_factor: f64,
}

impl GainState {
    pub fn new(kp: f64, kp_min: f64, kp_max: f64) -> Result<Self> {
        if !(kp_min > 0.0 && kp_min <= kp_max && kp_max.is_finite()) {
            return Err(Error::Config(format!(
                "gain bounds [{kp_min}, {kp_max}] are invalid"
            )));
        }
        finite("kp", kp)?;
        Ok(Self {
            kp: kp.clamp(kp_min, kp_max),
            kp_min,
            kp_max,
            down_factor: 0.8,
            up_factor: 1.1,
        })
    }

    /// In-distribution bounds `[1.2, 1.8]`, starting from 1.5.
    pub fn in_distribution() -> Self {
        Self::new(1.5, 1.2, 1.8).expect("valid constants")
    }

    /// Out-of-distribution bounds `[0.8, 4.0]`, starting from 1.5.
    pub fn out_of_distribution() -> Self {
        Self::new(1.5, 0.8, 4.0).expect("valid constants")
    }

    fn scaled(self, factor: f64) -> Self {
        Self {
            kp: (factor * self.kp).clamp(self.kp_min, self.kp_max),
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainDecision {
    SlowDown,
    SpeedUp,
    /// The slow-down condition held but was classified as a false alarm.
    FalsePositive,
}

impl GainDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            GainDecision::SlowDown => "slow_down",
            GainDecision::SpeedUp => "speed_up",
            GainDecision::FalsePositive => "false_positive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainPolicyConfig {
    pub q_safe: f64,
    /// Upper-envelope level above which a low-centered forecast is treated as a false alarm.
    pub false_positive_limit: f64,
    pub use_quantile: bool,
}

impl Default for GainPolicyConfig {
    fn default() -> Self {
        Self {
            q_safe: 0.8,
            false_positive_limit: 1.1,
            use_quantile: true,
        }
    }
}

/// `danger - quantile < 1 - q_safe` and `danger + quantile > limit`.
pub fn false_positive(danger: f64, quantile: f64, q_safe: f64, limit: f64) -> bool {
    danger - quantile < 1.0 - q_safe && danger + quantile > limit
}

/// Multiplicative gain modulation: slow down (x0.8) when the upper envelope
/// reaches `q_safe`, speed up (x1.1) otherwise or on a detected false alarm.
pub fn gain_update(
    danger: DangerSignal,
    quantile: f64,
    gains: GainState,
    config: &GainPolicyConfig,
) -> (GainState, GainDecision) {
    let q = if config.use_quantile && quantile.is_finite() {
        quantile
    } else {
        0.0
    };
    let d = danger.value();
    let decision = if false_positive(d, q, config.q_safe, config.false_positive_limit) {
        GainDecision::FalsePositive
    } else if d + q >= config.q_safe {
        GainDecision::SlowDown
    } else {
        GainDecision::SpeedUp
    };
    let next = match decision {
        GainDecision::SlowDown => gains.scaled(gains.down_factor),
        GainDecision::SpeedUp | GainDecision::FalsePositive => gains.scaled(gains.up_factor),
    };
    (next, decision)
}

/// Thresholds for the scripted highway base policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePolicyConfig {
    /// Minimum lead gap (m) for the safe policy at zero closing speed.
    pub safe_gap: f64,
    /// Extra gap (m) per m/s of closing speed for the safe policy.
    pub safe_headway: f64,
    /// Lead gap (m) above which the speed policy accelerates.
    pub overtake_gap: f64,
}

impl Default for BasePolicyConfig {
    fn default() -> Self {
        Self {
            safe_gap: 15.0,
            safe_headway: 2.0,
            overtake_gap: 30.0,
        }
    }
}

/// Headway keeper: slow down when the lead gap is below the (closing-speed
/// dependent) threshold, otherwise hold speed. Never changes lanes.
pub fn base_policy_safe(gaps: &LaneGaps, cfg: &BasePolicyConfig) -> EgoAction {
    let threshold = cfg.safe_gap + cfg.safe_headway * gaps.closing_speed.max(0.0);
    if gaps.current < threshold {
        EgoAction::SlowDown
    } else {
        EgoAction::Keep
    }
}

/// Accelerate on open road, otherwise move to the adjacent lane with the
/// largest forward gap if it beats the current one, otherwise slow down.
pub fn base_policy_speed(gaps: &LaneGaps, cfg: &BasePolicyConfig) -> EgoAction {
    if gaps.current > cfg.overtake_gap {
        return EgoAction::SpeedUp;
    }
    let best = match (gaps.left, gaps.right) {
        (Some(l), Some(r)) if r > l => Some((EgoAction::LaneRight, r)),
        (Some(l), _) => Some((EgoAction::LaneLeft, l)),
        (None, Some(r)) => Some((EgoAction::LaneRight, r)),
        (None, None) => None,
    };
    match best {
        Some((action, gap)) if gap > gaps.current => action,
        _ => EgoAction::SlowDown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventuallySafeSpec {
    pub q_safe_level: f64,
    pub alpha_safe: f64,
    pub k_window: usize,
}

impl EventuallySafeSpec {
    pub fn new(q_safe_level: f64, alpha_safe: f64, k_window: usize, alpha: f64) -> Result<Self> {
        if k_window == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(alpha_safe < alpha) {
            return Err(Error::Config(format!(
                "alpha_safe ({alpha_safe}) must be below alpha ({alpha})"
            )));
        }
        finite("q_safe_level", q_safe_level)?;
        Ok(Self {
            q_safe_level,
            alpha_safe,
            k_window,
        })
    }
}

/// One quantile/score pair in closed-loop order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditPoint {
    pub quantile: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditWindow {
    pub start: usize,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// False when the log is shorter than `K`.
    pub auditable: bool,
    pub passed: bool,
    /// Maximal runs `(start, len)` with the quantile at or above the level for at least `K` steps.
    pub runs: Vec<(usize, usize)>,
    pub windows_checked: usize,
    pub violations: usize,
    pub worst: Option<AuditWindow>,
}

/// Checks the eventually-safe premise/conclusion over every length-`K`
/// window in which the quantile never drops below `q_safe_level`: the
/// window's miss rate `(1/K) sum 1{score > q}` must not exceed `alpha_safe`.
pub fn audit_eventually_safe(log: &[AuditPoint], spec: &EventuallySafeSpec) -> AuditReport {
    let k = spec.k_window;
    if log.len() < k || k == 0 {
        return AuditReport {
            auditable: false,
            passed: false,
            runs: Vec::new(),
            windows_checked: 0,
            violations: 0,
            worst: None,
        };
    }

    let mut prefix = Vec::with_capacity(log.len() + 1);
    prefix.push(0usize);
    for p in log {
        prefix.push(prefix.last().copied().unwrap_or(0) + usize::from(p.score > p.quantile));
    }

    let mut runs = Vec::new();
    let mut i = 0;
    while i < log.len() {
        if log[i].quantile >= spec.q_safe_level {
            let start = i;
            while i < log.len() && log[i].quantile >= spec.q_safe_level {
                i += 1;
            }
            if i - start >= k {
                runs.push((start, i - start));
            }
        } else {
            i += 1;
        }
    }

    let mut windows_checked = 0;
    let mut violations = 0;
    let mut worst: Option<AuditWindow> = None;
    for &(start, len) in &runs {
        for s in start..=start + len - k {
            let rate = (prefix[s + k] - prefix[s]) as f64 / k as f64;
            windows_checked += 1;
            if rate > spec.alpha_safe {
                violations += 1;
            }
            if worst.is_none_or(|w| rate > w.miss_rate) {
                worst = Some(AuditWindow {
                    start: s,
                    miss_rate: rate,
                });
            }
        }
    }

    AuditReport {
        auditable: true,
        passed: violations == 0,
        runs,
        windows_checked,
        violations,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: f64) -> DangerSignal {
        DangerSignal::new(v).unwrap()
    }

    #[test]
    fn switch_examples() {
        let cfg = SwitchConfig::new(0.8, 0.1, true).unwrap();
        assert_eq!(switch_decide(d(0.5), 0.4, &cfg).unwrap(), Mode::Safe);
        assert_eq!(switch_decide(d(0.5), 0.2, &cfg).unwrap(), Mode::Speed);
        // 0.6 + 0.2 lands on 0.8 exactly in binary as well
        assert_eq!(0.6 + 0.2, 0.8);
        assert_eq!(switch_decide(d(0.6), 0.2, &cfg).unwrap(), Mode::Safe);
        assert!(switch_decide(d(0.6), f64::NAN, &cfg).is_err());
    }

    #[test]
    fn switch_config_bounds() {
        assert!(SwitchConfig::new(0.0, 0.1, true).is_err());
        assert!(SwitchConfig::new(1.5, 0.1, true).is_ok());
        assert!(SwitchConfig::new(1.6, 0.1, true).is_err());
        assert!(SwitchConfig::new(0.5, 1.0, true).is_err());
    }

    #[test]
    fn no_quantile_ignores_quantile() {
        let cfg = SwitchConfig::new(0.8, 0.1, false).unwrap();
        assert_eq!(switch_decide(d(0.5), 0.4, &cfg).unwrap(), Mode::Speed);
    }

    #[test]
    fn gain_examples() {
        let cfg = GainPolicyConfig::default();
        let g = GainState::new(1.5, 1.2, 1.8).unwrap();
        let (next, dec) = gain_update(d(0.7), 0.2, g, &cfg);
        assert_eq!(dec, GainDecision::SlowDown);
        assert!((next.kp - 1.2).abs() < 1e-12);

        let g = GainState::new(1.7, 1.2, 1.8).unwrap();
        let (next, dec) = gain_update(d(0.1), 0.1, g, &cfg);
        assert_eq!(dec, GainDecision::SpeedUp);
        assert_eq!(next.kp, 1.8);

        let g = GainState::new(1.2, 1.2, 1.8).unwrap();
        let (next, _) = gain_update(d(0.9), 0.0, g, &cfg);
        assert_eq!(next.kp, 1.2);
    }

    #[test]
    fn false_positive_examples() {
        assert!(false_positive(0.15, 0.98, 0.8, 1.1));
        assert!(!false_positive(0.9, 0.05, 0.8, 1.1));
        assert!(!false_positive(0.95, 0.2, 0.8, 1.1));
    }

    #[test]
    fn false_positive_speeds_up() {
        let cfg = GainPolicyConfig::default();
        let g = GainState::new(1.5, 0.8, 4.0).unwrap();
        let (next, dec) = gain_update(d(0.15), 0.98, g, &cfg);
        assert_eq!(dec, GainDecision::FalsePositive);
        assert!((next.kp - 1.65).abs() < 1e-12);
    }

    #[test]
    fn gain_bounds_validated() {
        assert!(GainState::new(1.0, 2.0, 1.0).is_err());
        assert!(GainState::new(1.0, 0.0, 1.0).is_err());
        assert_eq!(GainState::new(9.0, 1.2, 1.8).unwrap().kp, 1.8);
    }

    fn gaps(current: f64, left: Option<f64>, right: Option<f64>, closing: f64) -> LaneGaps {
        LaneGaps {
            current,
            left,
            right,
            closing_speed: closing,
            ego_speed: 25.0,
        }
    }

    #[test]
    fn safe_policy_rules() {
        let cfg = BasePolicyConfig::default();
        assert_eq!(
            base_policy_safe(&gaps(5.0, Some(50.0), None, 0.0), &cfg),
            EgoAction::SlowDown
        );
        assert_eq!(
            base_policy_safe(&gaps(f64::INFINITY, None, None, 0.0), &cfg),
            EgoAction::Keep
        );
        assert_eq!(
            base_policy_safe(&gaps(15.0, None, None, 0.0), &cfg),
            EgoAction::Keep
        );
        // closing at 10 m/s raises the threshold to 35 m
        assert_eq!(
            base_policy_safe(&gaps(30.0, None, None, 10.0), &cfg),
            EgoAction::SlowDown
        );
    }

    #[test]
    fn speed_policy_rules() {
        let cfg = BasePolicyConfig::default();
        assert_eq!(
            base_policy_speed(&gaps(40.0, Some(5.0), Some(5.0), 0.0), &cfg),
            EgoAction::SpeedUp
        );
        assert_eq!(
            base_policy_speed(&gaps(20.0, Some(25.0), Some(60.0), 0.0), &cfg),
            EgoAction::LaneRight
        );
        assert_eq!(
            base_policy_speed(&gaps(20.0, Some(10.0), None, 0.0), &cfg),
            EgoAction::SlowDown
        );
        assert_eq!(
            base_policy_speed(&gaps(30.0, None, None, 0.0), &cfg),
            EgoAction::SlowDown
        );
    }

    fn pts(pairs: &[(f64, f64)]) -> Vec<AuditPoint> {
        pairs
            .iter()
            .map(|&(quantile, score)| AuditPoint { quantile, score })
            .collect()
    }

    #[test]
    fn audit_all_covered() {
        let log = pts(&vec![(0.9, 0.1); 60]);
        let spec = EventuallySafeSpec::new(0.8, 0.05, 50, 0.1).unwrap();
        let rep = audit_eventually_safe(&log, &spec);
        assert!(rep.auditable && rep.passed);
        assert_eq!(rep.runs, vec![(0, 60)]);
        assert_eq!(rep.windows_checked, 11);
        assert_eq!(rep.worst.unwrap().miss_rate, 0.0);
    }

    #[test]
    fn audit_boundary_is_inclusive() {
        // one miss in ten steps, alpha_safe = 0.1
        let mut pairs = vec![(0.9, 0.0); 10];
        pairs[3].1 = 2.0;
        let spec = EventuallySafeSpec::new(0.8, 0.1, 10, 0.2).unwrap();
        let rep = audit_eventually_safe(&pts(&pairs), &spec);
        assert!(rep.passed);
        assert_eq!(rep.worst.unwrap().miss_rate, 0.1);

        pairs[4].1 = 2.0;
        let rep = audit_eventually_safe(&pts(&pairs), &spec);
        assert!(!rep.passed);
        assert_eq!(rep.violations, 1);
    }

    #[test]
    fn audit_short_log_not_auditable() {
        let spec = EventuallySafeSpec::new(0.8, 0.05, 50, 0.1).unwrap();
        let rep = audit_eventually_safe(&pts(&[(1.0, 0.0); 49]), &spec);
        assert!(!rep.auditable);
        assert!(!rep.passed);
    }

    #[test]
    fn audit_spec_validation() {
        assert!(EventuallySafeSpec::new(0.8, 0.1, 50, 0.1).is_err());
        assert!(EventuallySafeSpec::new(0.8, 0.05, 0, 0.1).is_err());
    }

    #[test]
    fn low_quantile_runs_are_ignored() {
        let spec = EventuallySafeSpec::new(0.8, 0.05, 5, 0.1).unwrap();
        let rep = audit_eventually_safe(&pts(&[(0.1, 5.0); 20]), &spec);
        assert!(rep.auditable && rep.passed);
        assert!(rep.runs.is_empty());
        assert_eq!(rep.windows_checked, 0);
    }
}
