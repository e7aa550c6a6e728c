//! Closed-loop rollouts for both simulators.
//!
//! Each step `t`: observe, forecast the label `horizon` steps ahead, decide
//! with the current quantile `q_t`, then score the forecast issued at
//! `t - horizon` against the label observed now (err uses the same `q_t`) and
//! update the tracker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conformal::{QuantileTracker, TrackerConfig};
use crate::error::Result;
use crate::highway::{EgoAction, HighwayConfig, HighwayWorld};
use crate::policy::{
    base_policy_safe, base_policy_speed, gain_update, switch_decide, AuditPoint, BasePolicyConfig,
    GainPolicyConfig, GainState, Mode, SwitchConfig,
};
use crate::predictor::{squash_distance, ObservationHistory, Predictor};
use crate::runner::config::Method;
use crate::runner::trace::{StepLog, TRACE_SCHEMA_VERSION};
use crate::track::{make_trajectory, wrap_angle, Command, Pose, TrackConfig, TrackPlan, TrajectoryKind};

/// Named random substreams derived from one rollout seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Noise = 2,
    Adversary = 3,
    Init = 4,
    Policy = 5,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// World seed for a rollout (the highway layout draws from its own generator).
pub fn world_seed(seed: u64) -> u64 {
    substream(seed, Stream::World).gen()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub rows: Vec<StepLog>,
    /// Seconds survived (highway) or to completion (track).
    pub duration: f64,
    pub mean_speed: f64,
    pub collided: bool,
    pub tracking_error: Option<f64>,
    pub cross_track_rms: Option<f64>,
    pub scored: usize,
    pub misses: usize,
    pub audit: Vec<AuditPoint>,
    /// Quantile at every decision step.
    pub quantiles: Vec<f64>,
    /// Quantile after the last scored step.
    pub final_quantile: f64,
    /// Per-step observations and extras, and per-step labels (one longer at termination).
    pub observations: Vec<Vec<f64>>,
    pub extras: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl EpisodeResult {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            rows: Vec::new(),
            duration: 0.0,
            mean_speed: 0.0,
            collided: false,
            tracking_error: None,
            cross_track_rms: None,
            scored: 0,
            misses: 0,
            audit: Vec::new(),
            quantiles: Vec::new(),
            final_quantile: f64::NAN,
            observations: Vec::new(),
            extras: Vec::new(),
            labels: Vec::new(),
        }
    }
}

/// Conformal bookkeeping shared by both loops: pending forecasts keyed by issue step.
struct Scorer {
    tracker: QuantileTracker,
    pending: Vec<Option<f64>>,
    horizon: usize,
}

impl Scorer {
    fn new(cfg: TrackerConfig, horizon: usize) -> Result<Self> {
        Ok(Self {
            tracker: QuantileTracker::new(cfg)?,
            pending: Vec::new(),
            horizon,
        })
    }

    fn issue(&mut self, step: usize, forecast: Option<f64>) {
        if self.pending.len() <= step {
            self.pending.resize(step + 1, None);
        }
        self.pending[step] = forecast;
    }

    /// Scores the forecast due at `step` against `label`; returns `(score, err)`.
    fn arrive(&mut self, step: usize, label: f64, out: &mut EpisodeResult) -> Result<Option<(f64, bool)>> {
        let Some(issued) = step.checked_sub(self.horizon) else {
            return Ok(None);
        };
        let Some(forecast) = self.pending.get(issued).copied().flatten() else {
            return Ok(None);
        };
        let q = self.tracker.quantile();
        let st = self.tracker.observe_pair(forecast, label)?;
        out.scored += 1;
        out.misses += usize::from(st.err);
        out.audit.push(AuditPoint { quantile: q, score: st.score });
        Ok(Some((st.score, st.err)))
    }
}

#[derive(Debug, Clone)]
pub struct HighwayRun<'a> {
    pub config: HighwayConfig,
    pub base: BasePolicyConfig,
    pub tracker: TrackerConfig,
    pub predictor: Option<&'a Predictor>,
    pub method: Method,
    pub q_safe: f64,
    pub history: usize,
    pub horizon: usize,
    /// `(decision step, new v_max)`.
    pub shift: Option<(usize, f64)>,
    pub keep_rows: bool,
    pub keep_data: bool,
}

impl HighwayRun<'_> {
    pub fn run(&self, seed: u64) -> Result<EpisodeResult> {
        let mut world = HighwayWorld::reset(self.config.clone(), world_seed(seed))?;
        let mut policy_rng = substream(seed, Stream::Policy);
        let mut scorer = Scorer::new(self.tracker.clone(), self.horizon)?;
        let mut history = ObservationHistory::new(self.history);
        let switch = SwitchConfig::new(self.q_safe, self.tracker.alpha, self.method == Method::Quantile)?;
        let mut out = EpisodeResult::new(seed);

        for step in 0.. {
            if let Some((at, v_max)) = self.shift {
                if step == at {
                    world.shift_speed_range(v_max)?;
                }
            }
            let nearest = world.nearest_distance();
            let label = squash_distance(nearest)?.value();
            if self.keep_data {
                out.labels.push(label);
            }
            let q = scorer.tracker.quantile();
            let terminated = world.is_terminated();

            let (forecast, mode, action) = if terminated {
                (None, None, None)
            } else {
                let obs = world.observe();
                history.push(obs.clone());
                if self.keep_data {
                    out.observations.push(obs);
                    out.extras.push(Vec::new());
                }
                let forecast = match self.predictor {
                    Some(p) if history.is_ready() => Some(p.predict(&history.window(Vec::new())?.to_input())?),
                    _ => None,
                };
                let mode = match (self.method, forecast) {
                    (Method::Safe, _) => Some(Mode::Safe),
                    (Method::Speed, _) => Some(Mode::Speed),
                    (Method::Mixture, _) => Some(if policy_rng.gen::<bool>() { Mode::Safe } else { Mode::Speed }),
                    (_, Some(d)) => Some(switch_decide(d, q, &switch)?),
                    // warm-up: fall back to the safe policy until the forecast is available
                    (_, None) => None,
                };
                let gaps = world.lane_gaps();
                let action = match mode.unwrap_or(Mode::Safe) {
                    Mode::Safe => base_policy_safe(&gaps, &self.base),
                    Mode::Speed => base_policy_speed(&gaps, &self.base),
                };
                scorer.issue(step, forecast.map(|d| d.value()));
                out.quantiles.push(q);
                (forecast, mode, Some(action))
            };

            let arrived = scorer.arrive(step, label, &mut out)?;
            if self.keep_rows && (!terminated || arrived.is_some()) {
                let ego = world.ego;
                out.rows.push(StepLog {
                    schema_version: TRACE_SCHEMA_VERSION,
                    scenario: "highway".into(),
                    method: self.method.as_str().into(),
                    q_safe: self.q_safe,
                    seed,
                    step,
                    t: world.clock(),
                    pos_x: ego.x,
                    pos_y: ego.lane as f64 * self.config.lane_width,
                    heading: None,
                    lane: Some(ego.lane),
                    speed: ego.v,
                    action: action.map_or("", EgoAction::as_str).into(),
                    nearest_distance: Some(nearest),
                    danger: forecast.map(|d| d.value()),
                    quantile: q,
                    score: arrived.map(|a| a.0),
                    err: arrived.map(|a| u8::from(a.1)),
                    decision: match (terminated, mode) {
                        (true, _) => "terminal".into(),
                        (false, Some(m)) => m.as_str().into(),
                        (false, None) => "warmup".into(),
                    },
                    kp: None,
                    failure: None,
                });
            }
            match action {
                Some(a) => {
                    world.step(a)?;
                }
                None => break,
            }
        }
        out.duration = world.clock();
        out.mean_speed = world.mean_speed();
        out.final_quantile = scorer.tracker.quantile();
        out.collided = world.collided();
        Ok(out)
    }
}

/// Per-step predictor features for the tracking task: last command, failure
/// bit, and the estimated pose expressed relative to the current target.
pub fn track_observation(plan: &TrackPlan, last: &Command) -> Vec<f64> {
    let est = plan.estimated_pose;
    let target = plan.upcoming(0)[0];
    vec![
        last.vx,
        last.vy,
        last.vtheta,
        f64::from(u8::from(plan.failure_active())),
        target.x - est.x,
        target.y - est.y,
        wrap_angle(target.theta - est.theta),
    ]
}

/// Target waypoint and the next three, relative to the estimated pose.
pub fn track_extras(plan: &TrackPlan) -> Vec<f64> {
    let est: Pose = plan.estimated_pose;
    plan.upcoming(3)
        .into_iter()
        .flat_map(|w| [w.x - est.x, w.y - est.y, wrap_angle(w.theta - est.theta)])
        .collect()
}

pub const TRACK_OBS_LEN: usize = 7;
pub const TRACK_EXTRAS_LEN: usize = 12;

#[derive(Debug, Clone)]
pub struct TrackRun<'a> {
    pub config: TrackConfig,
    pub trajectory: TrajectoryKind,
    pub gains: GainState,
    pub tracker: TrackerConfig,
    pub predictor: Option<&'a Predictor>,
    pub method: Method,
    pub q_safe: f64,
    pub false_positive_limit: f64,
    pub history: usize,
    pub horizon: usize,
    pub keep_rows: bool,
    pub keep_data: bool,
}

impl TrackRun<'_> {
    pub fn run(&self, seed: u64) -> Result<EpisodeResult> {
        let waypoints = make_trajectory(self.trajectory, self.config.waypoint_spacing);
        let gains = if self.method == Method::Fixed {
            GainState::new(self.gains.kp, self.gains.kp, self.gains.kp)?
        } else {
            self.gains
        };
        let mut plan = TrackPlan::new(self.config.clone(), waypoints, gains)?;
        let mut rng = substream(seed, Stream::Noise);
        let mut scorer = Scorer::new(self.tracker.clone(), self.horizon)?;
        let mut history = ObservationHistory::new(self.history);
        let policy = GainPolicyConfig {
            q_safe: self.q_safe,
            false_positive_limit: self.false_positive_limit,
            use_quantile: self.method == Method::Quantile,
        };
        let mut out = EpisodeResult::new(seed);
        let mut last = Command::default();
        let mut speed_sum = 0.0;

        for step in 0.. {
            let label = f64::from(u8::from(plan.failure_active()));
            if self.keep_data {
                out.labels.push(label);
            }
            let q = scorer.tracker.quantile();
            let command = if plan.episode_done().done || plan.timed_out() {
                None
            } else {
                plan.control_command()
            };

            let (forecast, decision, cmd) = match command {
                None => (None, "terminal", None),
                Some(_) => {
                    let obs = track_observation(&plan, &last);
                    let extras = track_extras(&plan);
                    history.push(obs.clone());
                    let forecast = match self.predictor {
                        Some(p) if history.is_ready() => Some(p.predict(&history.window(extras.clone())?.to_input())?),
                        _ => None,
                    };
                    if self.keep_data {
                        out.observations.push(obs);
                        out.extras.push(extras);
                    }
                    let decision = match (self.method.switching(), forecast) {
                        (true, Some(d)) => {
                            let (next, decision) = gain_update(d, q, plan.gains, &policy);
                            plan.gains = next;
                            decision.as_str()
                        }
                        (true, None) => "warmup",
                        (false, _) => "fixed",
                    };
                    scorer.issue(step, forecast.map(|d| d.value()));
                    out.quantiles.push(q);
                    // gains may have changed; recompute with the new kp
                    (forecast, decision, plan.control_command())
                }
            };

            let arrived = scorer.arrive(step, label, &mut out)?;
            if self.keep_rows && (cmd.is_some() || arrived.is_some()) {
                let p = plan.true_pose;
                out.rows.push(StepLog {
                    schema_version: TRACE_SCHEMA_VERSION,
                    scenario: "track".into(),
                    method: self.method.as_str().into(),
                    q_safe: self.q_safe,
                    seed,
                    step,
                    t: plan.elapsed(),
                    pos_x: p.x,
                    pos_y: p.y,
                    heading: Some(p.theta),
                    lane: None,
                    speed: cmd.map_or(0.0, |c| c.linear_speed()),
                    action: String::new(),
                    nearest_distance: None,
                    danger: forecast.map(|d| d.value()),
                    quantile: q,
                    score: arrived.map(|a| a.0),
                    err: arrived.map(|a| u8::from(a.1)),
                    decision: decision.into(),
                    kp: Some(plan.gains.kp),
                    failure: Some(label as u8),
                });
            }
            let Some(cmd) = cmd else { break };
            plan.advance(cmd, &mut rng);
            speed_sum += cmd.linear_speed();
            last = cmd;
        }
        let status = plan.episode_done();
        out.final_quantile = scorer.tracker.quantile();
        out.duration = status.elapsed;
        out.mean_speed = if plan.steps == 0 { 0.0 } else { speed_sum / plan.steps as f64 };
        out.tracking_error = Some(status.tracking_error);
        out.cross_track_rms = Some(status.cross_track_rms);
        Ok(out)
    }
}
