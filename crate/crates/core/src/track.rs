//! Waypoint tracking with a proportional controller and synthetic
//! localization failures.
//!
//! The robot is holonomic and commanded in world-frame velocities
//! `v = kp * (waypoint - estimate)` per axis. Each step a logistic failure
//! model, driven by the commanded linear speed and turn rate, may start a
//! localization dropout: the pose estimate freezes for a few steps and, on
//! recovery, comes back with a random offset that persists. Faster gains
//! finish sooner but fail more, and the accumulated offset shows up as
//! tracking error.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::GainState;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

pub type Waypoint = Pose;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    /// Logit weight on commanded linear speed (per m/s).
    pub a_speed: f64,
    /// Logit weight on commanded turn rate (per rad/s).
    pub a_turn: f64,
    pub bias: f64,
    /// Steps the estimate stays frozen after a failure starts.
    pub dropout_steps: u32,
    /// Std of the per-axis offset the estimate picks up on recovery (m).
    pub relocalization_jump: f64,
}

impl Default for FailureModel {
    fn default() -> Self {
        Self {
            a_speed: 8.0,
            a_turn: 1.0,
            bias: DEFAULT_FAILURE_BIAS,
            dropout_steps: 2,
            relocalization_jump: 0.15,
        }
    }
}

/// Output of [`calibrate_failure_bias`] for the default model: about 10% of
/// steps in dropout at `kp = 1.5` on the hexagon.
pub const DEFAULT_FAILURE_BIAS: f64 = -5.2;

impl FailureModel {
    /// Per-step probability that a failure starts.
    pub fn probability(&self, speed: f64, turn_rate: f64) -> f64 {
        let z = self.a_speed * speed.abs() + self.a_turn * turn_rate.abs() + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    /// Policy period (s); 10 Hz.
    pub dt: f64,
    pub waypoint_spacing: f64,
    pub capture_radius: f64,
    pub stop_radius: f64,
    pub min_achieved_fraction: f64,
    /// Unachieved waypoints considered as targets, counted from the first unachieved one.
    pub lookahead: usize,
    pub max_linear_speed: f64,
    pub max_turn_rate: f64,
    /// Std of velocity execution noise (m/s, rad/s).
    pub actuation_noise: f64,
    /// Std of pose estimation noise while localized (m, rad).
    pub estimation_noise: f64,
    pub failure: FailureModel,
    pub time_limit: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            waypoint_spacing: 0.1,
            capture_radius: 0.1,
            stop_radius: 0.1,
            min_achieved_fraction: 0.75,
            lookahead: 10,
            max_linear_speed: 1.5,
            max_turn_rate: 2.0,
            actuation_noise: 0.01,
            estimation_noise: 0.002,
            failure: FailureModel::default(),
            time_limit: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Triangle,
    Rectangle,
    Hexagon,
    Zigzag { seed: u64 },
}

impl TrajectoryKind {
    pub fn name(&self) -> String {
        match self {
            TrajectoryKind::Triangle => "triangle".into(),
            TrajectoryKind::Rectangle => "rectangle".into(),
            TrajectoryKind::Hexagon => "hexagon".into(),
            TrajectoryKind::Zigzag { seed } => format!("zigzag-{seed}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "triangle" => TrajectoryKind::Triangle,
            "rectangle" => TrajectoryKind::Rectangle,
            "hexagon" => TrajectoryKind::Hexagon,
            _ => return None,
        })
    }
}

fn regular_polygon(sides: usize, side: f64) -> Vec<(f64, f64)> {
    let exterior = 2.0 * PI / sides as f64;
    let mut pts = vec![(0.0, 0.0)];
    let mut heading: f64 = 0.0;
    for _ in 1..sides {
        let (x, y) = *pts.last().expect("nonempty");
        pts.push((x + side * heading.cos(), y + side * heading.sin()));
        heading += exterior;
    }
    pts
}

/// Linear interpolation through `keypoints` at `spacing`; headings follow each segment.
///
/// A closed path returns to the first keypoint; its final waypoint is the
/// last interpolated point before the start, which is not repeated.
fn densify(keypoints: &[(f64, f64)], spacing: f64, closed: bool) -> Vec<Waypoint> {
    let mut pts = keypoints.to_vec();
    if closed {
        pts.push(keypoints[0]);
    }
    let mut out = Vec::new();
    for seg in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        let len = (x1 - x0).hypot(y1 - y0);
        if len == 0.0 {
            continue;
        }
        let theta = (y1 - y0).atan2(x1 - x0);
        let n = (len / spacing - 1e-9).ceil().max(1.0) as usize;
        for j in 0..n {
            let f = j as f64 / n as f64;
            out.push(Pose::new(x0 + f * (x1 - x0), y0 + f * (y1 - y0), theta));
        }
    }
    if !closed {
        if let (Some(&(x, y)), Some(last)) = (pts.last(), out.last().copied()) {
            out.push(Pose::new(x, y, last.theta));
        }
    }
    out
}

/// Waypoints for the evaluation polygons (triangle side 2 m, rectangle 2 x 1.5 m,
/// hexagon side 1 m) or a random zig-zag through two keypoints in `[-2, 2]^2`.
pub fn make_trajectory(kind: TrajectoryKind, spacing: f64) -> Vec<Waypoint> {
    match kind {
        TrajectoryKind::Triangle => densify(&regular_polygon(3, 2.0), spacing, true),
        TrajectoryKind::Rectangle => densify(
            &[(0.0, 0.0), (2.0, 0.0), (2.0, 1.5), (0.0, 1.5)],
            spacing,
            true,
        ),
        TrajectoryKind::Hexagon => densify(&regular_polygon(6, 1.0), spacing, true),
        TrajectoryKind::Zigzag { seed } => densify(&zigzag_keypoints(seed), spacing, false),
    }
}

/// Origin followed by two keypoints drawn uniformly from `[-2, 2]^2`.
pub fn zigzag_keypoints(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![(0.0, 0.0)];
    for _ in 0..2 {
        pts.push((rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)));
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub vtheta: f64,
}

impl Command {
    pub fn linear_speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPlan {
    pub config: TrackConfig,
    pub waypoints: Vec<Waypoint>,
    pub achieved: Vec<bool>,
    pub true_pose: Pose,
    pub estimated_pose: Pose,
    pub start_pose: Pose,
    pub gains: GainState,
    /// Persistent offset of the estimate, picked up on relocalization.
    pub estimate_offset: (f64, f64),
    pub failure_remaining: u32,
    pub failures_started: usize,
    pub steps: usize,
    /// Sum of squared distances from the true pose to the path.
    cross_track_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub command: Command,
    /// A dropout is active after this step.
    pub failure_active: bool,
    pub failure_started: bool,
    pub failure_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoneStatus {
    pub done: bool,
    pub elapsed: f64,
    /// Distance between start and current true position.
    pub tracking_error: f64,
    /// RMS distance from the true pose to the path so far.
    pub cross_track_rms: f64,
    pub achieved_fraction: f64,
}

impl TrackPlan {
    pub fn new(config: TrackConfig, waypoints: Vec<Waypoint>, gains: GainState) -> Result<Self> {
        let first = *waypoints
            .first()
            .ok_or_else(|| Error::Config("trajectory has no waypoints".into()))?;
        let mut plan = Self {
            achieved: vec![false; waypoints.len()],
            waypoints,
            true_pose: first,
            estimated_pose: first,
            start_pose: first,
            gains,
            estimate_offset: (0.0, 0.0),
            failure_remaining: 0,
            failures_started: 0,
            steps: 0,
            cross_track_sq: 0.0,
            config,
        };
        plan.mark_achieved();
        Ok(plan)
    }

    pub fn failure_active(&self) -> bool {
        self.failure_remaining > 0
    }

    pub fn achieved_count(&self) -> usize {
        self.achieved.iter().filter(|&&a| a).count()
    }

    fn first_unachieved(&self) -> Option<usize> {
        self.achieved.iter().position(|&a| !a)
    }

    /// Index of the waypoint currently tracked: the nearest unachieved one
    /// within the lookahead window.
    pub fn target_index(&self) -> Option<usize> {
        let start = self.first_unachieved()?;
        let end = (start + self.config.lookahead.max(1)).min(self.waypoints.len());
        (start..end)
            .filter(|&i| !self.achieved[i])
            .min_by(|&a, &b| {
                let da = self.estimated_pose.distance(&self.waypoints[a]);
                let db = self.estimated_pose.distance(&self.waypoints[b]);
                da.total_cmp(&db)
            })
    }

    /// Target waypoint followed by the next `n` waypoints of the path (the last repeats at the end).
    pub fn upcoming(&self, n: usize) -> Vec<Waypoint> {
        let Some(idx) = self.target_index() else {
            let last = *self.waypoints.last().expect("nonempty");
            return vec![last; n + 1];
        };
        (0..=n)
            .map(|k| self.waypoints[(idx + k).min(self.waypoints.len() - 1)])
            .collect()
    }

    fn mark_achieved(&mut self) {
        let Some(start) = self.first_unachieved() else { return };
        let end = (start + self.config.lookahead.max(1)).min(self.waypoints.len());
        let r = self.config.capture_radius;
        let est = self.estimated_pose;
        for i in start..end {
            if est.distance(&self.waypoints[i]) < r {
                self.achieved[i] = true;
            }
        }
    }

    /// Proportional command toward the target waypoint, capped at actuator limits.
    /// `None` once every waypoint is achieved.
    pub fn control_command(&self) -> Option<Command> {
        let target = self.waypoints[self.target_index()?];
        Some(self.command_toward(&target))
    }

    /// Uncapped proportional law.
    pub fn raw_command(&self, target: &Waypoint) -> Command {
        let kp = self.gains.kp;
        Command {
            vx: kp * (target.x - self.estimated_pose.x),
            vy: kp * (target.y - self.estimated_pose.y),
            vtheta: kp * wrap_angle(target.theta - self.estimated_pose.theta),
        }
    }

    fn command_toward(&self, target: &Waypoint) -> Command {
        let mut cmd = self.raw_command(target);
        let speed = cmd.linear_speed();
        let cap = self.config.max_linear_speed;
        if speed > cap {
            cmd.vx *= cap / speed;
            cmd.vy *= cap / speed;
        }
        let wcap = self.config.max_turn_rate;
        cmd.vtheta = cmd.vtheta.clamp(-wcap, wcap);
        cmd
    }

    /// Integrates one policy period.
    pub fn advance<R: Rng + ?Sized>(&mut self, cmd: Command, rng: &mut R) -> StepOutcome {
        let cfg = &self.config;
        let dt = cfg.dt;
        let noise = cfg.actuation_noise;
        let mut gauss = |std: f64| if std > 0.0 { std * standard_normal(rng) } else { 0.0 };
        self.true_pose.x += (cmd.vx + gauss(noise)) * dt;
        self.true_pose.y += (cmd.vy + gauss(noise)) * dt;
        self.true_pose.theta = wrap_angle(self.true_pose.theta + (cmd.vtheta + gauss(noise)) * dt);

        let p = cfg.failure.probability(cmd.linear_speed(), cmd.vtheta);
        let mut started = false;
        if self.failure_remaining > 0 {
            self.failure_remaining -= 1;
            if self.failure_remaining == 0 {
                let jump = cfg.failure.relocalization_jump;
                self.estimate_offset.0 += gauss(jump);
                self.estimate_offset.1 += gauss(jump);
            }
        } else if rng.gen::<f64>() < p {
            started = true;
            self.failures_started += 1;
            self.failure_remaining = cfg.failure.dropout_steps;
        }

        if self.failure_remaining == 0 {
            let en = cfg.estimation_noise;
            let mut gauss = |std: f64| if std > 0.0 { std * standard_normal(rng) } else { 0.0 };
            self.estimated_pose = Pose::new(
                self.true_pose.x + self.estimate_offset.0 + gauss(en),
                self.true_pose.y + self.estimate_offset.1 + gauss(en),
                wrap_angle(self.true_pose.theta + gauss(en)),
            );
            self.mark_achieved();
        }

        self.steps += 1;
        let d = self.distance_to_path(&self.true_pose);
        self.cross_track_sq += d * d;

        StepOutcome {
            command: cmd,
            failure_active: self.failure_remaining > 0,
            failure_started: started,
            failure_probability: p,
        }
    }

    fn distance_to_path(&self, p: &Pose) -> f64 {
        let n = self.waypoints.len();
        if n == 1 {
            return p.distance(&self.waypoints[0]);
        }
        self.waypoints
            .windows(2)
            .map(|w| point_segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn elapsed(&self) -> f64 {
        self.steps as f64 * self.config.dt
    }

    /// Stop when the estimate is within `stop_radius` of the last waypoint and
    /// enough waypoints were achieved, or when nothing is left to track.
    pub fn episode_done(&self) -> DoneStatus {
        let last = self.waypoints.last().expect("nonempty");
        let frac = self.achieved_count() as f64 / self.waypoints.len() as f64;
        let done = (self.estimated_pose.distance(last) < self.config.stop_radius
            && frac >= self.config.min_achieved_fraction)
            || frac >= 1.0;
        DoneStatus {
            done,
            elapsed: self.elapsed(),
            tracking_error: self.start_pose.distance(&self.true_pose),
            cross_track_rms: if self.steps == 0 {
                0.0
            } else {
                (self.cross_track_sq / self.steps as f64).sqrt()
            },
            achieved_fraction: frac,
        }
    }

    pub fn timed_out(&self) -> bool {
        self.elapsed() >= self.config.time_limit - 1e-9
    }
}

fn point_segment_distance(p: &Pose, a: &Pose, b: &Pose) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.x - (a.x + t * dx)).hypot(p.y - (a.y + t * dy))
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Fraction of steps spent in dropout when tracking `kind` with a fixed gain.
pub fn fixed_gain_failure_rate(config: &TrackConfig, kind: TrajectoryKind, kp: f64, seeds: &[u64]) -> Result<f64> {
    let mut active = 0usize;
    let mut total = 0usize;
    for &seed in seeds {
        let gains = GainState::new(kp, kp, kp)?;
        let mut plan = TrackPlan::new(config.clone(), make_trajectory(kind, config.waypoint_spacing), gains)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while !plan.episode_done().done && !plan.timed_out() {
            let Some(cmd) = plan.control_command() else { break };
            let out = plan.advance(cmd, &mut rng);
            active += usize::from(out.failure_active);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { active as f64 / total as f64 })
}

/// Bisects the failure-model bias so that a fixed gain `kp` on `kind`
/// spends `target` of its steps in dropout (Monte Carlo over `seeds`).
pub fn calibrate_failure_bias(
    config: &TrackConfig,
    kind: TrajectoryKind,
    kp: f64,
    target: f64,
    seeds: &[u64],
) -> Result<f64> {
    let (mut lo, mut hi) = (-15.0, 5.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let mut cfg = config.clone();
        cfg.failure.bias = mid;
        if fixed_gain_failure_rate(&cfg, kind, kp, seeds)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> TrackConfig {
        TrackConfig {
            actuation_noise: 0.0,
            estimation_noise: 0.0,
            failure: FailureModel {
                bias: -1e9,
                ..FailureModel::default()
            },
            ..TrackConfig::default()
        }
    }

    #[test]
    fn triangle_waypoint_count() {
        let wps = make_trajectory(TrajectoryKind::Triangle, 0.1);
        assert_eq!(wps.len(), 60);
        assert_eq!((wps[0].x, wps[0].y), (0.0, 0.0));
        // last point sits one spacing before the start, closing the loop
        assert!((wps.last().unwrap().distance(&wps[0]) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn hexagon_turns_sixty_degrees() {
        let verts = regular_polygon(6, 1.0);
        let n = verts.len();
        for i in 0..n {
            let (a, b, c) = (verts[(i + n - 1) % n], verts[i], verts[(i + 1) % n]);
            let u = (a.0 - b.0, a.1 - b.1);
            let v = (c.0 - b.0, c.1 - b.1);
            let cos = (u.0 * v.0 + u.1 * v.1) / (u.0.hypot(u.1) * v.0.hypot(v.1));
            assert!((cos.acos().to_degrees() - 120.0).abs() < 1e-9);
        }
        assert_eq!(make_trajectory(TrajectoryKind::Hexagon, 0.1).len(), 60);
    }

    #[test]
    fn zigzag_keypoints_in_box() {
        for seed in 0..50 {
            for (x, y) in zigzag_keypoints(seed) {
                assert!((-2.0..=2.0).contains(&x) && (-2.0..=2.0).contains(&y));
            }
            let wps = make_trajectory(TrajectoryKind::Zigzag { seed }, 0.1);
            assert!(wps.windows(2).all(|w| w[0].distance(&w[1]) <= 0.1 + 1e-9));
        }
    }

    #[test]
    fn command_at_waypoint_is_zero() {
        let wps = vec![Pose::new(0.0, 0.0, 0.0), Pose::new(5.0, 0.0, 0.0)];
        let plan = TrackPlan::new(quiet(), wps, GainState::new(1.5, 0.8, 4.0).unwrap()).unwrap();
        let c = plan.raw_command(&Pose::new(0.0, 0.0, 0.0));
        assert_eq!(c, Command::default());
    }

    #[test]
    fn proportional_law() {
        let wps = vec![Pose::new(0.0, 0.0, 0.0), Pose::new(5.0, 0.0, 0.0)];
        let plan = TrackPlan::new(quiet(), wps.clone(), GainState::new(1.5, 0.8, 4.0).unwrap()).unwrap();
        let c = plan.raw_command(&Pose::new(1.0, 0.0, 0.0));
        assert_eq!(c, Command { vx: 1.5, vy: 0.0, vtheta: 0.0 });
        let doubled = TrackPlan::new(quiet(), wps, GainState::new(3.0, 0.8, 4.0).unwrap()).unwrap();
        let c2 = doubled.raw_command(&Pose::new(1.0, 0.5, 0.2));
        let c1 = plan.raw_command(&Pose::new(1.0, 0.5, 0.2));
        assert_eq!((c2.vx, c2.vy, c2.vtheta), (2.0 * c1.vx, 2.0 * c1.vy, 2.0 * c1.vtheta));
        // capped
        let c = doubled.control_command().unwrap();
        assert!(c.linear_speed() <= 1.5 + 1e-12);
    }

    #[test]
    fn all_achieved_gives_no_command() {
        let mut plan = TrackPlan::new(
            quiet(),
            vec![Pose::new(0.0, 0.0, 0.0)],
            GainState::in_distribution(),
        )
        .unwrap();
        assert!(plan.control_command().is_none());
        plan.achieved[0] = true;
        assert!(plan.control_command().is_none());
    }

    #[test]
    fn zero_command_keeps_pose() {
        let mut plan = TrackPlan::new(
            quiet(),
            make_trajectory(TrajectoryKind::Hexagon, 0.1),
            GainState::in_distribution(),
        )
        .unwrap();
        let before = plan.true_pose;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        plan.advance(Command::default(), &mut rng);
        assert_eq!(plan.true_pose, before);
        assert_eq!(plan.estimated_pose, before);
    }

    #[test]
    fn dropout_freezes_estimate() {
        let mut cfg = quiet();
        cfg.failure.bias = 1e9; // always fails
        cfg.failure.dropout_steps = 5;
        let mut plan = TrackPlan::new(
            cfg,
            make_trajectory(TrajectoryKind::Hexagon, 0.1),
            GainState::in_distribution(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cmd = Command { vx: 0.3, vy: 0.1, vtheta: 0.0 };
        let out = plan.advance(cmd, &mut rng);
        assert!(out.failure_started && out.failure_active);
        let frozen = plan.estimated_pose;
        for _ in 0..4 {
            let out = plan.advance(cmd, &mut rng);
            assert!(out.failure_active);
            assert_eq!(plan.estimated_pose, frozen);
        }
        assert_ne!(plan.true_pose, frozen);
    }

    #[test]
    fn done_conditions() {
        let wps: Vec<Waypoint> = (0..10).map(|i| Pose::new(i as f64, 0.0, 0.0)).collect();
        let mut plan = TrackPlan::new(quiet(), wps, GainState::in_distribution()).unwrap();
        plan.achieved = (0..10).map(|i| i < 8).collect();
        plan.estimated_pose = Pose::new(9.05, 0.0, 0.0);
        assert!(plan.episode_done().done);
        plan.estimated_pose = Pose::new(9.2, 0.0, 0.0);
        assert!(!plan.episode_done().done);
        plan.achieved = (0..10).map(|i| i < 5).collect();
        plan.estimated_pose = Pose::new(9.05, 0.0, 0.0);
        assert!(!plan.episode_done().done);
        plan.achieved = vec![true; 10];
        plan.estimated_pose = Pose::new(3.0, 0.0, 0.0);
        assert!(plan.episode_done().done);
    }

    #[test]
    fn noiseless_run_completes_with_small_error() {
        let mut plan = TrackPlan::new(
            quiet(),
            make_trajectory(TrajectoryKind::Hexagon, 0.1),
            GainState::in_distribution(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last_count = plan.achieved_count();
        while !plan.episode_done().done {
            assert!(!plan.timed_out());
            let cmd = plan.control_command().unwrap();
            plan.advance(cmd, &mut rng);
            assert!(plan.achieved_count() >= last_count);
            last_count = plan.achieved_count();
        }
        let status = plan.episode_done();
        assert!(status.tracking_error < 0.2);
        assert!(status.cross_track_rms < 0.05);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, 0.0, PI, 3.5, 100.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((w - a) / (2.0 * PI)).round() * 2.0 * PI - (w - a) < 1e-9);
        }
    }

    #[test]
    fn default_calibration_hits_ten_percent() {
        let seeds: Vec<u64> = (0..100).collect();
        let r = fixed_gain_failure_rate(&TrackConfig::default(), TrajectoryKind::Hexagon, 1.5, &seeds).unwrap();
        assert!((0.08..=0.12).contains(&r), "rate {r}");
    }

    #[test]
    fn failure_rate_rises_with_gain() {
        let cfg = TrackConfig::default();
        let seeds: Vec<u64> = (0..30).collect();
        let rates: Vec<f64> = [0.8, 1.5, 4.0]
            .iter()
            .map(|&kp| fixed_gain_failure_rate(&cfg, TrajectoryKind::Hexagon, kp, &seeds).unwrap())
            .collect();
        assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    }

    #[test]
    fn calibration_recovers_default_bias() {
        let seeds: Vec<u64> = (0..40).collect();
        let b = calibrate_failure_bias(&TrackConfig::default(), TrajectoryKind::Hexagon, 1.5, 0.10, &seeds).unwrap();
        assert!((b - DEFAULT_FAILURE_BIAS).abs() < 0.5, "bias {b}");
    }
}
