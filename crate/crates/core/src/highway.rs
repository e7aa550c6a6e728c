//! Kinematic multi-lane highway.
//!
//! Four lanes, fifty background vehicles spawned ahead of the ego vehicle,
//! five discrete ego actions applied once per decision period, and
//! termination on collision or after 40 s. Background vehicles keep their
//! lane and speed except for a follow governor that stops them from running
//! into whatever is ahead of them (ego included). Lane changes are
//! instantaneous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EgoAction {
    LaneLeft,
    LaneRight,
    SpeedUp,
    SlowDown,
    Keep,
}

impl EgoAction {
    pub const ALL: [EgoAction; 5] = [
        EgoAction::LaneLeft,
        EgoAction::LaneRight,
        EgoAction::SpeedUp,
        EgoAction::SlowDown,
        EgoAction::Keep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EgoAction::LaneLeft => "lane_left",
            EgoAction::LaneRight => "lane_right",
            EgoAction::SpeedUp => "speed_up",
            EgoAction::SlowDown => "slow_down",
            EgoAction::Keep => "keep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub lane: usize,
    /// Longitudinal position of the vehicle center (m).
    pub x: f64,
    /// Speed (m/s).
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayConfig {
    pub n_lanes: usize,
    pub n_vehicles: usize,
    pub lane_width: f64,
    pub vehicle_length: f64,
    pub sensing_range: f64,
    /// Physics substep (s).
    pub dt: f64,
    /// Substeps per decision.
    pub substeps: usize,
    pub episode_cap: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Speed change per SpeedUp/SlowDown (m/s).
    pub delta_v: f64,
    /// Background speeds are drawn from `[v_min, v_min + frac * (v_max - v_min)]`.
    pub background_speed_fraction: f64,
    /// Distance from the ego to the first spawn slot of each lane (m).
    pub spawn_start: f64,
    pub min_spawn_gap: f64,
    /// Extra spawn spacing drawn uniformly from `[0, spread]` (m).
    pub spawn_spread: f64,
    /// Followers closer than this to their leader match its speed (m).
    pub governor_gap: f64,
    /// Speed normalization for observations (m/s).
    pub speed_norm: f64,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            n_lanes: 4,
            n_vehicles: 50,
            lane_width: 4.0,
            vehicle_length: 5.0,
            sensing_range: 100.0,
            dt: 0.1,
            substeps: 10,
            episode_cap: 40.0,
            v_min: 20.0,
            v_max: 30.0,
            delta_v: 5.0,
            background_speed_fraction: 0.5,
            spawn_start: 25.0,
            min_spawn_gap: 15.0,
            spawn_spread: 110.0,
            governor_gap: 15.0,
            speed_norm: 50.0,
        }
    }
}

impl HighwayConfig {
    pub fn with_speed_range(mut self, v_min: f64, v_max: f64) -> Self {
        self.v_min = v_min;
        self.v_max = v_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_lanes == 0 {
            return bad("need at least one lane");
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return bad("dt and substeps must be positive");
        }
        if !(self.v_min >= 0.0 && self.v_min <= self.v_max) {
            return bad("speed range must satisfy 0 <= v_min <= v_max");
        }
        if !(self.sensing_range > 0.0 && self.speed_norm > 0.0) {
            return bad("sensing range and speed normalization must be positive");
        }
        if !(0.0..=1.0).contains(&self.background_speed_fraction) {
            return bad("background speed fraction must be in [0, 1]");
        }
        if !(self.min_spawn_gap >= 0.0 && self.spawn_spread >= 0.0) {
            return bad("spawn gaps must be nonnegative");
        }
        Ok(())
    }

    pub fn background_band(&self) -> (f64, f64) {
        (
            self.v_min,
            self.v_min + self.background_speed_fraction * (self.v_max - self.v_min),
        )
    }

    /// Number of physics substeps before the episode cap.
    pub fn max_substeps(&self) -> u64 {
        (self.episode_cap / self.dt).round() as u64
    }

    pub fn decision_period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    /// Observation length: five slots of (present, dx, dy, dvx, dvy) plus ego speed.
    pub fn observation_len(&self) -> usize {
        OBS_SLOTS * SLOT_WIDTH + 1
    }
}

pub const OBS_SLOTS: usize = 5;
pub const SLOT_WIDTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepEvents {
    pub collision: bool,
    pub timeout: bool,
}

impl StepEvents {
    pub fn terminated(&self) -> bool {
        self.collision || self.timeout
    }
}

/// Forward gaps seen from the ego, used by the base policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneGaps {
    /// Center distance to the nearest vehicle ahead in the ego lane, `inf` if none in range.
    pub current: f64,
    pub left: Option<f64>,
    pub right: Option<f64>,
    /// Ego speed minus lead-vehicle speed (0 with no lead).
    pub closing_speed: f64,
    pub ego_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayWorld {
    pub config: HighwayConfig,
    pub vehicles: Vec<VehicleState>,
    pub ego: VehicleState,
    substeps_done: u64,
    lane_cooldown: u32,
    terminated: bool,
    collided: bool,
    speed_time_integral: f64,
}

impl HighwayWorld {
    /// Seeded initial placement.
    pub fn reset(config: HighwayConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ego_lane = rng.gen_range(0..config.n_lanes);
        let (band_lo, band_hi) = config.background_band();
        let mut cursor: Vec<f64> = (0..config.n_lanes)
            .map(|_| config.spawn_start + rng.gen_range(0.0..=config.spawn_spread))
            .collect();
        let mut vehicles = Vec::with_capacity(config.n_vehicles);
        for _ in 0..config.n_vehicles {
            let lane = rng.gen_range(0..config.n_lanes);
            let x = cursor[lane];
            cursor[lane] += config.min_spawn_gap + rng.gen_range(0.0..=config.spawn_spread);
            let v = rng.gen_range(band_lo..=band_hi);
            vehicles.push(VehicleState { lane, x, v });
        }
        let ego = VehicleState {
            lane: ego_lane,
            x: 0.0,
            v: config.v_min,
        };
        Ok(Self {
            config,
            vehicles,
            ego,
            substeps_done: 0,
            lane_cooldown: 0,
            terminated: false,
            collided: false,
            speed_time_integral: 0.0,
        })
    }

    /// Builds a world from explicit states (for constructed scenes).
    pub fn from_parts(config: HighwayConfig, ego: VehicleState, vehicles: Vec<VehicleState>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            vehicles,
            ego,
            substeps_done: 0,
            lane_cooldown: 0,
            terminated: false,
            collided: false,
            speed_time_integral: 0.0,
        })
    }

    pub fn clock(&self) -> f64 {
        self.substeps_done as f64 * self.config.dt
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    /// Time-averaged ego speed so far.
    pub fn mean_speed(&self) -> f64 {
        if self.substeps_done == 0 {
            self.ego.v
        } else {
            self.speed_time_integral / self.clock()
        }
    }

    fn overlaps(&self, a: &VehicleState, b: &VehicleState) -> bool {
        collision(a, b, self.config.vehicle_length)
    }

    fn ego_collides(&self) -> bool {
        self.vehicles.iter().any(|v| self.overlaps(&self.ego, v))
    }

    /// Applies one decision and advances the physics by one decision period.
    pub fn step(&mut self, action: EgoAction) -> Result<StepEvents> {
        if self.terminated {
            return Err(Error::Terminated);
        }
        let cfg = &self.config;
        match action {
            EgoAction::LaneLeft if self.lane_cooldown == 0 && self.ego.lane > 0 => {
                self.ego.lane -= 1;
                self.lane_cooldown = 2;
            }
            EgoAction::LaneRight if self.lane_cooldown == 0 && self.ego.lane + 1 < cfg.n_lanes => {
                self.ego.lane += 1;
                self.lane_cooldown = 2;
            }
            EgoAction::SpeedUp => self.ego.v = (self.ego.v + cfg.delta_v).min(cfg.v_max),
            EgoAction::SlowDown => self.ego.v = (self.ego.v - cfg.delta_v).max(cfg.v_min),
            _ => {}
        }
        self.lane_cooldown = self.lane_cooldown.saturating_sub(1);

        let mut events = StepEvents::default();
        if self.ego_collides() {
            events.collision = true;
        }
        let cap = self.config.max_substeps();
        let mut order: Vec<usize> = (0..self.vehicles.len()).collect();
        for _ in 0..self.config.substeps {
            if events.collision {
                break;
            }
            self.govern(&mut order);
            let dt = self.config.dt;
            for v in &mut self.vehicles {
                v.x += v.v * dt;
            }
            self.ego.x += self.ego.v * dt;
            self.speed_time_integral += self.ego.v * dt;
            self.substeps_done += 1;
            if self.ego_collides() {
                events.collision = true;
            } else if self.substeps_done >= cap {
                events.timeout = true;
                break;
            }
        }
        self.collided |= events.collision;
        self.terminated = events.terminated();
        Ok(events)
    }

    /// Slows each background vehicle to its leader's speed when it gets too close.
    fn govern(&mut self, order: &mut [usize]) {
        let vehicles = &self.vehicles;
        order.sort_by(|&a, &b| {
            (vehicles[a].lane, vehicles[a].x)
                .partial_cmp(&(vehicles[b].lane, vehicles[b].x))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let gap_limit = self.config.governor_gap;
        let ego = self.ego;
        for (pos, &i) in order.iter().enumerate() {
            let me = self.vehicles[i];
            let mut leader: Option<VehicleState> = order
                .get(pos + 1)
                .map(|&j| self.vehicles[j])
                .filter(|l| l.lane == me.lane);
            if ego.lane == me.lane && ego.x >= me.x && leader.is_none_or(|l| ego.x < l.x) {
                leader = Some(ego);
            }
            if let Some(l) = leader {
                if l.x - me.x < gap_limit && me.v > l.v {
                    self.vehicles[i].v = l.v;
                }
            }
        }
    }

    fn lateral_offset(&self, lane: usize) -> f64 {
        (lane as f64 - self.ego.lane as f64) * self.config.lane_width
    }

    /// Vehicles at or ahead of the ego within sensing range.
    fn visible(&self) -> impl Iterator<Item = &VehicleState> + '_ {
        let range = self.config.sensing_range;
        let ego_x = self.ego.x;
        self.vehicles
            .iter()
            .filter(move |v| v.x >= ego_x && v.x - ego_x <= range)
    }

    /// Euclidean distance to the closest visible vehicle, capped at the sensing range.
    pub fn nearest_distance(&self) -> f64 {
        self.visible()
            .map(|v| (v.x - self.ego.x).hypot(self.lateral_offset(v.lane)))
            .fold(self.config.sensing_range, f64::min)
    }

    fn lane_lead(&self, lane: usize) -> Option<&VehicleState> {
        self.visible()
            .filter(|v| v.lane == lane)
            .min_by(|a, b| a.x.total_cmp(&b.x))
    }

    pub fn lane_gaps(&self) -> LaneGaps {
        let gap = |lane: usize| {
            self.lane_lead(lane)
                .map_or(f64::INFINITY, |v| v.x - self.ego.x)
        };
        let lane = self.ego.lane;
        let closing_speed = self.lane_lead(lane).map_or(0.0, |v| self.ego.v - v.v);
        LaneGaps {
            current: gap(lane),
            left: (lane > 0).then(|| gap(lane - 1)),
            right: (lane + 1 < self.config.n_lanes).then(|| gap(lane + 1)),
            closing_speed,
            ego_speed: self.ego.v,
        }
    }

    /// Normalized observation of the five closest visible vehicles plus ego speed.
    ///
    /// Each slot is `(present, dx, dy, dvx, dvy)`; empty slots are all zero.
    pub fn observe(&self) -> Vec<f64> {
        let cfg = &self.config;
        let mut near: Vec<(f64, &VehicleState)> = self
            .visible()
            .map(|v| ((v.x - self.ego.x).hypot(self.lateral_offset(v.lane)), v))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        let lateral_norm = (cfg.lane_width * (cfg.n_lanes.max(2) - 1) as f64).max(f64::EPSILON);
        let mut obs = vec![0.0; cfg.observation_len()];
        for (slot, (_, v)) in near.iter().take(OBS_SLOTS).enumerate() {
            let base = slot * SLOT_WIDTH;
            obs[base] = 1.0;
            obs[base + 1] = ((v.x - self.ego.x) / cfg.sensing_range).clamp(-1.0, 1.0);
            obs[base + 2] = (self.lateral_offset(v.lane) / lateral_norm).clamp(-1.0, 1.0);
            obs[base + 3] = ((v.v - self.ego.v) / cfg.speed_norm).clamp(-1.0, 1.0);
            obs[base + 4] = 0.0;
        }
        obs[OBS_SLOTS * SLOT_WIDTH] = (self.ego.v / cfg.speed_norm).clamp(-1.0, 1.0);
        obs
    }

    /// Widens the speed range. Speeds already in flight are untouched.
    pub fn shift_speed_range(&mut self, v_max: f64) -> Result<()> {
        if !(v_max >= self.config.v_min) || !v_max.is_finite() {
            return Err(Error::OutOfRange {
                what: "v_max",
                value: v_max,
                expected: format!(">= v_min ({})", self.config.v_min),
            });
        }
        self.config.v_max = v_max;
        Ok(())
    }
}

/// Same-lane longitudinal overlap.
pub fn collision(a: &VehicleState, b: &VehicleState, length: f64) -> bool {
    a.lane == b.lane && (a.x - b.x).abs() < length
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(ego: VehicleState, others: Vec<VehicleState>) -> HighwayWorld {
        HighwayWorld::from_parts(HighwayConfig::default(), ego, others).unwrap()
    }

    fn veh(lane: usize, x: f64, v: f64) -> VehicleState {
        VehicleState { lane, x, v }
    }

    #[test]
    fn reset_is_deterministic() {
        let a = HighwayWorld::reset(HighwayConfig::default(), 11).unwrap();
        let b = HighwayWorld::reset(HighwayConfig::default(), 11).unwrap();
        let c = HighwayWorld::reset(HighwayConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reset_layout() {
        let cfg = HighwayConfig::default();
        for seed in 0..20 {
            let w = HighwayWorld::reset(cfg.clone(), seed).unwrap();
            assert_eq!(w.vehicles.len(), 50);
            assert!(w.vehicles.iter().all(|v| v.lane < 4));
            assert!(w.ego.lane < 4);
            assert_eq!(w.ego.v, cfg.v_min);
            assert!(w.vehicles.iter().all(|v| v.x >= cfg.spawn_start));
            let (lo, hi) = cfg.background_band();
            assert!(w.vehicles.iter().all(|v| v.v >= lo && v.v <= hi));
            // exhaustive pairwise same-lane gaps
            for (i, a) in w.vehicles.iter().enumerate() {
                for b in &w.vehicles[i + 1..] {
                    if a.lane == b.lane {
                        assert!((a.x - b.x).abs() >= cfg.min_spawn_gap);
                    }
                }
            }
        }
    }

    #[test]
    fn speed_and_lane_bounds() {
        let mut w = scene(veh(0, 0.0, 30.0), vec![]);
        w.step(EgoAction::SpeedUp).unwrap();
        assert_eq!(w.ego.v, 30.0);
        w.step(EgoAction::LaneLeft).unwrap();
        assert_eq!(w.ego.lane, 0);
        w.step(EgoAction::SlowDown).unwrap();
        assert_eq!(w.ego.v, 25.0);
        for _ in 0..3 {
            w.step(EgoAction::SlowDown).unwrap();
        }
        assert_eq!(w.ego.v, 20.0);
    }

    #[test]
    fn lane_change_cooldown() {
        let mut w = scene(veh(0, 0.0, 20.0), vec![]);
        w.step(EgoAction::LaneRight).unwrap();
        assert_eq!(w.ego.lane, 1);
        w.step(EgoAction::LaneRight).unwrap();
        assert_eq!(w.ego.lane, 1);
        w.step(EgoAction::LaneRight).unwrap();
        assert_eq!(w.ego.lane, 2);
    }

    #[test]
    fn imminent_overlap_collides() {
        // ego at 30 m/s, lead at 20 m/s 12 m ahead: the gap closes below the
        // 5 m vehicle length after 0.8 s of the 1 s period.
        let mut w = scene(veh(1, 0.0, 30.0), vec![veh(1, 12.0, 20.0)]);
        w.config.governor_gap = 0.0;
        let ev = w.step(EgoAction::Keep).unwrap();
        assert!(ev.collision);
        assert!(w.is_terminated());
        assert!((w.clock() - 0.8).abs() < 1e-12);
        assert!(matches!(w.step(EgoAction::Keep), Err(Error::Terminated)));
    }

    #[test]
    fn cut_in_collides_immediately() {
        let mut w = scene(veh(1, 0.0, 20.0), vec![veh(2, -2.0, 20.0)]);
        assert!(w.step(EgoAction::LaneRight).unwrap().collision);
        assert_eq!(w.clock(), 0.0);
    }

    #[test]
    fn timeout_after_forty_seconds() {
        let mut w = scene(veh(0, 0.0, 20.0), vec![]);
        let mut steps = 0;
        loop {
            steps += 1;
            if w.step(EgoAction::Keep).unwrap().timeout {
                break;
            }
        }
        assert_eq!(steps, 40);
        assert!((w.clock() - 40.0).abs() < 1e-9);
        assert!(!w.collided());
        assert_eq!(w.mean_speed(), 20.0);
    }

    #[test]
    fn kinematics_are_exact() {
        let mut w = scene(veh(0, 0.0, 20.0), vec![veh(3, 50.0, 22.5), veh(2, 500.0, 21.0)]);
        let before = w.clone();
        w.step(EgoAction::Keep).unwrap();
        let mut expect = before.vehicles.clone();
        for _ in 0..10 {
            for v in &mut expect {
                v.x += v.v * 0.1;
            }
        }
        assert_eq!(w.vehicles, expect);
    }

    #[test]
    fn governor_prevents_rear_end() {
        let mut w = scene(veh(0, 0.0, 20.0), vec![veh(2, 30.0, 25.0), veh(2, 40.0, 20.0)]);
        for _ in 0..10 {
            w.step(EgoAction::Keep).unwrap();
        }
        let (a, b) = (w.vehicles[0], w.vehicles[1]);
        assert!(b.x - a.x >= w.config.vehicle_length);
        assert_eq!(a.v, 20.0);
    }

    #[test]
    fn nearest_distance_cases() {
        let w = scene(veh(1, 0.0, 20.0), vec![veh(1, 20.0, 20.0)]);
        assert_eq!(w.nearest_distance(), 20.0);
        let w = scene(veh(1, 0.0, 20.0), vec![]);
        assert_eq!(w.nearest_distance(), 100.0);
        // behind the ego is invisible
        let w = scene(veh(1, 0.0, 20.0), vec![veh(1, -10.0, 20.0)]);
        assert_eq!(w.nearest_distance(), 100.0);
        let w = scene(veh(1, 0.0, 20.0), vec![veh(2, 3.0, 20.0)]);
        assert_eq!(w.nearest_distance(), 5.0);
    }

    #[test]
    fn observation_layout() {
        let w = scene(
            veh(0, 0.0, 25.0),
            vec![veh(0, 50.0, 20.0), veh(3, 10.0, 30.0), veh(1, -5.0, 20.0)],
        );
        let obs = w.observe();
        assert_eq!(obs.len(), 26);
        // closest: lane 3 at dx 10, dy 12 -> distance 15.6; then lane 0 at 50
        assert_eq!(&obs[0..5], &[1.0, 0.1, 1.0, 0.1, 0.0]);
        assert_eq!(&obs[5..10], &[1.0, 0.5, 0.0, -0.1, 0.0]);
        assert!(obs[10..25].iter().all(|&v| v == 0.0));
        assert_eq!(obs[25], 0.5);
    }

    #[test]
    fn lane_gaps_view() {
        let w = scene(
            veh(1, 0.0, 30.0),
            vec![veh(1, 20.0, 22.0), veh(0, 40.0, 20.0)],
        );
        let g = w.lane_gaps();
        assert_eq!(g.current, 20.0);
        assert_eq!(g.left, Some(40.0));
        assert_eq!(g.right, Some(f64::INFINITY));
        assert_eq!(g.closing_speed, 8.0);
    }

    #[test]
    fn speed_range_shift() {
        let mut w = scene(veh(0, 0.0, 30.0), vec![]);
        w.shift_speed_range(30.0).unwrap();
        assert_eq!(w.config.v_max, 30.0);
        w.shift_speed_range(40.0).unwrap();
        assert_eq!(w.ego.v, 30.0);
        w.step(EgoAction::SpeedUp).unwrap();
        assert_eq!(w.ego.v, 35.0);
        assert!(w.shift_speed_range(10.0).is_err());
        w.shift_speed_range(50.0).unwrap();
        assert_eq!(w.config.v_max, 50.0);
    }

    #[test]
    fn collision_is_symmetric() {
        let a = veh(1, 0.0, 20.0);
        for b in [veh(1, 4.9, 0.0), veh(1, -4.9, 0.0), veh(1, 5.0, 0.0), veh(2, 0.0, 0.0)] {
            assert_eq!(collision(&a, &b, 5.0), collision(&b, &a, 5.0));
        }
    }
}
