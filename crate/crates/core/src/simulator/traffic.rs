//! Constant-headway vehicle streams on two opposing lanes.
//!
//! Each lane is a one-dimensional road: `s` is the front-bumper position
//! along the lane's direction of travel and `s = 0` is the crossing
//! centerline (`x = 0`). Lane 1 travels towards `+x`, lane 2 towards `-x`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rng_stream, TrafficRegime, VehicleType, TICK_S};
use crate::error::{Error, Result};
use crate::segmentation::{CrossingGeometry, EntityKind, Trajectory, TrajectorySample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self { length: 4.5, width: 1.8 }
    }
}

/// Generator inputs: arrival rate (veh/h), maximum speed (km/h) and
/// front-to-front spacing (m) in free flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficRegimeParams {
    pub arrival_rate: f64,
    pub max_speed: f64,
    pub spacing: f64,
}

impl TrafficRegimeParams {
    /// Spacing solved from the constant headway `3600 / rate`.
    pub fn from_rate_and_speed(arrival_rate: f64, max_speed: f64) -> Self {
        Self { arrival_rate, max_speed, spacing: max_speed / 3.6 * 3600.0 / arrival_rate }
    }

    pub fn headway_s(&self) -> f64 {
        3600.0 / self.arrival_rate
    }

    pub fn speed_ms(&self) -> f64 {
        self.max_speed / 3.6
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.arrival_rate) && ok(self.max_speed) && ok(self.spacing)) {
            return Err(Error::Config(format!("traffic parameters must be positive: {self:?}")));
        }
        let implied = self.speed_ms() * self.headway_s();
        if (self.spacing - implied).abs() > 0.01 * implied {
            return Err(Error::Config(format!(
                "spacing {} m disagrees with speed × headway = {implied:.2} m",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// Longitudinal behaviour shared by all vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivingParams {
    pub accel: f64,
    /// Braking used for agents in the conflict zone and for yielding.
    pub comfort_decel: f64,
    /// Braking available when following another vehicle.
    pub emergency_decel: f64,
    /// Bumper-to-bumper distance kept at standstill.
    pub standstill_gap: f64,
    /// Distance upstream of the crossing where vehicles enter.
    pub spawn_distance: f64,
    /// `|x|` of the stop line on either side of the crossing.
    pub stop_line: f64,
    /// `|x|` range in which an agent inside a lane band stops traffic.
    pub conflict_half_width: f64,
}

impl Default for DrivingParams {
    fn default() -> Self {
        Self {
            accel: 2.0,
            comfort_decel: 3.0,
            emergency_decel: 8.0,
            standstill_gap: 2.0,
            spawn_distance: 150.0,
            stop_line: 3.0,
            conflict_half_width: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficOptions {
    pub footprint: Footprint,
    pub driving: DrivingParams,
    pub vehicle_type: VehicleType,
    pub av_share: f64,
    pub start_unix: f64,
    /// Vehicles further than this from the crossing are not exported.
    pub view_radius: f64,
}

impl Default for TrafficOptions {
    fn default() -> Self {
        Self {
            footprint: Footprint::default(),
            driving: DrivingParams::default(),
            vehicle_type: VehicleType::Normal,
            av_share: 0.0,
            start_unix: 0.0,
            view_radius: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Vehicle {
    pub id: u32,
    pub lane: u8,
    pub s: f64,
    pub s_prev: f64,
    pub v: f64,
    pub automated: bool,
    yielding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ObstacleKind {
    /// Agent inside the lane band within the conflict zone.
    Occupying,
    /// Agent at the curb intending to cross; only eHMI vehicles yield.
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Obstacle {
    pub lane: u8,
    /// Agent position along the lane's direction of travel.
    pub s: f64,
    pub kind: ObstacleKind,
}

/// Front (and later rear) bumper crossing `s = 0`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pass {
    pub id: u32,
    pub lane: u8,
    pub t_front: f64,
    pub t_rear: Option<f64>,
    pub speed: f64,
    /// Bumper-to-bumper distance to the leader when the front passes.
    pub clearance: Option<f64>,
}

/// Lane-local coordinate of course position `x`.
pub(crate) fn lane_s(lane: u8, x: f64) -> f64 {
    if lane == 1 {
        x
    } else {
        -x
    }
}

pub(crate) struct Road {
    params: TrafficRegimeParams,
    pub opts: TrafficOptions,
    pub lane_y: [f64; 2],
    lanes: [VecDeque<Vehicle>; 2],
    arrivals: [VecDeque<f64>; 2],
    next_arrival: [f64; 2],
    next_id: u32,
    tick: i64,
    rng: ChaCha8Rng,
    pub passes: Vec<Pass>,
    /// Smallest bumper-to-bumper distance seen after warm-up.
    pub min_clearance: f64,
}

impl Road {
    /// Road whose clock reads zero once free-flow traffic fills the
    /// exported stretch.
    pub fn new(params: TrafficRegimeParams, opts: TrafficOptions, lane_y: [f64; 2], seed: u64) -> Self {
        let mut rng = rng_stream(seed, 1);
        let h = params.headway_s();
        let warmup = (opts.driving.spawn_distance + 2.0 * params.spacing) / params.speed_ms();
        let tick = -(warmup / TICK_S).ceil() as i64;
        let t0 = tick as f64 * TICK_S;
        let next_arrival = [t0 + rng.random::<f64>() * h, t0 + rng.random::<f64>() * h];
        Self {
            params,
            opts,
            lane_y,
            lanes: [VecDeque::new(), VecDeque::new()],
            arrivals: [VecDeque::new(), VecDeque::new()],
            next_arrival,
            next_id: 1,
            tick,
            rng,
            passes: Vec::new(),
            min_clearance: f64::INFINITY,
        }
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * TICK_S
    }

    pub fn tick(&self) -> i64 {
        self.tick
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &Vehicle> {
        self.lanes.iter().flat_map(|l| l.iter())
    }

    pub fn lane(&self, lane: u8) -> &VecDeque<Vehicle> {
        &self.lanes[lane as usize - 1]
    }

    pub fn length(&self) -> f64 {
        self.opts.footprint.length
    }

    pub fn yields_to_waiting(&self, v: &Vehicle) -> bool {
        v.automated && self.opts.vehicle_type == VehicleType::AvEhmi
    }

    /// Course-frame center of a vehicle.
    pub fn center(&self, v: &Vehicle) -> (f64, f64) {
        let along = v.s - self.length() / 2.0;
        let x = if v.lane == 1 { along } else { -along };
        (x, self.lane_y[v.lane as usize - 1])
    }

    pub fn entity_id(&self, v: &Vehicle) -> String {
        let prefix = match (v.automated, self.opts.vehicle_type) {
            (false, _) | (true, VehicleType::Normal) => "car",
            (true, VehicleType::AvRoofSign) => "av-roof",
            (true, VehicleType::AvEhmi) => "av-ehmi",
        };
        format!("{prefix}-{:04}", v.id)
    }

    pub fn sample(&self, v: &Vehicle, unix: f64) -> TrajectorySample {
        let (x, y) = self.center(v);
        TrajectorySample {
            unix,
            entity_id: self.entity_id(v),
            kind: EntityKind::Vehicle,
            x,
            y,
            heading: if v.lane == 1 { 0.0 } else { PI },
        }
    }

    /// Exported vehicle samples of the current state.
    pub fn samples(&self, unix: f64) -> Vec<TrajectorySample> {
        self.vehicles()
            .filter(|v| self.center(v).0.abs() <= self.opts.view_radius)
            .map(|v| self.sample(v, unix))
            .collect()
    }

    fn spawn(&mut self, t: f64) {
        let h = self.params.headway_s();
        let vmax = self.params.speed_ms();
        let len = self.length();
        let d = self.opts.driving;
        for li in 0..2 {
            while self.next_arrival[li] <= t + 1e-9 {
                self.arrivals[li].push_back(self.next_arrival[li]);
                self.next_arrival[li] += h;
            }
            while let Some(&a) = self.arrivals[li].front() {
                let mut s = -d.spawn_distance + vmax * (t - a).min(TICK_S);
                let mut v = vmax;
                if let Some(tail) = self.lanes[li].back() {
                    let room = tail.s - len - d.standstill_gap;
                    if room < -d.spawn_distance {
                        break;
                    }
                    if s > room {
                        s = room;
                        v = v.min(tail.v);
                    }
                }
                self.arrivals[li].pop_front();
                let automated = self.rng.random::<f64>() < self.opts.av_share;
                self.lanes[li].push_back(Vehicle {
                    id: self.next_id,
                    lane: li as u8 + 1,
                    s,
                    s_prev: s,
                    v,
                    automated,
                    yielding: false,
                });
                self.next_id += 1;
            }
        }
    }

    /// Distance a vehicle may still travel before stopping for `ob`, if it
    /// must stop at all.
    fn stop_distance(&self, veh: &Vehicle, ob: &Obstacle) -> Option<f64> {
        const AGENT_RADIUS: f64 = 0.3;
        let stop_line = -self.opts.driving.stop_line;
        match ob.kind {
            ObstacleKind::Waiting if !self.yields_to_waiting(veh) => None,
            _ if veh.s <= stop_line + 1e-6 => Some(stop_line - veh.s),
            ObstacleKind::Occupying if veh.s < ob.s - AGENT_RADIUS => {
                Some((ob.s - AGENT_RADIUS - 0.3 - veh.s).max(0.0))
            }
            _ => None,
        }
    }

    /// Advances one tick; returns the front-bumper passes in this tick.
    pub fn step(&mut self, obstacles: &[Obstacle]) -> Vec<Pass> {
        let t = self.time();
        self.spawn(t);
        let d = self.opts.driving;
        let vmax = self.params.speed_ms();
        let len = self.length();
        let mut new_passes = Vec::new();
        for li in 0..2 {
            let lane_no = li as u8 + 1;
            let mut lead: Option<(f64, f64, f64)> = None; // (s_prev, s, v) after update
            let mut lane = std::mem::take(&mut self.lanes[li]);
            for veh in lane.iter_mut() {
                let (s, v) = (veh.s, veh.v);
                let mut cap = (v + d.accel * TICK_S).min(vmax);
                if let Some((_, ls, lv)) = lead {
                    let room = ls - len - s - d.standstill_gap + lv * lv / (2.0 * d.emergency_decel) - v * TICK_S;
                    let safe = (2.0 * d.emergency_decel * room.max(0.0)).sqrt();
                    cap = cap.min(safe.max(v - d.emergency_decel * TICK_S));
                }
                let mut waiting_seen = false;
                for ob in obstacles.iter().filter(|o| o.lane == lane_no) {
                    let Some(dist) = self.stop_distance(veh, ob) else { continue };
                    if ob.kind == ObstacleKind::Waiting {
                        waiting_seen = true;
                        let comfortable = v * v / (2.0 * d.comfort_decel) <= dist;
                        if !(veh.yielding || comfortable) {
                            continue;
                        }
                        veh.yielding = true;
                    }
                    // Never step past the stop point when braking allows it.
                    let safe = (2.0 * d.comfort_decel * (dist - v * TICK_S).max(0.0)).sqrt().min(dist / TICK_S);
                    cap = cap.min(safe.max(v - d.comfort_decel * TICK_S));
                }
                if !waiting_seen {
                    veh.yielding = false;
                }
                let mut v_new = cap.max(0.0);
                let mut s_new = s + v_new * TICK_S;
                if let Some((_, ls, _)) = lead {
                    // Hard guard: never close the bumper gap below 5 cm.
                    let limit = (ls - len - 0.05).max(s);
                    if s_new > limit {
                        s_new = limit;
                        v_new = (s_new - s) / TICK_S;
                    }
                }
                veh.s_prev = s;
                veh.s = s_new;
                veh.v = v_new;

                let travelled = s_new - s;
                if s < 0.0 && s_new >= 0.0 && travelled > 0.0 {
                    let frac = -s / travelled;
                    let clearance = lead.map(|(lp, ls, _)| lp + frac * (ls - lp) - len);
                    let pass = Pass {
                        id: veh.id,
                        lane: lane_no,
                        t_front: t + frac * TICK_S,
                        t_rear: None,
                        speed: travelled / TICK_S,
                        clearance,
                    };
                    new_passes.push(pass);
                }
                if s - len < 0.0 && s_new - len >= 0.0 && travelled > 0.0 {
                    let t_rear = t + (len - s) / travelled * TICK_S;
                    if let Some(p) = self.passes.iter_mut().rev().find(|p| p.id == veh.id) {
                        p.t_rear = Some(t_rear);
                    } else if let Some(p) = new_passes.iter_mut().find(|p| p.id == veh.id) {
                        p.t_rear = Some(t_rear);
                    }
                }
                if let Some((_, ls, _)) = lead {
                    if self.tick >= 0 {
                        self.min_clearance = self.min_clearance.min(ls - len - s_new);
                    }
                }
                lead = Some((s, s_new, v_new));
            }
            while lane.front().is_some_and(|v| v.s - len > d.spawn_distance) {
                lane.pop_front();
            }
            self.lanes[li] = lane;
        }
        self.passes.extend(new_passes.iter().cloned());
        self.tick += 1;
        new_passes
    }

    /// Time until the next vehicle in `lane` reaches an agent at `s_agent`
    /// (zero while one is across the agent's path). Vehicles standing at the
    /// stop line do not count.
    pub fn time_gap(&self, lane: u8, s_agent: f64) -> f64 {
        const CLEAR: f64 = 0.5;
        let len = self.length();
        let stop_line = -self.opts.driving.stop_line;
        let mut gap = f64::INFINITY;
        for v in self.lane(lane) {
            if v.s - len > s_agent + CLEAR {
                continue;
            }
            if v.s >= s_agent - CLEAR {
                return 0.0;
            }
            if v.v < 0.5 && v.s <= stop_line + 0.5 {
                continue;
            }
            gap = gap.min((s_agent - CLEAR - v.s) / v.v.max(0.1));
        }
        gap
    }
}

/// Flow statistics at the crossing centerline, averaged over both lanes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub duration_s: f64,
    pub vehicles: usize,
    /// Per-lane flow, veh/h.
    pub flow_veh_h: f64,
    pub mean_speed_kmh: f64,
    /// Front-to-front time between consecutive vehicles.
    pub mean_headway_s: f64,
    /// Rear bumper of the leader to front bumper of the follower, in time.
    pub mean_gap_s: f64,
    /// The same bumper-to-bumper interval as a distance.
    pub mean_clearance_m: f64,
    /// Front-to-front distance.
    pub mean_spacing_m: f64,
    /// Smallest bumper-to-bumper distance at any tick.
    pub min_clearance_m: f64,
}

impl TrafficStats {
    pub(crate) fn from_passes(passes: &[Pass], duration: f64, length: f64, min_clearance: f64) -> Self {
        let in_window = |p: &Pass| p.t_front >= 0.0 && p.t_front < duration;
        let (mut headways, mut gaps, mut clearances, mut speeds) = (vec![], vec![], vec![], vec![]);
        for lane in [1u8, 2] {
            let lane_passes: Vec<&Pass> = passes.iter().filter(|p| p.lane == lane).collect();
            for p in lane_passes.iter().filter(|p| in_window(p)) {
                speeds.push(p.speed * 3.6);
            }
            for w in lane_passes.windows(2) {
                let (lead, follow) = (w[0], w[1]);
                if !in_window(follow) {
                    continue;
                }
                headways.push(follow.t_front - lead.t_front);
                if let Some(tr) = lead.t_rear {
                    gaps.push(follow.t_front - tr);
                }
                if let Some(c) = follow.clearance {
                    clearances.push(c);
                }
            }
        }
        let mean = |xs: &[f64]| crate::util::mean(xs);
        let count = passes.iter().filter(|p| in_window(p)).count();
        Self {
            duration_s: duration,
            vehicles: count,
            flow_veh_h: count as f64 / 2.0 / duration * 3600.0,
            mean_speed_kmh: mean(&speeds),
            mean_headway_s: mean(&headways),
            mean_gap_s: mean(&gaps),
            mean_clearance_m: mean(&clearances),
            mean_spacing_m: mean(&clearances) + length,
            min_clearance_m: min_clearance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficRun {
    pub trajectory: Trajectory,
    pub stats: TrafficStats,
}

/// Free-flow traffic of a preset regime on the no-median course.
pub fn generate_traffic(regime: TrafficRegime, duration: f64, seed: u64) -> Result<TrafficRun> {
    generate_traffic_with(regime.params(), duration, seed, &TrafficOptions::default())
}

pub fn generate_traffic_with(
    params: TrafficRegimeParams,
    duration: f64,
    seed: u64,
    opts: &TrafficOptions,
) -> Result<TrafficRun> {
    params.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let geom = CrossingGeometry::no_median();
    let band = |l| {
        let (a, b) = geom.lane_band(l);
        (a + b) / 2.0
    };
    let mut road = Road::new(params, opts.clone(), [band(1), band(2)], seed);
    while road.tick() < 0 {
        road.step(&[]);
    }
    let ticks = (duration / TICK_S).round() as i64;
    let mut samples = Vec::new();
    for k in 0..=ticks {
        samples.extend(road.samples(opts.start_unix + k as f64 * TICK_S));
        if k < ticks {
            road.step(&[]);
        }
    }
    // Let the last followers' leaders clear the detector.
    for _ in 0..((opts.footprint.length / params.speed_ms()) / TICK_S).ceil() as usize + 1 {
        road.step(&[]);
    }
    let stats = TrafficStats::from_passes(&road.passes, duration, road.length(), road.min_clearance);
    Ok(TrafficRun { trajectory: Trajectory { session_id: format!("traffic-{seed}"), samples }, stats })
}
