//! One crossing session: traffic, an optional avatar and the pedestrian
//! agent, stepped together at 10 Hz.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::eda::{ground_truth_rows, stimuli_for_session, synthesize_eda, ParticipantProfile, Stimulus, SyntheticEda};
use super::traffic::{lane_s, Obstacle, ObstacleKind, Road, TrafficOptions, TrafficStats};
use super::{rng_stream, AvatarBehaviour, ScenarioConfig, SimEvent, SimEventKind, TICK_S};
use crate::annotation::LabelTaxonomy;
use crate::error::Result;
use crate::scr::GroundTruthRow;
use crate::segmentation::{CrossingGeometry, EntityKind, Trajectory, TrajectorySample, PARTICIPANT_ID};

/// Frames kept after the task ends (blackout, arrival), seconds.
pub const POST_TASK_RECORD_S: f64 = 5.0;
pub const AVATAR_ID: &str = "avatar";
const AVATAR_X: f64 = -1.0;
const AVATAR_START_DELAY_S: f64 = 2.0;

/// Gap-acceptance crossing agent used in place of a participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PedestrianPolicy {
    pub walking_speed: f64,
    /// Mean accepted time gap, seconds.
    pub critical_gap_s: f64,
    /// Between-session spread of the accepted gap.
    pub critical_gap_sd: f64,
    pub min_gap_s: f64,
    /// Reduction of the accepted gap per second of waiting.
    pub impatience: f64,
    /// Share of the walk to the far lane added to its required gap.
    pub far_lane_weight: f64,
    /// Standing time on the sidewalk before walking, drawn uniformly.
    pub start_delay_s: (f64, f64),
    pub start_y: f64,
    /// Distance behind the curb where the agent waits.
    pub waiting_setback: f64,
    /// The task is complete this far beyond the far curb.
    pub finish_margin: f64,
    pub radius: f64,
    pub near_miss_ttc_s: f64,
}

impl Default for PedestrianPolicy {
    fn default() -> Self {
        Self {
            walking_speed: 1.3,
            critical_gap_s: 3.0,
            critical_gap_sd: 0.8,
            min_gap_s: 1.0,
            impatience: 0.08,
            far_lane_weight: 0.0,
            start_delay_s: (3.0, 8.0),
            start_y: 0.5,
            waiting_setback: 0.3,
            finish_margin: 1.5,
            radius: 0.3,
            near_miss_ttc_s: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionOutcome {
    Completed,
    Accident,
    TimedOut,
}

/// Whether a disc of `radius` at `(px, py)` touches the footprint of the
/// vehicle whose center and heading are in `vehicle`.
pub fn footprint_overlaps(
    vehicle: &TrajectorySample,
    footprint: &super::Footprint,
    px: f64,
    py: f64,
    radius: f64,
) -> bool {
    let (dx, dy) = (px - vehicle.x, py - vehicle.y);
    let (sin, cos) = vehicle.heading.sin_cos();
    let along = dx * cos + dy * sin;
    let across = -dx * sin + dy * cos;
    let ex = (along.abs() - footprint.length / 2.0).max(0.0);
    let ey = (across.abs() - footprint.width / 2.0).max(0.0);
    ex * ex + ey * ey <= radius * radius
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Orienting { until: f64 },
    Approaching,
    Waiting { since: f64 },
    Crossing,
    Done,
}

struct Pedestrian {
    policy: PedestrianPolicy,
    y: f64,
    heading: f64,
    phase: Phase,
    /// Stage target: the median center, then the finish line.
    target: f64,
    critical_gap: f64,
    lanes_entered: [bool; 2],
    flagged: BTreeSet<u32>,
}

impl Pedestrian {
    fn lanes_ahead(&self, geom: &CrossingGeometry) -> Vec<u8> {
        let (_, l1_end) = geom.lane_band(1);
        if self.y < l1_end && geom.has_median() {
            vec![1]
        } else if self.y < l1_end {
            vec![1, 2]
        } else {
            vec![2]
        }
    }

    fn accepts(&self, road: &Road, geom: &CrossingGeometry, waited: f64) -> bool {
        let p = &self.policy;
        let crit = (self.critical_gap - p.impatience * waited).max(p.min_gap_s);
        // Far-lane traffic is expected to brake for an agent already on the road.
        self.lanes_ahead(geom).into_iter().enumerate().all(|(k, lane)| {
            let reach = ((geom.lane_band(lane).0 - self.y) / p.walking_speed).max(0.0);
            let need = if k == 0 { crit + reach } else { crit + p.far_lane_weight * reach };
            road.time_gap(lane, lane_s(lane, 0.0)) >= need
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AvatarPhase {
    Waiting,
    Crossing { start: f64 },
    Arrived,
}

struct Avatar {
    behaviour: AvatarBehaviour,
    y: f64,
    phase: AvatarPhase,
}

/// Lane whose band (widened by `margin`) contains `y`.
fn lane_at(geom: &CrossingGeometry, y: f64, margin: f64) -> Option<u8> {
    [1u8, 2].into_iter().find(|&l| {
        let (a, b) = geom.lane_band(l);
        y > a - margin && y < b + margin
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRun {
    pub scenario: ScenarioConfig,
    pub geometry: CrossingGeometry,
    pub trajectory: Trajectory,
    pub events: Vec<SimEvent>,
    pub outcome: SessionOutcome,
    pub start_unix: f64,
    /// End of the task (completion, accident or time limit).
    pub task_end_unix: f64,
    /// Flow at the crossing during the session.
    pub traffic: TrafficStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvatarRun {
    pub trajectory: Trajectory,
    pub events: Vec<SimEvent>,
    /// Curb-to-curb time, when the avatar crossed.
    pub crossing_duration_s: Option<f64>,
}

struct World<'a> {
    scenario: &'a ScenarioConfig,
    geom: CrossingGeometry,
    road: Road,
    avatar: Option<Avatar>,
    ped: Option<Pedestrian>,
    events: Vec<SimEvent>,
    samples: Vec<TrajectorySample>,
    start_unix: f64,
}

impl<'a> World<'a> {
    fn new(scenario: &'a ScenarioConfig, policy: Option<&PedestrianPolicy>, start_unix: f64) -> Result<Self> {
        scenario.validate()?;
        let geom = CrossingGeometry::preset(scenario.median);
        let center = |l| {
            let (a, b) = geom.lane_band(l);
            (a + b) / 2.0
        };
        let opts = TrafficOptions {
            vehicle_type: scenario.vehicle_type,
            av_share: scenario.av_share(),
            start_unix,
            ..TrafficOptions::default()
        };
        let mut road = Road::new(scenario.traffic_regime.params(), opts, [center(1), center(2)], scenario.seed);
        while road.tick() < 0 {
            road.step(&[]);
        }
        let avatar = match scenario.avatar {
            AvatarBehaviour::None => None,
            AvatarBehaviour::Standing => Some(Avatar {
                behaviour: AvatarBehaviour::Standing,
                y: geom.curb_y() - 0.3,
                phase: AvatarPhase::Waiting,
            }),
            b => Some(Avatar { behaviour: b, y: geom.curb_y(), phase: AvatarPhase::Waiting }),
        };
        let ped = policy.map(|p| {
            let mut rng = rng_stream(scenario.seed, 2);
            let (lo, hi) = p.start_delay_s;
            let delay = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let noise = Normal::new(0.0, p.critical_gap_sd.max(0.0)).expect("finite sd");
            let critical_gap = (p.critical_gap_s + noise.sample(&mut rng)).max(p.min_gap_s);
            Pedestrian {
                policy: p.clone(),
                y: p.start_y,
                heading: FRAC_PI_2,
                phase: Phase::Orienting { until: delay },
                target: f64::NAN,
                critical_gap,
                lanes_entered: [false; 2],
                flagged: BTreeSet::new(),
            }
        });
        Ok(Self { scenario, geom, road, avatar, ped, events: Vec::new(), samples: Vec::new(), start_unix })
    }

    fn event(&mut self, t: f64, kind: SimEventKind, payload: String) {
        self.events.push(SimEvent { unix: self.start_unix + t, kind, payload });
    }

    fn record(&mut self, t: f64) {
        let unix = self.start_unix + t;
        if let Some(p) = &self.ped {
            self.samples.push(TrajectorySample {
                unix,
                entity_id: PARTICIPANT_ID.into(),
                kind: EntityKind::Participant,
                x: 0.0,
                y: p.y,
                heading: p.heading,
            });
        }
        if let Some(a) = &self.avatar {
            self.samples.push(TrajectorySample {
                unix,
                entity_id: AVATAR_ID.into(),
                kind: EntityKind::Avatar,
                x: AVATAR_X,
                y: a.y,
                heading: FRAC_PI_2,
            });
        }
        self.samples.extend(self.road.samples(unix));
    }

    /// Overlapping vehicle, if any.
    fn collision(&self) -> Option<String> {
        let p = self.ped.as_ref()?;
        let fp = self.road.opts.footprint;
        self.road
            .vehicles()
            .map(|v| self.road.sample(v, 0.0))
            .find(|s| footprint_overlaps(s, &fp, 0.0, p.y, p.policy.radius))
            .map(|s| s.entity_id)
    }

    fn check_participant(&mut self, t: f64) -> Option<SessionOutcome> {
        if let Some(id) = self.collision() {
            // Half a tick before impact, but after anything already logged.
            let blackout = self.events.iter().map(|e| e.unix).fold(self.start_unix + t - TICK_S / 2.0, f64::max);
            self.events.push(SimEvent { unix: blackout, kind: SimEventKind::ScreenBlackout, payload: String::new() });
            self.event(t, SimEventKind::Accident, format!("vehicle={id}"));
            return Some(SessionOutcome::Accident);
        }
        let geom = self.geom.clone();
        for lane in [1u8, 2] {
            let (a, b) = geom.lane_band(lane);
            let p = self.ped.as_mut()?;
            if !p.lanes_entered[lane as usize - 1] && p.y >= a && p.y < b {
                p.lanes_entered[lane as usize - 1] = true;
                let kind = if lane == 1 {
                    SimEventKind::PedestrianEnterLane1
                } else {
                    SimEventKind::PedestrianEnterLane2
                };
                let y = p.y;
                self.event(t, kind, format!("y={y:.2}"));
            }
        }
        let p = self.ped.as_ref()?;
        if let Some(lane) = lane_at(&geom, p.y, 0.0) {
            let s_p = lane_s(lane, 0.0);
            let r = p.policy.radius;
            let len = self.road.length();
            let mut hits = Vec::new();
            for v in self.road.lane(lane) {
                if v.s >= s_p - r || v.s - len > s_p || v.v <= 0.1 || p.flagged.contains(&v.id) {
                    continue;
                }
                let ttc = (s_p - r - v.s) / v.v;
                if ttc < p.policy.near_miss_ttc_s {
                    hits.push((v.id, self.road.entity_id(v), ttc));
                }
            }
            for (id, name, ttc) in hits {
                self.ped.as_mut()?.flagged.insert(id);
                self.event(t, SimEventKind::NearMiss, format!("vehicle={name} ttc={ttc:.2}"));
            }
        }
        match self.ped.as_ref()?.phase {
            Phase::Done => Some(SessionOutcome::Completed),
            _ => None,
        }
    }

    fn obstacles(&self) -> Vec<Obstacle> {
        let half = self.road.opts.driving.conflict_half_width;
        let mut out = Vec::new();
        // Without a median an agent anywhere on the carriageway blocks both lanes.
        let shared = !self.geom.has_median();
        let mut occupy = |x: f64, y: f64, margin: f64| {
            if x.abs() <= half {
                if let Some(lane) = lane_at(&self.geom, y, margin) {
                    let lanes: &[u8] = if shared { &[1, 2] } else if lane == 1 { &[1] } else { &[2] };
                    for &l in lanes {
                        out.push(Obstacle { lane: l, s: lane_s(l, x), kind: ObstacleKind::Occupying });
                    }
                }
            }
        };
        if let Some(p) = &self.ped {
            occupy(0.0, p.y, p.policy.radius);
        }
        if let Some(a) = &self.avatar {
            occupy(AVATAR_X, a.y, 0.3);
            if a.phase == AvatarPhase::Waiting && a.behaviour.crossing().is_some() {
                for lane in [1u8, 2] {
                    out.push(Obstacle { lane, s: lane_s(lane, AVATAR_X), kind: ObstacleKind::Waiting });
                }
            }
        }
        out
    }

    fn move_pedestrian(&mut self, t: f64) {
        let geom = &self.geom;
        let Some(p) = self.ped.as_mut() else { return };
        let speed = p.policy.walking_speed;
        let finish = geom.far_curb_y() + p.policy.finish_margin;
        let wait_y = geom.curb_y() - p.policy.waiting_setback;
        match p.phase {
            Phase::Orienting { until } => {
                if t + 1e-9 >= until {
                    p.phase = Phase::Approaching;
                }
            }
            Phase::Approaching => {
                p.y = (p.y + speed * TICK_S).min(wait_y);
                if p.y >= wait_y {
                    p.phase = Phase::Waiting { since: t };
                }
            }
            Phase::Waiting { since } => {
                if p.accepts(&self.road, geom, t - since) {
                    p.phase = Phase::Crossing;
                    let (_, l1_end) = geom.lane_band(1);
                    p.target = if geom.has_median() && p.y < l1_end {
                        let m = geom.region(crate::segmentation::Segment::Median).expect("median preset");
                        (m.y_min + m.y_max) / 2.0
                    } else {
                        finish
                    };
                }
            }
            Phase::Crossing => {
                p.y = (p.y + speed * TICK_S).min(p.target);
                if p.y >= p.target {
                    p.phase = if p.target >= finish { Phase::Done } else { Phase::Waiting { since: t } };
                }
            }
            Phase::Done => {}
        }
    }

    fn move_avatar(&mut self, t: f64) {
        let geom = self.geom.clone();
        let Some(a) = self.avatar.as_mut() else { return };
        let Some((speed, margin)) = a.behaviour.crossing() else { return };
        let (curb, far) = (geom.curb_y(), geom.far_curb_y());
        match a.phase {
            AvatarPhase::Waiting => {
                if t + 1e-9 < AVATAR_START_DELAY_S {
                    return;
                }
                let ok = [1u8, 2].into_iter().all(|lane| self.road.time_gap(lane, lane_s(lane, AVATAR_X)) >= margin);
                if ok {
                    a.phase = AvatarPhase::Crossing { start: t };
                    self.events.push(SimEvent {
                        unix: self.start_unix + t,
                        kind: SimEventKind::AvatarStartCross,
                        payload: format!("behaviour={}", a.behaviour),
                    });
                    a.y = curb + speed * TICK_S;
                }
            }
            AvatarPhase::Crossing { start } => {
                let was_short = a.y < far;
                a.y = curb + speed * (t + TICK_S - start);
                if was_short && a.y >= far {
                    self.events.push(SimEvent {
                        unix: self.start_unix + start + (far - curb) / speed,
                        kind: SimEventKind::AvatarFinishCross,
                        payload: format!("behaviour={}", a.behaviour),
                    });
                }
                if a.y >= far + 2.0 {
                    a.y = far + 2.0;
                    a.phase = AvatarPhase::Arrived;
                }
            }
            AvatarPhase::Arrived => {}
        }
    }

    /// Runs until the task ends (or the time limit without a participant)
    /// and records the tail.
    fn run(mut self, session_id: &str) -> (SessionRun, Option<f64>) {
        let limit = self.scenario.duration_s;
        let mut outcome = None;
        let mut end_t = f64::NAN;
        let mut k: i64 = 0;
        let first_pass = self.road.passes.len();
        loop {
            let t = k as f64 * TICK_S;
            self.record(t);
            if outcome.is_none() {
                if self.ped.is_some() {
                    outcome = self.check_participant(t);
                }
                if outcome.is_none() && t + 1e-9 >= limit {
                    outcome = Some(SessionOutcome::TimedOut);
                }
                if outcome.is_some() {
                    end_t = t;
                }
            }
            if outcome.is_some() && t + 1e-9 >= end_t + POST_TASK_RECORD_S {
                break;
            }
            if outcome.is_none() {
                self.move_pedestrian(t);
            }
            self.move_avatar(t);
            let obstacles = self.obstacles();
            let passes = self.road.step(&obstacles);
            if outcome.is_none() {
                for p in passes {
                    let veh = self.road.vehicles().find(|v| v.id == p.id).map(|v| self.road.entity_id(v));
                    let name = veh.unwrap_or_else(|| format!("{}", p.id));
                    self.event(p.t_front, SimEventKind::VehiclePass, format!("vehicle={name} lane={}", p.lane));
                }
            }
            k += 1;
        }
        self.events.sort_by(|a, b| a.unix.total_cmp(&b.unix));
        let task_len = end_t.min(limit);
        let passes: Vec<_> = self.road.passes[first_pass..].to_vec();
        let traffic = TrafficStats::from_passes(&passes, task_len.max(TICK_S), self.road.length(), self.road.min_clearance);
        let crossing = self.events.iter().find(|e| e.kind == SimEventKind::AvatarStartCross).and_then(|s| {
            self.events
                .iter()
                .find(|e| e.kind == SimEventKind::AvatarFinishCross)
                .map(|f| f.unix - s.unix)
        });
        let run = SessionRun {
            scenario: self.scenario.clone(),
            geometry: self.geom,
            trajectory: Trajectory { session_id: session_id.to_string(), samples: self.samples },
            events: self.events,
            outcome: outcome.expect("loop ends with an outcome"),
            start_unix: self.start_unix,
            task_end_unix: self.start_unix + end_t,
            traffic,
        };
        (run, crossing)
    }
}

/// Avatar and traffic alone, for the scenario's full duration.
pub fn run_avatar(behaviour: AvatarBehaviour, scenario: &ScenarioConfig) -> Result<AvatarRun> {
    let scenario = ScenarioConfig { avatar: behaviour, ..scenario.clone() };
    let (run, crossing_duration_s) = World::new(&scenario, None, 0.0)?.run("avatar");
    Ok(AvatarRun { trajectory: run.trajectory, events: run.events, crossing_duration_s })
}

/// The pedestrian agent crossing in the scenario's traffic (with the
/// scenario's avatar, if any).
pub fn run_pedestrian_agent(
    policy: &PedestrianPolicy,
    scenario: &ScenarioConfig,
    session_id: &str,
    start_unix: f64,
) -> Result<SessionRun> {
    Ok(World::new(scenario, Some(policy), start_unix)?.run(session_id).0)
}

/// A complete synthetic session: trajectory, events, EDA and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub participant_id: String,
    pub session_id: String,
    pub run: SessionRun,
    pub stimuli: Vec<Stimulus>,
    pub eda: SyntheticEda,
    pub ground_truth: Vec<GroundTruthRow>,
}

pub fn simulate_session(
    session_id: &str,
    scenario: &ScenarioConfig,
    policy: &PedestrianPolicy,
    profile: &ParticipantProfile,
    start_unix: f64,
) -> Result<SimulatedSession> {
    let run = run_pedestrian_agent(policy, scenario, session_id, start_unix)?;
    let mut rng = rng_stream(scenario.seed, 3);
    let stimuli = stimuli_for_session(&run, profile, &mut rng);
    let (t0, t1) = run.trajectory.time_span().expect("session records frames");
    let eda = synthesize_eda(&profile.participant_id, session_id, (t0, t1), &stimuli, profile, scenario.seed)?;
    let ground_truth = ground_truth_rows(
        &eda.injected,
        &profile.participant_id,
        session_id,
        start_unix,
        &run.trajectory,
        &run.geometry,
        &LabelTaxonomy::default(),
    );
    Ok(SimulatedSession {
        participant_id: profile.participant_id.clone(),
        session_id: session_id.to_string(),
        run,
        stimuli,
        eda,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Footprint, TrafficRegime, VehicleType};
    use super::*;
    use crate::segmentation::Segment;

    fn scenario(seed: u64) -> ScenarioConfig {
        ScenarioConfig { seed, ..ScenarioConfig::default() }
    }

    #[test]
    fn no_avatar_means_no_avatar_entity() {
        let run = run_pedestrian_agent(&PedestrianPolicy::default(), &scenario(1), "s", 0.0).unwrap();
        assert!(run.trajectory.samples.iter().all(|s| s.kind != EntityKind::Avatar));
        run.trajectory.validate().unwrap();
    }

    #[test]
    fn avatar_crossing_times_follow_speed() {
        for (behaviour, expected) in [(AvatarBehaviour::Conservative, 6.0), (AvatarBehaviour::Adventurous, 3.0)] {
            for median in [false, true] {
                let sc = ScenarioConfig {
                    vehicle_type: VehicleType::AvEhmi,
                    traffic_regime: TrafficRegime::LowArrivalHighSpeed,
                    median,
                    seed: 4,
                    ..ScenarioConfig::default()
                };
                let run = run_avatar(behaviour, &sc).unwrap();
                let d = run.crossing_duration_s.expect("avatar crosses behind yielding AVs");
                assert!((d - expected).abs() <= 0.2, "{behaviour:?} median={median}: {d}");
            }
        }
    }

    #[test]
    fn standing_avatar_stays_in_waiting_region() {
        let sc = ScenarioConfig { avatar: AvatarBehaviour::Standing, seed: 3, ..ScenarioConfig::default() };
        let run = run_avatar(AvatarBehaviour::Standing, &sc).unwrap();
        let geom = CrossingGeometry::no_median();
        let avatar: Vec<_> = run.trajectory.samples.iter().filter(|s| s.kind == EntityKind::Avatar).collect();
        assert!(!avatar.is_empty());
        assert!(avatar.iter().all(|s| geom.segment_of(s.x, s.y) == Some(Segment::WaitingToCross)));
        assert!(run.events.iter().all(|e| e.kind != SimEventKind::AvatarStartCross));
    }

    #[test]
    fn sessions_are_bit_identical_per_seed() {
        let sc = ScenarioConfig { avatar: AvatarBehaviour::Adventurous, median: true, seed: 11, ..Default::default() };
        let a = run_pedestrian_agent(&PedestrianPolicy::default(), &sc, "s", 1.6e9).unwrap();
        let b = run_pedestrian_agent(&PedestrianPolicy::default(), &sc, "s", 1.6e9).unwrap();
        assert_eq!(a, b);
        let c = run_pedestrian_agent(&PedestrianPolicy::default(), &ScenarioConfig { seed: 12, ..sc }, "s", 1.6e9)
            .unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn sessions_end_by_the_task_limit() {
        let policy = PedestrianPolicy { critical_gap_s: 100.0, critical_gap_sd: 0.0, impatience: 0.0, ..Default::default() };
        let run = run_pedestrian_agent(&policy, &scenario(2), "s", 0.0).unwrap();
        assert_eq!(run.outcome, SessionOutcome::TimedOut);
        assert!((run.task_end_unix - 60.0).abs() < 1e-9);
        let (_, last) = run.trajectory.time_span().unwrap();
        assert!((last - 60.0 - POST_TASK_RECORD_S).abs() < 1e-6);
    }

    #[test]
    fn accidents_overlap_and_follow_a_blackout() {
        // A reckless agent in fast traffic.
        let policy = PedestrianPolicy {
            critical_gap_s: 0.0,
            critical_gap_sd: 0.0,
            min_gap_s: 0.0,
            walking_speed: 0.8,
            ..Default::default()
        };
        let fp = Footprint::default();
        let mut accidents = 0;
        for seed in 0..20 {
            let sc = ScenarioConfig { traffic_regime: TrafficRegime::LowArrivalHighSpeed, seed, ..Default::default() };
            let run = run_pedestrian_agent(&policy, &sc, "s", 100.0).unwrap();
            for (i, e) in run.events.iter().enumerate() {
                if e.kind != SimEventKind::Accident {
                    continue;
                }
                accidents += 1;
                assert_eq!(run.outcome, SessionOutcome::Accident);
                assert_eq!(run.events[i - 1].kind, SimEventKind::ScreenBlackout);
                assert!(e.unix - run.events[i - 1].unix <= TICK_S);
                let frame: Vec<_> = run.trajectory.samples.iter().filter(|s| s.unix == e.unix).collect();
                let me = frame.iter().find(|s| s.kind == EntityKind::Participant).unwrap();
                assert!(frame
                    .iter()
                    .filter(|s| s.kind == EntityKind::Vehicle)
                    .any(|v| footprint_overlaps(v, &fp, me.x, me.y, policy.radius)));
            }
        }
        assert!(accidents > 0, "reckless agent never collided");
    }

    #[test]
    fn careful_agent_completes_and_enters_both_lanes() {
        let sc = ScenarioConfig { vehicle_type: VehicleType::AvEhmi, seed: 6, ..Default::default() };
        let run = run_pedestrian_agent(&PedestrianPolicy::default(), &sc, "s", 0.0).unwrap();
        assert_eq!(run.outcome, SessionOutcome::Completed);
        let kinds: Vec<_> = run.events.iter().map(|e| e.kind).collect();
        let l1 = kinds.iter().position(|k| *k == SimEventKind::PedestrianEnterLane1).unwrap();
        let l2 = kinds.iter().position(|k| *k == SimEventKind::PedestrianEnterLane2).unwrap();
        assert!(l1 < l2);
        assert!(run.events.windows(2).all(|w| w[0].unix <= w[1].unix));
    }

    #[test]
    fn vehicles_never_overlap_during_sessions() {
        for seed in 0..10 {
            let sc = ScenarioConfig {
                avatar: AvatarBehaviour::Adventurous,
                traffic_regime: if seed % 2 == 0 {
                    TrafficRegime::HighArrivalLowSpeed
                } else {
                    TrafficRegime::LowArrivalHighSpeed
                },
                seed,
                ..Default::default()
            };
            let run = run_pedestrian_agent(&PedestrianPolicy::default(), &sc, "s", 0.0).unwrap();
            assert!(run.traffic.min_clearance_m > 0.0, "seed {seed}: {:?}", run.traffic);
        }
    }
}
