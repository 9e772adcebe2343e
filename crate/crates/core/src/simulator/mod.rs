//! Headless crossing-scenario generator.
//!
//! A session is stepped at 10 Hz: constant-headway vehicle streams in two
//! opposing lanes, an optional avatar, and a gap-accepting pedestrian agent
//! standing in for the participant. Sessions export a trajectory, an event
//! log and, via [`eda`], a synthetic skin-conductance trace with the exact
//! responses that were injected.

mod eda;
mod session;
mod traffic;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{csv_reader, csv_writer, expect_header, parse_f64};

pub use eda::{
    ground_truth_rows, render_eda, stimuli_for_session, synthesize_eda, InjectedScr, ParticipantProfile,
    Stimulus, SyntheticEda,
};
pub use session::{
    footprint_overlaps, run_avatar, run_pedestrian_agent, simulate_session, AvatarRun, PedestrianPolicy,
    SessionOutcome, SessionRun, SimulatedSession, POST_TASK_RECORD_S,
};
pub use traffic::{
    generate_traffic, generate_traffic_with, DrivingParams, Footprint, TrafficOptions, TrafficRegimeParams,
    TrafficRun, TrafficStats,
};

/// Simulation step, seconds.
pub const TICK_S: f64 = 0.1;
/// Task time limit per session, seconds.
pub const TASK_LIMIT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleType {
    Normal,
    AvRoofSign,
    AvEhmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AvatarBehaviour {
    None,
    Standing,
    Conservative,
    Adventurous,
}

impl AvatarBehaviour {
    /// Walking speed (m/s) and accepted time gap (s) of a crossing avatar.
    pub fn crossing(self) -> Option<(f64, f64)> {
        match self {
            AvatarBehaviour::Conservative => Some((1.0, 4.0)),
            AvatarBehaviour::Adventurous => Some((2.0, 2.0)),
            AvatarBehaviour::None | AvatarBehaviour::Standing => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficRegime {
    HighArrivalLowSpeed,
    LowArrivalHighSpeed,
}

impl TrafficRegime {
    pub fn params(self) -> TrafficRegimeParams {
        let (rate, kmh) = match self {
            TrafficRegime::HighArrivalLowSpeed => (1200.0, 20.0),
            TrafficRegime::LowArrivalHighSpeed => (1113.0, 40.0),
        };
        TrafficRegimeParams::from_rate_and_speed(rate, kmh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimeOfDay {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Weather {
    Clear,
    Rain,
    Snow,
}

macro_rules! text_enum {
    ($ty:ty, $ctx:literal, [$($v:ident),+]) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$v => stringify!($v)),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $(stringify!($v) => Ok(<$ty>::$v),)+
                    _ => Err(Error::format($ctx, format!("unknown value {s:?}"))),
                }
            }
        }
    };
}

text_enum!(VehicleType, "vehicle type", [Normal, AvRoofSign, AvEhmi]);
text_enum!(AvatarBehaviour, "avatar behaviour", [None, Standing, Conservative, Adventurous]);
text_enum!(TrafficRegime, "traffic regime", [HighArrivalLowSpeed, LowArrivalHighSpeed]);
text_enum!(TimeOfDay, "time of day", [Day, Night]);
text_enum!(Weather, "weather", [Clear, Rain, Snow]);

/// Factor levels of one session. Weather and time of day are metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub vehicle_type: VehicleType,
    pub avatar: AvatarBehaviour,
    pub traffic_regime: TrafficRegime,
    pub median: bool,
    pub time_of_day: TimeOfDay,
    pub weather: Weather,
    #[serde(default = "task_limit")]
    pub duration_s: f64,
    pub seed: u64,
    /// Fraction of automated vehicles; defaults to 0 for `Normal`, 1 otherwise.
    #[serde(default)]
    pub av_share: Option<f64>,
}

fn task_limit() -> f64 {
    TASK_LIMIT_S
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            vehicle_type: VehicleType::Normal,
            avatar: AvatarBehaviour::None,
            traffic_regime: TrafficRegime::HighArrivalLowSpeed,
            median: false,
            time_of_day: TimeOfDay::Day,
            weather: Weather::Clear,
            duration_s: TASK_LIMIT_S,
            seed: 0,
            av_share: None,
        }
    }
}

impl ScenarioConfig {
    pub fn av_share(&self) -> f64 {
        self.av_share.unwrap_or(match self.vehicle_type {
            VehicleType::Normal => 0.0,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s <= TASK_LIMIT_S) {
            return Err(Error::Config(format!(
                "scenario duration must be in (0, {TASK_LIMIT_S}] s, got {}",
                self.duration_s
            )));
        }
        let share = self.av_share();
        if !(0.0..=1.0).contains(&share) {
            return Err(Error::Config(format!("av_share must be in [0, 1], got {share}")));
        }
        Ok(())
    }

    /// Compact tag used in session identifiers and reports.
    pub fn describe(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}/{}",
            self.vehicle_type,
            self.avatar,
            self.traffic_regime,
            if self.median { "Median" } else { "NoMedian" },
            self.time_of_day,
            self.weather
        )
    }
}

/// Independent generator stream `stream` of `seed`.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SimEventKind {
    VehiclePass,
    AvatarStartCross,
    AvatarFinishCross,
    PedestrianEnterLane1,
    PedestrianEnterLane2,
    NearMiss,
    Accident,
    ScreenBlackout,
}

text_enum!(
    SimEventKind,
    "event kind",
    [
        VehiclePass,
        AvatarStartCross,
        AvatarFinishCross,
        PedestrianEnterLane1,
        PedestrianEnterLane2,
        NearMiss,
        Accident,
        ScreenBlackout
    ]
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub unix: f64,
    pub kind: SimEventKind,
    /// `key=value` pairs separated by spaces.
    pub payload: String,
}

impl SimEvent {
    /// Value of `key` in the payload.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.payload
            .split_whitespace()
            .find_map(|kv| kv.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
    }
}

const EVENTS_HEADER: [&str; 3] = ["unix", "kind", "payload"];

pub fn write_events_csv<W: Write>(w: W, events: &[SimEvent]) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(EVENTS_HEADER)?;
    for e in events {
        wtr.write_record([e.unix.to_string(), e.kind.to_string(), e.payload.clone()])?;
    }
    wtr.flush().map_err(|e| Error::io("<events writer>", e))
}

pub fn read_events_csv<R: Read>(rdr: R) -> Result<Vec<SimEvent>> {
    const CTX: &str = "events file";
    let mut r = csv_reader(rdr);
    expect_header(r.headers()?, &EVENTS_HEADER, CTX)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(Error::format(CTX, format!("line {line}: expected 3 fields")));
        }
        out.push(SimEvent {
            unix: parse_f64(&rec[0], CTX, line)?,
            kind: rec[1].parse()?,
            payload: rec.get(2).unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_presets_are_consistent() {
        let hi = TrafficRegime::HighArrivalLowSpeed.params();
        assert_eq!(hi.headway_s(), 3.0);
        assert!((hi.spacing - 16.6667).abs() < 1e-3);
        let lo = TrafficRegime::LowArrivalHighSpeed.params();
        // 40 km/h over a 3600/1113 s headway.
        assert!((lo.spacing - 35.94).abs() < 0.01);
        hi.validate().unwrap();
        lo.validate().unwrap();
    }

    #[test]
    fn scenario_round_trips_through_toml() {
        let s = ScenarioConfig {
            vehicle_type: VehicleType::AvEhmi,
            avatar: AvatarBehaviour::Adventurous,
            median: true,
            seed: 42,
            ..ScenarioConfig::default()
        };
        let text = toml::to_string(&s).unwrap();
        assert!(text.contains("vehicle_type = \"AvEhmi\""));
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.av_share(), 1.0);
        assert!(ScenarioConfig { duration_s: 90.0, ..s }.validate().is_err());
    }

    #[test]
    fn events_csv_round_trip() {
        let ev = vec![
            SimEvent { unix: 10.5, kind: SimEventKind::VehiclePass, payload: "vehicle=car-0001 lane=1".into() },
            SimEvent { unix: 12.0, kind: SimEventKind::ScreenBlackout, payload: String::new() },
        ];
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &ev).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("unix,kind,payload\n"));
        let back = read_events_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ev);
        assert_eq!(back[0].field("lane"), Some("1"));
    }

    #[test]
    fn streams_are_independent_and_repeatable() {
        use rand::Rng;
        let a: u64 = rng_stream(7, 1).random();
        let b: u64 = rng_stream(7, 2).random();
        assert_ne!(a, b);
        assert_eq!(a, rng_stream(7, 1).random::<u64>());
    }
}
